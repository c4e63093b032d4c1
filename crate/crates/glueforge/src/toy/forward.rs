//! Dense causal forward pass for toy checkpoints.

use crate::arch::ArchDescriptor;
use crate::error::{GlueError, Result};
use crate::store::{Tensor, TensorStore};
use crate::toy::ops::{attention, rmsnorm, swiglu_ffn, AttnWeights};
use crate::toy::TokenBatch;

/// Borrowed weight views for one decoder layer, resolved by name.
pub struct LayerWeights<'a> {
    pub input_norm: &'a Tensor,
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
    pub post_norm: &'a Tensor,
    pub gate: &'a Tensor,
    pub up: &'a Tensor,
    pub down: &'a Tensor,
}

impl<'a> LayerWeights<'a> {
    pub fn attn(&self) -> AttnWeights<'a> {
        AttnWeights {
            wq: self.wq.data(),
            wk: self.wk.data(),
            wv: self.wv.data(),
            wo: self.wo.data(),
        }
    }
}

/// Full-model weight view over a store using the default naming scheme.
pub struct ModelWeights<'a> {
    pub embed: &'a Tensor,
    pub layers: Vec<LayerWeights<'a>>,
    pub final_norm: &'a Tensor,
    pub lm_head: &'a Tensor,
}

pub fn model_weights<'a>(
    store: &'a TensorStore,
    desc: &ArchDescriptor,
) -> Result<ModelWeights<'a>> {
    let mut layers = Vec::with_capacity(desc.num_layers);
    for l in 0..desc.num_layers {
        let p = format!("model.layers.{l}");
        layers.push(LayerWeights {
            input_norm: store.require(&format!("{p}.input_layernorm.weight"))?,
            wq: store.require(&format!("{p}.self_attn.q_proj.weight"))?,
            wk: store.require(&format!("{p}.self_attn.k_proj.weight"))?,
            wv: store.require(&format!("{p}.self_attn.v_proj.weight"))?,
            wo: store.require(&format!("{p}.self_attn.o_proj.weight"))?,
            post_norm: store.require(&format!("{p}.post_attention_layernorm.weight"))?,
            gate: store.require(&format!("{p}.mlp.gate_proj.weight"))?,
            up: store.require(&format!("{p}.mlp.up_proj.weight"))?,
            down: store.require(&format!("{p}.mlp.down_proj.weight"))?,
        });
    }
    Ok(ModelWeights {
        embed: store.require("model.embed_tokens.weight")?,
        layers,
        final_norm: store.require("model.norm.weight")?,
        lm_head: store.require("lm_head.weight")?,
    })
}

/// Embeds one sequence into a `t x hidden` activation buffer.
pub fn embed_sequence(embed: &Tensor, tokens: &[u32], hidden: usize) -> Vec<f32> {
    let mut x = vec![0.0f32; tokens.len() * hidden];
    for (pos, &tok) in tokens.iter().enumerate() {
        x[pos * hidden..(pos + 1) * hidden].copy_from_slice(embed.row(tok as usize));
    }
    x
}

/// Runs the residual trunk (all decoder layers) in place over `x`.
pub fn run_trunk(x: &mut [f32], t: usize, desc: &ArchDescriptor, weights: &ModelWeights) {
    let h = desc.hidden_dim;
    let f = desc.ffn_dim;
    for layer in &weights.layers {
        let a_in = rmsnorm(x, layer.input_norm.data(), h);
        let attn = attention(&a_in, t, h, desc.num_heads, &layer.attn(), None);
        for i in 0..x.len() {
            x[i] += attn[i];
        }
        let f_in = rmsnorm(x, layer.post_norm.data(), h);
        let ffn = swiglu_ffn(
            &f_in,
            t,
            h,
            f,
            layer.gate.data(),
            layer.up.data(),
            layer.down.data(),
            None,
        );
        for i in 0..x.len() {
            x[i] += ffn[i];
        }
    }
}

/// Projects the residual stream to logits: final norm then LM head.
pub fn read_out(x: &[f32], t: usize, desc: &ArchDescriptor, weights: &ModelWeights) -> Tensor {
    let normed = rmsnorm(x, weights.final_norm.data(), desc.hidden_dim);
    let logits = crate::toy::ops::matmul_nt(
        &normed,
        t,
        desc.hidden_dim,
        weights.lm_head.data(),
        desc.vocab_size,
    );
    Tensor::new(vec![t, desc.vocab_size], logits).expect("logit shape")
}

/// Causal forward pass. Returns one `t x vocab` logit tensor per sequence.
pub fn forward(
    store: &TensorStore,
    desc: &ArchDescriptor,
    batch: &TokenBatch,
) -> Result<Vec<Tensor>> {
    batch.validate(desc.vocab_size)?;
    let weights = model_weights(store, desc)?;
    if weights.embed.shape() != [desc.vocab_size, desc.hidden_dim] {
        return Err(GlueError::Shape(format!(
            "embedding shape {:?} does not match descriptor",
            weights.embed.shape()
        )));
    }
    let mut out = Vec::with_capacity(batch.sequences.len());
    for seq in &batch.sequences {
        let t = seq.len();
        let mut x = embed_sequence(weights.embed, seq, desc.hidden_dim);
        run_trunk(&mut x, t, desc, &weights);
        out.push(read_out(&x, t, desc, &weights));
    }
    Ok(out)
}
