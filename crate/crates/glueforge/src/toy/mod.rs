//! Tiny dense Llama-style transformers that make merges and mixtures
//! behaviorally testable at desk scale.
//!
//! The architecture is a pre-norm decoder: token embedding, per-layer
//! rotary multi-head attention and SwiGLU FFN with RMSNorm, a final norm,
//! and an LM head. Everything is f32 and deterministic per seed.

pub mod fitness;
pub mod forward;
pub mod ops;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchDescriptor, RolePatterns};
use crate::error::{GlueError, Result};
use crate::store::{Tensor, TensorStore};

pub use fitness::{corpus_cross_entropy, sequence_cross_entropy, PerplexityFitness};
pub use forward::forward;

pub const INIT_SCALE: f32 = 0.02;

/// Shape of a toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            num_layers: 4,
            hidden_dim: 32,
            ffn_dim: 64,
            num_heads: 2,
            vocab_size: 256,
            max_seq: 64,
        }
    }
}

impl ToyConfig {
    /// Smaller shape used by fast unit tests.
    pub fn small_test() -> Self {
        ToyConfig {
            num_layers: 2,
            hidden_dim: 16,
            ffn_dim: 32,
            num_heads: 2,
            vocab_size: 64,
            max_seq: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.ffn_dim == 0
            || self.num_heads == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return Err(GlueError::InvalidArg("config dims must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(GlueError::InvalidArg(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if (self.hidden_dim / self.num_heads) % 2 != 0 {
            return Err(GlueError::InvalidArg(
                "head dim must be even for rotary embedding".into(),
            ));
        }
        Ok(())
    }
}

/// A batch of token-id sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<u32>>,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Vec<u32>>) -> Self {
        TokenBatch { sequences }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.sequences.is_empty() || self.sequences.iter().any(Vec::is_empty) {
            return Err(GlueError::InvalidArg("empty token batch".into()));
        }
        for seq in &self.sequences {
            for &id in seq {
                if id as usize >= vocab_size {
                    return Err(GlueError::InvalidArg(format!(
                        "token id {id} out of range for vocab {vocab_size}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Tensor names and shapes for a toy model, in construction order.
pub fn tensor_layout(cfg: &ToyConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f, v) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size);
    let mut out = vec![("model.embed_tokens.weight".to_string(), vec![v, h])];
    for l in 0..cfg.num_layers {
        let p = format!("model.layers.{l}");
        out.push((format!("{p}.input_layernorm.weight"), vec![h]));
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("{p}.self_attn.{proj}_proj.weight"), vec![h, h]));
        }
        out.push((format!("{p}.post_attention_layernorm.weight"), vec![h]));
        out.push((format!("{p}.mlp.gate_proj.weight"), vec![f, h]));
        out.push((format!("{p}.mlp.up_proj.weight"), vec![f, h]));
        out.push((format!("{p}.mlp.down_proj.weight"), vec![h, f]));
    }
    out.push(("model.norm.weight".to_string(), vec![h]));
    out.push(("lm_head.weight".to_string(), vec![v, h]));
    out
}

/// Descriptor for a toy config, roles derived from the default name table.
pub fn descriptor_for(cfg: &ToyConfig) -> Result<ArchDescriptor> {
    let patterns = RolePatterns::default();
    let layout = tensor_layout(cfg);
    let roles = patterns.derive_roles(layout.iter().map(|(n, _)| n.as_str()))?;
    Ok(ArchDescriptor {
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
        ffn_dim: cfg.ffn_dim,
        vocab_size: cfg.vocab_size,
        num_heads: cfg.num_heads,
        tensor_roles: roles,
    })
}

/// Builds a toy transformer with all weights drawn from N(0, 0.02²) using
/// the given seed. Same seed, same bits.
pub fn build_toy_model(cfg: &ToyConfig, seed: u64) -> Result<(TensorStore, ArchDescriptor)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_SCALE).expect("valid scale");
    let mut store = TensorStore::new();
    for (name, shape) in tensor_layout(cfg) {
        let count: usize = shape.iter().product();
        let data: Vec<f32> = (0..count).map(|_| normal.sample(&mut rng)).collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((store, descriptor_for(cfg)?))
}

/// Adds seeded Gaussian noise to every tensor, scaled relative to the
/// tensor's own RMS (with `floor` as a lower bound on the scale basis so
/// near-zero tensors still move a little). Used to manufacture "fine-tuned
/// siblings" of a model.
pub fn perturb_relative(store: &TensorStore, rel: f32, floor: f32, seed: u64) -> TensorStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TensorStore::new();
    for (name, tensor) in store.iter() {
        let rms = (tensor.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>()
            / tensor.len() as f64)
            .sqrt() as f32;
        let sigma = rel * rms.max(floor);
        let normal = Normal::new(0.0f32, sigma.max(f32::MIN_POSITIVE)).expect("valid scale");
        let data: Vec<f32> = tensor
            .data()
            .iter()
            .map(|&v| v + normal.sample(&mut rng))
            .collect();
        out.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), data).unwrap())
            .unwrap();
    }
    out
}

/// Parameters for [`build_lookup_model`].
#[derive(Debug, Clone, Copy)]
pub struct LookupScales {
    pub embed: f32,
    pub gate: f32,
    pub up: f32,
    pub out: f32,
    pub head: f32,
    /// Stand-in magnitude for frame tensors the scheme would otherwise
    /// zero (attention output and inactive FFN projections). Zero keeps
    /// the construction exact.
    pub frame_noise: f32,
}

impl Default for LookupScales {
    fn default() -> Self {
        LookupScales {
            embed: 1.0,
            gate: 2.0,
            up: 0.5,
            out: 8.0,
            head: 3.5,
            frame_noise: 0.0,
        }
    }
}

/// Builds a transformer that deterministically predicts `successors[t]`
/// after token `t`, for every mapped token.
///
/// Each mapped token embeds to a scaled indicator direction; the FFN of the
/// last layer acts as a key-value memory writing the successor's indicator
/// into the residual stream; the LM head reads indicators back out. Models
/// built from the same seed over the same key set share every frame tensor
/// and differ only in that FFN, which makes pairs of them ready-made
/// experts for mixture tests.
pub fn build_lookup_model(
    cfg: &ToyConfig,
    seed: u64,
    successors: &[(u32, u32)],
    scales: LookupScales,
) -> Result<(TensorStore, ArchDescriptor)> {
    cfg.validate()?;
    let map: BTreeMap<u32, u32> = successors.iter().copied().collect();
    if map.len() != successors.len() {
        return Err(GlueError::InvalidArg("duplicate key in successor map".into()));
    }
    let mut alphabet: Vec<u32> = map.keys().copied().collect();
    for &v in map.values() {
        if !map.contains_key(&v) {
            alphabet.push(v);
        }
    }
    alphabet.sort_unstable();
    alphabet.dedup();
    let h = cfg.hidden_dim;
    if alphabet.len() > h.min(cfg.ffn_dim) {
        return Err(GlueError::InvalidArg(format!(
            "lookup alphabet of {} exceeds min(hidden, ffn) = {}",
            alphabet.len(),
            h.min(cfg.ffn_dim)
        )));
    }
    if alphabet.iter().any(|&t| t as usize >= cfg.vocab_size) {
        return Err(GlueError::InvalidArg("successor map token out of vocab".into()));
    }
    let dim_of: BTreeMap<u32, usize> = alphabet.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let (mut store, desc) = build_toy_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_6f6b_7570); // frame-noise stream
    let mut frame_fill = |tensor: &mut Tensor| {
        if scales.frame_noise > 0.0 {
            let normal = Normal::new(0.0f32, scales.frame_noise).expect("valid scale");
            for v in tensor.data_mut() {
                *v = normal.sample(&mut rng);
            }
        } else {
            tensor.data_mut().fill(0.0);
        }
    };

    // Silence attention and all FFNs except the content layer's.
    let content = cfg.num_layers - 1;
    for l in 0..cfg.num_layers {
        let o = format!("model.layers.{l}.self_attn.o_proj.weight");
        frame_fill(store.get_mut(&o).unwrap());
        if l != content {
            let d = format!("model.layers.{l}.mlp.down_proj.weight");
            frame_fill(store.get_mut(&d).unwrap());
        }
        for norm in ["input_layernorm", "post_attention_layernorm"] {
            store
                .get_mut(&format!("model.layers.{l}.{norm}.weight"))
                .unwrap()
                .data_mut()
                .fill(1.0);
        }
    }
    store.get_mut("model.norm.weight").unwrap().data_mut().fill(1.0);

    // Indicator embeddings and LM-head read-outs for the alphabet.
    let embed = store.get_mut("model.embed_tokens.weight").unwrap();
    for (&tok, &dim) in &dim_of {
        let row = &mut embed.data_mut()[tok as usize * h..(tok as usize + 1) * h];
        row.fill(0.0);
        row[dim] = scales.embed;
    }
    let head = store.get_mut("lm_head.weight").unwrap();
    for (&tok, &dim) in &dim_of {
        let row = &mut head.data_mut()[tok as usize * h..(tok as usize + 1) * h];
        row.fill(0.0);
        row[dim] = scales.head;
    }

    // Key-value FFN at the content layer: slot j fires on indicator j and
    // writes the successor's indicator. The down-projection magnitude is
    // solved so the written indicator has length `scales.out`.
    let sqrt_h = (h as f32).sqrt();
    let fired = ops::silu(scales.gate * sqrt_h) * scales.up * sqrt_h;
    let down_scale = scales.out / fired;
    let prefix = format!("model.layers.{content}.mlp");
    for proj in ["gate", "up", "down"] {
        frame_fill(
            store
                .get_mut(&format!("{prefix}.{proj}_proj.weight"))
                .unwrap(),
        );
    }
    for (&tok, &dim) in &dim_of {
        if let Some(&next) = map.get(&tok) {
            let slot = dim; // one FFN slot per alphabet entry
            let target = dim_of[&next];
            store
                .get_mut(&format!("{prefix}.gate_proj.weight"))
                .unwrap()
                .data_mut()[slot * h + dim] = scales.gate;
            store
                .get_mut(&format!("{prefix}.up_proj.weight"))
                .unwrap()
                .data_mut()[slot * h + dim] = scales.up;
            store
                .get_mut(&format!("{prefix}.down_proj.weight"))
                .unwrap()
                .data_mut()[target * cfg.ffn_dim + slot] = down_scale;
        }
    }

    Ok((store, desc))
}

/// Generates sequences by iterating a successor map from each start token.
pub fn successor_chains(successors: &[(u32, u32)], starts: &[u32], len: usize) -> TokenBatch {
    let map: BTreeMap<u32, u32> = successors.iter().copied().collect();
    let sequences = starts
        .iter()
        .map(|&s| {
            let mut seq = Vec::with_capacity(len);
            let mut cur = s;
            for _ in 0..len {
                seq.push(cur);
                cur = *map.get(&cur).unwrap_or(&s);
            }
            seq
        })
        .collect();
    TokenBatch::new(sequences)
}
