//! Numeric primitives for the toy transformer: matmuls, RMSNorm, rotary
//! position embedding, causal attention, and the gated FFN. The `_vjp`
//! functions compute vector-Jacobian products with respect to activations
//! (weights stay frozen everywhere; only routers are ever trained).

/// y[t][o] = sum_k x[t][k] * w[o][k]; `w` is row-major `out_dim x k`.
pub fn matmul_nt(x: &[f32], t: usize, k: usize, w: &[f32], out_dim: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), t * k);
    debug_assert_eq!(w.len(), out_dim * k);
    let mut y = vec![0.0f32; t * out_dim];
    for r in 0..t {
        let xr = &x[r * k..(r + 1) * k];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wo = &w[o * k..(o + 1) * k];
            let mut acc = 0.0f32;
            for i in 0..k {
                acc += xr[i] * wo[i];
            }
            *yo = acc;
        }
    }
    y
}

/// dx[t][k] = sum_o dy[t][o] * w[o][k] — the activation VJP of `matmul_nt`.
pub fn matmul_nt_vjp(dy: &[f32], t: usize, out_dim: usize, w: &[f32], k: usize) -> Vec<f32> {
    debug_assert_eq!(dy.len(), t * out_dim);
    let mut dx = vec![0.0f32; t * k];
    for r in 0..t {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * k..(r + 1) * k];
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wo = &w[o * k..(o + 1) * k];
            for i in 0..k {
                dxr[i] += g * wo[i];
            }
        }
    }
    dx
}

pub const RMS_EPS: f32 = 1e-5;

/// Row-wise RMS normalization with a learned gain: y = w ⊙ x / rms(x).
pub fn rmsnorm(x: &[f32], w: &[f32], h: usize) -> Vec<f32> {
    let rows = x.len() / h;
    let mut y = vec![0.0f32; x.len()];
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let ms = xr.iter().map(|&v| v * v).sum::<f32>() / h as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for i in 0..h {
            y[r * h + i] = w[i] * xr[i] * inv;
        }
    }
    y
}

/// Activation VJP of [`rmsnorm`].
pub fn rmsnorm_vjp(x: &[f32], w: &[f32], dy: &[f32], h: usize) -> Vec<f32> {
    let rows = x.len() / h;
    let mut dx = vec![0.0f32; x.len()];
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let dyr = &dy[r * h..(r + 1) * h];
        let ms = xr.iter().map(|&v| v * v).sum::<f32>() / h as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        // dot = sum_i dy_i * w_i * x_i
        let mut dot = 0.0f32;
        for i in 0..h {
            dot += dyr[i] * w[i] * xr[i];
        }
        let cube = inv * inv * inv / h as f32;
        for i in 0..h {
            dx[r * h + i] = inv * dyr[i] * w[i] - cube * xr[i] * dot;
        }
    }
    dx
}

#[inline]
pub fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

#[inline]
pub fn silu_prime(z: f32) -> f32 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Numerically-stable softmax over a slice, in place.
pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// VJP of softmax: ds = (dp − <dp, p>) ⊙ p.
pub fn softmax_vjp(p: &[f32], dp: &[f32], ds: &mut [f32]) {
    let dot: f32 = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    for i in 0..p.len() {
        ds[i] = (dp[i] - dot) * p[i];
    }
}

const ROPE_BASE: f32 = 10000.0;

/// Applies rotate-half rotary embedding in place to a `t x (nh*hd)` buffer.
/// `dir` = 1.0 rotates forward, -1.0 applies the inverse rotation (the VJP).
pub fn rotary_inplace(x: &mut [f32], t: usize, nh: usize, hd: usize, dir: f32) {
    let half = hd / 2;
    let width = nh * hd;
    for pos in 0..t {
        for head in 0..nh {
            let base = pos * width + head * hd;
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f32 / hd as f32);
                let angle = pos as f32 * freq;
                let (sin, cos) = (dir * angle).sin_cos();
                let a = x[base + i];
                let b = x[base + half + i];
                x[base + i] = a * cos - b * sin;
                x[base + half + i] = a * sin + b * cos;
            }
        }
    }
}

pub struct AttnWeights<'a> {
    pub wq: &'a [f32],
    pub wk: &'a [f32],
    pub wv: &'a [f32],
    pub wo: &'a [f32],
}

/// Everything the attention VJP needs from the forward pass.
pub struct AttnTrace {
    pub q: Vec<f32>,     // post-rotary, t x h
    pub k: Vec<f32>,     // post-rotary, t x h
    pub v: Vec<f32>,     // t x h
    pub probs: Vec<f32>, // nh x t x t, causal rows
    pub heads_out: Vec<f32>, // pre-o_proj, t x h
}

/// Causal multi-head attention over an already-normalized input.
/// Returns the post-`o_proj` output (caller adds the residual). When
/// `trace` is given the intermediates needed for the VJP are saved.
pub fn attention(
    x_normed: &[f32],
    t: usize,
    h: usize,
    nh: usize,
    w: &AttnWeights,
    mut trace: Option<&mut Option<AttnTrace>>,
) -> Vec<f32> {
    let hd = h / nh;
    let scale = 1.0 / (hd as f32).sqrt();

    let mut q = matmul_nt(x_normed, t, h, w.wq, h);
    let mut k = matmul_nt(x_normed, t, h, w.wk, h);
    let v = matmul_nt(x_normed, t, h, w.wv, h);
    rotary_inplace(&mut q, t, nh, hd, 1.0);
    rotary_inplace(&mut k, t, nh, hd, 1.0);

    let mut probs = vec![0.0f32; nh * t * t];
    let mut heads_out = vec![0.0f32; t * h];
    for head in 0..nh {
        let off = head * hd;
        for i in 0..t {
            let row = &mut probs[head * t * t + i * t..head * t * t + i * t + i + 1];
            for (j, slot) in row.iter_mut().enumerate() {
                let qi = &q[i * h + off..i * h + off + hd];
                let kj = &k[j * h + off..j * h + off + hd];
                let mut s = 0.0f32;
                for d in 0..hd {
                    s += qi[d] * kj[d];
                }
                *slot = s * scale;
            }
            softmax_inplace(row);
            for j in 0..=i {
                let p = row[j];
                let vj = &v[j * h + off..j * h + off + hd];
                for d in 0..hd {
                    heads_out[i * h + off + d] += p * vj[d];
                }
            }
        }
    }

    let out = matmul_nt(&heads_out, t, h, w.wo, h);
    if let Some(slot) = trace.as_deref_mut() {
        **slot = Some(AttnTrace {
            q,
            k,
            v,
            probs,
            heads_out,
        });
    }
    out
}

/// VJP of [`attention`] with respect to the normalized input.
pub fn attention_vjp(
    d_out: &[f32],
    tr: &AttnTrace,
    t: usize,
    h: usize,
    nh: usize,
    w: &AttnWeights,
) -> Vec<f32> {
    let hd = h / nh;
    let scale = 1.0 / (hd as f32).sqrt();

    let d_heads = matmul_nt_vjp(d_out, t, h, w.wo, h);

    let mut dq = vec![0.0f32; t * h];
    let mut dk = vec![0.0f32; t * h];
    let mut dv = vec![0.0f32; t * h];
    let mut dp_row = vec![0.0f32; t];
    let mut ds_row = vec![0.0f32; t];
    for head in 0..nh {
        let off = head * hd;
        for i in 0..t {
            let p_row = &tr.probs[head * t * t + i * t..head * t * t + i * t + i + 1];
            let dh = &d_heads[i * h + off..i * h + off + hd];
            // dV and dP.
            for j in 0..=i {
                let vj = &tr.v[j * h + off..j * h + off + hd];
                let mut acc = 0.0f32;
                for d in 0..hd {
                    acc += dh[d] * vj[d];
                    dv[j * h + off + d] += p_row[j] * dh[d];
                }
                dp_row[j] = acc;
            }
            softmax_vjp(p_row, &dp_row[..=i], &mut ds_row[..=i]);
            // dQ and dK through the scaled dot product.
            let qi = &tr.q[i * h + off..i * h + off + hd];
            for j in 0..=i {
                let g = ds_row[j] * scale;
                if g == 0.0 {
                    continue;
                }
                let kj = &tr.k[j * h + off..j * h + off + hd];
                for d in 0..hd {
                    dq[i * h + off + d] += g * kj[d];
                    dk[j * h + off + d] += g * qi[d];
                }
            }
        }
    }

    rotary_inplace(&mut dq, t, nh, hd, -1.0);
    rotary_inplace(&mut dk, t, nh, hd, -1.0);

    let mut dx = matmul_nt_vjp(&dq, t, h, w.wq, h);
    let dxk = matmul_nt_vjp(&dk, t, h, w.wk, h);
    let dxv = matmul_nt_vjp(&dv, t, h, w.wv, h);
    for i in 0..dx.len() {
        dx[i] += dxk[i] + dxv[i];
    }
    dx
}

/// Saved intermediates for the gated-FFN VJP.
pub struct FfnTrace {
    pub gate: Vec<f32>, // pre-activation, t x f
    pub up: Vec<f32>,   // t x f
}

/// SwiGLU feed-forward over an already-normalized input:
/// y = (silu(x·Wgᵀ) ⊙ (x·Wuᵀ))·Wdᵀ.
pub fn swiglu_ffn(
    x_normed: &[f32],
    t: usize,
    h: usize,
    f: usize,
    gate_w: &[f32],
    up_w: &[f32],
    down_w: &[f32],
    mut trace: Option<&mut Option<FfnTrace>>,
) -> Vec<f32> {
    let gate = matmul_nt(x_normed, t, h, gate_w, f);
    let up = matmul_nt(x_normed, t, h, up_w, f);
    let mut act = vec![0.0f32; t * f];
    for i in 0..act.len() {
        act[i] = silu(gate[i]) * up[i];
    }
    let y = matmul_nt(&act, t, f, down_w, h);
    if let Some(slot) = trace.as_deref_mut() {
        **slot = Some(FfnTrace { gate, up });
    }
    y
}

/// VJP of [`swiglu_ffn`] with respect to the normalized input.
pub fn swiglu_ffn_vjp(
    dy: &[f32],
    tr: &FfnTrace,
    t: usize,
    h: usize,
    f: usize,
    gate_w: &[f32],
    up_w: &[f32],
    down_w: &[f32],
) -> Vec<f32> {
    let mut da = matmul_nt_vjp(dy, t, h, down_w, f);
    let mut dg = vec![0.0f32; t * f];
    for i in 0..da.len() {
        let s = silu(tr.gate[i]);
        dg[i] = da[i] * tr.up[i] * silu_prime(tr.gate[i]);
        da[i] *= s; // da now holds d_up
    }
    let mut dx = matmul_nt_vjp(&dg, t, f, gate_w, h);
    let dxu = matmul_nt_vjp(&da, t, f, up_w, h);
    for i in 0..dx.len() {
        dx[i] += dxu[i];
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        forward: impl Fn(&[f32]) -> f32,
        analytic: &[f32],
        x: &[f32],
        eps: f32,
        tol: f32,
    ) {
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let up = forward(&xp);
            xp[i] = x[i] - eps;
            let dn = forward(&xp);
            xp[i] = x[i];
            let fd = (up - dn) / (2.0 * eps);
            let a = analytic[i];
            assert!(
                (fd - a).abs() <= tol * (1.0 + fd.abs().max(a.abs())),
                "coord {i}: fd={fd} analytic={a}"
            );
        }
    }

    fn seeded(n: usize, seed: u64) -> Vec<f32> {
        // Cheap deterministic pseudo-values in [-0.5, 0.5].
        (0..n)
            .map(|i| {
                let z = crate::rng::mix64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
                (z >> 11) as f32 / (1u64 << 53) as f32 - 0.5
            })
            .collect()
    }

    #[test]
    fn rmsnorm_vjp_matches_finite_differences() {
        let (t, h) = (3, 8);
        let x = seeded(t * h, 1);
        let w = seeded(h, 2);
        let dy = seeded(t * h, 3);
        let loss = |x: &[f32]| -> f32 {
            rmsnorm(x, &w, h).iter().zip(&dy).map(|(&a, &b)| a * b).sum()
        };
        let dx = rmsnorm_vjp(&x, &w, &dy, h);
        fd_check(loss, &dx, &x, 1e-3, 2e-2);
    }

    #[test]
    fn attention_vjp_matches_finite_differences() {
        let (t, h, nh) = (4, 8, 2);
        let x = seeded(t * h, 10);
        let wq = seeded(h * h, 11);
        let wk = seeded(h * h, 12);
        let wv = seeded(h * h, 13);
        let wo = seeded(h * h, 14);
        let dy = seeded(t * h, 15);
        let w = AttnWeights {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
        };
        let loss = |x: &[f32]| -> f32 {
            attention(x, t, h, nh, &w, None)
                .iter()
                .zip(&dy)
                .map(|(&a, &b)| a * b)
                .sum()
        };
        let mut trace = None;
        let _ = attention(&x, t, h, nh, &w, Some(&mut trace));
        let dx = attention_vjp(&dy, trace.as_ref().unwrap(), t, h, nh, &w);
        fd_check(loss, &dx, &x, 1e-3, 3e-2);
    }

    #[test]
    fn swiglu_vjp_matches_finite_differences() {
        let (t, h, f) = (3, 6, 10);
        let x = seeded(t * h, 20);
        let gw = seeded(f * h, 21);
        let uw = seeded(f * h, 22);
        let dw = seeded(h * f, 23);
        let dy = seeded(t * h, 24);
        let loss = |x: &[f32]| -> f32 {
            swiglu_ffn(x, t, h, f, &gw, &uw, &dw, None)
                .iter()
                .zip(&dy)
                .map(|(&a, &b)| a * b)
                .sum()
        };
        let mut trace = None;
        let _ = swiglu_ffn(&x, t, h, f, &gw, &uw, &dw, Some(&mut trace));
        let dx = swiglu_ffn_vjp(&dy, trace.as_ref().unwrap(), t, h, f, &gw, &uw, &dw);
        fd_check(loss, &dx, &x, 1e-3, 2e-2);
    }

    #[test]
    fn rotary_inverse_restores_input() {
        let (t, nh, hd) = (5, 2, 8);
        let orig = seeded(t * nh * hd, 30);
        let mut x = orig.clone();
        rotary_inplace(&mut x, t, nh, hd, 1.0);
        rotary_inplace(&mut x, t, nh, hd, -1.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
