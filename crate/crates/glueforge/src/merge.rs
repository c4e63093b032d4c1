//! Pure weight-space merge operators: linear interpolation, SLERP, task
//! arithmetic, TIES, and DARE, plus grouped-coefficient recipe application.

use serde::{Deserialize, Serialize};

use crate::arch::ArchDescriptor;
use crate::error::{GlueError, Result};
use crate::rng::{fnv1a, keyed_unit};
use crate::store::{Tensor, TensorStore};

/// Per-tensor deltas of one fine-tune against its base: τ = w − w_base.
#[derive(Debug, Clone)]
pub struct TaskVectorSet {
    pub base_id: String,
    pub deltas: TensorStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Linear,
    Slerp,
    TaskArithmetic,
    Ties,
    DareTa,
}

impl MergeMethod {
    pub fn needs_base(&self) -> bool {
        matches!(
            self,
            MergeMethod::TaskArithmetic | MergeMethod::Ties | MergeMethod::DareTa
        )
    }
}

pub const DEFAULT_TIES_TRIM_FRAC: f32 = 0.2;
pub const DEFAULT_DARE_DROP_P: f32 = 0.5;

/// A merge method plus its per-group coefficients.
///
/// Layers are grouped in runs of `group_size` adjacent decoder layers that
/// share one coefficient column; all non-layer tensors (embedding, LM head,
/// final norm) share one extra trailing column. `coefficients` is therefore
/// `k x (num_layers / group_size + 1)` for `k` models.
///
/// For `ties`/`dare_ta`, `densities` optionally carries a second `k x G`
/// matrix of per-model per-group densities (searchable, doubling the
/// parameter count); otherwise the scalar defaults apply. For `slerp` only
/// row 1 is read: column `g` holds the interpolation parameter `t` of that
/// group (the second model's weight).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub group_size: usize,
    pub coefficients: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub densities: Option<Vec<Vec<f32>>>,
    pub dare_drop_p: f32,
    pub ties_trim_frac: f32,
    pub seed: u64,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod, group_size: usize, coefficients: Vec<Vec<f32>>) -> Self {
        MergeRecipe {
            method,
            group_size,
            coefficients,
            densities: None,
            dare_drop_p: DEFAULT_DARE_DROP_P,
            ties_trim_frac: DEFAULT_TIES_TRIM_FRAC,
            seed: 0,
        }
    }

    /// Uniform recipe with a single layer group: every model contributes
    /// `coeffs[i]` to every tensor.
    pub fn flat(method: MergeMethod, num_layers: usize, coeffs: &[f32]) -> Self {
        let rows = coeffs.iter().map(|&c| vec![c, c]).collect();
        MergeRecipe::new(method, num_layers, rows)
    }

    pub fn num_groups(num_layers: usize, group_size: usize) -> Result<usize> {
        if group_size == 0 || num_layers % group_size != 0 {
            return Err(GlueError::InvalidArg(format!(
                "group size {group_size} does not divide {num_layers} layers"
            )));
        }
        Ok(num_layers / group_size + 1)
    }

    pub fn validate(&self, num_models: usize, num_layers: usize) -> Result<()> {
        let groups = Self::num_groups(num_layers, self.group_size)?;
        if self.coefficients.len() != num_models
            || self.coefficients.iter().any(|r| r.len() != groups)
        {
            return Err(GlueError::InvalidArg(format!(
                "coefficients must be {num_models} x {groups}, got {} x {}",
                self.coefficients.len(),
                self.coefficients.first().map_or(0, Vec::len)
            )));
        }
        if let Some(d) = &self.densities {
            if d.len() != num_models || d.iter().any(|r| r.len() != groups) {
                return Err(GlueError::InvalidArg("densities shape mismatch".into()));
            }
        }
        if self
            .coefficients
            .iter()
            .flatten()
            .any(|c| !c.is_finite())
        {
            return Err(GlueError::InvalidArg("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Column index of a tensor given its role: layer tensors map to their
    /// layer group, everything else to the trailing shared column.
    pub fn column_for(&self, layer: Option<usize>, num_layers: usize) -> usize {
        match layer {
            Some(l) => l / self.group_size,
            None => num_layers / self.group_size,
        }
    }
}

fn ensure_mergeable(stores: &[&TensorStore]) -> Result<()> {
    let first = stores
        .first()
        .ok_or_else(|| GlueError::InvalidArg("need at least one store".into()))?;
    for (i, s) in stores.iter().enumerate().skip(1) {
        if !first.same_geometry(s) {
            return Err(GlueError::Incompatible(format!(
                "store {i} differs from store 0 in tensor names or shapes"
            )));
        }
    }
    Ok(())
}

/// w = Σ_i coeffs[i] · stores[i], accumulated in ascending input order.
pub fn linear_merge(stores: &[&TensorStore], coeffs: &[f32]) -> Result<TensorStore> {
    if stores.len() != coeffs.len() {
        return Err(GlueError::InvalidArg(format!(
            "{} stores but {} coefficients",
            stores.len(),
            coeffs.len()
        )));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(GlueError::InvalidArg("non-finite coefficient".into()));
    }
    ensure_mergeable(stores)?;
    let mut out = TensorStore::new();
    for (name, first) in stores[0].iter() {
        let mut data: Vec<f32> = first.data().iter().map(|&v| coeffs[0] * v).collect();
        for (s, &c) in stores.iter().zip(coeffs).skip(1) {
            for (acc, &v) in data.iter_mut().zip(s.get(name).unwrap().data()) {
                *acc += c * v;
            }
        }
        out.insert(name.clone(), Tensor::new(first.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

const SLERP_OMEGA_EPS: f64 = 1e-6;
const SLERP_NORM_EPS: f64 = 1e-12;

/// Spherical linear interpolation between two models, per tensor.
///
/// Each tensor pair is flattened; for angle Ω between the flats the output
/// is sin((1−t)Ω)/sin(Ω)·u + sin(tΩ)/sin(Ω)·v. Nearly-parallel or
/// nearly-zero tensors fall back to straight linear interpolation.
pub fn slerp_merge(a: &TensorStore, b: &TensorStore, t: f32) -> Result<TensorStore> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GlueError::InvalidArg(format!("slerp t {t} outside [0, 1]")));
    }
    ensure_mergeable(&[a, b])?;
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let mut out = TensorStore::new();
    for (name, ta) in a.iter() {
        let tb = b.get(name).unwrap();
        out.insert(
            name.clone(),
            Tensor::new(
                ta.shape().to_vec(),
                slerp_flat(ta.data(), tb.data(), t),
            )?,
        )?;
    }
    Ok(out)
}

fn slerp_flat(u: &[f32], v: &[f32], t: f32) -> Vec<f32> {
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&x, &y) in u.iter().zip(v) {
        dot += x as f64 * y as f64;
        nu += x as f64 * x as f64;
        nv += y as f64 * y as f64;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    let t = t as f64;
    let (cu, cv) = if nu < SLERP_NORM_EPS || nv < SLERP_NORM_EPS {
        (1.0 - t, t)
    } else {
        let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
        let omega = cos.acos();
        if omega < SLERP_OMEGA_EPS {
            (1.0 - t, t)
        } else {
            let sin = omega.sin();
            (((1.0 - t) * omega).sin() / sin, (t * omega).sin() / sin)
        }
    };
    u.iter()
        .zip(v)
        .map(|(&x, &y)| (cu * x as f64 + cv * y as f64) as f32)
        .collect()
}

/// τ_i = w_i − w_base per tensor, exact elementwise subtraction.
pub fn make_task_vectors(
    fine_tuned: &[(&str, &TensorStore)],
    base: &TensorStore,
) -> Result<Vec<TaskVectorSet>> {
    let mut out = Vec::with_capacity(fine_tuned.len());
    for (id, ft) in fine_tuned {
        ensure_mergeable(&[base, ft])?;
        let mut deltas = TensorStore::new();
        for (name, tb) in base.iter() {
            let tf = ft.get(name).unwrap();
            let data: Vec<f32> = tf
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&w, &b)| w - b)
                .collect();
            deltas.insert(name.clone(), Tensor::new(tb.shape().to_vec(), data)?)?;
        }
        out.push(TaskVectorSet {
            base_id: id.to_string(),
            deltas,
        });
    }
    Ok(out)
}

/// w = w_base + Σ_i scales[i] · τ_i.
pub fn task_arithmetic_merge(
    base: &TensorStore,
    tvs: &[TaskVectorSet],
    scales: &[f32],
) -> Result<TensorStore> {
    if tvs.len() != scales.len() {
        return Err(GlueError::InvalidArg(format!(
            "{} task vectors but {} scales",
            tvs.len(),
            scales.len()
        )));
    }
    for tv in tvs {
        ensure_mergeable(&[base, &tv.deltas])?;
    }
    let mut out = TensorStore::new();
    for (name, tb) in base.iter() {
        let mut data = tb.data().to_vec();
        for (tv, &s) in tvs.iter().zip(scales) {
            for (acc, &d) in data.iter_mut().zip(tv.deltas.get(name).unwrap().data()) {
                *acc += s * d;
            }
        }
        out.insert(name.clone(), Tensor::new(tb.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Random drop-and-rescale of a task vector: each entry is zeroed with
/// probability `drop_p`, survivors are scaled by 1/(1−drop_p), preserving
/// the delta in expectation.
///
/// Each entry's coin flip is keyed on `(seed, tensor name, flat index)`, so
/// the result does not depend on iteration order or thread count.
pub fn dare_sparsify(tv: &TaskVectorSet, drop_p: f32, seed: u64) -> Result<TaskVectorSet> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(GlueError::InvalidArg(format!(
            "dare drop_p {drop_p} outside [0, 1)"
        )));
    }
    if drop_p == 0.0 {
        return Ok(tv.clone());
    }
    let rescale = 1.0 / (1.0 - drop_p as f64);
    let mut deltas = TensorStore::new();
    for (name, t) in tv.deltas.iter() {
        let name_hash = fnv1a(name.as_bytes());
        let data: Vec<f32> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if keyed_unit(seed, name_hash, i as u64) < drop_p as f64 {
                    0.0
                } else {
                    (v as f64 * rescale) as f32
                }
            })
            .collect();
        deltas.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(TaskVectorSet {
        base_id: tv.base_id.clone(),
        deltas,
    })
}

/// TIES merging: per tensor, TRIM each task vector to its top
/// `trim_frac` fraction of entries by magnitude, ELECT a sign per position
/// from the scaled sum, then average the scaled survivors that agree with
/// the elected sign (disjoint merge). Returns base + merged delta.
pub fn ties_merge(
    base: &TensorStore,
    tvs: &[TaskVectorSet],
    scales: &[f32],
    trim_frac: f32,
) -> Result<TensorStore> {
    if tvs.len() != scales.len() {
        return Err(GlueError::InvalidArg(format!(
            "{} task vectors but {} scales",
            tvs.len(),
            scales.len()
        )));
    }
    ties_merge_grouped(base, tvs, |_| Some((scales.to_vec(), trim_frac)))
}

/// TIES with per-tensor parameters; `params(name)` returns the scales and
/// trim fraction for one tensor (used by grouped recipes).
fn ties_merge_grouped(
    base: &TensorStore,
    tvs: &[TaskVectorSet],
    params: impl Fn(&str) -> Option<(Vec<f32>, f32)>,
) -> Result<TensorStore> {
    for tv in tvs {
        ensure_mergeable(&[base, &tv.deltas])?;
    }
    if tvs.is_empty() {
        return Err(GlueError::InvalidArg("ties needs at least one task vector".into()));
    }
    let mut out = TensorStore::new();
    for (name, tb) in base.iter() {
        let (scales, trim_frac) = params(name)
            .ok_or_else(|| GlueError::InvalidArg(format!("no per-tensor params for {name}")))?;
        if !(0.0..=1.0).contains(&trim_frac) || trim_frac == 0.0 {
            return Err(GlueError::InvalidArg(format!(
                "ties trim_frac {trim_frac} outside (0, 1]"
            )));
        }
        let n = tb.len();
        let trimmed: Vec<Vec<f32>> = tvs
            .iter()
            .map(|tv| trim_top_fraction(tv.deltas.get(name).unwrap().data(), trim_frac))
            .collect();
        let mut data = tb.data().to_vec();
        for pos in 0..n {
            // ELECT: sign of the scaled sum; exact zero elects +1.
            let mut total = 0.0f32;
            for (tr, &s) in trimmed.iter().zip(&scales) {
                total += s * tr[pos];
            }
            let gamma = if total < 0.0 { -1.0f32 } else { 1.0f32 };
            // DISJOINT MERGE: mean of scaled survivors agreeing with gamma.
            let mut sum = 0.0f32;
            let mut count = 0u32;
            for (tr, &s) in trimmed.iter().zip(&scales) {
                let sign = if tr[pos] > 0.0 {
                    1.0
                } else if tr[pos] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                if sign == gamma {
                    sum += s * tr[pos];
                    count += 1;
                }
            }
            if count > 0 {
                data[pos] += sum / count as f32;
            }
        }
        out.insert(name.clone(), Tensor::new(tb.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Keeps the top ⌈frac·N⌉ entries by |value|, zeroing the rest. Ties at
/// the cutoff keep the lower flat index.
fn trim_top_fraction(data: &[f32], frac: f32) -> Vec<f32> {
    let n = data.len();
    let keep = ((frac as f64 * n as f64).ceil() as usize).min(n);
    if keep == n {
        return data.to_vec();
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Descending magnitude; equal magnitudes keep the lower index first.
    order.sort_by(|&a, &b| {
        data[b]
            .abs()
            .partial_cmp(&data[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0f32; n];
    for &i in order.iter().take(keep) {
        out[i] = data[i];
    }
    out
}

/// Applies a grouped-coefficient recipe over a zoo: tensors in layer ℓ use
/// coefficient column ⌊ℓ/n⌋, non-layer tensors use the trailing shared
/// column, and each group dispatches to the recipe's kernel.
pub fn apply_recipe(
    zoo: &[&TensorStore],
    desc: &ArchDescriptor,
    base: Option<&TensorStore>,
    recipe: &MergeRecipe,
) -> Result<TensorStore> {
    recipe.validate(zoo.len(), desc.num_layers)?;
    ensure_mergeable(zoo)?;
    if recipe.method.needs_base() && base.is_none() {
        return Err(GlueError::InvalidArg(format!(
            "method {:?} requires a base model",
            recipe.method
        )));
    }
    if recipe.method == MergeMethod::Slerp && zoo.len() != 2 {
        return Err(GlueError::InvalidArg("slerp requires exactly 2 models".into()));
    }
    for name in zoo[0].names() {
        if !desc.tensor_roles.contains_key(name) {
            return Err(GlueError::InvalidArg(format!(
                "tensor {name} missing from descriptor roles"
            )));
        }
    }

    let col_of = |name: &str| {
        let layer = desc.tensor_roles[name].layer();
        recipe.column_for(layer, desc.num_layers)
    };

    match recipe.method {
        MergeMethod::Linear => {
            let mut out = TensorStore::new();
            for (name, first) in zoo[0].iter() {
                let col = col_of(name);
                let mut data: Vec<f32> = first
                    .data()
                    .iter()
                    .map(|&v| recipe.coefficients[0][col] * v)
                    .collect();
                for (i, s) in zoo.iter().enumerate().skip(1) {
                    let c = recipe.coefficients[i][col];
                    for (acc, &v) in data.iter_mut().zip(s.get(name).unwrap().data()) {
                        *acc += c * v;
                    }
                }
                out.insert(name.clone(), Tensor::new(first.shape().to_vec(), data)?)?;
            }
            Ok(out)
        }
        MergeMethod::Slerp => {
            let mut out = TensorStore::new();
            for (name, ta) in zoo[0].iter() {
                let t = recipe.coefficients[1][col_of(name)];
                if !(0.0..=1.0).contains(&t) {
                    return Err(GlueError::InvalidArg(format!(
                        "slerp t {t} outside [0, 1] for {name}"
                    )));
                }
                let tb = zoo[1].get(name).unwrap();
                out.insert(
                    name.clone(),
                    Tensor::new(ta.shape().to_vec(), slerp_flat(ta.data(), tb.data(), t))?,
                )?;
            }
            Ok(out)
        }
        MergeMethod::TaskArithmetic => {
            let base = base.unwrap();
            let ids: Vec<String> = (0..zoo.len()).map(|i| format!("model{i}")).collect();
            let pairs: Vec<(&str, &TensorStore)> = ids
                .iter()
                .map(String::as_str)
                .zip(zoo.iter().copied())
                .collect();
            let tvs = make_task_vectors(&pairs, base)?;
            let mut out = TensorStore::new();
            for (name, tb) in base.iter() {
                let col = col_of(name);
                let mut data = tb.data().to_vec();
                for (i, tv) in tvs.iter().enumerate() {
                    let s = recipe.coefficients[i][col];
                    for (acc, &d) in data.iter_mut().zip(tv.deltas.get(name).unwrap().data()) {
                        *acc += s * d;
                    }
                }
                out.insert(name.clone(), Tensor::new(tb.shape().to_vec(), data)?)?;
            }
            Ok(out)
        }
        MergeMethod::Ties => {
            let base = base.unwrap();
            let ids: Vec<String> = (0..zoo.len()).map(|i| format!("model{i}")).collect();
            let pairs: Vec<(&str, &TensorStore)> = ids
                .iter()
                .map(String::as_str)
                .zip(zoo.iter().copied())
                .collect();
            let tvs = make_task_vectors(&pairs, base)?;
            ties_merge_grouped(base, &tvs, |name| {
                let col = col_of(name);
                let scales: Vec<f32> =
                    (0..zoo.len()).map(|i| recipe.coefficients[i][col]).collect();
                // With searched densities every model shares the group's
                // mean trim fraction; per-model trims would need per-model
                // trimming thresholds, which TIES defines globally.
                let trim = match &recipe.densities {
                    Some(d) => {
                        let mean: f32 =
                            d.iter().map(|r| r[col]).sum::<f32>() / zoo.len() as f32;
                        mean.clamp(1e-3, 1.0)
                    }
                    None => recipe.ties_trim_frac,
                };
                Some((scales, trim))
            })
        }
        MergeMethod::DareTa => {
            let base = base.unwrap();
            let ids: Vec<String> = (0..zoo.len()).map(|i| format!("model{i}")).collect();
            let pairs: Vec<(&str, &TensorStore)> = ids
                .iter()
                .map(String::as_str)
                .zip(zoo.iter().copied())
                .collect();
            let tvs = make_task_vectors(&pairs, base)?;
            let mut out_data: std::collections::BTreeMap<String, Vec<f32>> = base
                .iter()
                .map(|(name, t)| (name.clone(), t.data().to_vec()))
                .collect();
            for (i, tv) in tvs.iter().enumerate() {
                for (name, delta) in tv.deltas.iter() {
                    let col = col_of(name);
                    let s = recipe.coefficients[i][col];
                    let drop_p = match &recipe.densities {
                        Some(d) => d[i][col].clamp(0.0, 1.0 - 1e-3),
                        None => recipe.dare_drop_p,
                    };
                    let rescale = 1.0 / (1.0 - drop_p as f64);
                    // Distinct mask per model: fold the model index into the seed.
                    let seed = recipe.seed ^ crate::rng::mix64(i as u64 + 1);
                    let name_hash = fnv1a(name.as_bytes());
                    let acc = out_data.get_mut(name).unwrap();
                    for (pos, &d) in delta.data().iter().enumerate() {
                        if keyed_unit(seed, name_hash, pos as u64) >= drop_p as f64 {
                            acc[pos] += s * (d as f64 * rescale) as f32;
                        }
                    }
                }
            }
            let mut out = TensorStore::new();
            for (name, data) in out_data {
                let shape = base.get(&name).unwrap().shape().to_vec();
                out.insert(name, Tensor::new(shape, data)?)?;
            }
            Ok(out)
        }
    }
}
