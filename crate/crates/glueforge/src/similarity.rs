//! Weight-space cosine similarity and threshold clustering of a model zoo
//! into mergeable families.

use serde::{Deserialize, Serialize};

use crate::error::{GlueError, Result};
use crate::store::TensorStore;

pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Cosine similarity between two models: the unweighted mean over shared
/// tensors of each tensor's flattened cosine. Averaging per tensor keeps a
/// huge embedding matrix from dominating the score.
pub fn model_cosine(a: &TensorStore, b: &TensorStore) -> Result<f64> {
    ensure_same_geometry(a, b)?;
    let mut total = 0.0f64;
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("geometry checked");
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            dot += x as f64 * y as f64;
            na += x as f64 * x as f64;
            nb += y as f64 * y as f64;
        }
        if na == 0.0 || nb == 0.0 {
            let model = if na == 0.0 { "first" } else { "second" };
            return Err(GlueError::ZeroNorm {
                model: model.to_string(),
                tensor: name.clone(),
            });
        }
        total += dot / (na.sqrt() * nb.sqrt());
    }
    Ok(total / a.len() as f64)
}

/// Alternative metric: a single cosine over all weights flattened into one
/// vector. The headline clustering uses [`model_cosine`]; this variant is
/// reachable via the CLI `--metric global` flag.
pub fn model_cosine_global(a: &TensorStore, b: &TensorStore) -> Result<f64> {
    ensure_same_geometry(a, b)?;
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("geometry checked");
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            dot += x as f64 * y as f64;
            na += x as f64 * x as f64;
            nb += y as f64 * y as f64;
        }
    }
    if na == 0.0 || nb == 0.0 {
        return Err(GlueError::ZeroNorm {
            model: (if na == 0.0 { "first" } else { "second" }).to_string(),
            tensor: "<all>".to_string(),
        });
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

fn ensure_same_geometry(a: &TensorStore, b: &TensorStore) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(GlueError::InvalidArg("empty tensor store".into()));
    }
    if !a.same_geometry(b) {
        return Err(GlueError::Incompatible(
            "stores differ in tensor names or shapes".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    PerTensorMean,
    Global,
}

/// Symmetric pairwise similarity matrix over a zoo, diagonal exactly 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.n || self.values.iter().any(|r| r.len() != self.n) {
            return Err(GlueError::InvalidArg("similarity matrix not n x n".into()));
        }
        for i in 0..self.n {
            if (self.values[i][i] - 1.0).abs() > 1e-6 {
                return Err(GlueError::InvalidArg(format!(
                    "diagonal entry {i} is {}",
                    self.values[i][i]
                )));
            }
            for j in 0..self.n {
                let v = self.values[i][j];
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) || v != self.values[j][i] {
                    return Err(GlueError::InvalidArg(format!(
                        "entry ({i},{j}) = {v} invalid or asymmetric"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Computes the full pairwise matrix with the chosen metric.
pub fn similarity_matrix(zoo: &[TensorStore], metric: SimilarityMetric) -> Result<SimilarityMatrix> {
    let n = zoo.len();
    if n == 0 {
        return Err(GlueError::InvalidArg("empty zoo".into()));
    }
    let mut values = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let s = match metric {
                SimilarityMetric::PerTensorMean => model_cosine(&zoo[i], &zoo[j]),
                SimilarityMetric::Global => model_cosine_global(&zoo[i], &zoo[j]),
            }
            .map_err(|e| GlueError::Eval(format!("pair ({i},{j}): {e}")))?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Partition of the zoo into mergeable families.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<Vec<usize>>,
    pub threshold: f64,
    /// Minimum intra-cluster pairwise similarity; 1.0 for singletons.
    pub min_intra_sim: Vec<f64>,
}

/// Complete-linkage agglomerative clustering at a similarity threshold.
///
/// Starting from singletons, repeatedly merges the cluster pair whose
/// minimum inter-cluster similarity is largest, as long as that minimum is
/// at or above the threshold. Every reported multi-member cluster therefore
/// has all pairwise similarities >= threshold by construction. Equal-merit
/// merge candidates are broken toward the pair whose (smallest member,
/// other smallest member) index key is lexicographically smallest.
pub fn cluster_zoo(matrix: &SimilarityMatrix, threshold: f64) -> Result<ClusterReport> {
    if !(0.0..=1.0).contains(&threshold) || threshold == 0.0 {
        return Err(GlueError::InvalidArg(format!(
            "threshold {threshold} outside (0, 1]"
        )));
    }
    matrix.validate()?;

    let mut clusters: Vec<Vec<usize>> = (0..matrix.n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let link = complete_link(&clusters[a], &clusters[b], matrix);
                if link < threshold {
                    continue;
                }
                let candidate_key = (clusters[a][0].min(clusters[b][0]), clusters[a][0].max(clusters[b][0]));
                let better = match best {
                    None => true,
                    Some((bl, bi, bj)) => {
                        let best_key =
                            (clusters[bi][0].min(clusters[bj][0]), clusters[bi][0].max(clusters[bj][0]));
                        link > bl || (link == bl && candidate_key < best_key)
                    }
                };
                if better {
                    best = Some((link, a, b));
                }
            }
        }
        match best {
            Some((_, a, b)) => {
                let merged_in = clusters.remove(b);
                clusters[a].extend(merged_in);
                clusters[a].sort_unstable();
            }
            None => break,
        }
    }

    clusters.sort_by_key(|c| c[0]);
    let min_intra_sim = clusters
        .iter()
        .map(|c| {
            let mut m = 1.0f64;
            for (i, &a) in c.iter().enumerate() {
                for &b in &c[i + 1..] {
                    m = m.min(matrix.values[a][b]);
                }
            }
            m
        })
        .collect();
    Ok(ClusterReport {
        clusters,
        threshold,
        min_intra_sim,
    })
}

fn complete_link(a: &[usize], b: &[usize], matrix: &SimilarityMatrix) -> f64 {
    let mut link = f64::INFINITY;
    for &i in a {
        for &j in b {
            link = link.min(matrix.values[i][j]);
        }
    }
    link
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Tensor, TensorStore};
    use crate::toy::{build_toy_model, perturb_relative, ToyConfig};

    fn single(name: &str, data: Vec<f32>) -> TensorStore {
        let mut s = TensorStore::new();
        let n = data.len();
        s.insert(name, Tensor::new(vec![n], data).unwrap()).unwrap();
        s
    }

    #[test]
    fn cosine_identity_is_one() {
        let (m, _) = build_toy_model(&ToyConfig::small_test(), 1).unwrap();
        let c = model_cosine(&m, &m).unwrap();
        assert!((c - 1.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn cosine_orthogonal_single_tensor_is_zero() {
        let a = single("w", vec![1.0, 0.0]);
        let b = single("w", vec![0.0, 1.0]);
        assert_eq!(model_cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_is_unweighted_mean_over_tensors() {
        // Per-tensor cosines 1.0 and 0.0 average to 0.5 regardless of size.
        let mut a = TensorStore::new();
        let mut b = TensorStore::new();
        a.insert("big", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        b.insert("big", Tensor::new(vec![4], vec![2.0, 4.0, 6.0, 8.0]).unwrap())
            .unwrap();
        a.insert("small", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        b.insert("small", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let c = model_cosine(&a, &b).unwrap();
        assert!((c - 0.5).abs() < 1e-12, "{c}");
    }

    #[test]
    fn zero_norm_tensor_is_an_error() {
        let a = single("w", vec![0.0, 0.0]);
        let b = single("w", vec![1.0, 0.0]);
        assert!(matches!(
            model_cosine(&a, &b),
            Err(GlueError::ZeroNorm { .. })
        ));
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant() {
        let (a, _) = build_toy_model(&ToyConfig::small_test(), 1).unwrap();
        let b = perturb_relative(&a, 0.3, 0.01, 9);
        assert_eq!(
            model_cosine(&a, &b).unwrap(),
            model_cosine(&b, &a).unwrap()
        );
        let mut scaled = b.clone();
        for (_, t) in scaled.iter_mut() {
            for v in t.data_mut() {
                *v *= 3.5;
            }
        }
        let c1 = model_cosine(&a, &b).unwrap();
        let c2 = model_cosine(&a, &scaled).unwrap();
        assert!((c1 - c2).abs() < 1e-6, "{c1} vs {c2}");
    }

    #[test]
    fn matrix_of_single_model() {
        let (m, _) = build_toy_model(&ToyConfig::small_test(), 1).unwrap();
        let sm = similarity_matrix(&[m], SimilarityMetric::PerTensorMean).unwrap();
        assert_eq!(sm.n, 1);
        assert_eq!(sm.values, vec![vec![1.0]]);
    }

    #[test]
    fn matrix_matches_direct_pairwise_calls() {
        let cfg = ToyConfig::small_test();
        let (m, _) = build_toy_model(&cfg, 1).unwrap();
        let zoo = vec![
            m.clone(),
            m.clone(),
            perturb_relative(&m, 0.5, 0.01, 3),
        ];
        let sm = similarity_matrix(&zoo, SimilarityMetric::PerTensorMean).unwrap();
        sm.validate().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j {
                    1.0
                } else {
                    model_cosine(&zoo[i], &zoo[j]).unwrap()
                };
                assert_eq!(sm.values[i][j], expect, "({i},{j})");
            }
        }
        let c = model_cosine(&m, &zoo[2]).unwrap();
        assert_eq!(sm.values[0][2], c);
        assert_eq!(sm.values[1][2], c);
        assert_eq!(sm.values[0][1], 1.0);
    }

    fn matrix_from(vals: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix {
            n: vals.len(),
            values: vals.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn paper_similarities_cluster_chat_with_vicuna() {
        // chat-vicuna 0.9982, chat-code 0.5351 at threshold 0.95.
        let m = matrix_from(&[
            &[1.0, 0.9982, 0.5351],
            &[0.9982, 1.0, 0.52],
            &[0.5351, 0.52, 1.0],
        ]);
        let report = cluster_zoo(&m, 0.95).unwrap();
        assert_eq!(report.clusters, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn threshold_one_with_distinct_models_is_all_singletons() {
        let m = matrix_from(&[
            &[1.0, 0.99, 0.98],
            &[0.99, 1.0, 0.97],
            &[0.98, 0.97, 1.0],
        ]);
        let report = cluster_zoo(&m, 1.0).unwrap();
        assert_eq!(report.clusters.len(), 3);
    }

    #[test]
    fn reported_clusters_satisfy_min_pairwise_invariant() {
        let m = matrix_from(&[
            &[1.0, 0.97, 0.96, 0.10],
            &[0.97, 1.0, 0.99, 0.12],
            &[0.96, 0.99, 1.0, 0.11],
            &[0.10, 0.12, 0.11, 1.0],
        ]);
        let report = cluster_zoo(&m, 0.95).unwrap();
        assert_eq!(report.clusters, vec![vec![0, 1, 2], vec![3]]);
        for (c, &min_sim) in report.clusters.iter().zip(&report.min_intra_sim) {
            if c.len() >= 2 {
                assert!(min_sim >= 0.95);
            }
        }
        assert_eq!(report.min_intra_sim[0], 0.96);
    }

    #[test]
    fn complete_linkage_respects_weakest_pair() {
        // 0-1 and 1-2 similar, but 0-2 below threshold: {0,1,2} is not a
        // legal cluster even though a single-linkage chain exists.
        let m = matrix_from(&[
            &[1.0, 0.98, 0.90],
            &[0.98, 1.0, 0.97],
            &[0.90, 0.97, 1.0],
        ]);
        let report = cluster_zoo(&m, 0.95).unwrap();
        assert_eq!(report.clusters, vec![vec![0, 1], vec![2]]);
    }
}
