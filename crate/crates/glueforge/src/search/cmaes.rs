//! Covariance matrix adaptation evolution strategy, (μ/μ_w, λ) flavor with
//! cumulative step-size adaptation and rank-one plus rank-μ covariance
//! updates, canonical default constants throughout.
//!
//! The optimizer is a minimizer over a box; sampled points are clipped to
//! the box before evaluation, selection and adaptation use the clipped
//! points, and the budget is counted in objective evaluations. Runs are
//! deterministic for a fixed seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{GlueError, Result};

#[derive(Debug, Clone)]
pub struct CmaesOptions {
    pub dim: usize,
    /// Maximum number of objective evaluations.
    pub budget: usize,
    pub seed: u64,
    /// Starting mean; drawn uniformly inside the box when absent.
    pub init_mean: Option<Vec<f64>>,
    pub sigma0: f64,
    /// Per-coordinate `[lo, hi]` box; defaults to `[0, 1]` everywhere.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl CmaesOptions {
    pub fn new(dim: usize, budget: usize, seed: u64) -> Self {
        CmaesOptions {
            dim,
            budget,
            seed,
            init_mean: None,
            sigma0: 0.3,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesTracePoint {
    pub trial: usize,
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct CmaesOutcome {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<CmaesTracePoint>,
    pub evals_used: usize,
}

pub fn cmaes_minimize(
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
    opts: &CmaesOptions,
) -> Result<CmaesOutcome> {
    let n = opts.dim;
    if n == 0 {
        return Err(GlueError::InvalidArg("cmaes dim must be >= 1".into()));
    }
    if opts.budget == 0 {
        return Err(GlueError::InvalidArg("cmaes budget must be >= 1".into()));
    }
    let bounds = match &opts.bounds {
        Some(b) => {
            if b.len() != n || b.iter().any(|&(lo, hi)| lo > hi || !lo.is_finite() || !hi.is_finite()) {
                return Err(GlueError::InvalidArg("invalid bounds".into()));
            }
            b.clone()
        }
        None => vec![(0.0, 1.0); n],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut mean = DVector::from_iterator(
        n,
        match &opts.init_mean {
            Some(m) => {
                if m.len() != n {
                    return Err(GlueError::InvalidArg("init mean dimension mismatch".into()));
                }
                m.iter()
                    .zip(&bounds)
                    .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
                    .collect::<Vec<f64>>()
            }
            None => bounds
                .iter()
                .map(|&(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
                .collect::<Vec<f64>>(),
        },
    );

    // Strategy parameters (Hansen's defaults).
    let lambda = 4 + (3.0 * (n as f64).ln()).floor() as usize;
    let mu = lambda / 2;
    let mut weights: Vec<f64> = (1..=mu)
        .map(|i| ((mu as f64) + 0.5).ln() - (i as f64).ln())
        .collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let nf = n as f64;
    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1)
        .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut sigma = opts.sigma0;
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut p_sigma = DVector::<f64>::zeros(n);
    let mut p_c = DVector::<f64>::zeros(n);
    let mut generation = 0usize;

    let mut trace: Vec<CmaesTracePoint> = Vec::with_capacity(opts.budget);
    let mut best_point = vec![0.0; n];
    let mut best_value = f64::INFINITY;
    let mut evals = 0usize;

    while evals < opts.budget {
        // Eigendecomposition C = B D² Bᵀ, sorted for determinism.
        let eig = cov.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let mut b_mat = DMatrix::<f64>::zeros(n, n);
        let mut d_diag = DVector::<f64>::zeros(n);
        for (col, &src) in order.iter().enumerate() {
            b_mat.set_column(col, &eig.eigenvectors.column(src));
            d_diag[col] = eig.eigenvalues[src].max(1e-20).sqrt();
        }

        let to_eval = lambda.min(opts.budget - evals);
        let mut population: Vec<(DVector<f64>, f64)> = Vec::with_capacity(to_eval);
        for _ in 0..to_eval {
            let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let y = &b_mat * z.component_mul(&d_diag);
            let mut x = &mean + sigma * y;
            for i in 0..n {
                x[i] = x[i].clamp(bounds[i].0, bounds[i].1);
            }
            let value = objective(x.as_slice())?;
            evals += 1;
            if !value.is_finite() {
                return Err(GlueError::NonFinite {
                    trial: evals,
                    detail: format!("objective returned {value}"),
                });
            }
            trace.push(CmaesTracePoint {
                trial: evals,
                point: x.as_slice().to_vec(),
                value,
            });
            if value < best_value {
                best_value = value;
                best_point = x.as_slice().to_vec();
            }
            population.push((x, value));
        }

        // A truncated final generation cannot drive a full update.
        if population.len() < lambda {
            break;
        }
        generation += 1;

        let mut idx: Vec<usize> = (0..lambda).collect();
        idx.sort_by(|&a, &b| {
            population[a]
                .1
                .partial_cmp(&population[b].1)
                .unwrap()
                .then(a.cmp(&b))
        });

        let old_mean = mean.clone();
        let mut new_mean = DVector::<f64>::zeros(n);
        for (w, &i) in weights.iter().zip(&idx) {
            new_mean += *w * &population[i].0;
        }
        mean = new_mean;
        let mean_shift = (&mean - &old_mean) / sigma;

        // C^(-1/2) (m_new - m_old) / sigma for the step-size path.
        let mut c_inv_shift = DVector::<f64>::zeros(n);
        {
            let bt_shift = b_mat.transpose() * &mean_shift;
            for i in 0..n {
                c_inv_shift[i] = bt_shift[i] / d_diag[i];
            }
            c_inv_shift = &b_mat * c_inv_shift;
        }
        p_sigma = (1.0 - c_sigma) * &p_sigma
            + (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt() * c_inv_shift;

        let ps_norm = p_sigma.norm();
        let denom = (1.0 - (1.0 - c_sigma).powi(2 * generation as i32)).sqrt();
        let h_sigma = if ps_norm / denom < (1.4 + 2.0 / (nf + 1.0)) * chi_n {
            1.0
        } else {
            0.0
        };

        p_c = (1.0 - c_c) * &p_c
            + h_sigma * (c_c * (2.0 - c_c) * mu_eff).sqrt() * &mean_shift;

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, &i) in weights.iter().zip(&idx) {
            let y = (&population[i].0 - &old_mean) / sigma;
            rank_mu += *w * &y * y.transpose();
        }
        let delta_h = (1.0 - h_sigma) * c_c * (2.0 - c_c);
        cov = (1.0 - c_1 - c_mu) * &cov
            + c_1 * (&p_c * p_c.transpose() + delta_h * &cov)
            + c_mu * rank_mu;
        // Keep C numerically symmetric.
        cov = (&cov + cov.transpose()) * 0.5;

        sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();
    }

    Ok(CmaesOutcome {
        best_point,
        best_value,
        trace,
        evals_used: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_dim5_reaches_target() {
        let sphere = |x: &[f64]| Ok(x.iter().map(|&v| (v - 0.5) * (v - 0.5)).sum::<f64>());
        let out = cmaes_minimize(sphere, &CmaesOptions::new(5, 2000, 42)).unwrap();
        assert!(out.best_value < 1e-6, "best {}", out.best_value);
        assert!(out.evals_used <= 2000);
    }

    #[test]
    fn dim1_quadratic_converges_fast() {
        let f = |x: &[f64]| Ok((x[0] - 0.37) * (x[0] - 0.37));
        let out = cmaes_minimize(f, &CmaesOptions::new(1, 500, 7)).unwrap();
        assert!((out.best_point[0] - 0.37).abs() < 0.01, "{:?}", out.best_point);
    }

    #[test]
    fn same_seed_gives_identical_trace() {
        let f = |x: &[f64]| Ok(x.iter().map(|&v| (v - 0.3) * (v - 0.3)).sum::<f64>());
        let a = cmaes_minimize(f, &CmaesOptions::new(3, 300, 11)).unwrap();
        let b = cmaes_minimize(f, &CmaesOptions::new(3, 300, 11)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best_point, b.best_point);
    }

    #[test]
    fn budget_one_returns_single_sample() {
        let f = |x: &[f64]| Ok(x[0]);
        let out = cmaes_minimize(f, &CmaesOptions::new(2, 1, 5)).unwrap();
        assert_eq!(out.evals_used, 1);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn samples_never_leave_the_box() {
        let f = |x: &[f64]| Ok(x.iter().map(|&v| v * v).sum::<f64>());
        let opts = CmaesOptions {
            bounds: Some(vec![(0.2, 0.4), (0.0, 1.0), (0.5, 0.5)]),
            ..CmaesOptions::new(3, 400, 3)
        };
        let out = cmaes_minimize(f, &opts).unwrap();
        for p in &out.trace {
            assert!((0.2..=0.4).contains(&p.point[0]));
            assert!((0.0..=1.0).contains(&p.point[1]));
            assert_eq!(p.point[2], 0.5);
        }
    }

    #[test]
    fn non_finite_objective_reports_trial() {
        let mut calls = 0usize;
        let f = move |_: &[f64]| {
            calls += 1;
            if calls == 3 {
                Ok(f64::NAN)
            } else {
                Ok(1.0)
            }
        };
        let err = cmaes_minimize(f, &CmaesOptions::new(2, 50, 0)).unwrap_err();
        match err {
            GlueError::NonFinite { trial, .. } => assert_eq!(trial, 3),
            other => panic!("unexpected error {other}"),
        }
    }
}
