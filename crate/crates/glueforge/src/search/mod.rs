//! Model selection and coefficient search: grid search, the three greedy
//! heuristics, and CMA-ES evolutionary optimization with warm starting.

pub mod cmaes;
pub mod evolutionary;

use serde::{Deserialize, Serialize};

use crate::arch::ArchDescriptor;
use crate::error::{GlueError, Result};
use crate::merge::{linear_merge, MergeMethod, MergeRecipe};
use crate::similarity::model_cosine;
use crate::store::TensorStore;

pub use cmaes::{cmaes_minimize, CmaesOptions, CmaesOutcome, CmaesTracePoint};
pub use evolutionary::{evolutionary_merge, search_dimension, warm_start_refine, EvoOptions};

/// The default coefficient grid searched when blending a candidate into the
/// running merge.
pub const COEFFICIENT_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// A scalar, higher-is-better score for a candidate model. Stands in for
/// proxy-dataset accuracy.
pub trait FitnessEvaluator {
    fn id(&self) -> &str;
    fn deterministic(&self) -> bool;
    fn evaluate(&self, store: &TensorStore, desc: &ArchDescriptor) -> Result<f64>;
}

/// Closure-backed evaluator, mostly for tests and analytic fitness specs.
pub struct FnEvaluator<F: Fn(&TensorStore, &ArchDescriptor) -> Result<f64>> {
    pub id: String,
    pub f: F,
}

impl<F: Fn(&TensorStore, &ArchDescriptor) -> Result<f64>> FnEvaluator<F> {
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnEvaluator { id: id.into(), f }
    }
}

impl<F: Fn(&TensorStore, &ArchDescriptor) -> Result<f64>> FitnessEvaluator for FnEvaluator<F> {
    fn id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, store: &TensorStore, desc: &ArchDescriptor) -> Result<f64> {
        (self.f)(store, desc)
    }
}

/// One evaluator call in a search trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub trial: usize,
    pub candidate: String,
    pub fitness: f64,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<f64>,
    /// Full parameter vector for evolutionary trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
}

/// Outcome of one selection/search run.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub selected_ids: Vec<String>,
    pub recipe: MergeRecipe,
    pub merged: TensorStore,
    pub fitness: f64,
    pub trace: Vec<TraceEntry>,
    pub trials_used: usize,
}

/// Serializable view of a [`SearchResult`]; the merged store is persisted
/// as a checkpoint beside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResultRecord {
    pub selected_ids: Vec<String>,
    pub recipe: MergeRecipe,
    pub fitness: f64,
    pub trace: Vec<TraceEntry>,
    pub trials_used: usize,
}

impl SearchResult {
    pub fn record(&self) -> SearchResultRecord {
        SearchResultRecord {
            selected_ids: self.selected_ids.clone(),
            recipe: self.recipe.clone(),
            fitness: self.fitness,
            trace: self.trace.clone(),
            trials_used: self.trials_used,
        }
    }
}

/// Shared bookkeeping for the greedy strategies.
struct GreedyState<'a> {
    evaluator: &'a dyn FitnessEvaluator,
    desc: &'a ArchDescriptor,
    trace: Vec<TraceEntry>,
    trials: usize,
}

impl<'a> GreedyState<'a> {
    fn eval(
        &mut self,
        store: &TensorStore,
        candidate: impl Into<String>,
        coefficient: Option<f64>,
    ) -> Result<f64> {
        let fitness = self.evaluator.evaluate(store, self.desc)?;
        self.trials += 1;
        self.trace.push(TraceEntry {
            trial: self.trials,
            candidate: candidate.into(),
            fitness,
            accepted: false,
            coefficient,
        });
        Ok(fitness)
    }

    fn mark_last_accepted(&mut self) {
        if let Some(e) = self.trace.last_mut() {
            e.accepted = true;
        }
    }
}

/// Evaluates every zoo member once and returns indices sorted by fitness
/// descending (ties keep the lower original index).
fn rank_by_fitness(
    zoo: &[(String, TensorStore)],
    state: &mut GreedyState<'_>,
) -> Result<Vec<(usize, f64)>> {
    let mut ranked = Vec::with_capacity(zoo.len());
    for (i, (id, store)) in zoo.iter().enumerate() {
        let f = state.eval(store, format!("single:{id}"), None)?;
        ranked.push((i, f));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Grid coefficient search between the running merge and one candidate.
///
/// Evaluates `(1−c)·current + c·candidate` for every grid point plus the
/// implicit `c = 0` baseline (keep the current model). Returns the argmax
/// with ties broken toward smaller `c`, so a candidate is accepted only
/// when some blend strictly beats the baseline.
pub fn grid_coefficient_search(
    current: &TensorStore,
    candidate: &TensorStore,
    desc: &ArchDescriptor,
    grid: &[f64],
    evaluator: &dyn FitnessEvaluator,
    baseline_fitness: Option<f64>,
) -> Result<(f64, f64)> {
    if grid.is_empty() || grid.iter().any(|c| !(0.0 < *c && *c < 1.0)) {
        return Err(GlueError::InvalidArg(
            "grid must be non-empty with values in (0, 1)".into(),
        ));
    }
    let baseline = match baseline_fitness {
        Some(f) => f,
        None => evaluator.evaluate(current, desc)?,
    };
    let mut best = (0.0f64, baseline);
    for &c in grid {
        let blend = linear_merge(&[current, candidate], &[(1.0 - c) as f32, c as f32])?;
        let f = evaluator.evaluate(&blend, desc)?;
        if f > best.1 {
            best = (c, f);
        }
    }
    Ok(best)
}

fn grid_round(
    state: &mut GreedyState<'_>,
    merged: &TensorStore,
    merged_fitness: f64,
    candidate: &TensorStore,
    candidate_id: &str,
    grid: &[f64],
) -> Result<(f64, f64)> {
    let mut best = (0.0f64, merged_fitness);
    for &c in grid {
        let blend = linear_merge(&[merged, candidate], &[(1.0 - c) as f32, c as f32])?;
        let f = state.eval(&blend, format!("blend:{candidate_id}"), Some(c))?;
        if f > best.1 {
            best = (c, f);
        }
    }
    Ok(best)
}

/// Greedy averaging: seed with the fittest model, then, in fitness order,
/// accept each candidate iff the equal-coefficient average of the enlarged
/// selection scores at least as well as the current merge.
pub fn heuristic_average(
    zoo: &[(String, TensorStore)],
    desc: &ArchDescriptor,
    evaluator: &dyn FitnessEvaluator,
) -> Result<SearchResult> {
    if zoo.is_empty() {
        return Err(GlueError::InvalidArg("empty zoo".into()));
    }
    let mut state = GreedyState {
        evaluator,
        desc,
        trace: Vec::new(),
        trials: 0,
    };
    let ranked = rank_by_fitness(zoo, &mut state)?;

    let mut selected = vec![ranked[0].0];
    let mut merged = zoo[ranked[0].0].1.clone();
    let mut fitness = ranked[0].1;
    state.trace[ranked[0].0].accepted = true;

    for &(idx, _) in &ranked[1..] {
        let tentative_sel: Vec<usize> = selected.iter().copied().chain([idx]).collect();
        let stores: Vec<&TensorStore> = tentative_sel.iter().map(|&i| &zoo[i].1).collect();
        let coeff = 1.0 / stores.len() as f32;
        let tentative = linear_merge(&stores, &vec![coeff; stores.len()])?;
        let f = state.eval(
            &tentative,
            format!("average+{}", zoo[idx].0),
            Some(coeff as f64),
        )?;
        if f >= fitness {
            selected = tentative_sel;
            merged = tentative;
            fitness = f;
            state.mark_last_accepted();
        }
    }

    finish_linear_result(zoo, desc, evaluator, selected.clone(), {
        let c = 1.0 / selected.len() as f32;
        vec![c; selected.len()]
    }, merged, fitness, state)
}

/// Greedy pairwise blending: like [`heuristic_average`] but each round runs
/// a grid coefficient search between the running merge and the candidate;
/// the candidate joins with weight `best_c` (rejected when `best_c` = 0).
pub fn heuristic_coefficient(
    zoo: &[(String, TensorStore)],
    desc: &ArchDescriptor,
    evaluator: &dyn FitnessEvaluator,
) -> Result<SearchResult> {
    if zoo.is_empty() {
        return Err(GlueError::InvalidArg("empty zoo".into()));
    }
    let mut state = GreedyState {
        evaluator,
        desc,
        trace: Vec::new(),
        trials: 0,
    };
    let ranked = rank_by_fitness(zoo, &mut state)?;

    let seed_idx = ranked[0].0;
    state.trace[seed_idx].accepted = true;
    let mut merged = zoo[seed_idx].1.clone();
    let mut fitness = ranked[0].1;
    // Per-model weight of everything blended so far; updated multiplicatively.
    let mut flat: Vec<(usize, f64)> = vec![(seed_idx, 1.0)];

    for &(idx, _) in &ranked[1..] {
        let (best_c, best_f) = grid_round(
            &mut state,
            &merged,
            fitness,
            &zoo[idx].1,
            &zoo[idx].0,
            &COEFFICIENT_GRID,
        )?;
        if best_c > 0.0 {
            merged = linear_merge(
                &[&merged, &zoo[idx].1],
                &[(1.0 - best_c) as f32, best_c as f32],
            )?;
            fitness = best_f;
            for w in flat.iter_mut() {
                w.1 *= 1.0 - best_c;
            }
            flat.push((idx, best_c));
            // Mark the winning grid entry.
            if let Some(e) = state
                .trace
                .iter_mut()
                .rev()
                .find(|e| e.coefficient == Some(best_c))
            {
                e.accepted = true;
            }
        }
    }

    let selected: Vec<usize> = flat.iter().map(|&(i, _)| i).collect();
    let coeffs: Vec<f32> = flat.iter().map(|&(_, w)| w as f32).collect();
    finish_linear_result(zoo, desc, evaluator, selected, coeffs, merged, fitness, state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityOrder {
    Highest,
    Lowest,
}

/// Greedy blending in similarity order: each round picks from the remaining
/// pool the model most (or least) weight-cosine-similar to the current
/// merge, grid-searches a blend coefficient, and removes the candidate from
/// the pool whether or not it was accepted.
pub fn heuristic_similarity(
    zoo: &[(String, TensorStore)],
    desc: &ArchDescriptor,
    evaluator: &dyn FitnessEvaluator,
    order: SimilarityOrder,
) -> Result<SearchResult> {
    if zoo.is_empty() {
        return Err(GlueError::InvalidArg("empty zoo".into()));
    }
    let mut state = GreedyState {
        evaluator,
        desc,
        trace: Vec::new(),
        trials: 0,
    };
    let ranked = rank_by_fitness(zoo, &mut state)?;

    let seed_idx = ranked[0].0;
    state.trace[seed_idx].accepted = true;
    let mut merged = zoo[seed_idx].1.clone();
    let mut fitness = ranked[0].1;
    let mut flat: Vec<(usize, f64)> = vec![(seed_idx, 1.0)];
    let mut remaining: Vec<usize> = (0..zoo.len()).filter(|&i| i != seed_idx).collect();

    while !remaining.is_empty() {
        // Similarity is recomputed against the updated merge each round.
        let mut pick = 0usize;
        let mut pick_sim = match order {
            SimilarityOrder::Highest => f64::NEG_INFINITY,
            SimilarityOrder::Lowest => f64::INFINITY,
        };
        for (slot, &idx) in remaining.iter().enumerate() {
            let sim = model_cosine(&merged, &zoo[idx].1)?;
            let better = match order {
                SimilarityOrder::Highest => sim > pick_sim,
                SimilarityOrder::Lowest => sim < pick_sim,
            };
            if better {
                pick = slot;
                pick_sim = sim;
            }
        }
        let idx = remaining.remove(pick);

        let (best_c, best_f) = grid_round(
            &mut state,
            &merged,
            fitness,
            &zoo[idx].1,
            &zoo[idx].0,
            &COEFFICIENT_GRID,
        )?;
        if best_c > 0.0 {
            merged = linear_merge(
                &[&merged, &zoo[idx].1],
                &[(1.0 - best_c) as f32, best_c as f32],
            )?;
            fitness = best_f;
            for w in flat.iter_mut() {
                w.1 *= 1.0 - best_c;
            }
            flat.push((idx, best_c));
            if let Some(e) = state
                .trace
                .iter_mut()
                .rev()
                .find(|e| e.coefficient == Some(best_c))
            {
                e.accepted = true;
            }
        }
    }

    let selected: Vec<usize> = flat.iter().map(|&(i, _)| i).collect();
    let coeffs: Vec<f32> = flat.iter().map(|&(_, w)| w as f32).collect();
    finish_linear_result(zoo, desc, evaluator, selected, coeffs, merged, fitness, state)
}

/// Packages a greedy trajectory into a [`SearchResult`]. The final store is
/// recomputed from the flat per-model coefficients with one `apply_recipe`
/// pass so that re-running the stored recipe reproduces it bit-exactly.
#[allow(clippy::too_many_arguments)]
fn finish_linear_result(
    zoo: &[(String, TensorStore)],
    desc: &ArchDescriptor,
    evaluator: &dyn FitnessEvaluator,
    selected: Vec<usize>,
    coeffs: Vec<f32>,
    trajectory_merged: TensorStore,
    trajectory_fitness: f64,
    state: GreedyState<'_>,
) -> Result<SearchResult> {
    let recipe = MergeRecipe::flat(MergeMethod::Linear, desc.num_layers, &coeffs);
    let stores: Vec<&TensorStore> = selected.iter().map(|&i| &zoo[i].1).collect();
    let merged = crate::merge::apply_recipe(&stores, desc, None, &recipe)?;
    // The one-shot result can differ from the iterative blend by float
    // rounding; keep the reported fitness re-evaluable against the store
    // we actually return.
    let mut state = state;
    let fitness = if merged == trajectory_merged {
        trajectory_fitness
    } else {
        state.eval(&merged, "final:recipe", None)?
    };
    Ok(SearchResult {
        selected_ids: selected.iter().map(|&i| zoo[i].0.clone()).collect(),
        recipe,
        merged,
        fitness,
        trace: state.trace,
        trials_used: state.trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{build_toy_model, ToyConfig};

    /// Fitness = −‖w − target‖² over all tensors.
    pub(crate) fn neg_sq_dist(target: TensorStore) -> impl FitnessEvaluator {
        FnEvaluator::new("neg-dist", move |store: &TensorStore, _: &ArchDescriptor| {
            let mut d = 0.0f64;
            for (name, t) in store.iter() {
                let tt = target
                    .get(name)
                    .ok_or_else(|| GlueError::Eval(format!("target lacks {name}")))?;
                for (&a, &b) in t.data().iter().zip(tt.data()) {
                    d += (a as f64 - b as f64).powi(2);
                }
            }
            Ok(-d)
        })
    }

    fn toy_zoo(n: usize) -> (Vec<(String, TensorStore)>, ArchDescriptor) {
        let cfg = ToyConfig::small_test();
        let mut zoo = Vec::new();
        let mut desc = None;
        for i in 0..n {
            let (s, d) = build_toy_model(&cfg, 100 + i as u64).unwrap();
            desc.get_or_insert(d);
            zoo.push((format!("m{i}"), s));
        }
        (zoo, desc.unwrap())
    }

    #[test]
    fn grid_search_finds_quadratic_optimum() {
        let (zoo, desc) = toy_zoo(2);
        let target = linear_merge(&[&zoo[0].1, &zoo[1].1], &[0.7, 0.3]).unwrap();
        let ev = neg_sq_dist(target);
        let (c, _) = grid_coefficient_search(
            &zoo[0].1,
            &zoo[1].1,
            &desc,
            &COEFFICIENT_GRID,
            &ev,
            None,
        )
        .unwrap();
        assert_eq!(c, 0.3);
    }

    #[test]
    fn grid_search_rejects_when_baseline_wins() {
        let (zoo, desc) = toy_zoo(2);
        let target = zoo[0].1.clone();
        let ev = neg_sq_dist(target);
        let (c, f) = grid_coefficient_search(
            &zoo[0].1,
            &zoo[1].1,
            &desc,
            &COEFFICIENT_GRID,
            &ev,
            None,
        )
        .unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn grid_search_constant_fitness_ties_to_baseline() {
        let (zoo, desc) = toy_zoo(2);
        let ev = FnEvaluator::new("const", |_: &TensorStore, _: &ArchDescriptor| Ok(1.0));
        let (c, _) =
            grid_coefficient_search(&zoo[0].1, &zoo[1].1, &desc, &COEFFICIENT_GRID, &ev, None)
                .unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn heuristic_average_single_model() {
        let (zoo, desc) = toy_zoo(1);
        let target = zoo[0].1.clone();
        let ev = neg_sq_dist(target);
        let r = heuristic_average(&zoo, &desc, &ev).unwrap();
        assert_eq!(r.selected_ids, ["m0"]);
        assert_eq!(r.fitness, 0.0);
    }

    #[test]
    fn heuristic_average_identical_models_both_accepted() {
        let cfg = ToyConfig::small_test();
        let (s, desc) = build_toy_model(&cfg, 5).unwrap();
        let zoo = vec![("a".to_string(), s.clone()), ("b".to_string(), s.clone())];
        let ev = neg_sq_dist(s);
        let r = heuristic_average(&zoo, &desc, &ev).unwrap();
        assert_eq!(r.selected_ids.len(), 2);
        assert_eq!(r.fitness, 0.0);
    }

    #[test]
    fn heuristic_coefficient_recovers_planted_blend() {
        let (zoo, desc) = toy_zoo(2);
        let target = linear_merge(&[&zoo[0].1, &zoo[1].1], &[0.6, 0.4]).unwrap();
        // Make m0 the fitter single so it seeds the merge.
        let ev = neg_sq_dist(target);
        let f0 = ev.evaluate(&zoo[0].1, &desc).unwrap();
        let f1 = ev.evaluate(&zoo[1].1, &desc).unwrap();
        assert!(f0 > f1, "fixture assumption: {f0} vs {f1}");
        let r = heuristic_coefficient(&zoo, &desc, &ev).unwrap();
        assert_eq!(r.selected_ids, ["m0", "m1"]);
        assert_eq!(r.recipe.coefficients[1][0], 0.4);
        assert!(r.fitness >= f0.max(f1));
    }

    #[test]
    fn heuristic_rejects_harmful_candidate() {
        let (zoo, desc) = toy_zoo(2);
        let target = zoo[0].1.clone();
        let ev = neg_sq_dist(target);
        let r = heuristic_coefficient(&zoo, &desc, &ev).unwrap();
        assert_eq!(r.selected_ids, ["m0"]);
        for (name, t) in r.merged.iter() {
            assert_eq!(t.data(), zoo[0].1.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn similarity_orders_visit_differently() {
        let (mut zoo, desc) = toy_zoo(3);
        // Make m2 nearly a copy of m0 so similarity ordering is decisive.
        zoo[2].1 = crate::toy::perturb_relative(&zoo[0].1, 0.05, 0.01, 9);
        let target = linear_merge(
            &[&zoo[0].1, &zoo[1].1, &zoo[2].1],
            &[0.4, 0.3, 0.3],
        )
        .unwrap();
        let ev = neg_sq_dist(target);
        let hi = heuristic_similarity(&zoo, &desc, &ev, SimilarityOrder::Highest).unwrap();
        let lo = heuristic_similarity(&zoo, &desc, &ev, SimilarityOrder::Lowest).unwrap();
        let visit = |r: &SearchResult| -> Vec<String> {
            r.trace
                .iter()
                .filter(|e| e.candidate.starts_with("blend:"))
                .map(|e| e.candidate.clone())
                .collect()
        };
        assert_ne!(visit(&hi)[0], visit(&lo)[0]);
        let singles: Vec<f64> = (0..3)
            .map(|i| ev.evaluate(&zoo[i].1, &desc).unwrap())
            .collect();
        let best_single = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi.fitness >= best_single);
        assert!(lo.fitness >= best_single);
    }

    #[test]
    fn accepted_trace_fitness_is_non_decreasing() {
        let (zoo, desc) = toy_zoo(4);
        let target = linear_merge(
            &[&zoo[0].1, &zoo[1].1, &zoo[2].1, &zoo[3].1],
            &[0.4, 0.3, 0.2, 0.1],
        )
        .unwrap();
        let ev = neg_sq_dist(target);
        for r in [
            heuristic_average(&zoo, &desc, &ev).unwrap(),
            heuristic_coefficient(&zoo, &desc, &ev).unwrap(),
            heuristic_similarity(&zoo, &desc, &ev, SimilarityOrder::Highest).unwrap(),
        ] {
            let accepted: Vec<f64> = r
                .trace
                .iter()
                .filter(|e| e.accepted && !e.candidate.starts_with("single:"))
                .map(|e| e.fitness)
                .collect();
            for w in accepted.windows(2) {
                assert!(w[1] >= w[0], "{:?}", accepted);
            }
            assert!(r.trials_used == r.trace.len());
        }
    }
}
