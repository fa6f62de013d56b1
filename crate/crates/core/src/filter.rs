//! Recursive belief filter over the state grid.
//!
//! A belief `z` at time `t` is the conditional state distribution given the
//! observation/action history. One step factors as
//!
//! * prediction      `zhat(x') = sum_x z(x) p(x'|x,a,mu_t)`,
//! * predictive      `H(y) = sum_x' zhat(x') r(y|x',mu_{t+1})`,
//! * Bayes update    `F(x'|y) = zhat(x') r(y|x',mu_{t+1}) / H(y)`.
//!
//! Timing convention: the transition kernel reads the flow entry at the
//! current time, the observation kernel reads the entry one step ahead (the
//! observation is of the *next* state). All operations are pure.

use crate::error::{Error, Result};
use crate::model::GameModel;
use crate::num;

/// Tolerance for belief weight sums.
pub const BELIEF_TOL: f64 = 1e-10;

/// Observation branches with predictive mass at or below this are pruned
/// rather than conditioned on; prevents division by ~0 in the Bayes step.
pub const PRUNE_EPS_DEFAULT: f64 = 1e-12;

/// Conditional state distribution at a time index.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub time: usize,
    pub weights: Vec<f64>,
}

impl Belief {
    pub fn new(time: usize, weights: Vec<f64>) -> Self {
        debug_assert!(num::is_distribution(&weights, BELIEF_TOL));
        Belief { time, weights }
    }

    pub fn dirac(time: usize, size: usize, at: usize) -> Self {
        let mut weights = vec![0.0; size];
        weights[at] = 1.0;
        Belief { time, weights }
    }
}

/// One observation branch out of a belief: the observation, its predictive
/// probability, and the updated belief.
#[derive(Debug, Clone)]
pub struct BeliefChild {
    pub observation: usize,
    pub probability: f64,
    pub belief: Belief,
}

/// All retained observation branches plus the pruned predictive mass.
#[derive(Debug, Clone)]
pub struct BeliefTransition {
    pub children: Vec<BeliefChild>,
    pub pruned_mass: f64,
}

/// Per-step kernel tables for a fixed pair of flow entries. Solvers and
/// simulators precompute these once per depth so the per-belief work is a
/// handful of dense products; the row content is exactly what the model
/// evaluators return, so results are bit-identical to the direct path.
#[derive(Debug, Clone)]
pub struct StageKernel {
    /// transition[a][x] = distribution over next states, at mu_t.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// observation[x'][y], at mu_{t+1}.
    pub observation: Vec<Vec<f64>>,
    /// cost[a][x], at mu_t.
    pub cost: Vec<Vec<f64>>,
}

impl StageKernel {
    pub fn build(model: &GameModel, mu_t: &[f64], mu_next: &[f64]) -> Self {
        let n = model.n_states();
        let transition = (0..model.n_actions())
            .map(|a| (0..n).map(|x| model.transition(x, a, mu_t)).collect())
            .collect();
        let observation = (0..n).map(|x| model.observation(x, mu_next)).collect();
        let cost = (0..model.n_actions())
            .map(|a| (0..n).map(|x| model.cost(x, a, mu_t)).collect())
            .collect();
        StageKernel { transition, observation, cost }
    }
}

/// `zhat = z P` for precomputed transition rows.
pub fn predict_weights(z: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows[0].len();
    let mut out = vec![0.0; n];
    for (x, &w) in z.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (xp, &v) in rows[x].iter().enumerate() {
            out[xp] += w * v;
        }
    }
    out
}

/// Predicted belief after action `a`: `zhat(x') = sum_x z(x) p(x'|x,a,mu_t)`.
pub fn predict(model: &GameModel, z: &Belief, a: usize, mu_t: &[f64]) -> Belief {
    let rows: Vec<Vec<f64>> =
        (0..model.n_states()).map(|x| model.transition(x, a, mu_t)).collect();
    Belief { time: z.time + 1, weights: predict_weights(&z.weights, &rows) }
}

/// Predictive observation distribution `H(y) = sum_x' zhat(x') r(y|x')` from
/// precomputed observation rows.
pub fn predictive_weights(zhat: &[f64], obs_rows: &[Vec<f64>]) -> Vec<f64> {
    let n_y = obs_rows[0].len();
    let mut h = vec![0.0; n_y];
    for (xp, &w) in zhat.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (y, &v) in obs_rows[xp].iter().enumerate() {
            h[y] += w * v;
        }
    }
    h
}

/// Distribution of the next observation given belief `z` and action `a`.
pub fn observation_predictive(
    model: &GameModel,
    z: &Belief,
    a: usize,
    mu_t: &[f64],
    mu_next: &[f64],
) -> Vec<f64> {
    let zhat = predict(model, z, a, mu_t);
    let obs_rows: Vec<Vec<f64>> =
        (0..model.n_states()).map(|x| model.observation(x, mu_next)).collect();
    predictive_weights(&zhat.weights, &obs_rows)
}

/// Bayes update of predicted weights on observation `y`; `h_y` is the
/// precomputed predictive mass of `y`. Renormalizes to absorb float drift.
pub fn bayes_weights(zhat: &[f64], obs_rows: &[Vec<f64>], y: usize, h_y: f64) -> Vec<f64> {
    let mut post: Vec<f64> =
        zhat.iter().enumerate().map(|(xp, &w)| w * obs_rows[xp][y] / h_y).collect();
    num::normalize(&mut post);
    post
}

/// Posterior belief after taking action `a` and observing `y`.
pub fn bayes_update(
    model: &GameModel,
    z: &Belief,
    a: usize,
    y: usize,
    mu_t: &[f64],
    mu_next: &[f64],
) -> Result<Belief> {
    let zhat = predict(model, z, a, mu_t);
    let obs_rows: Vec<Vec<f64>> =
        (0..model.n_states()).map(|x| model.observation(x, mu_next)).collect();
    let h = predictive_weights(&zhat.weights, &obs_rows);
    if h[y] <= PRUNE_EPS_DEFAULT {
        return Err(Error::ZeroProbabilityBranch { time: z.time, observation: y, mass: h[y] });
    }
    Ok(Belief { time: z.time + 1, weights: bayes_weights(&zhat.weights, &obs_rows, y, h[y]) })
}

/// Enumerates the retained observation branches out of `(z, a)`: children
/// carry the Bayes posterior for every observation with predictive mass above
/// `prune_eps`; the dropped mass is recorded.
pub fn belief_kernel(
    model: &GameModel,
    z: &Belief,
    a: usize,
    mu_t: &[f64],
    mu_next: &[f64],
    prune_eps: f64,
) -> BeliefTransition {
    let rows: Vec<Vec<f64>> =
        (0..model.n_states()).map(|x| model.transition(x, a, mu_t)).collect();
    let obs_rows: Vec<Vec<f64>> =
        (0..model.n_states()).map(|x| model.observation(x, mu_next)).collect();
    belief_kernel_with(&z.weights, z.time, &rows, &obs_rows, prune_eps)
}

/// Table-space version of [`belief_kernel`].
pub fn belief_kernel_with(
    z: &[f64],
    time: usize,
    transition_rows: &[Vec<f64>],
    obs_rows: &[Vec<f64>],
    prune_eps: f64,
) -> BeliefTransition {
    let zhat = predict_weights(z, transition_rows);
    let h = predictive_weights(&zhat, obs_rows);
    let mut children = Vec::with_capacity(h.len());
    let mut pruned_mass = 0.0;
    for (y, &hy) in h.iter().enumerate() {
        if hy > prune_eps {
            children.push(BeliefChild {
                observation: y,
                probability: hy,
                belief: Belief { time: time + 1, weights: bayes_weights(&zhat, obs_rows, y, hy) },
            });
        } else {
            pruned_mass += hy;
        }
    }
    BeliefTransition { children, pruned_mass }
}

/// Lifted one-stage cost `sum_x z(x) c(x,a,mu_t)`.
pub fn belief_cost(model: &GameModel, z: &Belief, a: usize, mu_t: &[f64]) -> f64 {
    z.weights
        .iter()
        .enumerate()
        .map(|(x, &w)| if w == 0.0 { 0.0 } else { w * model.cost(x, a, mu_t) })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_tabular, MeanFieldMeasure};

    /// Decoupled 2-state model with the worked example kernels:
    /// transition rows [[0.9,0.1],[0.2,0.8]], observation rows
    /// [[0.7,0.3],[0.4,0.6]].
    fn example_model() -> GameModel {
        let k_rows = [[0.9, 0.1], [0.2, 0.8]];
        let coupling_transition = (0..2)
            .map(|x| vec![(0..2).map(|_| k_rows[x].to_vec()).collect::<Vec<_>>()])
            .collect();
        let coupling_cost = vec![vec![vec![1.0, 1.0]], vec![vec![2.0, 2.0]]];
        let observation_table = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        build_tabular(
            coupling_transition,
            coupling_cost,
            observation_table,
            0.9,
            MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap(),
        )
        .unwrap()
    }

    fn mu() -> Vec<f64> {
        vec![0.5, 0.5]
    }

    #[test]
    fn identity_transition_fixes_belief() {
        let k = vec![
            vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]],
            vec![vec![vec![0.0, 1.0], vec![0.0, 1.0]]],
        ];
        let d = vec![vec![vec![0.0; 2]]; 2];
        let r = vec![vec![0.5, 0.5]; 2];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let z = Belief::new(0, vec![0.3, 0.7]);
        let zhat = predict(&model, &z, 0, &mu());
        assert!(num::l1_distance(&zhat.weights, &z.weights) < 1e-15);
        assert_eq!(zhat.time, 1);
    }

    #[test]
    fn predict_matches_hand_product() {
        let model = example_model();
        let z = Belief::new(0, vec![0.5, 0.5]);
        let zhat = predict(&model, &z, 0, &mu());
        assert!(num::l1_distance(&zhat.weights, &[0.55, 0.45]) < 1e-15);
    }

    #[test]
    fn dirac_belief_propagates_to_kernel_row() {
        let model = example_model();
        let z = Belief::dirac(0, 2, 1);
        let zhat = predict(&model, &z, 0, &mu());
        assert!(num::l1_distance(&zhat.weights, &[0.2, 0.8]) < 1e-15);
    }

    #[test]
    fn predictive_matches_hand_values() {
        let model = example_model();
        let z = Belief::new(0, vec![0.5, 0.5]);
        let h = observation_predictive(&model, &z, 0, &mu(), &mu());
        assert!((h[0] - 0.565).abs() < 1e-15);
        assert!((h[1] - 0.435).abs() < 1e-15);
    }

    #[test]
    fn uninformative_sensor_gives_uniform_predictive() {
        let k = vec![
            vec![vec![vec![0.9, 0.1], vec![0.9, 0.1]]],
            vec![vec![vec![0.2, 0.8], vec![0.2, 0.8]]],
        ];
        let d = vec![vec![vec![0.0; 2]]; 2];
        let r = vec![vec![0.5, 0.5]; 2];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let z = Belief::new(0, vec![0.4, 0.6]);
        let h = observation_predictive(&model, &z, 0, &mu(), &mu());
        assert!((h[0] - 0.5).abs() < 1e-12 && (h[1] - 0.5).abs() < 1e-12);
        // Posterior equals prior predictive for every observation.
        let zhat = predict(&model, &z, 0, &mu());
        for y in 0..2 {
            let f = bayes_update(&model, &z, 0, y, &mu(), &mu()).unwrap();
            assert!(num::l1_distance(&f.weights, &zhat.weights) < 1e-12);
        }
    }

    #[test]
    fn perfect_sensor_gives_dirac_posterior() {
        let k = vec![
            vec![vec![vec![0.9, 0.1], vec![0.9, 0.1]]],
            vec![vec![vec![0.2, 0.8], vec![0.2, 0.8]]],
        ];
        let d = vec![vec![vec![0.0; 2]]; 2];
        let r = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let z = Belief::new(0, vec![0.5, 0.5]);
        // H equals the predicted belief, children are point masses.
        let h = observation_predictive(&model, &z, 0, &mu(), &mu());
        let zhat = predict(&model, &z, 0, &mu());
        assert!(num::l1_distance(&h, &zhat.weights) < 1e-12);
        let kernel = belief_kernel(&model, &z, 0, &mu(), &mu(), PRUNE_EPS_DEFAULT);
        assert_eq!(kernel.children.len(), 2);
        for child in &kernel.children {
            assert!(
                num::l1_distance(
                    &child.belief.weights,
                    &Belief::dirac(1, 2, child.observation).weights
                ) < 1e-12
            );
        }
    }

    #[test]
    fn bayes_update_matches_hand_values() {
        let model = example_model();
        let z = Belief::new(0, vec![0.5, 0.5]);
        let f = bayes_update(&model, &z, 0, 0, &mu(), &mu()).unwrap();
        assert!((f.weights[0] - 0.385 / 0.565).abs() < 1e-14);
        assert!((f.weights[1] - 0.18 / 0.565).abs() < 1e-14);
        assert!((f.weights[0] - 0.681_415_929_203_539_8).abs() < 1e-12);
        assert!((f.weights[1] - 0.318_584_070_796_460_2).abs() < 1e-12);
    }

    #[test]
    fn impossible_observation_is_an_error() {
        let k = vec![
            vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]],
            vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]],
        ];
        let d = vec![vec![vec![0.0; 2]]; 2];
        // State 0 never emits observation 1 and all mass moves to state 0.
        let r = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let z = Belief::new(0, vec![0.5, 0.5]);
        let err = bayes_update(&model, &z, 0, 1, &mu(), &mu()).unwrap_err();
        assert!(matches!(err, Error::ZeroProbabilityBranch { observation: 1, .. }));
    }

    #[test]
    fn kernel_children_match_bayes_and_predictive() {
        let model = example_model();
        let z = Belief::new(0, vec![0.5, 0.5]);
        let kernel = belief_kernel(&model, &z, 0, &mu(), &mu(), PRUNE_EPS_DEFAULT);
        assert_eq!(kernel.children.len(), 2);
        assert!((kernel.children[0].probability - 0.565).abs() < 1e-15);
        assert!((kernel.children[1].probability - 0.435).abs() < 1e-15);
        for child in &kernel.children {
            let f = bayes_update(&model, &z, 0, child.observation, &mu(), &mu()).unwrap();
            assert!(num::l1_distance(&f.weights, &child.belief.weights) < 1e-15);
        }
        assert_eq!(kernel.pruned_mass, 0.0);
    }

    #[test]
    fn single_observation_collapses_to_prediction() {
        let k = vec![
            vec![vec![vec![0.9, 0.1], vec![0.9, 0.1]]],
            vec![vec![vec![0.2, 0.8], vec![0.2, 0.8]]],
        ];
        let d = vec![vec![vec![0.0; 2]]; 2];
        let r = vec![vec![1.0], vec![1.0]];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let z = Belief::new(0, vec![0.5, 0.5]);
        let kernel = belief_kernel(&model, &z, 0, &mu(), &mu(), PRUNE_EPS_DEFAULT);
        assert_eq!(kernel.children.len(), 1);
        assert!((kernel.children[0].probability - 1.0).abs() < 1e-12);
        let zhat = predict(&model, &z, 0, &mu());
        assert!(num::l1_distance(&kernel.children[0].belief.weights, &zhat.weights) < 1e-12);
    }

    #[test]
    fn total_probability_identity() {
        let model = example_model();
        let z = Belief::new(0, vec![0.5, 0.5]);
        let zhat = predict(&model, &z, 0, &mu());
        let kernel = belief_kernel(&model, &z, 0, &mu(), &mu(), PRUNE_EPS_DEFAULT);
        let mut mixed = vec![0.0; 2];
        for child in &kernel.children {
            for (x, w) in child.belief.weights.iter().enumerate() {
                mixed[x] += child.probability * w;
            }
        }
        assert!(num::l1_distance(&mixed, &zhat.weights) < BELIEF_TOL);
    }

    #[test]
    fn belief_cost_is_convex_combination() {
        let model = example_model();
        // Costs per state under action 0 are (1, 2); z = (0.25, 0.75) -> 1.75.
        let z = Belief::new(0, vec![0.25, 0.75]);
        let c = belief_cost(&model, &z, 0, &mu());
        assert!((c - 1.75).abs() < 1e-15);
        assert!((belief_cost(&model, &Belief::dirac(0, 2, 1), 0, &mu()) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_cost_lifts_to_constant() {
        let model = example_model();
        let mut with_unit_cost = model.clone();
        if let crate::model::Kernels::Tabular(tab) = &mut with_unit_cost.kernels {
            tab.coupling_cost = vec![vec![vec![1.0, 1.0]], vec![vec![1.0, 1.0]]];
        }
        let z = Belief::new(0, vec![0.3, 0.7]);
        assert!((belief_cost(&with_unit_cost, &z, 0, &mu()) - 1.0).abs() < 1e-15);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Raw positive weights, normalized into a distribution.
        fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.01f64..1.0, n).prop_map(|mut v| {
                num::normalize(&mut v);
                v
            })
        }

        fn stochastic_rows(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(simplex(cols), rows)
        }

        proptest! {
            #[test]
            fn posterior_stays_on_simplex(
                z in simplex(3),
                rows in stochastic_rows(3, 3),
                obs in stochastic_rows(3, 4),
            ) {
                let kernel = belief_kernel_with(&z, 0, &rows, &obs, PRUNE_EPS_DEFAULT);
                for child in &kernel.children {
                    prop_assert!(num::is_distribution(&child.belief.weights, BELIEF_TOL));
                    prop_assert_eq!(child.belief.time, 1);
                }
                let h_total: f64 = kernel
                    .children
                    .iter()
                    .map(|c| c.probability)
                    .sum::<f64>()
                    + kernel.pruned_mass;
                prop_assert!((h_total - 1.0).abs() < BELIEF_TOL);
            }

            #[test]
            fn mixture_of_posteriors_recovers_prediction(
                z in simplex(3),
                rows in stochastic_rows(3, 3),
                obs in stochastic_rows(3, 4),
            ) {
                let zhat = predict_weights(&z, &rows);
                let kernel = belief_kernel_with(&z, 0, &rows, &obs, PRUNE_EPS_DEFAULT);
                let mut mixed = vec![0.0; 3];
                for child in &kernel.children {
                    for (x, w) in child.belief.weights.iter().enumerate() {
                        mixed[x] += child.probability * w;
                    }
                }
                prop_assert!(num::l1_distance(&mixed, &zhat) < BELIEF_TOL);
            }
        }
    }
}
