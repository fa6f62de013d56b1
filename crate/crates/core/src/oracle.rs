//! Reference computations used to cross-check the production filter, solver,
//! and equilibrium search on small instances.
//!
//! Everything here takes a deliberately different route from the production
//! code: beliefs come from explicit enumeration of state paths, values from
//! recursion over complete observation histories without memoization or
//! quantization, optimal costs from brute force over every deterministic
//! observation-history policy, and Gaussian cell masses from Simpson
//! integration. The one exception is the equilibrium grid search, which calls
//! the production solver for the inner best response (the solver is vetted
//! separately against the enumeration routes) but replaces the fixed-point
//! iteration with a dense scan of candidate flows.
//!
//! Also hosts the random model and flow generators shared by the
//! verification suites; kernels are kept strictly positive so no branch is
//! ever pruned and every observation sequence has positive probability.

use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::PRUNE_EPS_DEFAULT;
use crate::flow::{induced_flow, MeasureFlow};
use crate::model::{build_tabular, GameModel, Grid, MeanFieldMeasure};
use crate::num;
use crate::solver::{solve_pomdp, SolveOptions};

/// Conditional state distribution after a fixed action/observation prefix,
/// together with the joint probability of the observed prefix.
#[derive(Debug, Clone)]
pub struct EnumeratedStep {
    pub belief: Vec<f64>,
    /// Probability of the observation prefix under the action sequence.
    pub mass: f64,
}

/// Exact conditional state distributions along a fixed action/observation
/// sequence, by brute-force enumeration of every state path.
///
/// `steps[s]` is the pair (action taken at time s, observation seen at time
/// s+1). The result has `steps.len() + 1` entries; entry 0 is the initial
/// measure with mass 1, entry t the conditional given the first t
/// observations. Transitions at time s read flow entry s, the observation of
/// the time-(s+1) state reads flow entry s+1.
pub fn enumerate_filter(
    model: &GameModel,
    flow: &MeasureFlow,
    steps: &[(usize, usize)],
) -> Result<Vec<EnumeratedStep>> {
    let len = steps.len();
    flow.require_entries_through(len)?;
    let n = model.n_states();
    let trans: Vec<Vec<Vec<f64>>> = (0..len)
        .map(|s| (0..n).map(|x| model.transition(x, steps[s].0, flow.entry(s))).collect())
        .collect();
    let obs: Vec<Vec<Vec<f64>>> = (0..len)
        .map(|s| (0..n).map(|x| model.observation(x, flow.entry(s + 1))).collect())
        .collect();

    let mut out = Vec::with_capacity(len + 1);
    out.push(EnumeratedStep { belief: model.initial.weights.clone(), mass: 1.0 });
    for t in 1..=len {
        let mut joint = vec![0.0; n];
        let mut path = vec![0usize; t + 1];
        'paths: loop {
            let mut w = model.initial.weights[path[0]];
            for s in 1..=t {
                w *= trans[s - 1][path[s - 1]][path[s]];
                w *= obs[s - 1][path[s]][steps[s - 1].1];
            }
            joint[path[t]] += w;
            let mut k = 0;
            loop {
                path[k] += 1;
                if path[k] < n {
                    break;
                }
                path[k] = 0;
                k += 1;
                if k > t {
                    break 'paths;
                }
            }
        }
        let mass = num::total(&joint);
        let conditional = mass / out[t - 1].mass;
        if conditional <= PRUNE_EPS_DEFAULT {
            return Err(Error::ZeroProbabilityBranch {
                time: t,
                observation: steps[t - 1].1,
                mass: conditional,
            });
        }
        let belief = joint.iter().map(|v| v / mass).collect();
        out.push(EnumeratedStep { belief, mass });
    }
    Ok(out)
}

/// Per-step kernel tables along a flow, precomputed once so the enumeration
/// loops below are pure lookups.
struct StageTables {
    n_states: usize,
    n_obs: usize,
    n_actions: usize,
    horizon: usize,
    beta: f64,
    initial: Vec<f64>,
    /// transition[t][a][x] = row over next states, at flow entry t.
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    /// observation[t][x] = row over observations for the time-(t+1) state,
    /// at flow entry t+1. Index t runs 0..horizon.
    observation: Vec<Vec<Vec<f64>>>,
    /// cost[t][x][a], at flow entry t.
    cost: Vec<Vec<Vec<f64>>>,
}

impl StageTables {
    fn new(model: &GameModel, flow: &MeasureFlow, horizon: usize) -> Result<Self> {
        flow.require_entries_through(horizon + 1)?;
        let n = model.n_states();
        let transition = (0..horizon)
            .map(|t| {
                (0..model.n_actions())
                    .map(|a| (0..n).map(|x| model.transition(x, a, flow.entry(t))).collect())
                    .collect()
            })
            .collect();
        let observation = (0..horizon)
            .map(|t| (0..n).map(|x| model.observation(x, flow.entry(t + 1))).collect())
            .collect();
        let cost = (0..=horizon)
            .map(|t| {
                (0..n)
                    .map(|x| {
                        (0..model.n_actions()).map(|a| model.cost(x, a, flow.entry(t))).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(StageTables {
            n_states: n,
            n_obs: model.n_observations(),
            n_actions: model.n_actions(),
            horizon,
            beta: model.discount,
            initial: model.initial.weights.clone(),
            transition,
            observation,
            cost,
        })
    }
}

/// A deterministic policy on observation histories: `decisions[t][h]` is the
/// action taken at time t after the observation history indexed by `h`, where
/// histories are coded as base-`n_obs` numbers built by appending each new
/// observation as the least significant digit.
#[derive(Debug, Clone)]
pub struct HistoryPolicy {
    pub horizon: usize,
    pub n_obs: usize,
    pub decisions: Vec<Vec<usize>>,
}

impl HistoryPolicy {
    /// The all-zeros policy skeleton with one decision slot per history node.
    pub fn zeros(horizon: usize, n_obs: usize) -> Self {
        let decisions =
            (0..=horizon).map(|t| vec![0usize; n_obs.checked_pow(t as u32).unwrap()]).collect();
        HistoryPolicy { horizon, n_obs, decisions }
    }

    /// Total number of decision slots across all depths.
    pub fn n_nodes(&self) -> usize {
        self.decisions.iter().map(Vec::len).sum()
    }
}

/// Expected discounted cost of a deterministic observation-history policy,
/// by summation over every joint state/observation path. No recursion, no
/// beliefs: the dumbest correct evaluation available.
pub fn evaluate_history_policy(
    model: &GameModel,
    flow: &MeasureFlow,
    policy: &HistoryPolicy,
) -> Result<f64> {
    let tables = StageTables::new(model, flow, policy.horizon)?;
    Ok(evaluate_with_tables(&tables, policy))
}

fn evaluate_with_tables(tables: &StageTables, policy: &HistoryPolicy) -> f64 {
    let t_end = tables.horizon;
    let beta_pow: Vec<f64> = (0..=t_end).map(|t| tables.beta.powi(t as i32)).collect();
    let mut actions = vec![0usize; t_end + 1];
    let mut obs_seq = vec![0usize; t_end];
    let mut state_path = vec![0usize; t_end + 1];
    let mut total = 0.0;
    loop {
        actions[0] = policy.decisions[0][0];
        let mut h = 0usize;
        for s in 0..t_end {
            h = h * tables.n_obs + obs_seq[s];
            actions[s + 1] = policy.decisions[s + 1][h];
        }
        for x in state_path.iter_mut() {
            *x = 0;
        }
        'paths: loop {
            let mut w = tables.initial[state_path[0]];
            for s in 0..t_end {
                w *= tables.transition[s][actions[s]][state_path[s]][state_path[s + 1]];
                w *= tables.observation[s][state_path[s + 1]][obs_seq[s]];
            }
            if w > 0.0 {
                let mut cost = 0.0;
                for (t, &x) in state_path.iter().enumerate() {
                    cost += beta_pow[t] * tables.cost[t][x][actions[t]];
                }
                total += w * cost;
            }
            let mut k = 0;
            loop {
                state_path[k] += 1;
                if state_path[k] < tables.n_states {
                    break;
                }
                state_path[k] = 0;
                k += 1;
                if k > t_end {
                    break 'paths;
                }
            }
        }
        let mut k = 0;
        loop {
            if k == t_end {
                return total;
            }
            obs_seq[k] += 1;
            if obs_seq[k] < tables.n_obs {
                break;
            }
            obs_seq[k] = 0;
            k += 1;
        }
    }
}

/// Minimum expected discounted cost over every deterministic
/// observation-history policy, by exhaustive enumeration. Ties keep the
/// first policy in enumeration order (all-zeros first, decisions incremented
/// from depth 0 upward), so the result is deterministic.
pub fn exhaustive_policy_minimum(
    model: &GameModel,
    flow: &MeasureFlow,
    horizon: usize,
) -> Result<(f64, HistoryPolicy)> {
    let tables = StageTables::new(model, flow, horizon)?;
    let mut policy = HistoryPolicy::zeros(horizon, tables.n_obs);
    let n_nodes = policy.n_nodes();
    let count = (tables.n_actions as u128).checked_pow(n_nodes as u32);
    match count {
        Some(c) if c <= 1 << 22 => {}
        _ => {
            return Err(Error::config(format!(
                "exhaustive policy enumeration over {n_nodes} decision slots is too large"
            )))
        }
    }
    let mut best_value = f64::INFINITY;
    let mut best = policy.clone();
    loop {
        let value = evaluate_with_tables(&tables, &policy);
        if value < best_value {
            best_value = value;
            best = policy.clone();
        }
        let mut t = 0;
        let mut h = 0;
        loop {
            policy.decisions[t][h] += 1;
            if policy.decisions[t][h] < tables.n_actions {
                break;
            }
            policy.decisions[t][h] = 0;
            h += 1;
            if h == policy.decisions[t].len() {
                h = 0;
                t += 1;
                if t > horizon {
                    return Ok((best_value, best));
                }
            }
        }
    }
}

/// Optimal expected discounted cost by recursion over complete observation
/// histories, with no belief memoization or quantization. `terminal` is the
/// value charged (discounted once more) past the final stage.
pub fn optimal_history_value(
    model: &GameModel,
    flow: &MeasureFlow,
    horizon: usize,
    terminal: f64,
) -> Result<f64> {
    let tables = StageTables::new(model, flow, horizon)?;
    Ok(optimal_value_rec(&tables, 0, &tables.initial, terminal))
}

/// Expected discounted cost of following `choose` (a map from time and
/// conditional state distribution to an action), by the same history
/// recursion. Replays externally supplied policies without touching their
/// tree representation.
pub fn policy_history_value<F>(
    model: &GameModel,
    flow: &MeasureFlow,
    horizon: usize,
    terminal: f64,
    choose: F,
) -> Result<f64>
where
    F: Fn(usize, &[f64]) -> usize,
{
    let tables = StageTables::new(model, flow, horizon)?;
    Ok(policy_value_rec(&tables, 0, &tables.initial, terminal, &choose))
}

/// Largest optimality gap `q(chosen) - min_a q(a)` over history nodes reached
/// by following `choose`, ignoring nodes whose path probability is at or
/// below `weight_floor`. Continuation values inside each q are optimal, so
/// this reproduces a pointwise suboptimality residual without the production
/// value table.
pub fn max_policy_gap<F>(
    model: &GameModel,
    flow: &MeasureFlow,
    horizon: usize,
    terminal: f64,
    weight_floor: f64,
    choose: F,
) -> Result<f64>
where
    F: Fn(usize, &[f64]) -> usize,
{
    let tables = StageTables::new(model, flow, horizon)?;
    Ok(policy_gap_rec(&tables, 0, &tables.initial, terminal, weight_floor, &choose))
}

/// One unnormalized child joint: alpha'(x') = sum_x alpha(x) p(x'|x) r(y|x').
fn child_alpha(tables: &StageTables, t: usize, alpha: &[f64], a: usize, y: usize) -> Vec<f64> {
    let mut out = vec![0.0; tables.n_states];
    for (x, &w) in alpha.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (xp, &p) in tables.transition[t][a][x].iter().enumerate() {
            out[xp] += w * p * tables.observation[t][xp][y];
        }
    }
    out
}

fn stage_cost(tables: &StageTables, t: usize, z: &[f64], a: usize) -> f64 {
    z.iter().enumerate().map(|(x, &w)| w * tables.cost[t][x][a]).sum()
}

fn q_values_rec(tables: &StageTables, t: usize, alpha: &[f64], terminal: f64) -> Vec<f64> {
    let mass = num::total(alpha);
    let z: Vec<f64> = alpha.iter().map(|v| v / mass).collect();
    (0..tables.n_actions)
        .map(|a| {
            let mut q = stage_cost(tables, t, &z, a);
            if t == tables.horizon {
                q += tables.beta * terminal;
            } else {
                for y in 0..tables.n_obs {
                    let child = child_alpha(tables, t, alpha, a, y);
                    let child_mass = num::total(&child);
                    if child_mass > 0.0 {
                        q += tables.beta * (child_mass / mass)
                            * optimal_value_rec(tables, t + 1, &child, terminal);
                    }
                }
            }
            q
        })
        .collect()
}

fn optimal_value_rec(tables: &StageTables, t: usize, alpha: &[f64], terminal: f64) -> f64 {
    q_values_rec(tables, t, alpha, terminal).into_iter().fold(f64::INFINITY, f64::min)
}

fn policy_value_rec<F>(
    tables: &StageTables,
    t: usize,
    alpha: &[f64],
    terminal: f64,
    choose: &F,
) -> f64
where
    F: Fn(usize, &[f64]) -> usize,
{
    let mass = num::total(alpha);
    let z: Vec<f64> = alpha.iter().map(|v| v / mass).collect();
    let a = choose(t, &z);
    let mut value = stage_cost(tables, t, &z, a);
    if t == tables.horizon {
        value += tables.beta * terminal;
    } else {
        for y in 0..tables.n_obs {
            let child = child_alpha(tables, t, alpha, a, y);
            let child_mass = num::total(&child);
            if child_mass > 0.0 {
                value += tables.beta * (child_mass / mass)
                    * policy_value_rec(tables, t + 1, &child, terminal, choose);
            }
        }
    }
    value
}

fn policy_gap_rec<F>(
    tables: &StageTables,
    t: usize,
    alpha: &[f64],
    terminal: f64,
    weight_floor: f64,
    choose: &F,
) -> f64
where
    F: Fn(usize, &[f64]) -> usize,
{
    let mass = num::total(alpha);
    if mass <= weight_floor {
        return 0.0;
    }
    let z: Vec<f64> = alpha.iter().map(|v| v / mass).collect();
    let a = choose(t, &z);
    let q = q_values_rec(tables, t, alpha, terminal);
    let best = q.iter().copied().fold(f64::INFINITY, f64::min);
    let mut worst = q[a] - best;
    if t < tables.horizon {
        for y in 0..tables.n_obs {
            let child = child_alpha(tables, t, alpha, a, y);
            if num::total(&child) > 0.0 {
                let gap = policy_gap_rec(tables, t + 1, &child, terminal, weight_floor, choose);
                worst = worst.max(gap);
            }
        }
    }
    worst
}

/// Best candidate located by a dense grid scan over flow space.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub flow: MeasureFlow,
    /// Largest per-entry L1 gap between the best candidate and the flow it
    /// induces, over the entries the solver actually reads.
    pub residual: f64,
}

/// Locates an equilibrium flow for a 2-state model by scanning every lattice
/// flow with coordinates on a grid of the given step, scoring each candidate
/// by how far the flow its best response induces moves away from it. The
/// inner best response is the production solver; the scan replaces only the
/// fixed-point iteration.
///
/// Entries 1..=horizon are free; the final entry (horizon+1) is determined by
/// the induced recursion and excluded from the score because no solver input
/// reads it (the observation kernel must be population-independent).
pub fn grid_search_equilibrium(
    model: &GameModel,
    step: f64,
    opts: &SolveOptions,
) -> Result<GridSearchResult> {
    if model.n_states() != 2 {
        return Err(Error::config("flow grid search supports 2-state models only"));
    }
    if model.observation_depends_on_mean_field() {
        return Err(Error::config(
            "flow grid search needs a population-independent observation kernel",
        ));
    }
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::config(format!("grid step {step} outside (0, 0.5]")));
    }
    let horizon = opts.horizon;
    let n = (1.0 / step).round() as usize;
    let candidates = ((n + 1) as u128).checked_pow(horizon as u32);
    match candidates {
        Some(c) if c <= 4_000_000 => {}
        _ => {
            return Err(Error::config(format!(
                "grid of {} points per entry over {horizon} entries is too large",
                n + 1
            )))
        }
    }

    let mu0 = model.initial.weights.clone();
    let mut digits = vec![0usize; horizon];
    let mut best_residual = f64::INFINITY;
    let mut best: Option<(Vec<Vec<f64>>, MeasureFlow)> = None;
    loop {
        let mut measures = Vec::with_capacity(horizon + 2);
        measures.push(mu0.clone());
        for &d in &digits {
            let w = (d as f64 * step).min(1.0);
            measures.push(vec![w, 1.0 - w]);
        }
        measures.push(measures[horizon].clone());
        let flow = MeasureFlow { measures };
        let sol = solve_pomdp(model, &flow, opts)?;
        let induced = induced_flow(model, &sol.policy, &flow, opts)?;
        let mut residual = 0.0f64;
        for t in 1..=horizon {
            residual = residual.max(num::l1_distance(flow.entry(t), induced.entry(t)));
        }
        if residual < best_residual {
            best_residual = residual;
            best = Some((flow.measures, induced));
        }

        let mut k = 0;
        loop {
            if k == horizon {
                let (mut measures, induced) = best.expect("grid scan visits at least one point");
                measures[horizon + 1] = induced.entry(horizon + 1).to_vec();
                return Ok(GridSearchResult {
                    flow: MeasureFlow { measures },
                    residual: best_residual,
                });
            }
            digits[k] += 1;
            if digits[k] <= n {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

/// Exact E|K/n - p| for K binomial(n, p), via log-binomial coefficients.
pub fn binomial_mean_abs_deviation(n: usize, p: f64) -> f64 {
    assert!(n >= 1, "need at least one trial");
    assert!((0.0..=1.0).contains(&p), "probability {p} outside [0, 1]");
    if p == 0.0 || p == 1.0 {
        return 0.0;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let nf = n as f64;
    let mut ln_choose = 0.0;
    let mut acc = 0.0;
    for k in 0..=n {
        let kf = k as f64;
        let ln_weight = ln_choose + kf * lp + (nf - kf) * lq;
        acc += ln_weight.exp() * (kf / nf - p).abs();
        if k < n {
            ln_choose += ((nf - kf) / (kf + 1.0)).ln();
        }
    }
    acc
}

/// Normal mass over grid cells, re-derived independently: midpoint density
/// times width per cell, tail mass beyond the outer cell edges (when `fold`
/// is set) by composite Simpson integration of the density rather than an
/// error-function identity, then renormalization.
pub fn normal_cell_masses_reference(grid: &Grid, mean: f64, sigma: f64, fold: bool) -> Vec<f64> {
    let coords = grid.coords.as_ref().expect("reference quadrature requires coordinates");
    let width = grid.cell_width.expect("reference quadrature requires a cell width");
    let n = coords.len();
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut masses: Vec<f64> = coords
        .iter()
        .map(|&xi| {
            let t = (xi - mean) / sigma;
            (-0.5 * t * t).exp() * width * norm
        })
        .collect();
    if fold {
        let lo_edge = coords[0] - 0.5 * width;
        let hi_edge = coords[n - 1] + 0.5 * width;
        masses[0] += simpson_normal_mass(mean, sigma, f64::NEG_INFINITY, lo_edge);
        masses[n - 1] += simpson_normal_mass(mean, sigma, hi_edge, f64::INFINITY);
    }
    let total = num::total(&masses);
    if total <= 1e-300 {
        let nearest = coords
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - mean).abs().partial_cmp(&(*b - mean).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut row = vec![0.0; n];
        row[nearest] = 1.0;
        return row;
    }
    for m in masses.iter_mut() {
        *m /= total;
    }
    masses
}

/// Composite Simpson integral of the normal density over [a, b], after
/// clipping to mean +- 14 sigma (the density beyond carries less than 1e-40).
fn simpson_normal_mass(mean: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let lo = a.max(mean - 14.0 * sigma);
    let hi = b.min(mean + 14.0 * sigma);
    if hi <= lo {
        return 0.0;
    }
    let segments = 8192usize;
    let h = (hi - lo) / segments as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let density = |x: f64| {
        let t = (x - mean) / sigma;
        (-0.5 * t * t).exp() * norm
    };
    let mut acc = density(lo) + density(hi);
    for i in 1..segments {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += weight * density(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Random point of the probability simplex with every coordinate bounded
/// away from zero (raw draws in [floor, 1) are normalized).
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let mut raw: Vec<f64> = (0..n).map(|_| rng.gen_range(floor..1.0)).collect();
    num::normalize(&mut raw);
    raw
}

/// Random tabular model with strictly positive transition and observation
/// rows, costs in [0, 2], and a strictly positive initial measure.
pub fn random_tabular_model<R: Rng>(
    rng: &mut R,
    n_states: usize,
    n_obs: usize,
    n_actions: usize,
    discount: f64,
) -> GameModel {
    let coupling_transition = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| (0..n_states).map(|_| random_simplex(rng, n_states, 0.05)).collect())
                .collect()
        })
        .collect();
    let coupling_cost = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| (0..n_states).map(|_| rng.gen_range(0.0..2.0)).collect())
                .collect()
        })
        .collect();
    let observation_table = (0..n_states).map(|_| random_simplex(rng, n_obs, 0.05)).collect();
    let initial = MeanFieldMeasure::new(random_simplex(rng, n_states, 0.05))
        .expect("normalized draws form a distribution");
    build_tabular(coupling_transition, coupling_cost, observation_table, discount, initial)
        .expect("randomly generated tensors satisfy the model invariants")
}

/// Random flow whose entry 0 is the model's initial measure and whose later
/// entries are strictly positive random measures.
pub fn random_flow<R: Rng>(rng: &mut R, model: &GameModel, entries: usize) -> MeasureFlow {
    let measures = (0..entries)
        .map(|t| {
            if t == 0 {
                model.initial.weights.clone()
            } else {
                random_simplex(rng, model.n_states(), 0.05)
            }
        })
        .collect();
    MeasureFlow::new(measures).expect("randomly generated measures are valid")
}
