//! Monte Carlo simulation of the finite-population game.
//!
//! The solver plans against a deterministic population flow; here a finite
//! number of agents actually play. Every agent runs the shared policy on a
//! private belief filtered along the planning flow (its information is local:
//! its own actions and observations), while states advance under the true
//! empirical measure. The module estimates the cost of the first agent, how
//! much that agent could gain by unilaterally deviating, and how fast the
//! empirical measure approaches the planning flow as the population grows.
//!
//! Randomness follows the `chacha8-stream-packed-v1` rule: every draw comes
//! from a fresh ChaCha8 generator seeded with the master seed whose stream id
//! packs (replication, agent, time, purpose) as 24/20/12/8 bits. Replications
//! can therefore run on any number of threads while staying bit-reproducible,
//! and permuting agent identities permutes nothing observable.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter::{bayes_weights, predict_weights, predictive_weights, StageKernel};
use crate::flow::MeasureFlow;
use crate::model::GameModel;
use crate::num;
use crate::solver::{solve_pomdp, Policy, SolveOptions};

/// Name of the substream derivation rule, echoed in every report.
pub const SPLITTING_RULE: &str = "chacha8-stream-packed-v1";

/// Normal quantile used for the reported confidence intervals.
const CI_Z: f64 = 1.96;

/// A full simulation request: population size, replication count, horizon,
/// master seed, worker threads (0 = library default), plus the deviation
/// policies and test functions the estimators should sweep.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_agents: usize,
    pub replications: usize,
    pub horizon: usize,
    pub seed: u64,
    pub threads: usize,
    pub deviations: Vec<DeviationPolicy>,
    pub test_functions: Vec<TestFunction>,
}

impl SimConfig {
    pub fn new(n_agents: usize, replications: usize, horizon: usize, seed: u64) -> Self {
        SimConfig {
            n_agents,
            replications,
            horizon,
            seed,
            threads: 0,
            deviations: Vec::new(),
            test_functions: Vec::new(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::config("need at least one agent"));
        }
        if self.replications == 0 {
            return Err(Error::config("need at least one replication"));
        }
        if self.replications >= 1 << 24 {
            return Err(Error::config("replication count exceeds the substream space"));
        }
        if self.n_agents >= 1 << 20 {
            return Err(Error::config("agent count exceeds the substream space"));
        }
        if self.horizon >= 1 << 12 {
            return Err(Error::config("horizon exceeds the substream space"));
        }
        Ok(())
    }
}

/// What the first agent plays instead of the shared policy.
#[derive(Debug, Clone)]
pub enum DeviationPolicy {
    /// A solved belief-tree policy (for example a best response to some
    /// flow), resolved exactly like the shared one.
    Tree { label: String, policy: Policy },
    /// Minimizes the current-stage expected cost under the planning flow.
    MyopicGreedy,
    /// Uniformly random actions.
    UniformRandom,
}

impl DeviationPolicy {
    pub fn label(&self) -> &str {
        match self {
            DeviationPolicy::Tree { label, .. } => label,
            DeviationPolicy::MyopicGreedy => "myopic-greedy",
            DeviationPolicy::UniformRandom => "uniform-random",
        }
    }
}

/// Scalar function of the state, evaluated against empirical measures.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    /// Constantly one; its empirical error is identically zero.
    Constant,
    /// The grid coordinate of the state (the index when the grid carries no
    /// coordinates).
    Coordinate,
    /// Indicator of one state.
    Indicator(usize),
}

impl TestFunction {
    pub fn id(&self) -> String {
        match self {
            TestFunction::Constant => "const".into(),
            TestFunction::Coordinate => "coord".into(),
            TestFunction::Indicator(k) => format!("ind{k}"),
        }
    }

    /// Tabulated values over the state grid.
    pub fn values(&self, model: &GameModel) -> Vec<f64> {
        let n = model.n_states();
        match self {
            TestFunction::Constant => vec![1.0; n],
            TestFunction::Coordinate => match &model.states.coords {
                Some(c) => c.clone(),
                None => (0..n).map(|x| x as f64).collect(),
            },
            TestFunction::Indicator(k) => {
                let mut v = vec![0.0; n];
                if *k < n {
                    v[*k] = 1.0;
                }
                v
            }
        }
    }
}

/// Mean discounted cost with its Monte Carlo standard error and the
/// truncation tail: the infinite-horizon cost lies within `tail` above the
/// truncated estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub tail: f64,
}

/// How often belief resolution had to leave the solved tree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FallbackStats {
    /// Tree-policy action resolutions performed.
    pub decisions: u64,
    /// Resolutions that hit no exact belief key and used the nearest one.
    pub fallbacks: u64,
    /// Belief updates that saw a zero-probability observation and fell back
    /// to the unconditioned prediction.
    pub filter_resets: u64,
}

impl FallbackStats {
    /// True when more than 1% of decisions left the solved tree.
    pub fn flagged(&self) -> bool {
        self.fallbacks * 100 > self.decisions
    }
}

/// Outcome of simulating one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub n_agents: usize,
    pub replications: usize,
    pub horizon: usize,
    pub seed: u64,
    pub splitting_rule: &'static str,
    pub cost: CostEstimate,
    pub fallback: FallbackStats,
}

/// Deviation gain estimate at one population size.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsPoint {
    pub n_agents: usize,
    /// Largest mean paired gain over the deviation set, clipped at zero. A
    /// lower bound on the true best-response gain: the sweep covers finitely
    /// many policies.
    pub eps_hat: f64,
    /// Standard error of the best deviation's paired gain.
    pub stderr: f64,
    /// Unclipped confidence interval of the best deviation's paired gain.
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub best_deviation: String,
}

/// Deviation sweep across population sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsReport {
    pub replications: usize,
    pub horizon: usize,
    pub seed: u64,
    pub splitting_rule: &'static str,
    pub deviation_labels: Vec<String>,
    pub points: Vec<EpsPoint>,
}

/// Mean absolute error of the empirical measure against the planning flow
/// for one (time, population size, test function) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub t: usize,
    pub n_agents: usize,
    pub f_id: String,
    pub estimate: f64,
    pub stderr: f64,
}

/// One-step prediction error of the empirical measure: how far the step-
/// (t -> t+1) empirical average lands from its conditional expectation,
/// against the dimensional bound `2 sup|g| / sqrt(N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleRow {
    pub t: usize,
    pub n_agents: usize,
    pub f_id: String,
    pub observed: f64,
    pub stderr: f64,
    pub bound: f64,
}

/// Empirical-measure convergence sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub replications: usize,
    pub horizon: usize,
    pub seed: u64,
    pub splitting_rule: &'static str,
    pub rows: Vec<ConvergenceRow>,
    pub martingale: Vec<MartingaleRow>,
}

#[derive(Clone, Copy)]
enum Purpose {
    Init = 0,
    Transition = 1,
    Observation = 2,
    Action = 3,
}

fn substream(seed: u64, rep: usize, agent: usize, t: usize, purpose: Purpose) -> ChaCha8Rng {
    debug_assert!(rep < 1 << 24 && agent < 1 << 20 && t < 1 << 12);
    let id = ((rep as u64) << 40) | ((agent as u64) << 20) | ((t as u64) << 8) | purpose as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sample_index(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in row.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// Everything one replication produces.
struct RepData {
    j1: f64,
    /// State counts per time, `counts[t][x]`.
    counts: Vec<Vec<u32>>,
    /// Predicted next-step empirical averages per test function,
    /// `predicted[t][f]` for the step t -> t+1.
    predicted: Vec<Vec<f64>>,
    fallback: FallbackStats,
}

/// Read-only tables shared by all replications of one configuration.
struct SimTables<'a> {
    model: &'a GameModel,
    shared: &'a Policy,
    deviant: Option<&'a DeviationPolicy>,
    eq_flow: &'a MeasureFlow,
    stages: Vec<StageKernel>,
    /// Stage costs under the planning flow, `flow_costs[t][a][x]`; for the
    /// myopic deviation only (realized costs use the empirical measure).
    flow_costs: Vec<Vec<Vec<f64>>>,
    g_values: Vec<Vec<f64>>,
    horizon: usize,
}

impl<'a> SimTables<'a> {
    fn new(
        model: &'a GameModel,
        shared: &'a Policy,
        deviant: Option<&'a DeviationPolicy>,
        eq_flow: &'a MeasureFlow,
        config: &SimConfig,
    ) -> Result<Self> {
        if model.observation_depends_on_mean_field() {
            return Err(Error::MeanFieldObservation);
        }
        config.check()?;
        let horizon = config.horizon;
        if shared.horizon < horizon {
            return Err(Error::HorizonBeyondPolicy { requested: horizon, policy: shared.horizon });
        }
        eq_flow.require_entries_through(horizon)?;
        if let Some(DeviationPolicy::Tree { policy, .. }) = deviant {
            if policy.horizon < horizon {
                return Err(Error::HorizonBeyondPolicy {
                    requested: horizon,
                    policy: policy.horizon,
                });
            }
        }
        let stages = (0..horizon)
            .map(|t| StageKernel::build(model, eq_flow.entry(t), eq_flow.entry(t + 1)))
            .collect();
        let flow_costs = (0..=horizon)
            .map(|t| {
                (0..model.n_actions())
                    .map(|a| {
                        (0..model.n_states())
                            .map(|x| model.cost(x, a, eq_flow.entry(t)))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let g_values = config.test_functions.iter().map(|f| f.values(model)).collect();
        Ok(SimTables { model, shared, deviant, eq_flow, stages, flow_costs, g_values, horizon })
    }
}

/// Resolves one agent's action. Returns the action and whether the lookup
/// was a tree decision / an inexact tree decision.
fn resolve_action(
    tables: &SimTables,
    seed: u64,
    rep: usize,
    stream_id: usize,
    is_deviant: bool,
    t: usize,
    belief: &[f64],
) -> Result<(usize, bool, bool)> {
    let deviant = if is_deviant { tables.deviant } else { None };
    match deviant {
        None => {
            let (a, _, exact) = tables
                .shared
                .nearest_action(t, belief)
                .ok_or_else(|| Error::Internal(format!("no shared policy entries at depth {t}")))?;
            Ok((a, true, !exact))
        }
        Some(DeviationPolicy::Tree { policy, .. }) => {
            let (a, _, exact) = policy
                .nearest_action(t, belief)
                .ok_or_else(|| Error::Internal(format!("no deviant policy entries at depth {t}")))?;
            Ok((a, true, !exact))
        }
        Some(DeviationPolicy::MyopicGreedy) => {
            let costs = &tables.flow_costs[t];
            let scores: Vec<f64> =
                (0..tables.model.n_actions()).map(|a| num::dot(belief, &costs[a])).collect();
            Ok((num::argmin_with_ties(&scores, 0.0).0, false, false))
        }
        Some(DeviationPolicy::UniformRandom) => {
            let mut rng = substream(seed, rep, stream_id, t, Purpose::Action);
            Ok((rng.gen_range(0..tables.model.n_actions()), false, false))
        }
    }
}

/// Plays one replication. `stream_ids[slot]` is the substream identity used
/// by the agent in that slot; the identity permutation is the normal case
/// and slot 0 (the measured agent) must keep identity 0.
fn run_replication(
    tables: &SimTables,
    seed: u64,
    rep: usize,
    n_agents: usize,
    stream_ids: &[usize],
) -> Result<RepData> {
    let model = tables.model;
    let n_states = model.n_states();
    let n_actions = model.n_actions();
    let horizon = tables.horizon;
    let n_f = tables.g_values.len();

    let mut states: Vec<usize> = (0..n_agents)
        .map(|slot| {
            let mut rng = substream(seed, rep, stream_ids[slot], 0, Purpose::Init);
            sample_index(&model.initial.weights, rng.gen::<f64>())
        })
        .collect();
    let mut beliefs: Vec<Vec<f64>> = vec![model.initial.weights.clone(); n_agents];

    let mut counts = Vec::with_capacity(horizon + 1);
    let mut predicted = Vec::with_capacity(horizon);
    let mut fallback = FallbackStats::default();
    let mut j1 = 0.0;
    let mut discount_pow = 1.0;
    let mut actions = vec![0usize; n_agents];
    let mut row_cache: Vec<Option<Vec<f64>>> = vec![None; n_states * n_actions];

    for t in 0..=horizon {
        let mut count = vec![0u32; n_states];
        for &x in &states {
            count[x] += 1;
        }
        let empirical: Vec<f64> =
            count.iter().map(|&c| c as f64 / n_agents as f64).collect();
        counts.push(count);

        for slot in 0..n_agents {
            let (a, is_tree, inexact) = resolve_action(
                tables,
                seed,
                rep,
                stream_ids[slot],
                slot == 0 && tables.deviant.is_some(),
                t,
                &beliefs[slot],
            )?;
            actions[slot] = a;
            if is_tree {
                fallback.decisions += 1;
                if inexact {
                    fallback.fallbacks += 1;
                }
            }
        }

        j1 += discount_pow * model.cost(states[0], actions[0], &empirical);
        discount_pow *= model.discount;
        if t == horizon {
            break;
        }

        for entry in row_cache.iter_mut() {
            *entry = None;
        }
        let mut pred = vec![0.0; n_f];
        let mut next_states = vec![0usize; n_agents];
        for slot in 0..n_agents {
            let (x, a) = (states[slot], actions[slot]);
            let row = row_cache[x * n_actions + a]
                .get_or_insert_with(|| model.transition(x, a, &empirical));
            for (f, g) in tables.g_values.iter().enumerate() {
                pred[f] += num::dot(row, g) / n_agents as f64;
            }
            let mut rng = substream(seed, rep, stream_ids[slot], t, Purpose::Transition);
            next_states[slot] = sample_index(row, rng.gen::<f64>());
        }
        predicted.push(pred);
        states = next_states;

        let stage = &tables.stages[t];
        for slot in 0..n_agents {
            let mut rng = substream(seed, rep, stream_ids[slot], t + 1, Purpose::Observation);
            let obs_row = model.observation(states[slot], tables.eq_flow.entry(t + 1));
            let y = sample_index(&obs_row, rng.gen::<f64>());

            let zhat = predict_weights(&beliefs[slot], &stage.transition[actions[slot]]);
            let h = predictive_weights(&zhat, &stage.observation);
            if h[y] > crate::filter::PRUNE_EPS_DEFAULT {
                beliefs[slot] = bayes_weights(&zhat, &stage.observation, y, h[y]);
            } else {
                let mut fallback_belief = zhat;
                num::normalize(&mut fallback_belief);
                beliefs[slot] = fallback_belief;
                fallback.filter_resets += 1;
            }
        }
    }

    Ok(RepData { j1, counts, predicted, fallback })
}

/// Runs every replication of one configuration, in parallel when asked, and
/// reduces in ascending replication order.
fn run_config(tables: &SimTables, config: &SimConfig) -> Result<Vec<RepData>> {
    let n_agents = config.n_agents;
    let seed = config.seed;
    let stream_ids: Vec<usize> = (0..n_agents).collect();
    let body = || -> Result<Vec<RepData>> {
        use rayon::prelude::*;
        (0..config.replications)
            .into_par_iter()
            .map(|rep| run_replication(tables, seed, rep, n_agents, &stream_ids))
            .collect()
    };
    if config.threads == 0 {
        body()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
        pool.install(body)
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn tail_bound(model: &GameModel, horizon: usize) -> f64 {
    model.discount.powi(horizon as i32 + 1) * model.value_upper_bound()
}

fn collect_j1(reps: &[RepData]) -> Vec<f64> {
    reps.iter().map(|r| r.j1).collect()
}

fn total_fallback(reps: &[RepData]) -> FallbackStats {
    let mut out = FallbackStats::default();
    for r in reps {
        out.decisions += r.fallback.decisions;
        out.fallbacks += r.fallback.fallbacks;
        out.filter_resets += r.fallback.filter_resets;
    }
    out
}

/// Simulates the population with every agent on the shared policy and
/// estimates the first agent's truncated discounted cost.
pub fn simulate_shared(
    model: &GameModel,
    policy: &Policy,
    eq_flow: &MeasureFlow,
    config: &SimConfig,
) -> Result<SimulationReport> {
    let tables = SimTables::new(model, policy, None, eq_flow, config)?;
    let reps = run_config(&tables, config)?;
    let (mean, stderr) = mean_and_stderr(&collect_j1(&reps));
    Ok(SimulationReport {
        n_agents: config.n_agents,
        replications: config.replications,
        horizon: config.horizon,
        seed: config.seed,
        splitting_rule: SPLITTING_RULE,
        cost: CostEstimate { mean, stderr, tail: tail_bound(model, config.horizon) },
        fallback: total_fallback(&reps),
    })
}

/// Same dynamics with the first agent on `deviant`, common random numbers
/// with [`simulate_shared`]. The estimate is the deviating agent's cost.
pub fn simulate_deviation(
    model: &GameModel,
    shared: &Policy,
    deviant: &DeviationPolicy,
    eq_flow: &MeasureFlow,
    config: &SimConfig,
) -> Result<SimulationReport> {
    let tables = SimTables::new(model, shared, Some(deviant), eq_flow, config)?;
    let reps = run_config(&tables, config)?;
    let (mean, stderr) = mean_and_stderr(&collect_j1(&reps));
    Ok(SimulationReport {
        n_agents: config.n_agents,
        replications: config.replications,
        horizon: config.horizon,
        seed: config.seed,
        splitting_rule: SPLITTING_RULE,
        cost: CostEstimate { mean, stderr, tail: tail_bound(model, config.horizon) },
        fallback: total_fallback(&reps),
    })
}

/// Nudges every entry after the initial one toward a vertex (positive
/// `delta`) or toward the uniform measure (negative `delta`).
fn perturb_flow(flow: &MeasureFlow, delta: f64) -> MeasureFlow {
    let n = flow.states();
    let target = if delta > 0.0 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        v
    } else {
        vec![1.0 / n as f64; n]
    };
    let lambda = delta.abs();
    let measures = flow
        .measures
        .iter()
        .enumerate()
        .map(|(t, mu)| if t == 0 { mu.clone() } else { num::blend(mu, &target, lambda) })
        .collect();
    MeasureFlow { measures }
}

/// The default deviation sweep: best responses to the planning flow and to
/// two nudged copies of it, the myopic policy, and uniform noise.
pub fn default_deviations(
    model: &GameModel,
    eq_flow: &MeasureFlow,
    opts: &SolveOptions,
) -> Result<Vec<DeviationPolicy>> {
    let best = solve_pomdp(model, eq_flow, opts)?;
    let up = solve_pomdp(model, &perturb_flow(eq_flow, 0.05), opts)?;
    let down = solve_pomdp(model, &perturb_flow(eq_flow, -0.05), opts)?;
    Ok(vec![
        DeviationPolicy::Tree { label: "best-response".into(), policy: best.policy },
        DeviationPolicy::Tree { label: "best-response-up".into(), policy: up.policy },
        DeviationPolicy::Tree { label: "best-response-down".into(), policy: down.policy },
        DeviationPolicy::MyopicGreedy,
        DeviationPolicy::UniformRandom,
    ])
}

/// Sweeps population sizes and reports the largest paired deviation gain at
/// each. Shared and deviant runs use common random numbers, so each
/// replication contributes one paired difference.
pub fn estimate_eps(
    model: &GameModel,
    policy: &Policy,
    eq_flow: &MeasureFlow,
    deviations: &[DeviationPolicy],
    config: &SimConfig,
    n_list: &[usize],
) -> Result<EpsReport> {
    if deviations.is_empty() {
        return Err(Error::config("deviation sweep needs at least one candidate policy"));
    }
    let mut points = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut cfg = config.clone();
        cfg.n_agents = n;
        let shared_tables = SimTables::new(model, policy, None, eq_flow, &cfg)?;
        let shared_reps = run_config(&shared_tables, &cfg)?;
        let shared_j = collect_j1(&shared_reps);

        let mut best: Option<(f64, f64, String)> = None;
        for dev in deviations {
            let tables = SimTables::new(model, policy, Some(dev), eq_flow, &cfg)?;
            let reps = run_config(&tables, &cfg)?;
            let dev_j = collect_j1(&reps);
            let diffs: Vec<f64> =
                shared_j.iter().zip(dev_j.iter()).map(|(s, d)| s - d).collect();
            let (mean, stderr) = mean_and_stderr(&diffs);
            let better = match &best {
                None => true,
                Some((m, _, _)) => mean > *m,
            };
            if better {
                best = Some((mean, stderr, dev.label().to_string()));
            }
        }
        let (mean, stderr, label) = best.expect("at least one deviation");
        points.push(EpsPoint {
            n_agents: n,
            eps_hat: mean.max(0.0),
            stderr,
            ci_lo: mean - CI_Z * stderr,
            ci_hi: mean + CI_Z * stderr,
            best_deviation: label,
        });
    }
    Ok(EpsReport {
        replications: config.replications,
        horizon: config.horizon,
        seed: config.seed,
        splitting_rule: SPLITTING_RULE,
        deviation_labels: deviations.iter().map(|d| d.label().to_string()).collect(),
        points,
    })
}

/// Measures how fast empirical averages approach the planning flow, and the
/// one-step prediction error against its dimensional bound.
pub fn empirical_convergence(
    model: &GameModel,
    policy: &Policy,
    eq_flow: &MeasureFlow,
    config: &SimConfig,
    n_list: &[usize],
) -> Result<ConvergenceReport> {
    if config.test_functions.is_empty() {
        return Err(Error::config("convergence sweep needs at least one test function"));
    }
    let mut rows = Vec::new();
    let mut martingale = Vec::new();
    for &n in n_list {
        let mut cfg = config.clone();
        cfg.n_agents = n;
        let tables = SimTables::new(model, policy, None, eq_flow, &cfg)?;
        let reps = run_config(&tables, &cfg)?;
        for (f_idx, f) in cfg.test_functions.iter().enumerate() {
            let g = &tables.g_values[f_idx];
            let g_sup = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            for t in 0..=cfg.horizon {
                let target = num::dot(eq_flow.entry(t), g);
                let errs: Vec<f64> = reps
                    .iter()
                    .map(|r| {
                        let emp: f64 = r.counts[t]
                            .iter()
                            .enumerate()
                            .map(|(x, &c)| c as f64 / n as f64 * g[x])
                            .sum();
                        (emp - target).abs()
                    })
                    .collect();
                let (estimate, stderr) = mean_and_stderr(&errs);
                rows.push(ConvergenceRow { t, n_agents: n, f_id: f.id(), estimate, stderr });
            }
            for t in 0..cfg.horizon {
                let errs: Vec<f64> = reps
                    .iter()
                    .map(|r| {
                        let emp: f64 = r.counts[t + 1]
                            .iter()
                            .enumerate()
                            .map(|(x, &c)| c as f64 / n as f64 * g[x])
                            .sum();
                        (emp - r.predicted[t][f_idx]).abs()
                    })
                    .collect();
                let (observed, stderr) = mean_and_stderr(&errs);
                martingale.push(MartingaleRow {
                    t,
                    n_agents: n,
                    f_id: f.id(),
                    observed,
                    stderr,
                    bound: 2.0 * g_sup / (n as f64).sqrt(),
                });
            }
        }
    }
    Ok(ConvergenceReport {
        replications: config.replications,
        horizon: config.horizon,
        seed: config.seed,
        splitting_rule: SPLITTING_RULE,
        rows,
        martingale,
    })
}

/// Test-only entry point that relabels which substream each agent slot
/// draws from; identity on slot 0.
#[cfg(test)]
fn simulate_shared_with_ids(
    model: &GameModel,
    policy: &Policy,
    eq_flow: &MeasureFlow,
    config: &SimConfig,
    stream_ids: &[usize],
) -> Result<Vec<f64>> {
    let tables = SimTables::new(model, policy, None, eq_flow, config)?;
    let reps: Result<Vec<RepData>> = (0..config.replications)
        .map(|rep| run_replication(&tables, config.seed, rep, config.n_agents, stream_ids))
        .collect();
    Ok(collect_j1(&reps?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::equilibrium::{find_equilibrium, Damping, EquilibriumConfig};
    use crate::model::{
        build_gaussian, build_tabular, Grid, MeanFieldMeasure, SensorCoupling,
    };
    use crate::oracle;
    use crate::solver::evaluate_policy;

    fn solved(model: &GameModel, horizon: usize) -> (Policy, MeasureFlow) {
        let mut config = EquilibriumConfig::new(horizon);
        config.damping = Damping::Constant(1.0);
        config.tol = 1e-12;
        config.max_iters = 300;
        let report = find_equilibrium(model, &config).unwrap();
        assert!(report.converged, "fixture equilibrium did not converge");
        (report.policy, report.flow)
    }

    #[test]
    fn constant_cost_gives_exact_geometric_sum_with_zero_variance() {
        let coupling_transition = vec![
            vec![vec![vec![0.7, 0.3]; 2], vec![vec![0.4, 0.6]; 2]],
            vec![vec![vec![0.2, 0.8]; 2], vec![vec![0.5, 0.5]; 2]],
        ];
        let coupling_cost = vec![vec![vec![1.0; 2]; 2]; 2];
        let observation_table = vec![vec![0.8, 0.2], vec![0.3, 0.7]];
        let model = build_tabular(
            coupling_transition,
            coupling_cost,
            observation_table,
            0.9,
            MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let (policy, flow) = solved(&model, 3);
        let config = SimConfig::new(4, 16, 3, 77);
        let report = simulate_shared(&model, &policy, &flow, &config).unwrap();
        let expected = (1.0 - 0.9f64.powi(4)) / (1.0 - 0.9);
        assert!((report.cost.mean - expected).abs() < 1e-12);
        assert_eq!(report.cost.stderr, 0.0);
        assert_eq!(report.fallback.filter_resets, 0);
    }

    #[test]
    fn reports_are_bit_identical_across_reruns_and_thread_counts() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 2);
        let mut config = SimConfig::new(6, 24, 2, 2024);
        let a = simulate_shared(&model, &policy, &flow, &config).unwrap();
        let b = simulate_shared(&model, &policy, &flow, &config).unwrap();
        assert_eq!(a, b);
        config.threads = 4;
        let c = simulate_shared(&model, &policy, &flow, &config).unwrap();
        assert_eq!(a, c);
        config.threads = 1;
        let d = simulate_shared(&model, &policy, &flow, &config).unwrap();
        assert_eq!(a, d);
    }

    #[test]
    fn permuting_the_other_agents_leaves_the_measured_cost_unchanged() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 2);
        let config = SimConfig::new(6, 12, 2, 99);
        let identity: Vec<usize> = (0..6).collect();
        let permuted = vec![0, 4, 1, 5, 3, 2];
        let a = simulate_shared_with_ids(&model, &policy, &flow, &config, &identity).unwrap();
        let b = simulate_shared_with_ids(&model, &policy, &flow, &config, &permuted).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoupled_costs_match_the_planned_value_within_noise() {
        let model = bundled::decoupled_two_state();
        let horizon = 4;
        let (policy, flow) = solved(&model, horizon);
        let config = SimConfig::new(8, 400, horizon, 4242);
        let report = simulate_shared(&model, &policy, &flow, &config).unwrap();
        let planned =
            evaluate_policy(&model, &policy, &flow, &SolveOptions::new(horizon)).unwrap();
        let gap = (report.cost.mean - planned).abs();
        assert!(
            gap <= 3.0 * report.cost.stderr.max(1e-12),
            "gap {gap} vs stderr {}",
            report.cost.stderr
        );
        assert_eq!(report.fallback.fallbacks, 0, "decoupled dynamics must stay on the tree");
    }

    #[test]
    fn all_sampled_costs_stay_inside_the_discounted_bound() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 3);
        let config = SimConfig::new(5, 50, 3, 7);
        let tables = SimTables::new(&model, &policy, None, &flow, &config).unwrap();
        let reps = run_config(&tables, &config).unwrap();
        let cap = model.cost_bound * (1.0 - model.discount.powi(4)) / (1.0 - model.discount);
        for r in &reps {
            assert!(r.j1 >= 0.0 && r.j1 <= cap + 1e-12, "cost {} outside [0, {cap}]", r.j1);
        }
    }

    #[test]
    fn null_deviation_reproduces_the_shared_run_bit_for_bit() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 2);
        let config = SimConfig::new(5, 20, 2, 31);
        let shared = simulate_shared(&model, &policy, &flow, &config).unwrap();
        let deviant = DeviationPolicy::Tree { label: "same".into(), policy: policy.clone() };
        let paired = simulate_deviation(&model, &policy, &deviant, &flow, &config).unwrap();
        assert_eq!(shared.cost, paired.cost);
    }

    #[test]
    fn random_actions_lose_against_a_strict_optimum() {
        let model = bundled::decoupled_two_state();
        let (policy, flow) = solved(&model, 3);
        let config = SimConfig::new(6, 300, 3, 555);
        let report = estimate_eps(
            &model,
            &policy,
            &flow,
            &[DeviationPolicy::UniformRandom],
            &config,
            &[6],
        )
        .unwrap();
        let point = &report.points[0];
        assert_eq!(point.eps_hat, 0.0, "noise should not beat the optimum");
        assert!(
            point.ci_hi < 0.0,
            "uniform play should lose decisively, ci_hi {}",
            point.ci_hi
        );
    }

    #[test]
    fn planted_suboptimal_shared_policy_shows_the_solver_gap() {
        let model = bundled::decoupled_two_state();
        let horizon = 3;
        let (optimal, flow) = solved(&model, horizon);
        let mut worst = optimal.clone();
        for depth in worst.by_depth.iter_mut() {
            for (_, action) in depth.iter_mut() {
                *action = 1 - *action;
            }
        }
        let planned_opt =
            evaluate_policy(&model, &optimal, &flow, &SolveOptions::new(horizon)).unwrap();
        let planned_worst =
            evaluate_policy(&model, &worst, &flow, &SolveOptions::new(horizon)).unwrap();
        let known_gap = planned_worst - planned_opt;
        assert!(known_gap > 0.1, "fixture needs a visible gap, got {known_gap}");

        let config = SimConfig::new(6, 400, horizon, 808);
        let deviant = DeviationPolicy::Tree { label: "optimal".into(), policy: optimal };
        let report = estimate_eps(&model, &worst, &flow, &[deviant], &config, &[6]).unwrap();
        let point = &report.points[0];
        assert!(
            (point.eps_hat - known_gap).abs() <= 3.0 * point.stderr,
            "eps {} vs solver gap {known_gap} (stderr {})",
            point.eps_hat,
            point.stderr
        );
    }

    #[test]
    fn initial_scatter_matches_the_binomial_oracle() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 2);
        let mut config = SimConfig::new(16, 500, 2, 616);
        config.test_functions = vec![TestFunction::Indicator(0)];
        let report =
            empirical_convergence(&model, &policy, &flow, &config, &[16]).unwrap();
        let row = report
            .rows
            .iter()
            .find(|r| r.t == 0 && r.f_id == "ind0")
            .expect("t=0 row present");
        let exact = oracle::binomial_mean_abs_deviation(16, model.initial.weights[0]);
        assert!(
            (row.estimate - exact).abs() <= 3.0 * row.stderr,
            "estimate {} vs exact {exact} (stderr {})",
            row.estimate,
            row.stderr
        );
    }

    #[test]
    fn constant_functions_have_zero_error_and_step_bound_holds() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 3);
        let mut config = SimConfig::new(12, 200, 3, 2718);
        config.test_functions = vec![TestFunction::Constant, TestFunction::Indicator(1)];
        let report =
            empirical_convergence(&model, &policy, &flow, &config, &[12]).unwrap();
        for row in report.rows.iter().filter(|r| r.f_id == "const") {
            assert_eq!(row.estimate, 0.0);
            assert_eq!(row.stderr, 0.0);
        }
        for row in &report.martingale {
            assert!(
                row.observed <= row.bound + 3.0 * row.stderr,
                "step error {} above bound {} at t={} f={}",
                row.observed,
                row.bound,
                row.t,
                row.f_id
            );
        }
    }

    #[test]
    fn single_agent_population_is_a_point_mass_on_itself() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 2);
        let config = SimConfig::new(1, 30, 2, 11);
        let tables = SimTables::new(&model, &policy, None, &flow, &config).unwrap();
        let reps = run_config(&tables, &config).unwrap();
        for r in &reps {
            for count in &r.counts {
                assert_eq!(count.iter().sum::<u32>(), 1);
                assert!(count.iter().all(|&c| c == 0 || c == 1));
            }
        }
    }

    #[test]
    fn population_coupled_sensors_are_refused() {
        let xs = vec![-1.0, 1.0];
        let drift = vec![vec![vec![0.0; 2]; 1]; 2];
        let noise = vec![vec![1.0]; 2];
        let sensor = SensorCoupling::MeanField(vec![xs.clone(); 2]);
        let cost = vec![vec![vec![0.5; 2]; 1]; 2];
        let model = build_gaussian(
            drift,
            noise,
            sensor,
            cost,
            Grid::with_coords(xs.clone(), 2.0).unwrap(),
            Grid::with_coords(vec![-1.0, 1.0], 2.0).unwrap(),
            Grid::with_coords(vec![0.0], 1.0).unwrap(),
            0.9,
            MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap(),
            None,
        )
        .unwrap();
        let flow = MeasureFlow::constant(&model.initial.weights, 4);
        let sol = solve_pomdp(&model, &flow, &SolveOptions::new(2)).unwrap();
        let config = SimConfig::new(3, 5, 2, 1);
        let err = simulate_shared(&model, &sol.policy, &flow, &config).unwrap_err();
        assert!(matches!(err, Error::MeanFieldObservation));
    }

    #[test]
    fn bad_configurations_are_rejected() {
        let model = bundled::coupled_toy();
        let (policy, flow) = solved(&model, 2);
        let err =
            simulate_shared(&model, &policy, &flow, &SimConfig::new(0, 5, 2, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            simulate_shared(&model, &policy, &flow, &SimConfig::new(3, 0, 2, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            simulate_shared(&model, &policy, &flow, &SimConfig::new(3, 5, 4, 1)).unwrap_err();
        assert!(matches!(err, Error::HorizonBeyondPolicy { .. }));
    }
}
