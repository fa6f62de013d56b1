//! Fixed-point search for a self-consistent (policy, flow) pair.
//!
//! A candidate equilibrium is a flow whose optimal policy induces that same
//! flow. The existence theory is nonconstructive, so this module iterates:
//! solve against the current flow, push the policy forward, measure the gap,
//! and damp toward the induced flow. Non-convergence is reported, never
//! thrown; the best-residual candidate is returned either way.

use crate::error::{Error, Result};
use crate::flow::{self, blend_flows, MeasureFlow, StateActionFlow};
use crate::model::GameModel;
use crate::num;
use crate::solver::{self, optimality_residual, solve_pomdp, Policy, SolveOptions};

/// Step-size schedule for the flow update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    /// Fixed step in (0, 1]; 1.0 is the undamped Picard map.
    Constant(f64),
    /// Step `1/(k+1)` at iteration k, so the iterate is the running average
    /// of all induced flows.
    FictitiousPlay,
}

impl Damping {
    fn lambda(self, k: usize) -> f64 {
        match self {
            Damping::Constant(l) => l,
            Damping::FictitiousPlay => 1.0 / (k as f64 + 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumConfig {
    /// Inner solve settings; the horizon and terminal mode live here.
    pub solve: SolveOptions,
    pub damping: Damping,
    /// Stop once the flow gap (sup over t of L1) falls to this.
    pub tol: f64,
    pub max_iters: usize,
    /// Starting flow; defaults to the initial measure held constant.
    pub initial_flow: Option<MeasureFlow>,
}

impl EquilibriumConfig {
    pub fn new(horizon: usize) -> Self {
        EquilibriumConfig {
            solve: SolveOptions::new(horizon),
            damping: Damping::Constant(1.0),
            tol: 1e-6,
            max_iters: 500,
            initial_flow: None,
        }
    }
}

/// Outcome of the fixed-point search, reported for the candidate with the
/// smallest flow gap seen.
#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    /// The candidate flow the policy was solved against.
    pub flow: MeasureFlow,
    pub policy: Policy,
    /// The flow the policy induces; at a fixed point it matches `flow`.
    pub induced: MeasureFlow,
    /// Weighted belief-action atoms of the candidate, for diagnostics.
    pub state_action: StateActionFlow,
    /// Flow gap per iteration, verbatim.
    pub residual_history: Vec<f64>,
    /// Smallest gap seen (the reported candidate's).
    pub residual: f64,
    pub best_iteration: usize,
    pub converged: bool,
    /// Largest q-gap of the reported policy on its own tree.
    pub optimality_residual: f64,
    /// Root value under terminal value zero and under the worst-case tail.
    pub value_bracket: (f64, f64),
}

/// Largest L1 distance between corresponding entries of two equal-length
/// flows.
pub fn nce_residual(a: &MeasureFlow, b: &MeasureFlow) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::HorizonMismatch { left: a.horizon(), right: b.horizon() });
    }
    let mut worst = 0.0f64;
    for t in 0..a.len() {
        worst = worst.max(num::l1_distance(a.entry(t), b.entry(t)));
    }
    Ok(worst)
}

struct Candidate {
    flow: MeasureFlow,
    solution: solver::Solution,
    induced: MeasureFlow,
    state_action: StateActionFlow,
    residual: f64,
    iteration: usize,
}

/// Damped fixed-point iteration. Each round solves the belief MDP against
/// the current flow, pushes the policy forward, and blends the result back
/// with step `lambda_k`. Stops at `tol` or `max_iters`; either way the
/// best-residual candidate is packaged with its optimality residual and
/// value bracket.
pub fn find_equilibrium(model: &GameModel, config: &EquilibriumConfig) -> Result<EquilibriumReport> {
    if config.tol <= 0.0 {
        return Err(Error::config("equilibrium tolerance must be positive"));
    }
    if config.max_iters == 0 {
        return Err(Error::config("equilibrium needs at least one iteration"));
    }
    if let Damping::Constant(l) = config.damping {
        if !(l > 0.0 && l <= 1.0) {
            return Err(Error::config(format!("damping step {l} outside (0, 1]")));
        }
    }

    let entries = config.solve.horizon + 2;
    let mut current = match &config.initial_flow {
        Some(f) => {
            f.require_entries_through(entries - 1)?;
            f.clone()
        }
        None => MeasureFlow::constant(&model.initial.weights, entries),
    };

    let mut history = Vec::new();
    let mut best: Option<Candidate> = None;

    for k in 0..config.max_iters {
        let solution = solve_pomdp(model, &current, &config.solve)?;
        let (induced, state_action) =
            flow::push_forward(model, &solution.policy, &current, &config.solve)?;
        let residual = nce_residual(&current, &induced)?;
        history.push(residual);

        let improved = best.as_ref().map_or(true, |b| residual < b.residual);
        if improved {
            best = Some(Candidate {
                flow: current.clone(),
                solution,
                induced: induced.clone(),
                state_action,
                residual,
                iteration: k,
            });
        }
        if residual <= config.tol {
            break;
        }
        current = blend_flows(&current, &induced, config.damping.lambda(k))?;
    }

    let best = best.expect("at least one iteration ran");
    let converged = best.residual <= config.tol;
    let opt_residual = optimality_residual(
        &best.solution.tree,
        &best.solution.values,
        &best.solution.policy,
    )?;
    let value_bracket = solver::value_bracket(model, &best.flow, &config.solve)?;

    Ok(EquilibriumReport {
        flow: best.flow,
        policy: best.solution.policy,
        induced: best.induced,
        state_action: best.state_action,
        residual_history: history,
        residual: best.residual,
        best_iteration: best.iteration,
        converged,
        optimality_residual: opt_residual,
        value_bracket,
    })
}

/// Signed pairing between cost differences and flow differences: the
/// discounted sum over depths of the cost gap (each flow's own mean-field
/// term inside the stage cost) integrated against the difference of the two
/// belief-action distributions. A nonnegative value is the condition
/// associated with uniqueness of the fixed point for this pair; the sign is
/// advisory and never enforced.
pub fn monotonicity_diagnostic(
    model: &GameModel,
    sa_a: &StateActionFlow,
    flow_a: &MeasureFlow,
    sa_b: &StateActionFlow,
    flow_b: &MeasureFlow,
) -> Result<f64> {
    if sa_a.depths.len() != sa_b.depths.len() {
        return Err(Error::HorizonMismatch {
            left: sa_a.depths.len().saturating_sub(1),
            right: sa_b.depths.len().saturating_sub(1),
        });
    }
    let depths = sa_a.depths.len();
    flow_a.require_entries_through(depths - 1)?;
    flow_b.require_entries_through(depths - 1)?;

    let cost_gap = |z: &[f64], action: usize, mu_a: &[f64], mu_b: &[f64]| -> f64 {
        z.iter()
            .enumerate()
            .map(|(x, &w)| {
                if w == 0.0 {
                    0.0
                } else {
                    w * (model.cost(x, action, mu_a) - model.cost(x, action, mu_b))
                }
            })
            .sum()
    };

    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 0..depths {
        let mu_a = flow_a.entry(t);
        let mu_b = flow_b.entry(t);
        let term_a: f64 = sa_a.depths[t]
            .iter()
            .map(|n| n.weight * cost_gap(&n.belief, n.action, mu_a, mu_b))
            .sum();
        let term_b: f64 = sa_b.depths[t]
            .iter()
            .map(|n| n.weight * cost_gap(&n.belief, n.action, mu_a, mu_b))
            .sum();
        total += discount * (term_a - term_b);
        discount *= model.discount;
    }
    Ok(total)
}
