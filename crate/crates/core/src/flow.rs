//! Population measure flows and the policy-induced flow map.
//!
//! A measure flow is the deterministic sequence of population state
//! distributions `mu_0..mu_{T+1}` that the solver plans against. Pushing a
//! solved policy forward yields a new flow: the belief tree (formed under
//! the flow the policy was solved against) carries node weights forward
//! through observation branches, and the output entry at `t+1` mixes each
//! node's predicted state distribution with transitions evaluated at the
//! *output* flow's own entry at `t`. At a fixed point the two flows agree
//! and the consistency identities below hold to rounding error.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result, Violation};
use crate::filter;
use crate::model::GameModel;
use crate::num;
use crate::solver::{build_tree, ActionScope, BeliefTree, Policy, SolveOptions};

/// Slack factor for the per-step moment drift checks.
pub const TOL_DISC_DEFAULT: f64 = 0.05;

/// Time-indexed sequence of state distributions. Entry 0 is the initial
/// measure; a flow serving a horizon-`T` solve carries `T+2` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    pub measures: Vec<Vec<f64>>,
}

impl MeasureFlow {
    /// Validates every entry as a probability vector of equal length.
    pub fn new(measures: Vec<Vec<f64>>) -> Result<Self> {
        if measures.is_empty() {
            return Err(Error::config("a measure flow needs at least one entry"));
        }
        let n = measures[0].len();
        for (t, m) in measures.iter().enumerate() {
            if m.len() != n {
                return Err(Error::config(format!(
                    "flow entry {t} has {} states, expected {n}",
                    m.len()
                )));
            }
            if !num::is_distribution(m, num::DIST_SUM_TOL) {
                return Err(Error::Invalid(Violation {
                    place: format!("flow[{t}]"),
                    problem: "entries must be a probability distribution".into(),
                }));
            }
        }
        Ok(MeasureFlow { measures })
    }

    /// The same measure at every time index.
    pub fn constant(mu: &[f64], entries: usize) -> Self {
        MeasureFlow { measures: vec![mu.to_vec(); entries] }
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    /// Largest horizon this flow can serve (`len - 2`).
    pub fn horizon(&self) -> usize {
        self.measures.len().saturating_sub(2)
    }

    pub fn states(&self) -> usize {
        self.measures[0].len()
    }

    pub fn entry(&self, t: usize) -> &[f64] {
        &self.measures[t]
    }

    pub fn require_entries_through(&self, t: usize) -> Result<()> {
        if self.measures.len() < t + 1 {
            return Err(Error::FlowTooShort { needed: t, got: self.measures.len() });
        }
        Ok(())
    }

    /// Content checksum over the exact float values; used to tag policies
    /// with the flow they were solved against.
    pub fn digest(&self) -> String {
        let mut text = String::from("pomfg-flow-v1\n");
        for (t, m) in self.measures.iter().enumerate() {
            text.push_str(&format!("{t}:"));
            for w in m {
                text.push_str(&format!(" {w:.17e}"));
            }
            text.push('\n');
        }
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        format!("sha256:{:x}", hasher.finalize())
    }
}

/// Rolls the population forward from the model's initial measure with all
/// actions weighted equally: entry `t+1` averages the transition rows of
/// entry `t` over the action set. A neutral reference profile for solves
/// that fix no policy in advance.
pub fn uniform_action_average_flow(model: &GameModel, entries: usize) -> MeasureFlow {
    let n = model.n_states();
    let n_actions = model.n_actions();
    let mut measures = Vec::with_capacity(entries.max(1));
    measures.push(model.initial.weights.clone());
    for t in 1..entries.max(1) {
        let prev = &measures[t - 1];
        let mut next = vec![0.0; n];
        for x in 0..n {
            if prev[x] == 0.0 {
                continue;
            }
            for a in 0..n_actions {
                let row = model.transition(x, a, prev);
                for (xp, &p) in row.iter().enumerate() {
                    next[xp] += prev[x] * p / n_actions as f64;
                }
            }
        }
        num::normalize(&mut next);
        measures.push(next);
    }
    MeasureFlow { measures }
}

/// Entrywise convex combination `(1 - lambda) a + lambda b`, except entry 0,
/// which is copied from `a` verbatim so the initial measure stays bitwise
/// fixed under damping.
pub fn blend_flows(a: &MeasureFlow, b: &MeasureFlow, lambda: f64) -> Result<MeasureFlow> {
    if a.len() != b.len() {
        return Err(Error::HorizonMismatch { left: a.horizon(), right: b.horizon() });
    }
    let mut measures = Vec::with_capacity(a.len());
    measures.push(a.entry(0).to_vec());
    for t in 1..a.len() {
        measures.push(num::blend(a.entry(t), b.entry(t), lambda));
    }
    Ok(MeasureFlow { measures })
}

/// One weighted belief-action atom in a depth slice.
#[derive(Debug, Clone)]
pub struct FlowNode {
    pub weight: f64,
    pub belief: Vec<f64>,
    pub action: usize,
}

/// The policy's reachable tree with forward weights: a finitely supported
/// distribution over (belief, action) per depth. Node order mirrors the
/// embedded tree's slices. Weights are renormalized per depth after dropping
/// pruned observation branches; the dropped raw mass is logged.
#[derive(Debug, Clone)]
pub struct StateActionFlow {
    pub tree: BeliefTree,
    pub depths: Vec<Vec<FlowNode>>,
    /// Raw probability mass lost to pruning when stepping into each depth;
    /// entry 0 is always 0.
    pub pruned_per_depth: Vec<f64>,
}

/// Mean measure of a weighted set of beliefs: `sum_i w_i z_i` elementwise.
/// Recovers the state marginal when the weights sum to one.
pub fn barycenter(nodes: &[FlowNode]) -> Vec<f64> {
    let n = nodes.first().map_or(0, |node| node.belief.len());
    let mut out = vec![0.0; n];
    for node in nodes {
        for (x, &z) in node.belief.iter().enumerate() {
            out[x] += node.weight * z;
        }
    }
    out
}

fn policy_forward(
    model: &GameModel,
    policy: &Policy,
    filter_flow: &MeasureFlow,
    opts: &SolveOptions,
) -> Result<(MeasureFlow, StateActionFlow)> {
    let tree = build_tree(model, filter_flow, ActionScope::Chosen(policy), opts)?;
    let horizon = tree.horizon;
    let n = model.n_states();

    let mut weights: Vec<Vec<f64>> =
        tree.depths.iter().map(|d| vec![0.0; d.nodes.len()]).collect();
    weights[0][0] = 1.0;
    let mut pruned_per_depth = vec![0.0; horizon + 1];
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(horizon + 2);
    out.push(model.initial.weights.clone());

    for t in 0..=horizon {
        // Output entry for t+1: transitions are evaluated at the output
        // flow's own entry t, not the filter flow's.
        let mut rows_cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; model.n_actions()];
        let mut mu_next = vec![0.0; n];
        for (i, node) in tree.depths[t].nodes.iter().enumerate() {
            let wgt = weights[t][i];
            if wgt == 0.0 {
                continue;
            }
            let a = node.edges[0].action;
            if rows_cache[a].is_none() {
                rows_cache[a] =
                    Some((0..n).map(|x| model.transition(x, a, &out[t])).collect());
            }
            let predicted =
                filter::predict_weights(&node.belief.weights, rows_cache[a].as_ref().unwrap());
            for (xp, &p) in predicted.iter().enumerate() {
                mu_next[xp] += wgt * p;
            }
        }
        num::normalize(&mut mu_next);
        out.push(mu_next);

        // Advance node weights through the filter tree's branches.
        if t < horizon {
            let mut pruned = 0.0;
            for (i, node) in tree.depths[t].nodes.iter().enumerate() {
                let wgt = weights[t][i];
                if wgt == 0.0 {
                    continue;
                }
                let edge = &node.edges[0];
                pruned += wgt * edge.pruned_mass;
                for c in &edge.children {
                    weights[t + 1][c.node] += wgt * c.probability;
                }
            }
            pruned_per_depth[t + 1] = pruned;
            let retained: f64 = weights[t + 1].iter().sum();
            // Retained mass vanishes only if every branch was pruned, which
            // kernel positivity rules out; renormalize so depth sums stay 1.
            for v in weights[t + 1].iter_mut() {
                *v /= retained;
            }
        }
    }

    let depths = (0..=horizon)
        .map(|t| {
            tree.depths[t]
                .nodes
                .iter()
                .enumerate()
                .map(|(i, node)| FlowNode {
                    weight: weights[t][i],
                    belief: node.belief.weights.clone(),
                    action: node.edges[0].action,
                })
                .collect()
        })
        .collect();

    Ok((
        MeasureFlow { measures: out },
        StateActionFlow { tree, depths, pruned_per_depth },
    ))
}

/// The flow a policy induces when the whole population follows it. The
/// belief tree and branch weights come from `filter_flow` (the policy's
/// information structure); the output flow feeds back into the transition
/// kernel step by step.
pub fn induced_flow(
    model: &GameModel,
    policy: &Policy,
    filter_flow: &MeasureFlow,
    opts: &SolveOptions,
) -> Result<MeasureFlow> {
    Ok(policy_forward(model, policy, filter_flow, opts)?.0)
}

/// The weighted (belief, action) atoms per depth under the policy.
pub fn state_action_flow(
    model: &GameModel,
    policy: &Policy,
    filter_flow: &MeasureFlow,
    opts: &SolveOptions,
) -> Result<StateActionFlow> {
    Ok(policy_forward(model, policy, filter_flow, opts)?.1)
}

/// Both pushforward products in one pass.
pub fn push_forward(
    model: &GameModel,
    policy: &Policy,
    filter_flow: &MeasureFlow,
    opts: &SolveOptions,
) -> Result<(MeasureFlow, StateActionFlow)> {
    policy_forward(model, policy, filter_flow, opts)
}

/// One failed moment inequality. `node = None` flags a depth-level bound,
/// otherwise the per-node one-step drift bound at that tree position.
#[derive(Debug, Clone)]
pub struct MomentViolation {
    pub time: usize,
    pub node: Option<usize>,
    pub observed: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct MomentDepth {
    pub time: usize,
    /// `sum_nodes w_node * sum_x moment_weights(x) z_node(x)`.
    pub w_mass: f64,
    /// `alpha^t * M`.
    pub depth_bound: f64,
    /// Depth bound compounded with the per-step slack factor.
    pub depth_bound_with_slack: f64,
}

/// Report-only diagnostics; violations never abort a run.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub per_depth: Vec<MomentDepth>,
    pub violations: Vec<MomentViolation>,
    pub tol_disc: f64,
}

impl MomentReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the moment structure along a pushed-forward flow: per depth the
/// weighted moment mass against `(1+tol)^t alpha^t M`, and per node the
/// one-step drift `sum_y H(y) W(child) <= (1+tol) alpha W(z)`.
pub fn moment_check(model: &GameModel, sa: &StateActionFlow, tol_disc: f64) -> MomentReport {
    let w = &model.moment_weights;
    let alpha = model.moment_alpha;
    let m0 = model.moment_m;
    let mut per_depth = Vec::with_capacity(sa.depths.len());
    let mut violations = Vec::new();

    for (t, nodes) in sa.depths.iter().enumerate() {
        let w_mass: f64 = nodes.iter().map(|n| n.weight * num::dot(w, &n.belief)).sum();
        let depth_bound = alpha.powi(t as i32) * m0;
        let depth_bound_with_slack = (1.0 + tol_disc).powi(t as i32) * depth_bound;
        if w_mass > depth_bound_with_slack {
            violations.push(MomentViolation {
                time: t,
                node: None,
                observed: w_mass,
                bound: depth_bound_with_slack,
            });
        }
        per_depth.push(MomentDepth { time: t, w_mass, depth_bound, depth_bound_with_slack });
    }

    for t in 0..sa.tree.horizon {
        for (i, node) in sa.tree.depths[t].nodes.iter().enumerate() {
            let wz = num::dot(w, &node.belief.weights);
            let edge = &node.edges[0];
            let stepped: f64 = edge
                .children
                .iter()
                .map(|c| {
                    c.probability
                        * num::dot(w, &sa.tree.depths[t + 1].nodes[c.node].belief.weights)
                })
                .sum();
            let bound = (1.0 + tol_disc) * alpha * wz;
            if stepped > bound {
                violations.push(MomentViolation {
                    time: t,
                    node: Some(i),
                    observed: stepped,
                    bound,
                });
            }
        }
    }

    MomentReport { per_depth, violations, tol_disc }
}

/// Per-depth agreement diagnostics between a state-action flow and a
/// measure flow that claims to be consistent with it.
#[derive(Debug, Clone)]
pub struct DepthConsistency {
    pub time: usize,
    /// L1 distance between the belief barycenter at this depth and the
    /// flow's entry.
    pub barycenter_error: f64,
    /// L1 distance between the two pushforward formulas for this entry:
    /// transition-mixing from depth t-1 versus the mixture of depth-t
    /// posteriors. Zero by convention at t = 0.
    pub two_formula_error: f64,
}

/// Evaluates the consistency identities along a flow: the barycenter of each
/// depth's belief atoms should reproduce the flow entry, and the
/// transition-mixed pushforward of depth `t` should match the posterior
/// mixture at depth `t+1`. Both hold to rounding error exactly when the
/// policy's filter flow and the induced flow coincide.
pub fn consistency_check(
    model: &GameModel,
    sa: &StateActionFlow,
    flow: &MeasureFlow,
) -> Result<Vec<DepthConsistency>> {
    flow.require_entries_through(sa.depths.len() - 1)?;
    let n = model.n_states();
    let mut report = Vec::with_capacity(sa.depths.len());
    for (t, nodes) in sa.depths.iter().enumerate() {
        let bary = barycenter(nodes);
        report.push(DepthConsistency {
            time: t,
            barycenter_error: num::l1_distance(&bary, flow.entry(t)),
            two_formula_error: 0.0,
        });
    }
    for t in 0..sa.depths.len() - 1 {
        let mut rows_cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; model.n_actions()];
        let mut mixed = vec![0.0; n];
        for node in &sa.depths[t] {
            if node.weight == 0.0 {
                continue;
            }
            if rows_cache[node.action].is_none() {
                rows_cache[node.action] =
                    Some((0..n).map(|x| model.transition(x, node.action, flow.entry(t))).collect());
            }
            let predicted =
                filter::predict_weights(&node.belief, rows_cache[node.action].as_ref().unwrap());
            for (xp, &p) in predicted.iter().enumerate() {
                mixed[xp] += node.weight * p;
            }
        }
        let posterior_mixture = barycenter(&sa.depths[t + 1]);
        report[t + 1].two_formula_error = num::l1_distance(&mixed, &posterior_mixture);
    }
    Ok(report)
}
