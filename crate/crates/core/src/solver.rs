//! Finite-horizon backward induction on the reachable belief tree.
//!
//! For a fixed measure flow the game reduces to a fully observed MDP whose
//! state is the belief. This module enumerates the beliefs reachable from the
//! initial measure (memoized per depth via quantized keys), then runs the
//! Bellman backup from a terminal value toward the root. Running the solve
//! twice, once with terminal value zero and once with the worst-case tail,
//! brackets the infinite-horizon value: the bracket width is
//! `discount^(T+1) * cost_bound / (1 - discount)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result, Violation};
use crate::filter::{self, Belief, StageKernel};
use crate::flow::MeasureFlow;
use crate::model::GameModel;
use crate::num;

/// Actions whose q-value is within this of the minimum count as tied.
pub const TIE_EPS_DEFAULT: f64 = 1e-9;

/// Belief weights are rounded to multiples of this for memoization keys.
pub const QUANTUM_DEFAULT: f64 = 1e-9;

/// Hard cap on total tree nodes before a solve refuses to continue.
pub const NODE_BUDGET_DEFAULT: usize = 5_000_000;

/// Nodes with forward weight at or below this floor are ignored by the
/// optimality residual.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Memoization key: time index plus belief weights rounded to a fixed
/// quantum. Two beliefs sharing a key differ by at most
/// `n_states * quantum` in L1.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BeliefKey {
    pub time: usize,
    pub quantized: Vec<i64>,
}

impl BeliefKey {
    pub fn new(time: usize, weights: &[f64], quantum: f64) -> Self {
        let quantized = weights.iter().map(|w| (w / quantum).round() as i64).collect();
        BeliefKey { time, quantized }
    }

    /// Stable text form used in policy exports: quantized weights joined
    /// with ';'.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self.quantized.iter().map(|q| q.to_string()).collect();
        parts.join(";")
    }
}

/// Value assigned one step past the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalMode {
    /// Terminal value 0: the solve lower-bounds the infinite-horizon value.
    Zero,
    /// Terminal value `cost_bound / (1 - discount)`: an upper bound.
    TailUpper,
}

impl TerminalMode {
    pub fn value(self, model: &GameModel) -> f64 {
        match self {
            TerminalMode::Zero => 0.0,
            TerminalMode::TailUpper => model.value_upper_bound(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TerminalMode::Zero => "zero",
            TerminalMode::TailUpper => "tail_upper",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub horizon: usize,
    pub terminal_mode: TerminalMode,
    pub prune_eps: f64,
    pub tie_eps: f64,
    pub quantum: f64,
    pub node_budget: usize,
}

impl SolveOptions {
    pub fn new(horizon: usize) -> Self {
        SolveOptions {
            horizon,
            terminal_mode: TerminalMode::Zero,
            prune_eps: filter::PRUNE_EPS_DEFAULT,
            tie_eps: TIE_EPS_DEFAULT,
            quantum: QUANTUM_DEFAULT,
            node_budget: NODE_BUDGET_DEFAULT,
        }
    }

    pub fn with_terminal(mut self, mode: TerminalMode) -> Self {
        self.terminal_mode = mode;
        self
    }
}

/// Branch from an action edge to a node in the next depth slice.
#[derive(Debug, Clone)]
pub struct ChildRef {
    pub observation: usize,
    /// Predictive probability of the observation.
    pub probability: f64,
    /// Index into the next depth slice.
    pub node: usize,
}

#[derive(Debug, Clone)]
pub struct ActionEdge {
    pub action: usize,
    /// Expected one-stage cost at this belief under the action.
    pub cost: f64,
    /// Empty at the final depth, where no branching is constructed.
    pub children: Vec<ChildRef>,
    /// Predictive mass of observation branches below the prune threshold.
    pub pruned_mass: f64,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub belief: Belief,
    pub key: BeliefKey,
    pub edges: Vec<ActionEdge>,
}

#[derive(Debug, Clone, Default)]
pub struct DepthSlice {
    pub nodes: Vec<TreeNode>,
    pub index: BTreeMap<BeliefKey, usize>,
}

#[derive(Debug, Clone)]
pub struct BeliefTree {
    /// One slice per time index 0..=horizon.
    pub depths: Vec<DepthSlice>,
    pub horizon: usize,
    pub quantum: f64,
}

impl BeliefTree {
    pub fn node_count(&self) -> usize {
        self.depths.iter().map(|d| d.nodes.len()).sum()
    }

    pub fn root(&self) -> &TreeNode {
        &self.depths[0].nodes[0]
    }
}

/// Which actions to expand at each node.
#[derive(Clone, Copy)]
pub enum ActionScope<'a> {
    /// Every action: the shape needed for optimization.
    All,
    /// Only the policy's chosen action: the shape needed for evaluation and
    /// flow pushforward.
    Chosen(&'a Policy),
}

/// Deterministic belief-to-action map, stored per depth keyed by quantized
/// belief. `flow_digest` records which flow the beliefs were formed under.
#[derive(Debug, Clone)]
pub struct Policy {
    pub horizon: usize,
    pub quantum: f64,
    pub flow_digest: String,
    pub by_depth: Vec<BTreeMap<BeliefKey, usize>>,
}

impl Policy {
    pub fn action_at(&self, key: &BeliefKey) -> Option<usize> {
        self.by_depth.get(key.time).and_then(|m| m.get(key).copied())
    }

    /// Exact lookup, else the action stored at the key nearest in L1 over
    /// quantized weights (ties resolve to the smallest key, so the result is
    /// deterministic). Returns the action, the L1 distance to the matched
    /// key, and whether the hit was exact. `None` when the depth is empty or
    /// beyond the policy horizon.
    pub fn nearest_action(&self, time: usize, weights: &[f64]) -> Option<(usize, f64, bool)> {
        let map = self.by_depth.get(time)?;
        let probe = BeliefKey::new(time, weights, self.quantum);
        if let Some(&a) = map.get(&probe) {
            return Some((a, 0.0, true));
        }
        let mut best: Option<(usize, f64)> = None;
        for (key, &a) in map.iter() {
            let d: f64 = key
                .quantized
                .iter()
                .zip(&probe.quantized)
                .map(|(&p, &q)| (p - q).abs() as f64 * self.quantum)
                .sum();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((a, d));
            }
        }
        best.map(|(a, d)| (a, d, false))
    }

    pub fn n_nodes(&self) -> usize {
        self.by_depth.iter().map(|m| m.len()).sum()
    }
}

/// Per-belief solve output: minimal value, per-action q-values, and the set
/// of actions tied with the minimum.
#[derive(Debug, Clone)]
pub struct ValueEntry {
    pub value: f64,
    pub q_values: Vec<f64>,
    pub argmin_actions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ValueTable {
    pub horizon: usize,
    pub quantum: f64,
    pub by_depth: Vec<BTreeMap<BeliefKey, ValueEntry>>,
}

impl ValueTable {
    pub fn entry(&self, key: &BeliefKey) -> Option<&ValueEntry> {
        self.by_depth.get(key.time).and_then(|m| m.get(key))
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub tree: BeliefTree,
    pub values: ValueTable,
    pub policy: Policy,
}

impl Solution {
    pub fn root_value(&self) -> f64 {
        self.values.by_depth[0][&self.tree.root().key].value
    }
}

/// Enumerates the beliefs reachable from the initial measure through
/// `opts.horizon` steps, expanding the actions named by `scope`. Nodes are
/// deduplicated per depth by quantized key (first arrival supplies the
/// stored belief). Requires flow entries for `t = 0..=horizon+1`; the final
/// depth gets cost-only edges with no children.
pub fn build_tree(
    model: &GameModel,
    flow: &MeasureFlow,
    scope: ActionScope,
    opts: &SolveOptions,
) -> Result<BeliefTree> {
    let t_end = opts.horizon;
    flow.require_entries_through(t_end + 1)?;
    if num::l1_distance(flow.entry(0), &model.initial.weights) > 1e-12 {
        return Err(Error::Invalid(Violation {
            place: "flow[0]".into(),
            problem: "must equal the model's initial measure".into(),
        }));
    }

    let root_weights = model.initial.weights.clone();
    let root_key = BeliefKey::new(0, &root_weights, opts.quantum);
    let mut root_slice = DepthSlice::default();
    root_slice.index.insert(root_key.clone(), 0);
    root_slice.nodes.push(TreeNode {
        belief: Belief { time: 0, weights: root_weights },
        key: root_key,
        edges: Vec::new(),
    });

    let mut tree = BeliefTree { depths: vec![root_slice], horizon: t_end, quantum: opts.quantum };
    let mut total_nodes = 1usize;

    let scoped_actions = |node: &TreeNode, t: usize| -> Result<Vec<usize>> {
        match scope {
            ActionScope::All => Ok((0..model.n_actions()).collect()),
            ActionScope::Chosen(policy) => {
                let a = policy.action_at(&node.key).ok_or(Error::PolicyMissingNode { time: t })?;
                Ok(vec![a])
            }
        }
    };

    for t in 0..t_end {
        let stage = StageKernel::build(model, flow.entry(t), flow.entry(t + 1));
        let mut next = DepthSlice::default();
        for node_idx in 0..tree.depths[t].nodes.len() {
            let z = tree.depths[t].nodes[node_idx].belief.weights.clone();
            let actions = scoped_actions(&tree.depths[t].nodes[node_idx], t)?;
            let mut edges = Vec::with_capacity(actions.len());
            for a in actions {
                let kernel = filter::belief_kernel_with(
                    &z,
                    t,
                    &stage.transition[a],
                    &stage.observation,
                    opts.prune_eps,
                );
                let mut children = Vec::with_capacity(kernel.children.len());
                for child in kernel.children {
                    let key = BeliefKey::new(t + 1, &child.belief.weights, opts.quantum);
                    let idx = match next.index.get(&key) {
                        Some(&i) => i,
                        None => {
                            if total_nodes >= opts.node_budget {
                                return Err(Error::NodeBudget {
                                    budget: opts.node_budget,
                                    depth: t + 1,
                                    horizon: t_end,
                                });
                            }
                            total_nodes += 1;
                            let i = next.nodes.len();
                            next.index.insert(key.clone(), i);
                            next.nodes.push(TreeNode {
                                belief: child.belief,
                                key,
                                edges: Vec::new(),
                            });
                            i
                        }
                    };
                    children.push(ChildRef {
                        observation: child.observation,
                        probability: child.probability,
                        node: idx,
                    });
                }
                edges.push(ActionEdge {
                    action: a,
                    cost: num::dot(&stage.cost[a], &z),
                    children,
                    pruned_mass: kernel.pruned_mass,
                });
            }
            tree.depths[t].nodes[node_idx].edges = edges;
        }
        tree.depths.push(next);
    }

    // Final depth: one-stage costs only, no branching.
    let stage = StageKernel::build(model, flow.entry(t_end), flow.entry(t_end + 1));
    for node_idx in 0..tree.depths[t_end].nodes.len() {
        let z = tree.depths[t_end].nodes[node_idx].belief.weights.clone();
        let actions = scoped_actions(&tree.depths[t_end].nodes[node_idx], t_end)?;
        let edges = actions
            .into_iter()
            .map(|a| ActionEdge {
                action: a,
                cost: num::dot(&stage.cost[a], &z),
                children: Vec::new(),
                pruned_mass: 0.0,
            })
            .collect();
        tree.depths[t_end].nodes[node_idx].edges = edges;
    }

    Ok(tree)
}

/// q-value of one edge given next-depth values by node index (`None` at the
/// final depth). Pruned predictive mass continues at the terminal value, so
/// the bracket semantics survive pruning.
fn edge_q(edge: &ActionEdge, beta: f64, terminal: f64, next: Option<&[f64]>) -> f64 {
    let continuation = match next {
        None => terminal,
        Some(values) => {
            let mut s = 0.0;
            for c in &edge.children {
                s += c.probability * values[c.node];
            }
            s + edge.pruned_mass * terminal
        }
    };
    edge.cost + beta * continuation
}

/// One synchronous Bellman sweep over depth `t` of an all-action tree
/// against an arbitrary next-depth value assignment (indexed by node
/// position in depth `t+1`; ignored at the final depth). Returns per-node
/// minimal q-values. This is the raw operator used by the contraction and
/// monotonicity checks.
pub fn backup_depth(tree: &BeliefTree, beta: f64, terminal: f64, t: usize, next: &[f64]) -> Vec<f64> {
    let at_end = t == tree.horizon;
    tree.depths[t]
        .nodes
        .iter()
        .map(|node| {
            node.edges
                .iter()
                .map(|e| edge_q(e, beta, terminal, if at_end { None } else { Some(next) }))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Single-belief Bellman backup against keyed continuation values. q(a) is
/// the lifted stage cost plus the discounted predictive-weighted
/// continuation; the minimum, all tied minimizers, and the per-action
/// q-values are returned. Missing continuation values indicate a caller bug
/// and surface as internal errors.
pub fn bellman_backup(
    model: &GameModel,
    z: &Belief,
    flow: &MeasureFlow,
    next_values: &BTreeMap<BeliefKey, f64>,
    terminal: f64,
    opts: &SolveOptions,
) -> Result<ValueEntry> {
    let t = z.time;
    flow.require_entries_through(t + 1)?;
    let beta = model.discount;
    let stage = StageKernel::build(model, flow.entry(t), flow.entry(t + 1));
    let mut q_values = Vec::with_capacity(model.n_actions());
    for a in 0..model.n_actions() {
        let kernel = filter::belief_kernel_with(
            &z.weights,
            t,
            &stage.transition[a],
            &stage.observation,
            opts.prune_eps,
        );
        let mut continuation = 0.0;
        for child in &kernel.children {
            let key = BeliefKey::new(t + 1, &child.belief.weights, opts.quantum);
            let v = next_values.get(&key).copied().ok_or_else(|| {
                Error::Internal(format!(
                    "no continuation value for the belief reached by observation {} at time {}",
                    child.observation,
                    t + 1
                ))
            })?;
            continuation += child.probability * v;
        }
        continuation += kernel.pruned_mass * terminal;
        q_values.push(num::dot(&stage.cost[a], &z.weights) + beta * continuation);
    }
    let (best, argmin_actions) = num::argmin_with_ties(&q_values, opts.tie_eps);
    Ok(ValueEntry { value: q_values[best], q_values, argmin_actions })
}

/// Solves the belief MDP for the given flow: builds the reachable tree and
/// backs values up from the terminal assignment. The policy picks the
/// lowest-index action among those tied with the minimum.
pub fn solve_pomdp(model: &GameModel, flow: &MeasureFlow, opts: &SolveOptions) -> Result<Solution> {
    let tree = build_tree(model, flow, ActionScope::All, opts)?;
    let beta = model.discount;
    let terminal = opts.terminal_mode.value(model);
    let t_end = opts.horizon;

    let mut values_by_depth: Vec<BTreeMap<BeliefKey, ValueEntry>> =
        vec![BTreeMap::new(); t_end + 1];
    let mut policy_by_depth: Vec<BTreeMap<BeliefKey, usize>> = vec![BTreeMap::new(); t_end + 1];
    let mut next_by_index: Vec<f64> = Vec::new();

    for t in (0..=t_end).rev() {
        let slice = &tree.depths[t];
        let mut this_by_index = vec![0.0; slice.nodes.len()];
        for (i, node) in slice.nodes.iter().enumerate() {
            let q_values: Vec<f64> = node
                .edges
                .iter()
                .map(|e| {
                    edge_q(e, beta, terminal, if t == t_end { None } else { Some(&next_by_index) })
                })
                .collect();
            let (best, argmin_actions) = num::argmin_with_ties(&q_values, opts.tie_eps);
            let value = q_values[best];
            let chosen = argmin_actions[0];
            this_by_index[i] = value;
            values_by_depth[t]
                .insert(node.key.clone(), ValueEntry { value, q_values, argmin_actions });
            policy_by_depth[t].insert(node.key.clone(), chosen);
        }
        next_by_index = this_by_index;
    }

    Ok(Solution {
        tree,
        values: ValueTable { horizon: t_end, quantum: opts.quantum, by_depth: values_by_depth },
        policy: Policy {
            horizon: t_end,
            quantum: opts.quantum,
            flow_digest: flow.digest(),
            by_depth: policy_by_depth,
        },
    })
}

/// Lower and upper root values from solving with both terminal modes.
pub fn value_bracket(model: &GameModel, flow: &MeasureFlow, opts: &SolveOptions) -> Result<(f64, f64)> {
    let lo = solve_pomdp(model, flow, &opts.clone().with_terminal(TerminalMode::Zero))?;
    let hi = solve_pomdp(model, flow, &opts.clone().with_terminal(TerminalMode::TailUpper))?;
    Ok((lo.root_value(), hi.root_value()))
}

/// Forward occupancy of tree nodes when actions follow `policy`: the root
/// has weight 1 and children accumulate parent weight times branch
/// probability. Pruned mass is dropped (not renormalized), so depth sums may
/// fall short of 1 by the cumulative pruned mass.
pub fn policy_weights(tree: &BeliefTree, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    let mut weights: Vec<Vec<f64>> =
        tree.depths.iter().map(|d| vec![0.0; d.nodes.len()]).collect();
    weights[0][0] = 1.0;
    for t in 0..tree.horizon {
        for (i, node) in tree.depths[t].nodes.iter().enumerate() {
            let w = weights[t][i];
            if w == 0.0 {
                continue;
            }
            let a = policy.action_at(&node.key).ok_or(Error::PolicyMissingNode { time: t })?;
            let edge = node.edges.iter().find(|e| e.action == a).ok_or_else(|| {
                Error::Internal(format!("tree lacks an edge for action {a} at time {t}"))
            })?;
            for c in &edge.children {
                weights[t + 1][c.node] += w * c.probability;
            }
        }
    }
    Ok(weights)
}

/// Largest pointwise q-gap `q(chosen) - min_a q(a)` over nodes whose forward
/// weight under the policy exceeds `1e-12`. Zero (up to the tie tolerance)
/// for a solve-produced policy; for an external policy it measures one-step
/// suboptimality against the table's optimal continuation.
pub fn optimality_residual(
    tree: &BeliefTree,
    values: &ValueTable,
    policy: &Policy,
) -> Result<f64> {
    let weights = policy_weights(tree, policy)?;
    let mut worst = 0.0f64;
    for (t, slice) in tree.depths.iter().enumerate() {
        for (i, node) in slice.nodes.iter().enumerate() {
            if weights[t][i] <= WEIGHT_FLOOR {
                continue;
            }
            let entry = values.entry(&node.key).ok_or_else(|| {
                Error::Internal(format!("value table lacks an entry for a tree node at time {t}"))
            })?;
            let a = policy.action_at(&node.key).ok_or(Error::PolicyMissingNode { time: t })?;
            worst = worst.max(entry.q_values[a] - entry.value);
        }
    }
    Ok(worst)
}

/// Expected discounted cost from the root when every decision follows
/// `policy`. Builds the policy-restricted tree, so a belief the policy does
/// not cover is an error. Equals the solve's root value when the policy is
/// the solve output.
pub fn evaluate_policy(
    model: &GameModel,
    policy: &Policy,
    flow: &MeasureFlow,
    opts: &SolveOptions,
) -> Result<f64> {
    let tree = build_tree(model, flow, ActionScope::Chosen(policy), opts)?;
    let beta = model.discount;
    let terminal = opts.terminal_mode.value(model);
    let mut next: Vec<f64> = Vec::new();
    for t in (0..=tree.horizon).rev() {
        let at_end = t == tree.horizon;
        let vals: Vec<f64> = tree.depths[t]
            .nodes
            .iter()
            .map(|node| {
                edge_q(&node.edges[0], beta, terminal, if at_end { None } else { Some(&next) })
            })
            .collect();
        next = vals;
    }
    Ok(next[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_tabular, build_tabular, MeanFieldMeasure};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Decoupled 2-state, 2-action, 2-observation model. Action 0 drifts
    /// toward state 0, action 1 mixes hard; action 1 is cheaper in state 1.
    fn two_action_model() -> GameModel {
        let k = vec![
            // state 0: rows per action, constant in the coupling coordinate
            vec![vec![vec![0.9, 0.1]; 2], vec![vec![0.5, 0.5]; 2]],
            // state 1
            vec![vec![vec![0.2, 0.8]; 2], vec![vec![0.5, 0.5]; 2]],
        ];
        let d = vec![
            vec![vec![1.0; 2], vec![1.5; 2]],
            vec![vec![2.0; 2], vec![1.6; 2]],
        ];
        let r = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap()
    }

    fn flow_for(model: &GameModel, horizon: usize) -> MeasureFlow {
        MeasureFlow::constant(&model.initial.weights, horizon + 2)
    }

    fn random_model(rng: &mut ChaCha8Rng, nx: usize, ny: usize, na: usize) -> GameModel {
        let row = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            num::normalize(&mut v);
            v
        };
        let k = (0..nx)
            .map(|_| (0..na).map(|_| (0..nx).map(|_| row(rng, nx)).collect()).collect())
            .collect();
        let d = (0..nx)
            .map(|_| {
                (0..na)
                    .map(|_| (0..nx).map(|_| rng.gen_range(0.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let r = (0..nx).map(|_| row(rng, ny)).collect();
        let mut mu0 = row(rng, nx);
        num::normalize(&mut mu0);
        build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(mu0).unwrap()).unwrap()
    }

    #[test]
    fn zero_discount_solve_is_greedy() {
        // Operator-level check; bypasses full validation, which requires a
        // positive discount.
        let k = vec![
            vec![vec![vec![0.9, 0.1]; 2], vec![vec![0.5, 0.5]; 2]],
            vec![vec![vec![0.2, 0.8]; 2], vec![vec![0.5, 0.5]; 2]],
        ];
        let d = vec![
            vec![vec![2.0; 2], vec![1.0; 2]],
            vec![vec![2.0; 2], vec![1.0; 2]],
        ];
        let r = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        let model = assemble_tabular(
            k,
            d,
            r,
            0.0,
            MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let sol = solve_pomdp(&model, &flow_for(&model, 2), &SolveOptions::new(2)).unwrap();
        assert!((sol.root_value() - 1.0).abs() < 1e-15);
        assert_eq!(sol.policy.action_at(&sol.tree.root().key), Some(1));
    }

    #[test]
    fn unit_cost_value_is_geometric_sum() {
        let k = vec![
            vec![vec![vec![0.9, 0.1]; 2], vec![vec![0.5, 0.5]; 2]],
            vec![vec![vec![0.2, 0.8]; 2], vec![vec![0.5, 0.5]; 2]],
        ];
        let d = vec![vec![vec![1.0; 2]; 2]; 2];
        let r = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let horizon = 3;
        let expected = (1.0 - 0.9f64.powi(horizon as i32 + 1)) / (1.0 - 0.9);
        let sol =
            solve_pomdp(&model, &flow_for(&model, horizon), &SolveOptions::new(horizon)).unwrap();
        assert!((sol.root_value() - expected).abs() < 1e-12);

        // Any policy yields the same cost when the stage cost is constant:
        // force action 1 everywhere.
        let forced = Policy {
            horizon,
            quantum: sol.policy.quantum,
            flow_digest: sol.policy.flow_digest.clone(),
            by_depth: sol
                .policy
                .by_depth
                .iter()
                .map(|m| m.keys().map(|k| (k.clone(), 1usize)).collect())
                .collect(),
        };
        let v = evaluate_policy(&model, &forced, &flow_for(&model, horizon), &SolveOptions::new(horizon))
            .unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn horizon_zero_is_greedy_at_root() {
        let model = two_action_model();
        let sol = solve_pomdp(&model, &flow_for(&model, 0), &SolveOptions::new(0)).unwrap();
        // C(z, a0) = 0.5*1 + 0.5*2 = 1.5; C(z, a1) = 0.5*1.5 + 0.5*1.6 = 1.55.
        assert!((sol.root_value() - 1.5).abs() < 1e-15);
        assert_eq!(sol.policy.action_at(&sol.tree.root().key), Some(0));
        assert_eq!(sol.tree.node_count(), 1);
    }

    #[test]
    fn uninformative_sensor_collapses_to_open_loop() {
        // Both actions share the transition kernel; the sensor carries no
        // information, so every depth holds exactly one belief and the solve
        // equals open-loop dynamic programming on predicted beliefs.
        let k = vec![
            vec![vec![vec![0.9, 0.1]; 2]; 2],
            vec![vec![vec![0.2, 0.8]; 2]; 2],
        ];
        let d = vec![
            vec![vec![1.0; 2], vec![3.0; 2]],
            vec![vec![4.0; 2], vec![0.5; 2]],
        ];
        let r = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let horizon = 4;
        let sol =
            solve_pomdp(&model, &flow_for(&model, horizon), &SolveOptions::new(horizon)).unwrap();
        for t in 0..=horizon {
            assert_eq!(sol.tree.depths[t].nodes.len(), 1, "depth {t} not collapsed");
        }

        // Open-loop DP on the predicted belief sequence.
        let mut z = vec![0.5, 0.5];
        let mut beliefs = vec![z.clone()];
        for _ in 0..horizon {
            z = vec![z[0] * 0.9 + z[1] * 0.2, z[0] * 0.1 + z[1] * 0.8];
            beliefs.push(z.clone());
        }
        let cost = |z: &[f64], a: usize| -> f64 {
            let per_state = [[1.0, 3.0], [4.0, 0.5]];
            z[0] * per_state[0][a] + z[1] * per_state[1][a]
        };
        let mut v = 0.0;
        for t in (0..=horizon).rev() {
            let q0 = cost(&beliefs[t], 0) + 0.9 * v;
            let q1 = cost(&beliefs[t], 1) + 0.9 * v;
            v = q0.min(q1);
        }
        assert!((sol.root_value() - v).abs() < 1e-12);
    }

    #[test]
    fn terminal_modes_bracket_and_values_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let model = random_model(&mut rng, 3, 2, 2);
            let horizon = 3;
            let flow = flow_for(&model, horizon);
            let (lo, hi) = value_bracket(&model, &flow, &SolveOptions::new(horizon)).unwrap();
            let width_bound = model.discount.powi(horizon as i32 + 1) * model.value_upper_bound();
            assert!(lo <= hi + 1e-12);
            assert!(hi - lo <= width_bound * (1.0 + 1e-12) + 1e-12);

            let sol = solve_pomdp(
                &model,
                &flow,
                &SolveOptions::new(horizon).with_terminal(TerminalMode::TailUpper),
            )
            .unwrap();
            for depth in &sol.values.by_depth {
                for entry in depth.values() {
                    assert!(entry.value >= 0.0);
                    assert!(entry.value <= model.value_upper_bound() * (1.0 + 1e-12));
                    let min_q =
                        entry.q_values.iter().cloned().fold(f64::INFINITY, f64::min);
                    assert!((entry.value - min_q).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn longer_horizons_stay_within_truncation_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..3 {
            let model = random_model(&mut rng, 2, 2, 2);
            let horizon = 3;
            let v_short = solve_pomdp(
                &model,
                &flow_for(&model, horizon),
                &SolveOptions::new(horizon),
            )
            .unwrap()
            .root_value();
            let v_long = solve_pomdp(
                &model,
                &flow_for(&model, horizon + 2),
                &SolveOptions::new(horizon + 2),
            )
            .unwrap()
            .root_value();
            let gap = model.discount.powi(horizon as i32 + 1) * model.value_upper_bound();
            assert!((v_long - v_short).abs() <= gap + 1e-12);
        }
    }

    #[test]
    fn planted_root_gap_is_the_residual() {
        // Both actions share dynamics; action 1 costs 0.35 more everywhere,
        // so every q-gap is exactly 0.35.
        let k = vec![
            vec![vec![vec![0.9, 0.1]; 2]; 2],
            vec![vec![vec![0.2, 0.8]; 2]; 2],
        ];
        let d = vec![
            vec![vec![1.0; 2], vec![1.35; 2]],
            vec![vec![2.0; 2], vec![2.35; 2]],
        ];
        let r = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        let model =
            build_tabular(k, d, r, 0.9, MeanFieldMeasure::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let horizon = 2;
        let sol =
            solve_pomdp(&model, &flow_for(&model, horizon), &SolveOptions::new(horizon)).unwrap();
        assert!(
            optimality_residual(&sol.tree, &sol.values, &sol.policy).unwrap()
                <= TIE_EPS_DEFAULT
        );

        let mut forced = sol.policy.clone();
        let root_key = sol.tree.root().key.clone();
        forced.by_depth[0].insert(root_key, 1);
        let residual = optimality_residual(&sol.tree, &sol.values, &forced).unwrap();
        assert!((residual - 0.35).abs() < 1e-12);
    }

    #[test]
    fn evaluate_policy_matches_root_value() {
        let model = two_action_model();
        let horizon = 3;
        let flow = flow_for(&model, horizon);
        let sol = solve_pomdp(&model, &flow, &SolveOptions::new(horizon)).unwrap();
        let v = evaluate_policy(&model, &sol.policy, &flow, &SolveOptions::new(horizon)).unwrap();
        assert!((v - sol.root_value()).abs() < 1e-12);
    }

    #[test]
    fn node_budget_is_enforced() {
        let model = two_action_model();
        let mut opts = SolveOptions::new(3);
        opts.node_budget = 3;
        let err = solve_pomdp(&model, &flow_for(&model, 3), &opts).unwrap_err();
        match err {
            Error::NodeBudget { budget, depth, horizon } => {
                assert_eq!(budget, 3);
                assert!(depth >= 1 && depth <= horizon);
            }
            other => panic!("expected a node-budget error, got {other}"),
        }
    }

    #[test]
    fn short_flow_is_rejected() {
        let model = two_action_model();
        let flow = MeasureFlow::constant(&model.initial.weights, 4);
        let err = solve_pomdp(&model, &flow, &SolveOptions::new(3)).unwrap_err();
        assert!(matches!(err, Error::FlowTooShort { needed: 4, got: 4 }));
    }

    #[test]
    fn missing_policy_entry_is_detected() {
        let model = two_action_model();
        let empty = Policy {
            horizon: 2,
            quantum: QUANTUM_DEFAULT,
            flow_digest: String::new(),
            by_depth: vec![BTreeMap::new(); 3],
        };
        let err =
            evaluate_policy(&model, &empty, &flow_for(&model, 2), &SolveOptions::new(2)).unwrap_err();
        assert!(matches!(err, Error::PolicyMissingNode { time: 0 }));
    }

    #[test]
    fn backup_is_contraction_and_monotone() {
        let model = two_action_model();
        let horizon = 3;
        let tree =
            build_tree(&model, &flow_for(&model, horizon), ActionScope::All, &SolveOptions::new(horizon))
                .unwrap();
        let beta = model.discount;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bound = model.value_upper_bound();
        for t in 0..horizon {
            let n_next = tree.depths[t + 1].nodes.len();
            for _ in 0..20 {
                let u: Vec<f64> = (0..n_next).map(|_| rng.gen_range(0.0..bound)).collect();
                let v: Vec<f64> = (0..n_next).map(|_| rng.gen_range(0.0..bound)).collect();
                let tu = backup_depth(&tree, beta, 0.0, t, &u);
                let tv = backup_depth(&tree, beta, 0.0, t, &v);
                let sup_uv = u
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                let sup_t = tu
                    .iter()
                    .zip(&tv)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(sup_t <= beta * sup_uv + 1e-12);

                let w: Vec<f64> = u.iter().map(|x| x + rng.gen_range(0.0..1.0)).collect();
                let tw = backup_depth(&tree, beta, 0.0, t, &w);
                for (a, b) in tu.iter().zip(&tw) {
                    assert!(a <= &(b + 1e-12));
                }
            }
        }
    }

    #[test]
    fn nearest_action_prefers_closest_key() {
        let mut map = BTreeMap::new();
        map.insert(BeliefKey::new(0, &[0.3, 0.7], QUANTUM_DEFAULT), 0usize);
        map.insert(BeliefKey::new(0, &[0.8, 0.2], QUANTUM_DEFAULT), 1usize);
        let policy = Policy {
            horizon: 0,
            quantum: QUANTUM_DEFAULT,
            flow_digest: String::new(),
            by_depth: vec![map],
        };
        let (a, d, exact) = policy.nearest_action(0, &[0.3, 0.7]).unwrap();
        assert_eq!((a, exact), (0, true));
        assert_eq!(d, 0.0);
        let (a, d, exact) = policy.nearest_action(0, &[0.31, 0.69]).unwrap();
        assert_eq!((a, exact), (0, false));
        assert!((d - 0.02).abs() < 1e-9);
        let (a, _, _) = policy.nearest_action(0, &[0.9, 0.1]).unwrap();
        assert_eq!(a, 1);
        assert!(policy.nearest_action(1, &[0.5, 0.5]).is_none());
    }
}
