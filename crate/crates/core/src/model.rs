//! Game-model abstraction: finite state/observation/action grids with
//! transition, observation, and cost kernels coupled to a population measure.
//!
//! Two concrete families are provided:
//!
//! * a tabular family where the coupling is affine,
//!   `p(x'|x,a,mu) = sum_xbar mu(xbar) K(x'|x,a,xbar)`, and
//! * a Gaussian additive-noise family on real grid coordinates,
//!   `x' ~ Normal(F(x,a,mu), g(x,a)^2)` discretized by midpoint quadrature,
//!   with `F(x,a,mu) = sum_xbar mu(xbar) f(x,a,xbar)`.
//!
//! Evaluators are pure and read-only after construction; a model can be
//! shared freely across threads.

use std::collections::BTreeSet;

use crate::error::{Error, Result, Violation};
use crate::num;
use sha2::{Digest, Sha256};

/// Tolerance for kernel rows and initial measures: stochasticity is enforced
/// at this level everywhere in the crate.
pub const KERNEL_TOL: f64 = 1e-12;

/// A finite axis. `coords` are physical coordinates for families derived
/// from continuous dynamics; index-only grids leave them out.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub size: usize,
    pub coords: Option<Vec<f64>>,
    pub cell_width: Option<f64>,
}

impl Grid {
    pub fn indexed(size: usize) -> Self {
        Grid { size, coords: None, cell_width: None }
    }

    pub fn with_coords(coords: Vec<f64>, cell_width: f64) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Invalid(Violation {
                place: "grid".into(),
                problem: "no coordinates".into(),
            }));
        }
        if coords.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(Violation {
                place: "grid".into(),
                problem: "coordinates not strictly increasing".into(),
            }));
        }
        if !(cell_width > 0.0) {
            return Err(Error::Invalid(Violation {
                place: "grid".into(),
                problem: format!("cell width {cell_width} not positive"),
            }));
        }
        Ok(Grid { size: coords.len(), coords: Some(coords), cell_width: Some(cell_width) })
    }

    /// Physical coordinate of cell `i`, falling back to the index itself for
    /// index-only grids.
    pub fn coord(&self, i: usize) -> f64 {
        match &self.coords {
            Some(c) => c[i],
            None => i as f64,
        }
    }
}

/// Population state distribution. Weights sum to one within `KERNEL_TOL`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldMeasure {
    pub weights: Vec<f64>,
}

impl MeanFieldMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if !num::is_distribution(&weights, KERNEL_TOL) {
            return Err(Error::Invalid(Violation {
                place: "measure".into(),
                problem: format!("weights sum to {} or contain negatives", num::total(&weights)),
            }));
        }
        Ok(MeanFieldMeasure { weights })
    }

    pub fn dirac(size: usize, at: usize) -> Self {
        let mut weights = vec![0.0; size];
        weights[at] = 1.0;
        MeanFieldMeasure { weights }
    }

    pub fn uniform(size: usize) -> Self {
        MeanFieldMeasure { weights: vec![1.0 / size as f64; size] }
    }
}

/// Tabular family data. Tensor layout: `coupling_transition[x][a][xbar]` is a
/// distribution over the next state, `coupling_cost[x][a][xbar]` a scalar,
/// `observation_table[x]` a distribution over observations (mean-field free).
#[derive(Debug, Clone)]
pub struct TabularAffineModel {
    pub coupling_transition: Vec<Vec<Vec<Vec<f64>>>>,
    pub coupling_cost: Vec<Vec<Vec<f64>>>,
    pub observation_table: Vec<Vec<f64>>,
}

/// How the Gaussian family's sensor reads the population: `StateOnly` keeps
/// the observation kernel free of the population measure, which the
/// population simulator requires.
#[derive(Debug, Clone)]
pub enum SensorCoupling {
    /// h(x): observation mean depends on own state only.
    StateOnly(Vec<f64>),
    /// h(x, xbar): observation mean averages over the population.
    MeanField(Vec<Vec<f64>>),
}

/// Gaussian additive-noise family tabulated on grid coordinates:
/// next state mean `F(x,a,mu) = sum_xbar mu(xbar) drift[x][a][xbar]`,
/// noise scale `noise[x][a]` (bounded away from zero), observation mean from
/// `sensor` with unit observation noise.
#[derive(Debug, Clone)]
pub struct GaussianAdditiveModel {
    pub drift: Vec<Vec<Vec<f64>>>,
    pub noise: Vec<Vec<f64>>,
    pub sensor: SensorCoupling,
    pub coupling_cost: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub enum Kernels {
    Tabular(TabularAffineModel),
    Gaussian(GaussianAdditiveModel),
}

/// A complete game model: grids, kernel evaluators, discount, initial
/// measure, and the moment structure used by the flow diagnostics.
#[derive(Debug, Clone)]
pub struct GameModel {
    pub states: Grid,
    pub observations: Grid,
    pub actions: Grid,
    pub discount: f64,
    pub initial: MeanFieldMeasure,
    pub cost_bound: f64,
    pub moment_weights: Vec<f64>,
    pub moment_alpha: f64,
    pub moment_m: f64,
    pub kernels: Kernels,
}

impl GameModel {
    pub fn n_states(&self) -> usize {
        self.states.size
    }
    pub fn n_observations(&self) -> usize {
        self.observations.size
    }
    pub fn n_actions(&self) -> usize {
        self.actions.size
    }

    /// Distribution of the next state given own state `x`, action `a`, and
    /// population measure `mu`.
    pub fn transition(&self, x: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        match &self.kernels {
            Kernels::Tabular(tab) => {
                let slices = &tab.coupling_transition[x][a];
                let n = self.n_states();
                let mut row = vec![0.0; n];
                for (xbar, w) in mu.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    for (xp, v) in slices[xbar].iter().enumerate() {
                        row[xp] += w * v;
                    }
                }
                row
            }
            Kernels::Gaussian(gauss) => {
                let mean = num::dot(mu, &gauss.drift[x][a]);
                let sigma = gauss.noise[x][a];
                discretize_normal(&self.states, mean, sigma, true)
            }
        }
    }

    /// Distribution of the observation given own state `x` and population
    /// measure `mu` (ignored by families with a population-free sensor).
    pub fn observation(&self, x: usize, mu: &[f64]) -> Vec<f64> {
        match &self.kernels {
            Kernels::Tabular(tab) => tab.observation_table[x].clone(),
            Kernels::Gaussian(gauss) => {
                let mean = match &gauss.sensor {
                    SensorCoupling::StateOnly(h) => h[x],
                    SensorCoupling::MeanField(h) => num::dot(mu, &h[x]),
                };
                discretize_normal(&self.observations, mean, 1.0, false)
            }
        }
    }

    /// One-stage cost for `(x, a)` under population measure `mu`.
    pub fn cost(&self, x: usize, a: usize, mu: &[f64]) -> f64 {
        let d = match &self.kernels {
            Kernels::Tabular(tab) => &tab.coupling_cost[x][a],
            Kernels::Gaussian(gauss) => &gauss.coupling_cost[x][a],
        };
        num::dot(mu, d)
    }

    /// Upper bound `cost_bound / (1 - discount)` on any discounted value.
    pub fn value_upper_bound(&self) -> f64 {
        self.cost_bound / (1.0 - self.discount)
    }

    /// True when the observation kernel reads the population measure; the
    /// population simulator refuses such models.
    pub fn observation_depends_on_mean_field(&self) -> bool {
        matches!(
            &self.kernels,
            Kernels::Gaussian(GaussianAdditiveModel { sensor: SensorCoupling::MeanField(_), .. })
        )
    }

    /// Replaces the moment structure (weights and growth factor), recomputing
    /// the initial moment mass. Used to exercise moment diagnostics with
    /// nontrivial weights on tabular models.
    pub fn with_moment_structure(mut self, weights: Vec<f64>, alpha: f64) -> Self {
        assert_eq!(weights.len(), self.n_states());
        self.moment_m = num::dot(&weights, &self.initial.weights);
        self.moment_weights = weights;
        self.moment_alpha = alpha;
        self
    }

    /// Content digest over everything that defines the model's behavior.
    /// Stable across runs and processes for identical inputs.
    pub fn digest(&self) -> String {
        let mut text = String::new();
        let mut push = |s: &str| text.push_str(s);
        push("pomfg-model-v1\n");
        for (tag, grid) in
            [("states", &self.states), ("observations", &self.observations), ("actions", &self.actions)]
        {
            push(&format!("{tag} {}\n", grid.size));
            if let Some(c) = &grid.coords {
                push(&format!("coords {}\n", join_floats(c)));
            }
            if let Some(w) = grid.cell_width {
                push(&format!("cell {w:.17e}\n"));
            }
        }
        push(&format!("discount {:.17e}\n", self.discount));
        push(&format!("initial {}\n", join_floats(&self.initial.weights)));
        push(&format!(
            "moment {} alpha {:.17e} m {:.17e}\n",
            join_floats(&self.moment_weights),
            self.moment_alpha,
            self.moment_m
        ));
        push(&format!("cost_bound {:.17e}\n", self.cost_bound));
        match &self.kernels {
            Kernels::Tabular(tab) => {
                push("family tabular\n");
                for x in &tab.coupling_transition {
                    for a in x {
                        for row in a {
                            push(&format!("K {}\n", join_floats(row)));
                        }
                    }
                }
                for x in &tab.coupling_cost {
                    for row in x {
                        push(&format!("d {}\n", join_floats(row)));
                    }
                }
                for row in &tab.observation_table {
                    push(&format!("r {}\n", join_floats(row)));
                }
            }
            Kernels::Gaussian(gauss) => {
                push("family gaussian\n");
                for x in &gauss.drift {
                    for row in x {
                        push(&format!("f {}\n", join_floats(row)));
                    }
                }
                for row in &gauss.noise {
                    push(&format!("g {}\n", join_floats(row)));
                }
                match &gauss.sensor {
                    SensorCoupling::StateOnly(h) => push(&format!("h {}\n", join_floats(h))),
                    SensorCoupling::MeanField(h) => {
                        for row in h {
                            push(&format!("h2 {}\n", join_floats(row)));
                        }
                    }
                }
                for x in &gauss.coupling_cost {
                    for row in x {
                        push(&format!("d {}\n", join_floats(row)));
                    }
                }
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let out = hasher.finalize();
        let mut hexed = String::with_capacity(7 + 64);
        hexed.push_str("sha256:");
        for byte in out {
            hexed.push_str(&format!("{byte:02x}"));
        }
        hexed
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

/// Midpoint quadrature of a normal density over grid cells. With `fold` the
/// exact tail mass beyond the outermost cell edges is added to the boundary
/// cells before renormalization, so drift pushing mass off-grid is retained
/// rather than discarded.
fn discretize_normal(grid: &Grid, mean: f64, sigma: f64, fold: bool) -> Vec<f64> {
    let coords = grid.coords.as_ref().expect("gaussian family requires grid coordinates");
    let width = grid.cell_width.expect("gaussian family requires a cell width");
    let n = coords.len();
    let mut masses = vec![0.0; n];
    for (i, &xi) in coords.iter().enumerate() {
        let t = (xi - mean) / sigma;
        masses[i] = (-0.5 * t * t).exp() * width / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    }
    if fold {
        let lo_edge = coords[0] - 0.5 * width;
        let hi_edge = coords[n - 1] + 0.5 * width;
        masses[0] += normal_cdf((lo_edge - mean) / sigma);
        masses[n - 1] += 1.0 - normal_cdf((hi_edge - mean) / sigma);
    }
    let total = num::total(&masses);
    if total <= 1e-300 {
        // Everything underflowed: the renormalized kernel degenerates to a
        // point mass at the nearest cell.
        let nearest = coords
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - mean).abs().partial_cmp(&(*b - mean).abs()).unwrap()
            })
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

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

fn max_abs_3d(t: &[Vec<Vec<f64>>]) -> f64 {
    t.iter()
        .flat_map(|a| a.iter())
        .flat_map(|b| b.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Builds a tabular-family model. Rejects the first defect found (complete
/// listings come from [`validate`]).
pub fn build_tabular(
    coupling_transition: Vec<Vec<Vec<Vec<f64>>>>,
    coupling_cost: Vec<Vec<Vec<f64>>>,
    observation_table: Vec<Vec<f64>>,
    discount: f64,
    initial: MeanFieldMeasure,
) -> Result<GameModel> {
    let model = assemble_tabular(coupling_transition, coupling_cost, observation_table, discount, initial)?;
    match validate(&model).into_iter().next() {
        None => Ok(model),
        Some(v) => Err(Error::Invalid(v)),
    }
}

/// Assembles a tabular model without checking kernel rows, so that
/// [`validate`] can produce complete violation listings for defective data.
/// Shapes must still be consistent.
pub fn assemble_tabular(
    coupling_transition: Vec<Vec<Vec<Vec<f64>>>>,
    coupling_cost: Vec<Vec<Vec<f64>>>,
    observation_table: Vec<Vec<f64>>,
    discount: f64,
    initial: MeanFieldMeasure,
) -> Result<GameModel> {
    let n_states = coupling_transition.len();
    if n_states == 0 {
        return Err(Error::config("empty transition tensor"));
    }
    let n_actions = coupling_transition[0].len();
    let n_obs = observation_table.first().map(|r| r.len()).unwrap_or(0);
    let shape_ok = coupling_transition
        .iter()
        .all(|a| a.len() == n_actions && a.iter().all(|s| s.len() == n_states && s.iter().all(|r| r.len() == n_states)))
        && coupling_cost.len() == n_states
        && coupling_cost.iter().all(|a| a.len() == n_actions && a.iter().all(|s| s.len() == n_states))
        && observation_table.len() == n_states
        && observation_table.iter().all(|r| r.len() == n_obs)
        && n_obs >= 1
        && n_actions >= 1
        && initial.weights.len() == n_states;
    if !shape_ok {
        return Err(Error::config("tensor shapes disagree with grid sizes"));
    }
    let cost_bound = max_abs_3d(&coupling_cost);
    let moment_weights = vec![1.0; n_states];
    let moment_m = num::dot(&moment_weights, &initial.weights);
    Ok(GameModel {
        states: Grid::indexed(n_states),
        observations: Grid::indexed(n_obs),
        actions: Grid::indexed(n_actions),
        discount,
        initial,
        cost_bound,
        moment_weights,
        moment_alpha: 1.0,
        moment_m,
        kernels: Kernels::Tabular(TabularAffineModel {
            coupling_transition,
            coupling_cost,
            observation_table,
        }),
    })
}

/// Builds a Gaussian additive-noise model on grid coordinates.
///
/// `l_bound`, when given, overrides the on-grid estimate of the noise-to-state
/// ratio entering the moment growth factor
/// `alpha = max(1 + ||drift||^2, L)`; the on-grid estimate takes
/// `L = max g(x,a)^2 / coord(x)^2` over cells with a nonzero coordinate (the
/// ratio is unbounded at coordinate zero).
pub fn build_gaussian(
    drift: Vec<Vec<Vec<f64>>>,
    noise: Vec<Vec<f64>>,
    sensor: SensorCoupling,
    coupling_cost: Vec<Vec<Vec<f64>>>,
    states: Grid,
    observations: Grid,
    actions: Grid,
    discount: f64,
    initial: MeanFieldMeasure,
    l_bound: Option<f64>,
) -> Result<GameModel> {
    let model = assemble_gaussian(
        drift, noise, sensor, coupling_cost, states, observations, actions, discount, initial, l_bound,
    )?;
    match validate(&model).into_iter().next() {
        None => Ok(model),
        Some(v) => Err(Error::Invalid(v)),
    }
}

/// Gaussian counterpart of [`assemble_tabular`]: structural checks only
/// (coordinates present, noise bounded away from zero, shapes consistent).
#[allow(clippy::too_many_arguments)]
pub fn assemble_gaussian(
    drift: Vec<Vec<Vec<f64>>>,
    noise: Vec<Vec<f64>>,
    sensor: SensorCoupling,
    coupling_cost: Vec<Vec<Vec<f64>>>,
    states: Grid,
    observations: Grid,
    actions: Grid,
    discount: f64,
    initial: MeanFieldMeasure,
    l_bound: Option<f64>,
) -> Result<GameModel> {
    if states.coords.is_none() || states.cell_width.is_none() {
        return Err(Error::Invalid(Violation {
            place: "states".into(),
            problem: "gaussian family requires state coordinates and a cell width".into(),
        }));
    }
    if observations.coords.is_none() || observations.cell_width.is_none() {
        return Err(Error::Invalid(Violation {
            place: "observations".into(),
            problem: "gaussian family requires observation coordinates and a cell width".into(),
        }));
    }
    let n_states = states.size;
    let n_actions = actions.size;
    let shape_ok = drift.len() == n_states
        && drift
            .iter()
            .all(|a| a.len() == n_actions && a.iter().all(|r| r.len() == n_states))
        && noise.len() == n_states
        && noise.iter().all(|r| r.len() == n_actions)
        && coupling_cost.len() == n_states
        && coupling_cost.iter().all(|a| a.len() == n_actions && a.iter().all(|r| r.len() == n_states))
        && initial.weights.len() == n_states
        && match &sensor {
            SensorCoupling::StateOnly(h) => h.len() == n_states,
            SensorCoupling::MeanField(h) => h.len() == n_states && h.iter().all(|r| r.len() == n_states),
        };
    if !shape_ok {
        return Err(Error::config("tensor shapes disagree with grid sizes"));
    }
    let drift_sup = max_abs_3d(&drift);
    let l_grid = l_bound.unwrap_or_else(|| {
        let coords = states.coords.as_ref().unwrap();
        let mut l = 0.0f64;
        for (x, row) in noise.iter().enumerate() {
            let xi = coords[x];
            if xi == 0.0 {
                continue;
            }
            for g in row {
                l = l.max(g * g / (xi * xi));
            }
        }
        l
    });
    let moment_alpha = (1.0 + drift_sup * drift_sup).max(l_grid);
    let coords = states.coords.as_ref().unwrap();
    let moment_weights: Vec<f64> = coords.iter().map(|xi| 1.0 + xi * xi).collect();
    let moment_m = num::dot(&moment_weights, &initial.weights);
    let cost_bound = max_abs_3d(&coupling_cost);
    Ok(GameModel {
        states,
        observations,
        actions,
        discount,
        initial,
        cost_bound,
        moment_weights,
        moment_alpha,
        moment_m,
        kernels: Kernels::Gaussian(GaussianAdditiveModel { drift, noise, sensor, coupling_cost }),
    })
}

/// Population measures probed by [`validate`]: every simplex vertex, the
/// centroid, and the model's initial measure.
pub fn probe_measures(n_states: usize, initial: &MeanFieldMeasure) -> Vec<MeanFieldMeasure> {
    let mut probes: Vec<MeanFieldMeasure> =
        (0..n_states).map(|k| MeanFieldMeasure::dirac(n_states, k)).collect();
    probes.push(MeanFieldMeasure::uniform(n_states));
    probes.push(initial.clone());
    probes
}

/// Checks every model invariant and returns the complete violation list
/// (empty means valid). Raw tabular tensors are checked row by row so
/// defects are named in model coordinates; evaluator output is additionally
/// probed at simplex vertices and the centroid.
pub fn validate(model: &GameModel) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(model.discount > 0.0 && model.discount < 1.0) {
        out.push(Violation {
            place: "discount".into(),
            problem: format!("{} outside (0,1)", model.discount),
        });
    }
    if !num::is_distribution(&model.initial.weights, KERNEL_TOL) {
        out.push(Violation {
            place: "initial".into(),
            problem: format!("sums to {}", num::total(&model.initial.weights)),
        });
    }
    let m = num::dot(&model.moment_weights, &model.initial.weights);
    if m != model.moment_m {
        out.push(Violation {
            place: "moment_m".into(),
            problem: format!("stored {} but initial moment mass is {m}", model.moment_m),
        });
    }
    // Cells already reported at the tensor level; the evaluator probes below
    // skip them so one bad entry is listed once, not re-echoed per measure.
    let mut flagged_transition = BTreeSet::new();
    let mut flagged_cost = BTreeSet::new();
    let mut flagged_observation = BTreeSet::new();
    match &model.kernels {
        Kernels::Tabular(tab) => {
            for (x, per_action) in tab.coupling_transition.iter().enumerate() {
                for (a, per_bar) in per_action.iter().enumerate() {
                    for (xbar, row) in per_bar.iter().enumerate() {
                        if !num::is_distribution(row, KERNEL_TOL) {
                            flagged_transition.insert((x, a));
                            out.push(Violation {
                                place: format!("transition(x={x},a={a},xbar={xbar})"),
                                problem: format!("row sums to {}", num::total(row)),
                            });
                        }
                    }
                }
            }
            for (x, per_action) in tab.coupling_cost.iter().enumerate() {
                for (a, per_bar) in per_action.iter().enumerate() {
                    for (xbar, v) in per_bar.iter().enumerate() {
                        if !(*v >= 0.0 && v.is_finite()) {
                            flagged_cost.insert((x, a));
                            out.push(Violation {
                                place: format!("cost(x={x},a={a},xbar={xbar})"),
                                problem: format!("entry {v} negative or non-finite"),
                            });
                        }
                    }
                }
            }
            for (x, row) in tab.observation_table.iter().enumerate() {
                if !num::is_distribution(row, KERNEL_TOL) {
                    flagged_observation.insert(x);
                    out.push(Violation {
                        place: format!("observation(x={x})"),
                        problem: format!("row sums to {}", num::total(row)),
                    });
                }
            }
        }
        Kernels::Gaussian(gauss) => {
            let theta = gauss
                .noise
                .iter()
                .flat_map(|r| r.iter())
                .fold(f64::INFINITY, |acc, g| acc.min(g.abs()));
            if !(theta > 0.0) {
                out.push(Violation {
                    place: "noise".into(),
                    problem: format!("noise floor {theta} must be positive"),
                });
            }
            for (x, per_action) in gauss.coupling_cost.iter().enumerate() {
                for (a, per_bar) in per_action.iter().enumerate() {
                    for (xbar, v) in per_bar.iter().enumerate() {
                        if !(*v >= 0.0 && v.is_finite()) {
                            flagged_cost.insert((x, a));
                            out.push(Violation {
                                place: format!("cost(x={x},a={a},xbar={xbar})"),
                                problem: format!("entry {v} negative or non-finite"),
                            });
                        }
                    }
                }
            }
        }
    }
    // Evaluator probes at simplex vertices, centroid, and the initial measure.
    for (k, mu) in probe_measures(model.n_states(), &model.initial).into_iter().enumerate() {
        for x in 0..model.n_states() {
            for a in 0..model.n_actions() {
                if !flagged_transition.contains(&(x, a)) {
                    let row = model.transition(x, a, &mu.weights);
                    if !num::is_distribution(&row, KERNEL_TOL) {
                        out.push(Violation {
                            place: format!("transition(x={x},a={a}) at probe measure {k}"),
                            problem: format!("returned mass {}", num::total(&row)),
                        });
                    }
                }
                if !flagged_cost.contains(&(x, a)) {
                    let c = model.cost(x, a, &mu.weights);
                    if !(c >= 0.0 && c <= model.cost_bound + KERNEL_TOL && c.is_finite()) {
                        out.push(Violation {
                            place: format!("cost(x={x},a={a}) at probe measure {k}"),
                            problem: format!("value {c} outside [0, {}]", model.cost_bound),
                        });
                    }
                }
            }
            if !flagged_observation.contains(&x) {
                let row = model.observation(x, &mu.weights);
                if !num::is_distribution(&row, KERNEL_TOL) {
                    out.push(Violation {
                        place: format!("observation(x={x}) at probe measure {k}"),
                        problem: format!("returned mass {}", num::total(&row)),
                    });
                }
            }
        }
    }
    out
}
