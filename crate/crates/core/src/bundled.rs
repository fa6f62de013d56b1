//! Example models shipped with the crate.
//!
//! Three instances cover the interesting regimes at desk scale:
//!
//! * [`decoupled_two_state`]: every kernel ignores the population, so the
//!   fixed-point search must land in one step and a lone agent can never
//!   gain by deviating. The reference case for exactness checks.
//! * [`coupled_toy`]: two states with population-coupled transitions and
//!   costs, small enough for dense grid search over candidate flows.
//! * [`gaussian_population`]: a six-state discretization of scalar dynamics
//!   driven by additive Gaussian noise, with drift pulled toward the
//!   population mean and a quadratic crowding cost. Exercises the moment
//!   diagnostics and the population simulator at a nontrivial size.
//!
//! The constructors are the source of truth for these models; the config
//! files under `models/` mirror them and are cross-checked by digest.

use crate::model::{
    build_gaussian, build_tabular, GameModel, Grid, MeanFieldMeasure, SensorCoupling,
};

/// Grid coordinates used by [`gaussian_population`]. Kept away from zero so
/// the on-grid noise-to-position growth ratio stays finite at every state.
pub const GAUSSIAN_STATE_COORDS: [f64; 6] = [-2.0, -1.2, -0.4, 0.4, 1.2, 2.0];

/// Two-state model with population-independent dynamics, observations, and
/// costs. Action 0 holds near state 0, action 1 drifts toward state 1; costs
/// give each state a strictly preferred action.
pub fn decoupled_two_state() -> GameModel {
    let rows = |a: usize, x: usize| -> Vec<f64> {
        match (x, a) {
            (0, 0) => vec![0.85, 0.15],
            (1, 0) => vec![0.25, 0.75],
            (0, 1) => vec![0.6, 0.4],
            (1, 1) => vec![0.1, 0.9],
            _ => unreachable!(),
        }
    };
    let coupling_transition = (0..2)
        .map(|x| (0..2).map(|a| vec![rows(a, x); 2]).collect())
        .collect();
    let coupling_cost = vec![
        vec![vec![0.2; 2], vec![0.9; 2]],
        vec![vec![1.0; 2], vec![0.4; 2]],
    ];
    let observation_table = vec![vec![0.75, 0.25], vec![0.3, 0.7]];
    build_tabular(
        coupling_transition,
        coupling_cost,
        observation_table,
        0.9,
        MeanFieldMeasure::new(vec![0.6, 0.4]).unwrap(),
    )
    .expect("bundled decoupled model is valid")
}

/// Two-state model whose transitions and costs both read the population:
/// staying power at state 0 erodes as the population piles into it, and the
/// cost of a state rises with the fraction of the population sharing it.
pub fn coupled_toy() -> GameModel {
    let coupling_transition = vec![
        vec![
            vec![vec![0.9, 0.1], vec![0.6, 0.4]],
            vec![vec![0.5, 0.5], vec![0.4, 0.6]],
        ],
        vec![
            vec![vec![0.3, 0.7], vec![0.2, 0.8]],
            vec![vec![0.5, 0.5], vec![0.6, 0.4]],
        ],
    ];
    let coupling_cost = vec![
        vec![vec![0.9, 0.1], vec![0.5, 0.6]],
        vec![vec![0.2, 0.8], vec![0.7, 0.3]],
    ];
    let observation_table = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
    build_tabular(
        coupling_transition,
        coupling_cost,
        observation_table,
        0.8,
        MeanFieldMeasure::new(vec![0.6, 0.4]).unwrap(),
    )
    .expect("bundled coupled model is valid")
}

/// Six-state discretization of scalar dynamics
/// `x' = 0.5 x + a + 0.3 xbar + g noise`, observed through `y = x + noise`
/// binned into two cells, with a quadratic crowding cost. The population
/// enters the drift and the cost but not the sensor.
pub fn gaussian_population() -> GameModel {
    let xs = GAUSSIAN_STATE_COORDS.to_vec();
    let action_coords = [-0.5, 0.5];
    let drift = xs
        .iter()
        .map(|&x| {
            action_coords
                .iter()
                .map(|&a| xs.iter().map(|&xbar| 0.5 * x + a + 0.3 * xbar).collect())
                .collect()
        })
        .collect();
    let noise = xs
        .iter()
        .map(|_| action_coords.iter().map(|&a| 0.5 + 0.1 * a.abs()).collect())
        .collect();
    let sensor = SensorCoupling::StateOnly(xs.clone());
    let coupling_cost = xs
        .iter()
        .map(|&x| {
            action_coords
                .iter()
                .map(|&a| {
                    xs.iter()
                        .map(|&xbar| {
                            let pull = x - 0.5 * xbar;
                            0.4 * pull * pull + 0.25 * a * a + 0.1 * x * x
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    build_gaussian(
        drift,
        noise,
        sensor,
        coupling_cost,
        Grid::with_coords(xs, 0.8).unwrap(),
        Grid::with_coords(vec![-0.9, 0.9], 1.8).unwrap(),
        Grid::with_coords(action_coords.to_vec(), 1.0).unwrap(),
        0.85,
        MeanFieldMeasure::new(vec![0.05, 0.1, 0.2, 0.3, 0.2, 0.15]).unwrap(),
        None,
    )
    .expect("bundled gaussian model is valid")
}

/// Every bundled model with its stable name, in a fixed order.
pub fn all() -> Vec<(&'static str, GameModel)> {
    vec![
        ("decoupled-two-state", decoupled_two_state()),
        ("coupled-toy", coupled_toy()),
        ("gaussian-population", gaussian_population()),
    ]
}
