//! Model configuration files.
//!
//! A versioned TOML schema covers both kernel families. Tensors are inline
//! arrays in the layouts the builders take (`transition[x][a][xbar]` rows
//! over the next state, and so on). The renderer writes floats with 17
//! significant digits so a file round-trips every bit of the model it came
//! from; the bundled files under `models/` are generated this way and
//! cross-checked against the constructors by digest.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{
    assemble_gaussian, assemble_tabular, validate, GameModel, Grid, Kernels, MeanFieldMeasure,
    SensorCoupling,
};

/// The schema generation this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    family: String,
    discount: f64,
    initial: Vec<f64>,
    tabular: Option<TabularSection>,
    gaussian: Option<GaussianSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularSection {
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    cost: Vec<Vec<Vec<f64>>>,
    observation: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianSection {
    state_coords: Vec<f64>,
    state_cell_width: f64,
    observation_coords: Vec<f64>,
    observation_cell_width: f64,
    action_coords: Vec<f64>,
    action_cell_width: f64,
    drift: Vec<Vec<Vec<f64>>>,
    noise: Vec<Vec<f64>>,
    sensor_state_only: Option<Vec<f64>>,
    sensor_mean_field: Option<Vec<Vec<f64>>>,
    cost: Vec<Vec<Vec<f64>>>,
    l_bound: Option<f64>,
}

/// Parses and assembles a model from schema text. Format and shape problems
/// error here; kernel-level numeric violations are left for [`validate`] so
/// a validation command can list all of them.
pub fn parse_model(text: &str) -> Result<GameModel> {
    let file: ModelFile =
        toml::from_str(text).map_err(|e| Error::config(format!("model config: {e}")))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "unsupported schema_version {} (this tool reads version {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let initial = MeanFieldMeasure { weights: file.initial };
    match file.family.as_str() {
        "tabular" => {
            if file.gaussian.is_some() {
                return Err(Error::config("family \"tabular\" must not carry a [gaussian] section"));
            }
            let section = file
                .tabular
                .ok_or_else(|| Error::config("family \"tabular\" needs a [tabular] section"))?;
            assemble_tabular(
                section.transition,
                section.cost,
                section.observation,
                file.discount,
                initial,
            )
        }
        "gaussian" => {
            if file.tabular.is_some() {
                return Err(Error::config("family \"gaussian\" must not carry a [tabular] section"));
            }
            let section = file
                .gaussian
                .ok_or_else(|| Error::config("family \"gaussian\" needs a [gaussian] section"))?;
            let sensor = match (section.sensor_state_only, section.sensor_mean_field) {
                (Some(h), None) => SensorCoupling::StateOnly(h),
                (None, Some(h)) => SensorCoupling::MeanField(h),
                _ => {
                    return Err(Error::config(
                        "exactly one of sensor_state_only and sensor_mean_field is required",
                    ))
                }
            };
            let states = Grid::with_coords(section.state_coords, section.state_cell_width)?;
            let observations =
                Grid::with_coords(section.observation_coords, section.observation_cell_width)?;
            let actions = Grid::with_coords(section.action_coords, section.action_cell_width)?;
            assemble_gaussian(
                section.drift,
                section.noise,
                sensor,
                section.cost,
                states,
                observations,
                actions,
                file.discount,
                initial,
                section.l_bound,
            )
        }
        other => Err(Error::config(format!(
            "unknown family '{other}' (expected 'tabular' or 'gaussian')"
        ))),
    }
}

/// Reads and assembles a model file without the full numeric validation.
pub fn load_unvalidated(path: &Path) -> Result<GameModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_model(&text)
}

/// Reads, assembles, and fully validates a model file.
pub fn load_model(path: &Path) -> Result<GameModel> {
    let model = load_unvalidated(path)?;
    match validate(&model).into_iter().next() {
        None => Ok(model),
        Some(v) => Err(Error::Invalid(v)),
    }
}

fn push_float(out: &mut String, v: f64) {
    out.push_str(&format!("{v:.17e}"));
}

fn push_list1(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, &x) in v.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        push_float(out, x);
    }
    out.push(']');
}

fn push_list2(out: &mut String, v: &[Vec<f64>], indent: &str) {
    out.push('[');
    for (i, row) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('\n');
        out.push_str(indent);
        push_list1(out, row);
    }
    out.push('\n');
    out.push_str(&indent[..indent.len().saturating_sub(2)]);
    out.push(']');
}

fn push_list3(out: &mut String, v: &[Vec<Vec<f64>>], indent: &str) {
    out.push('[');
    let deeper = format!("{indent}  ");
    for (i, block) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('\n');
        out.push_str(indent);
        push_list2(out, block, &deeper);
    }
    out.push('\n');
    out.push_str(&indent[..indent.len().saturating_sub(2)]);
    out.push(']');
}

fn push_list4(out: &mut String, v: &[Vec<Vec<Vec<f64>>>], indent: &str) {
    out.push('[');
    let deeper = format!("{indent}  ");
    for (i, block) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('\n');
        out.push_str(indent);
        push_list3(out, block, &deeper);
    }
    out.push('\n');
    out.push_str(&indent[..indent.len().saturating_sub(2)]);
    out.push(']');
}

/// Renders a model as schema text with full float precision. Parsing the
/// result reproduces the model bit for bit (equal digests).
pub fn render_model_toml(model: &GameModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("schema_version = {SCHEMA_VERSION}\n"));
    let family = match &model.kernels {
        Kernels::Tabular(_) => "tabular",
        Kernels::Gaussian(_) => "gaussian",
    };
    out.push_str(&format!("family = \"{family}\"\n"));
    out.push_str("discount = ");
    push_float(&mut out, model.discount);
    out.push_str("\ninitial = ");
    push_list1(&mut out, &model.initial.weights);
    out.push('\n');

    match &model.kernels {
        Kernels::Tabular(t) => {
            out.push_str("\n[tabular]\ntransition = ");
            push_list4(&mut out, &t.coupling_transition, "  ");
            out.push_str("\ncost = ");
            push_list3(&mut out, &t.coupling_cost, "  ");
            out.push_str("\nobservation = ");
            push_list2(&mut out, &t.observation_table, "  ");
            out.push('\n');
        }
        Kernels::Gaussian(g) => {
            out.push_str("\n[gaussian]\nstate_coords = ");
            push_list1(&mut out, model.states.coords.as_ref().expect("gaussian grid coords"));
            out.push_str("\nstate_cell_width = ");
            push_float(&mut out, model.states.cell_width.expect("gaussian cell width"));
            out.push_str("\nobservation_coords = ");
            push_list1(
                &mut out,
                model.observations.coords.as_ref().expect("gaussian grid coords"),
            );
            out.push_str("\nobservation_cell_width = ");
            push_float(&mut out, model.observations.cell_width.expect("gaussian cell width"));
            out.push_str("\naction_coords = ");
            push_list1(&mut out, model.actions.coords.as_ref().expect("gaussian grid coords"));
            out.push_str("\naction_cell_width = ");
            push_float(&mut out, model.actions.cell_width.expect("gaussian cell width"));
            out.push_str("\ndrift = ");
            push_list3(&mut out, &g.drift, "  ");
            out.push_str("\nnoise = ");
            push_list2(&mut out, &g.noise, "  ");
            match &g.sensor {
                SensorCoupling::StateOnly(h) => {
                    out.push_str("\nsensor_state_only = ");
                    push_list1(&mut out, h);
                }
                SensorCoupling::MeanField(h) => {
                    out.push_str("\nsensor_mean_field = ");
                    push_list2(&mut out, h, "  ");
                }
            }
            out.push_str("\ncost = ");
            push_list3(&mut out, &g.coupling_cost, "  ");
            out.push('\n');
        }
    }
    out
}
