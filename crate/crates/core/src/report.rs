//! Rendering of numeric artifacts: fixed-precision text and the CSV files
//! emitted by the command-line reports and compared byte-for-byte by the
//! verification suite.
//!
//! Every numeric field is printed in scientific notation with 12 significant
//! digits. Rendering is pure string work over already-deterministic values,
//! so identical inputs produce identical bytes on every platform.

use crate::error::{Error, Result};
use crate::flow::MeasureFlow;
use crate::model::GameModel;
use crate::num;
use crate::simulator::{ConvergenceReport, EpsReport};
use crate::solver::Policy;

/// Scientific notation with 12 significant digits; negative zero collapses
/// to plain zero.
pub fn fmt(value: f64) -> String {
    let v = if value == 0.0 { 0.0 } else { value };
    format!("{v:.11e}")
}

/// Flow artifact: one row per (time, state) weight.
pub fn flow_csv(flow: &MeasureFlow) -> String {
    let mut out = String::from("t,state,weight\n");
    for (t, mu) in flow.measures.iter().enumerate() {
        for (x, &w) in mu.iter().enumerate() {
            out.push_str(&format!("{t},{x},{}\n", fmt(w)));
        }
    }
    out
}

/// Policy artifact: one row per belief node, keyed by the node's quantized
/// belief label.
pub fn policy_csv(policy: &Policy) -> String {
    let mut out = String::from("t,belief_key,action\n");
    for (t, depth) in policy.by_depth.iter().enumerate() {
        for (key, &action) in depth.iter() {
            out.push_str(&format!("{t},{},{action}\n", key.label()));
        }
    }
    out
}

/// Deviation-gain artifact: one row per population size.
pub fn eps_csv(report: &EpsReport) -> String {
    let mut out = String::from("N,eps_hat,ci_lo,ci_hi\n");
    for p in &report.points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.n_agents,
            fmt(p.eps_hat),
            fmt(p.ci_lo),
            fmt(p.ci_hi)
        ));
    }
    out
}

/// Empirical-convergence artifact: one row per (time, population size, test
/// function) cell.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from("t,N,f_id,estimate,stderr\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t,
            r.n_agents,
            r.f_id,
            fmt(r.estimate),
            fmt(r.stderr)
        ));
    }
    out
}

fn parse_field<T: std::str::FromStr>(raw: &str, line: usize, what: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(format!("flow CSV line {line}: cannot parse {what} from '{raw}'")))
}

/// Reads a flow artifact back. Rows may appear in any order but must cover
/// every (time, state) cell exactly once for a contiguous range of times.
/// Each reconstructed measure is checked to within 1e-9 and renormalized to
/// absorb the round-trip through 12-digit text; the first entry must match
/// the model's initial measure to 1e-9 and is then snapped to it exactly.
pub fn read_flow_csv(text: &str, model: &GameModel) -> Result<MeasureFlow> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "t,state,weight" => {}
        _ => return Err(Error::config("flow CSV must start with the header 't,state,weight'")),
    }
    let n = model.n_states();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "flow CSV line {lineno}: expected 3 fields, got {}",
                parts.len()
            )));
        }
        let t: usize = parse_field(parts[0], lineno, "time")?;
        let x: usize = parse_field(parts[1], lineno, "state")?;
        let w: f64 = parse_field(parts[2], lineno, "weight")?;
        if x >= n {
            return Err(Error::config(format!(
                "flow CSV line {lineno}: state {x} out of range for a {n}-state model"
            )));
        }
        while rows.len() <= t {
            rows.push(vec![None; n]);
        }
        if rows[t][x].is_some() {
            return Err(Error::config(format!(
                "flow CSV line {lineno}: duplicate entry for t={t} state={x}"
            )));
        }
        rows[t][x] = Some(w);
    }
    if rows.is_empty() {
        return Err(Error::config("flow CSV contains no data rows"));
    }
    let mut measures = Vec::with_capacity(rows.len());
    for (t, row) in rows.iter().enumerate() {
        let mut mu = Vec::with_capacity(n);
        for (x, v) in row.iter().enumerate() {
            mu.push(v.ok_or_else(|| {
                Error::config(format!("flow CSV is missing the entry for t={t} state={x}"))
            })?);
        }
        if !num::is_distribution(&mu, 1e-9) {
            return Err(Error::config(format!(
                "flow CSV entry t={t} is not a probability distribution (sum {})",
                num::total(&mu)
            )));
        }
        num::normalize(&mut mu);
        measures.push(mu);
    }
    let gap = num::l1_distance(&measures[0], &model.initial.weights);
    if gap > 1e-9 {
        return Err(Error::config(format!(
            "flow CSV entry t=0 differs from the model's initial measure by {gap:.3e} in L1"
        )));
    }
    measures[0] = model.initial.weights.clone();
    MeasureFlow::new(measures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::equilibrium::{find_equilibrium, EquilibriumConfig};
    use crate::simulator::{ConvergenceRow, EpsPoint};

    #[test]
    fn formatting_is_twelve_significant_digits() {
        assert_eq!(fmt(1.0), "1.00000000000e0");
        assert_eq!(fmt(-0.0), "0.00000000000e0");
        assert_eq!(fmt(0.125), "1.25000000000e-1");
        assert_eq!(fmt(-3.0e-11), "-3.00000000000e-11");
    }

    #[test]
    fn flow_round_trips_through_csv() {
        let model = bundled::coupled_toy();
        let report = find_equilibrium(&model, &EquilibriumConfig::new(2)).unwrap();
        let text = flow_csv(&report.flow);
        let back = read_flow_csv(&text, &model).unwrap();
        assert_eq!(back.len(), report.flow.len());
        assert_eq!(back.entry(0), &model.initial.weights[..]);
        for t in 0..back.len() {
            assert!(
                num::l1_distance(back.entry(t), report.flow.entry(t)) < 1e-9,
                "entry {t} drifted through the round trip"
            );
        }
    }

    #[test]
    fn flow_reader_rejects_malformed_input() {
        let model = bundled::coupled_toy();
        let missing_header = "0,0,0.5\n";
        assert!(read_flow_csv(missing_header, &model).is_err());
        let bad_field = "t,state,weight\n0,0,half\n";
        assert!(read_flow_csv(bad_field, &model).is_err());
        let incomplete = "t,state,weight\n0,0,1.0\n";
        assert!(read_flow_csv(incomplete, &model).is_err());
        let bad_sum = "t,state,weight\n0,0,0.9\n0,1,0.3\n";
        assert!(read_flow_csv(bad_sum, &model).is_err());
        let wrong_initial = "t,state,weight\n0,0,0.5\n0,1,0.5\n";
        assert!(read_flow_csv(wrong_initial, &model).is_err());
        let duplicate = "t,state,weight\n0,0,0.6\n0,0,0.4\n";
        assert!(read_flow_csv(duplicate, &model).is_err());
    }

    #[test]
    fn csv_schemas_match_the_documented_headers() {
        let eps = EpsReport {
            replications: 2,
            horizon: 1,
            seed: 0,
            splitting_rule: crate::simulator::SPLITTING_RULE,
            deviation_labels: vec!["x".into()],
            points: vec![EpsPoint {
                n_agents: 5,
                eps_hat: 0.25,
                stderr: 0.01,
                ci_lo: 0.23,
                ci_hi: 0.27,
                best_deviation: "x".into(),
            }],
        };
        let text = eps_csv(&eps);
        assert!(text.starts_with("N,eps_hat,ci_lo,ci_hi\n"));
        assert!(text.contains("5,2.50000000000e-1,2.30000000000e-1,2.70000000000e-1"));

        let conv = ConvergenceReport {
            replications: 2,
            horizon: 1,
            seed: 0,
            splitting_rule: crate::simulator::SPLITTING_RULE,
            rows: vec![ConvergenceRow {
                t: 1,
                n_agents: 8,
                f_id: "coord".into(),
                estimate: 0.5,
                stderr: 0.125,
            }],
            martingale: Vec::new(),
        };
        let text = convergence_csv(&conv);
        assert!(text.starts_with("t,N,f_id,estimate,stderr\n"));
        assert!(text.contains("1,8,coord,5.00000000000e-1,1.25000000000e-1"));
    }

    #[test]
    fn policy_csv_lists_every_node_with_its_key() {
        let model = bundled::decoupled_two_state();
        let report = find_equilibrium(&model, &EquilibriumConfig::new(2)).unwrap();
        let text = policy_csv(&report.policy);
        assert!(text.starts_with("t,belief_key,action\n"));
        let nodes: usize = report.policy.by_depth.iter().map(|d| d.len()).sum();
        assert_eq!(text.lines().count(), nodes + 1);
        for line in text.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            assert_eq!(parts.len(), 3);
            assert!(parts[1].contains(';'), "belief key should join weights: {line}");
        }
    }
}
