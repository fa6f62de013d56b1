//! Subcommand implementations. Each returns the process exit code for
//! check-style outcomes (validation violations, failed verification); hard
//! errors bubble up as `Error` and are mapped to exit codes in `main`.

use std::fs;
use std::path::Path;

use pomfg_core::acceptance;
use pomfg_core::bundled;
use pomfg_core::config as model_config;
use pomfg_core::equilibrium::{find_equilibrium, Damping, EquilibriumConfig};
use pomfg_core::error::{Error, Result};
use pomfg_core::filter::{bayes_update, Belief};
use pomfg_core::flow::{self, MeasureFlow};
use pomfg_core::model::{validate, GameModel};
use pomfg_core::oracle::{enumerate_filter, exhaustive_policy_minimum};
use pomfg_core::report;
use pomfg_core::simulator::{
    default_deviations, empirical_convergence, estimate_eps, simulate_shared, DeviationPolicy,
    SimConfig, TestFunction,
};
use pomfg_core::solver::{
    optimality_residual, solve_pomdp, value_bracket, SolveOptions, TerminalMode,
};

use crate::out::{Manifest, OutDir};

fn parse_terminal(spec: &str) -> Result<TerminalMode> {
    match spec {
        "zero" => Ok(TerminalMode::Zero),
        "tail-upper" | "tail_upper" => Ok(TerminalMode::TailUpper),
        other => Err(Error::config(format!(
            "unknown terminal mode '{other}' (expected 'zero' or 'tail-upper')"
        ))),
    }
}

fn parse_damping(spec: &str) -> Result<Damping> {
    if spec == "fictitious-play" || spec == "fictitious" {
        return Ok(Damping::FictitiousPlay);
    }
    if let Some(rest) = spec.strip_prefix("constant:") {
        let step: f64 = rest
            .parse()
            .map_err(|_| Error::config(format!("damping step '{rest}' is not a number")))?;
        if step > 0.0 && step <= 1.0 {
            return Ok(Damping::Constant(step));
        }
        return Err(Error::config(format!("damping step {step} outside (0, 1]")));
    }
    Err(Error::config(format!(
        "unknown damping '{spec}' (expected 'constant:<step>' or 'fictitious-play')"
    )))
}

fn damping_echo(damping: Damping) -> String {
    match damping {
        Damping::Constant(step) => format!("constant:{}", report::fmt(step)),
        Damping::FictitiousPlay => "fictitious-play".to_string(),
    }
}

/// Resolves the `--flow` argument: the built-in recursion from the initial
/// measure, or a CSV file.
fn resolve_flow(model: &GameModel, spec: &str, horizon: usize) -> Result<MeasureFlow> {
    if spec == "recursive-from-initial" {
        return Ok(flow::uniform_action_average_flow(model, horizon + 2));
    }
    let text = fs::read_to_string(spec)
        .map_err(|e| Error::config(format!("cannot read flow file {spec}: {e}")))?;
    report::read_flow_csv(&text, model)
}

pub fn cmd_validate(model_path: &Path) -> Result<i32> {
    // Assembly-level violations (bad grids, malformed shapes) are reported
    // the same way as kernel-level ones; only unreadable or ill-formed
    // files escape as input errors.
    let model = match model_config::load_unvalidated(model_path) {
        Ok(model) => model,
        Err(Error::Invalid(v)) => {
            println!("1 violation");
            println!("  {v}");
            return Ok(1);
        }
        Err(e) => return Err(e),
    };
    let violations = validate(&model);
    if violations.is_empty() {
        println!(
            "ok: {} states, {} observations, {} actions, discount {}",
            model.n_states(),
            model.n_observations(),
            model.n_actions(),
            report::fmt(model.discount)
        );
        println!("digest: {}", model.digest());
        Ok(0)
    } else {
        println!("{} violation{}", violations.len(), if violations.len() == 1 { "" } else { "s" });
        for v in &violations {
            println!("  {v}");
        }
        Ok(1)
    }
}

pub struct SolveArgs<'a> {
    pub model: &'a Path,
    pub flow: &'a str,
    pub horizon: usize,
    pub terminal: &'a str,
    pub out: &'a Path,
}

pub fn cmd_solve(args: &SolveArgs) -> Result<i32> {
    let model = model_config::load_model(args.model)?;
    let terminal = parse_terminal(args.terminal)?;
    let flow = resolve_flow(&model, args.flow, args.horizon)?;
    flow.require_entries_through(args.horizon + 1)?;

    let opts = SolveOptions::new(args.horizon).with_terminal(terminal);
    let solution = solve_pomdp(&model, &flow, &opts)?;
    let (lower, upper) = value_bracket(&model, &flow, &opts)?;
    let residual = optimality_residual(&solution.tree, &solution.values, &solution.policy)?;
    let root = solution.root_value();

    let out = OutDir::create(args.out)?;
    out.write("flow.csv", &report::flow_csv(&flow))?;
    out.write("policy.csv", &report::policy_csv(&solution.policy))?;

    let text = format!(
        "solve\n\
         model: {}\n\
         digest: {}\n\
         flow: {} (entries 0..={})\n\
         horizon: {}\n\
         terminal: {}\n\
         root_value = {}\n\
         value_lower = {}\n\
         value_upper = {}\n\
         optimality_residual = {}\n\
         tree_nodes = {}\n",
        args.model.display(),
        model.digest(),
        args.flow,
        flow.measures.len() - 1,
        args.horizon,
        terminal.name(),
        report::fmt(root),
        report::fmt(lower),
        report::fmt(upper),
        report::fmt(residual),
        solution.tree.node_count(),
    );
    print!("{text}");
    out.write("report.txt", &text)?;

    let mut manifest = Manifest::new("solve");
    manifest.config_str("model", &args.model.display().to_string());
    manifest.config_str("model_digest", &model.digest());
    manifest.config_str("flow", args.flow);
    manifest.config_int("horizon", args.horizon as u64);
    manifest.config_str("terminal_mode", terminal.name());
    manifest.config_float("quantum", opts.quantum);
    manifest.config_float("tie_eps", opts.tie_eps);
    manifest.config_float("prune_eps", opts.prune_eps);
    manifest.config_int("node_budget", opts.node_budget as u64);
    manifest.result_float("root_value", root);
    manifest.result_float("value_lower", lower);
    manifest.result_float("value_upper", upper);
    manifest.result_float("optimality_residual", residual);
    manifest.result_int("tree_nodes", solution.tree.node_count() as u64);
    out.finish(&manifest)?;
    Ok(0)
}

pub struct EquilibriumArgs<'a> {
    pub model: &'a Path,
    pub horizon: usize,
    pub tol: f64,
    pub damping: &'a str,
    pub max_iters: usize,
    pub out: &'a Path,
}

pub fn cmd_equilibrium(args: &EquilibriumArgs) -> Result<i32> {
    let model = model_config::load_model(args.model)?;
    let mut config = EquilibriumConfig::new(args.horizon);
    config.tol = args.tol;
    config.max_iters = args.max_iters;
    config.damping = parse_damping(args.damping)?;

    let eq = find_equilibrium(&model, &config)?;

    let out = OutDir::create(args.out)?;
    out.write("flow.csv", &report::flow_csv(&eq.flow))?;
    out.write("policy.csv", &report::policy_csv(&eq.policy))?;

    let history: Vec<String> = eq.residual_history.iter().map(|r| report::fmt(*r)).collect();
    let text = format!(
        "equilibrium\n\
         model: {}\n\
         digest: {}\n\
         horizon: {}\n\
         damping: {}\n\
         tol = {}\n\
         converged = {}\n\
         residual = {}\n\
         iterations = {}\n\
         best_iteration = {}\n\
         optimality_residual = {}\n\
         value_lower = {}\n\
         value_upper = {}\n\
         residual_history: {}\n",
        args.model.display(),
        model.digest(),
        args.horizon,
        damping_echo(config.damping),
        report::fmt(config.tol),
        eq.converged,
        report::fmt(eq.residual),
        eq.residual_history.len(),
        eq.best_iteration,
        report::fmt(eq.optimality_residual),
        report::fmt(eq.value_bracket.0),
        report::fmt(eq.value_bracket.1),
        history.join(" "),
    );
    print!("{text}");
    out.write("report.txt", &text)?;

    let mut manifest = Manifest::new("equilibrium");
    manifest.config_str("model", &args.model.display().to_string());
    manifest.config_str("model_digest", &model.digest());
    manifest.config_int("horizon", args.horizon as u64);
    manifest.config_str("damping", &damping_echo(config.damping));
    manifest.config_float("tol", config.tol);
    manifest.config_int("max_iters", config.max_iters as u64);
    manifest.result_bool("converged", eq.converged);
    manifest.result_float("residual", eq.residual);
    manifest.result_int("iterations", eq.residual_history.len() as u64);
    manifest.result_float("optimality_residual", eq.optimality_residual);
    manifest.result_float("value_lower", eq.value_bracket.0);
    manifest.result_float("value_upper", eq.value_bracket.1);
    out.finish(&manifest)?;
    Ok(if eq.converged { 0 } else { 1 })
}

/// Builds the requested deviation sweep, by default every built-in policy.
fn resolve_deviations(
    model: &GameModel,
    eq_flow: &MeasureFlow,
    opts: &SolveOptions,
    spec: &str,
) -> Result<Vec<DeviationPolicy>> {
    let all = default_deviations(model, eq_flow, opts)?;
    if spec == "default" {
        return Ok(all);
    }
    let mut picked = Vec::new();
    for name in spec.split(',') {
        let name = name.trim();
        match all.iter().find(|d| d.label() == name) {
            Some(d) => picked.push(d.clone()),
            None => {
                let known: Vec<&str> = all.iter().map(|d| d.label()).collect();
                return Err(Error::config(format!(
                    "unknown deviation '{name}' (expected one of: {})",
                    known.join(", ")
                )));
            }
        }
    }
    Ok(picked)
}

pub struct SimulateArgs<'a> {
    pub model: &'a Path,
    pub horizon: usize,
    pub n_list: &'a [usize],
    pub reps: usize,
    pub seed: u64,
    pub deviations: &'a str,
    pub threads: usize,
    pub out: &'a Path,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    if args.n_list.is_empty() {
        return Err(Error::config("population sweep needs at least one size"));
    }
    let model = model_config::load_model(args.model)?;

    // The candidate equilibrium the populations are measured against.
    let mut eq_cfg = EquilibriumConfig::new(args.horizon);
    eq_cfg.tol = 1e-10;
    let eq = find_equilibrium(&model, &eq_cfg)?;

    let deviations = resolve_deviations(&model, &eq.flow, &eq_cfg.solve, args.deviations)?;
    let mut sim = SimConfig::new(args.n_list[0], args.reps, args.horizon, args.seed);
    sim.threads = args.threads;
    sim.test_functions = vec![TestFunction::Coordinate, TestFunction::Indicator(0)];

    let mut shared_lines = Vec::new();
    let mut shared_reports = Vec::new();
    for &n in args.n_list {
        let mut cfg = sim.clone();
        cfg.n_agents = n;
        let rep = simulate_shared(&model, &eq.policy, &eq.flow, &cfg)?;
        shared_lines.push(format!(
            "N={n}: J_hat = {} (stderr {}), tail bound = {}, fallback flagged = {}",
            report::fmt(rep.cost.mean),
            report::fmt(rep.cost.stderr),
            report::fmt(rep.cost.tail),
            rep.fallback.flagged(),
        ));
        shared_reports.push(rep);
    }
    let eps = estimate_eps(&model, &eq.policy, &eq.flow, &deviations, &sim, args.n_list)?;
    let conv = empirical_convergence(&model, &eq.policy, &eq.flow, &sim, args.n_list)?;

    let out = OutDir::create(args.out)?;
    out.write("eps.csv", &report::eps_csv(&eps))?;
    out.write("convergence.csv", &report::convergence_csv(&conv))?;

    let mut text = format!(
        "simulate\n\
         model: {}\n\
         digest: {}\n\
         rng: {} seed {}\n\
         horizon: {}, replications: {}\n\
         equilibrium: converged = {}, residual = {}\n\
         deviations: {}\n",
        args.model.display(),
        model.digest(),
        eps.splitting_rule,
        args.seed,
        args.horizon,
        args.reps,
        eq.converged,
        report::fmt(eq.residual),
        eps.deviation_labels.join(", "),
    );
    for line in &shared_lines {
        text.push_str(line);
        text.push('\n');
    }
    for point in &eps.points {
        text.push_str(&format!(
            "N={}: eps_hat = {}, ci = [{}, {}], best = {}\n",
            point.n_agents,
            report::fmt(point.eps_hat),
            report::fmt(point.ci_lo),
            report::fmt(point.ci_hi),
            point.best_deviation,
        ));
    }
    print!("{text}");
    out.write("report.txt", &text)?;

    let n_echo: Vec<String> = args.n_list.iter().map(|n| n.to_string()).collect();
    let mut manifest = Manifest::new("simulate");
    manifest.config_str("model", &args.model.display().to_string());
    manifest.config_str("model_digest", &model.digest());
    manifest.config_int("horizon", args.horizon as u64);
    manifest.config_str("n_agents", &n_echo.join(","));
    manifest.config_int("replications", args.reps as u64);
    manifest.config_int("seed", args.seed);
    manifest.config_str("splitting_rule", eps.splitting_rule);
    manifest.config_str("deviations", &eps.deviation_labels.join(","));
    manifest.config_int("threads", args.threads as u64);
    manifest.result_bool("equilibrium_converged", eq.converged);
    manifest.result_float("equilibrium_residual", eq.residual);
    for (rep, &n) in shared_reports.iter().zip(args.n_list) {
        manifest.result_float(&format!("j_hat_n{n}"), rep.cost.mean);
    }
    for point in &eps.points {
        manifest.result_float(&format!("eps_hat_n{}", point.n_agents), point.eps_hat);
        manifest.result_str(&format!("best_deviation_n{}", point.n_agents), &point.best_deviation);
    }
    out.finish(&manifest)?;
    Ok(0)
}

pub fn cmd_verify(seed: u64, out_path: &Path) -> Result<i32> {
    let out = OutDir::create(out_path)?;
    let report = acceptance::run_all(seed);
    let lines = report.summary_lines();
    for line in &lines {
        println!("{line}");
    }
    out.write("report.txt", &(lines.join("\n") + "\n"))?;
    for (name, contents) in &report.artifacts {
        out.write(name, contents)?;
    }
    let passed = report.outcomes.iter().filter(|o| o.passed).count();
    let mut manifest = Manifest::new("verify");
    manifest.config_int("seed", report.seed);
    manifest.result_int("criteria_passed", passed as u64);
    manifest.result_int("criteria_total", report.outcomes.len() as u64);
    manifest.result_bool("all_passed", report.all_passed());
    out.finish(&manifest)?;
    Ok(if report.all_passed() { 0 } else { 1 })
}

const ORACLE_FILTER_GATE: f64 = 1e-10;
const ORACLE_SOLVE_GATE: f64 = 1e-9;

/// All action/observation sequences of the given length, mixed-radix over
/// (action, observation) pairs.
fn sequences(len: usize, n_actions: usize, n_obs: usize) -> Vec<Vec<(usize, usize)>> {
    let base = n_actions * n_obs;
    let total = base.pow(len as u32);
    (0..total)
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let digit = code % base;
                    code /= base;
                    (digit % n_actions, digit / n_actions)
                })
                .collect()
        })
        .collect()
}

fn oracle_filter(model: &GameModel, lines: &mut Vec<String>) -> Result<f64> {
    let flow = flow::uniform_action_average_flow(model, 6);
    let demo = [(0usize, 1usize), (1, 0), (0, 1)];
    lines.push("filter oracle: path enumeration vs recursive update".to_string());
    lines.push(format!("  demo sequence (a,y): {:?}", demo));
    let steps = enumerate_filter(model, &flow, &demo)?;
    let mut z = Belief::new(0, model.initial.weights.clone());
    lines.push(format!("    t=0 belief {}", fmt_weights(&steps[0].belief)));
    for (s, &(a, y)) in demo.iter().enumerate() {
        z = bayes_update(model, &z, a, y, flow.entry(s), flow.entry(s + 1))?;
        lines.push(format!(
            "    t={} enumerated {} recursive {}",
            s + 1,
            fmt_weights(&steps[s + 1].belief),
            fmt_weights(&z.weights),
        ));
    }

    let mut max_err = 0.0f64;
    let mut swept = 0usize;
    for len in 1..=3usize {
        for seq in sequences(len, model.n_actions(), model.n_observations()) {
            let enumerated = enumerate_filter(model, &flow, &seq)?;
            let mut z = Belief::new(0, model.initial.weights.clone());
            for (s, &(a, y)) in seq.iter().enumerate() {
                z = bayes_update(model, &z, a, y, flow.entry(s), flow.entry(s + 1))?;
                for (u, v) in z.weights.iter().zip(&enumerated[s + 1].belief) {
                    max_err = max_err.max((u - v).abs());
                }
            }
            swept += 1;
        }
    }
    lines.push(format!(
        "  swept {swept} sequences up to length 3: max abs error = {} (gate {}) {}",
        report::fmt(max_err),
        report::fmt(ORACLE_FILTER_GATE),
        if max_err <= ORACLE_FILTER_GATE { "pass" } else { "FAIL" },
    ));
    Ok(max_err)
}

fn oracle_solve(model: &GameModel, lines: &mut Vec<String>) -> Result<f64> {
    let horizon = 3;
    let flow = flow::uniform_action_average_flow(model, horizon + 2);
    let (exhaustive, _) = exhaustive_policy_minimum(model, &flow, horizon)?;
    let solution = solve_pomdp(model, &flow, &SolveOptions::new(horizon))?;
    let gap = (exhaustive - solution.root_value()).abs();
    lines.push(format!("solve oracle: exhaustive policy minimum, horizon {horizon}"));
    lines.push(format!("  exhaustive = {}", report::fmt(exhaustive)));
    lines.push(format!("  tree solve = {}", report::fmt(solution.root_value())));
    lines.push(format!(
        "  gap = {} (gate {}) {}",
        report::fmt(gap),
        report::fmt(ORACLE_SOLVE_GATE),
        if gap <= ORACLE_SOLVE_GATE { "pass" } else { "FAIL" },
    ));
    Ok(gap)
}

fn fmt_weights(w: &[f64]) -> String {
    let parts: Vec<String> = w.iter().map(|v| report::fmt(*v)).collect();
    format!("[{}]", parts.join(", "))
}

pub fn cmd_oracle(run_filter: bool, run_solve: bool, out_path: Option<&Path>) -> Result<i32> {
    // No flags means both oracles.
    let (run_filter, run_solve) = if !run_filter && !run_solve { (true, true) } else { (run_filter, run_solve) };
    let model = bundled::decoupled_two_state();
    let mut lines = vec![format!("oracle model: decoupled-two-state ({})", model.digest())];

    let mut filter_err = None;
    let mut solve_gap = None;
    if run_filter {
        filter_err = Some(oracle_filter(&model, &mut lines)?);
    }
    if run_solve {
        solve_gap = Some(oracle_solve(&model, &mut lines)?);
    }
    let ok = filter_err.map_or(true, |e| e <= ORACLE_FILTER_GATE)
        && solve_gap.map_or(true, |g| g <= ORACLE_SOLVE_GATE);

    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(path) = out_path {
        let out = OutDir::create(path)?;
        out.write("report.txt", &text)?;
        let mut manifest = Manifest::new("oracle");
        manifest.config_str("model", "decoupled-two-state");
        manifest.config_str("model_digest", &model.digest());
        if let Some(e) = filter_err {
            manifest.result_float("filter_max_error", e);
        }
        if let Some(g) = solve_gap {
            manifest.result_float("solve_gap", g);
        }
        manifest.result_bool("all_passed", ok);
        out.finish(&manifest)?;
    }
    Ok(if ok { 0 } else { 1 })
}
