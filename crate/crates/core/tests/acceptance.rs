//! Release gate: runs the full verification suite, prints one line per
//! criterion, and exits nonzero if any fails. Built without the libtest
//! harness so the lines show up in every `cargo test` run.

use pomfg_core::acceptance;

fn main() {
    let report = acceptance::run_all(acceptance::DEFAULT_SEED);
    for line in report.summary_lines() {
        println!("{line}");
    }
    let failed = report.outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        eprintln!("acceptance: {failed} of {} criteria failed", report.outcomes.len());
        std::process::exit(1);
    }
}
