//! One PASS/FAIL line per acceptance criterion, with the measured values and
//! pinned tolerances. Verdicts are reported, not enforced: the process exits
//! non-zero only when a criterion cannot be evaluated at all.
//!
//! `DCPL_ACCEPT_R` raises the largest scale of the envelope scan (default 1024).

use dcpl_cli::suite::{run_suite, SuiteOptions};

fn main() {
    let r_max = std::env::var("DCPL_ACCEPT_R").ok().and_then(|s| s.parse().ok()).unwrap_or(1024);
    let opts = SuiteOptions { r_max, seed: 7, sigma: 4 };
    let summary = match run_suite(&opts, |c, secs| {
        println!("criterion {} {:<32} {} [{secs:.1} s]", c.id, c.name, if c.pass { "PASS" } else { "FAIL" });
    }) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("acceptance battery aborted: {e}");
            std::process::exit(1);
        }
    };
    for c in &summary.criteria {
        println!("--- criterion {}: {}", c.id, if c.pass { "PASS" } else { "FAIL" });
        println!("measured:  {}", c.measured);
        println!("tolerance: {}", c.tolerance);
    }
    println!("timing: {}", summary.timing);
    let passed = summary.criteria.iter().filter(|c| c.pass).count();
    println!("acceptance: {passed}/{} criteria pass", summary.criteria.len());
}
