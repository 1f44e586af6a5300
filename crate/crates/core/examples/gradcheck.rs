//! Finite-difference gradient check of every differentiable op.
//!
//! cargo run --example gradcheck -- [seeds] [base_seed]

use std::time::Instant;

use tsa_core::gradcheck::{run_suite, DEFAULT_SEEDS, REL_TOL};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds = args.next().map(|s| s.parse()).transpose()?.unwrap_or(DEFAULT_SEEDS);
    let base = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let start = Instant::now();
    let reports = run_suite(base, seeds)?;
    println!("{:<18} {:>8} {:>12} {:>9}", "op", "elements", "max_rel_err", "one_sided");
    for r in &reports {
        println!("{:<18} {:>8} {:>12.3e} {:>9}", r.name, r.elements, r.max_rel_err, r.one_sided);
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!(
        "{} ops, {failed} above {REL_TOL:e}, {:.1} s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
