//! Sweeps every differentiable tape operation with central finite
//! differences and prints the worst relative error per op. Everything runs
//! in f64 so the 1e-4 gate measures the backward pass, not float noise.
//!
//!     cargo run --example grad_check

use ssm4rec::gradcheck::run_op_suite;

fn main() -> ssm4rec::error::Result<()> {
    let rows = run_op_suite(10, 2024)?;
    let mut worst = 0.0f64;
    println!("{:<26} {:>12} {:>8}", "op", "max rel err", "probes");
    for row in &rows {
        worst = worst.max(row.max_rel_err);
        println!(
            "{:<26} {:>12.3e} {:>8}",
            row.name, row.max_rel_err, row.probes
        );
    }
    println!(
        "worst over {} ops: {:.3e}  ({})",
        rows.len(),
        worst,
        if worst <= 1e-4 { "within 1e-4" } else { "OVER TOLERANCE" }
    );
    Ok(())
}
