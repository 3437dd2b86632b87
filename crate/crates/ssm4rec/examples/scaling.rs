//! Times the recurrent layer against quadratic attention across sequence
//! lengths and fits log-log growth exponents: ~1 for the scan, ~2 for
//! attention.

use ssm4rec::bench::{run_bench, DEFAULT_LENGTHS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = run_bench(8, 64, DEFAULT_LENGTHS, 5, 1)?;
    print!("{}", report.table());
    Ok(())
}
