//! Runs the selective scan both ways, as a left-to-right recurrence and as
//! an associative parallel scan, on random discretized instances and prints
//! the worst relative disagreement per sequence length. The two paths share
//! nothing past the input struct, so agreement here is a real check.
//!
//!     cargo run --example scan_equivalence

use ssm4rec::rng::Rng;
use ssm4rec::ssm::{
    discretize, selective_scan_parallel, selective_scan_sequential, DiscretizedParams,
};
use ssm4rec::tensor::Tensor;

fn main() -> ssm4rec::error::Result<()> {
    let (bsz, cdim, n) = (4usize, 8usize, 16usize);
    let mut rng = Rng::new(99);
    let mut worst = 0.0f64;
    println!("batch {bsz}, channels {cdim}, state {n}");
    for &l in &[1usize, 2, 7, 64, 257, 1000] {
        let delta = Tensor::from_fn(vec![bsz, l, cdim], |_| rng.uniform(1e-3, 1.0));
        let a = Tensor::from_fn(vec![cdim, n], |_| -rng.uniform(0.05, 4.0));
        let b = Tensor::from_fn(vec![bsz, l, n], |_| rng.uniform(-1.0, 1.0));
        let x = Tensor::from_fn(vec![bsz, l, cdim], |_| rng.uniform(-1.0, 1.0));
        let c = Tensor::from_fn(vec![bsz, l, n], |_| rng.uniform(-1.0, 1.0));

        let (a_bar, b_bar) = discretize(&delta, &a, &b)?;
        let params = DiscretizedParams::assemble(a_bar, b_bar, &x, c)?;
        let ys = selective_scan_sequential(&params)?;
        let yp = selective_scan_parallel(&params)?;

        let mut max_rel = 0.0f64;
        for (s, p) in ys.data().iter().zip(yp.data()) {
            let rel = (s - p).abs() / s.abs().max(p.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        println!("L = {l:>5}  max relative gap {max_rel:.3e}");
    }
    println!(
        "worst over all lengths: {worst:.3e}  ({})",
        if worst <= 1e-10 { "within 1e-10" } else { "OVER TOLERANCE" }
    );
    Ok(())
}
