//! Central finite-difference verification of tape gradients.
//!
//! [`check`] compares analytic gradients against (f(x+h) - f(x-h)) / 2h in
//! f64, probing a bounded random subset of each leaf's elements.
//! [`run_op_suite`] runs that check over every differentiable tape
//! operation with freshly drawn shapes and values per trial.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Tid};
use crate::tensor::Tensor;

pub struct GradReport {
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Relative disagreement with a floor so near-zero pairs compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds the graph via `build` (leaves in the given order, loss returned),
/// backpropagates once, then FD-probes up to `max_probes_per_leaf` elements
/// of each leaf. `build` must be deterministic: called repeatedly with
/// perturbed copies of the same leaves.
pub fn check<F>(
    leaves: &[Tensor<f64>],
    mut build: F,
    h: f64,
    max_probes_per_leaf: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: FnMut(&mut Tape<f64>, &[Tid]) -> Result<Tid>,
{
    let mut tape = Tape::new();
    let ids: Vec<Tid> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, leaf)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; leaf.numel()])
        })
        .collect();
    drop(tape);

    let mut rng = Rng::new(seed ^ 0x5eed_caf3);
    let mut max_rel: f64 = 0.0;
    let mut probes = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let numel = leaf.numel();
        if numel == 0 {
            continue;
        }
        let idxs: Vec<usize> = if numel <= max_probes_per_leaf {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut all);
            all.truncate(max_probes_per_leaf);
            all
        };
        for idx in idxs {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut ls: Vec<Tensor<f64>> = leaves.to_vec();
                ls[li].data_mut()[idx] += delta;
                let mut tape = Tape::new();
                let ids: Vec<Tid> = ls.iter().map(|t| tape.input(t.clone())).collect();
                let loss = build(&mut tape, &ids)?;
                Ok(tape.value(loss).data()[0])
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[li][idx], fd));
            probes += 1;
        }
    }
    Ok(GradReport {
        max_rel_err: max_rel,
        probes,
    })
}

pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
}

fn uni(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// FD step; with f64 values of order 1 this balances truncation against
/// cancellation, keeping FD noise well under the 1e-4 gate.
pub const FD_STEP: f64 = 1e-5;

const PROBES: usize = 24;

/// Checks every differentiable tape operation `trials` times with random
/// shapes and values. Returns one aggregated row per operation.
pub fn run_op_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    type Builder = Box<dyn Fn(&mut Rng, u64) -> Result<GradReport>>;

    // Reduce non-scalar outputs with fixed random weights so every output
    // element influences the loss with a distinct coefficient.
    fn wsum(tape: &mut Tape<f64>, y: Tid, w: &Tensor<f64>) -> Result<Tid> {
        let wi = tape.input(w.clone());
        let m = tape.mul(y, wi)?;
        tape.sum(m)
    }

    let ops: Vec<(&'static str, Builder)> = vec![
        (
            "matmul",
            Box::new(|rng, seed| {
                let (m, k, p) = (
                    rng.next_below(4) as usize + 1,
                    rng.next_below(4) as usize + 1,
                    rng.next_below(4) as usize + 1,
                );
                let a = uni(rng, vec![m, k], -1.0, 1.0);
                let b = uni(rng, vec![k, p], -1.0, 1.0);
                let w = uni(rng, vec![m, p], -1.0, 1.0);
                check(
                    &[a, b],
                    |t, ids| {
                        let y = t.matmul(ids[0], ids[1])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "matmul_nt",
            Box::new(|rng, seed| {
                let (m, k, p) = (
                    rng.next_below(4) as usize + 1,
                    rng.next_below(4) as usize + 1,
                    rng.next_below(4) as usize + 1,
                );
                let a = uni(rng, vec![m, k], -1.0, 1.0);
                let b = uni(rng, vec![p, k], -1.0, 1.0);
                let w = uni(rng, vec![m, p], -1.0, 1.0);
                check(
                    &[a, b],
                    |t, ids| {
                        let y = t.matmul_nt(ids[0], ids[1])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "add",
            Box::new(|rng, seed| {
                let sh = vec![rng.next_below(3) as usize + 1, 4];
                let a = uni(rng, sh.clone(), -1.0, 1.0);
                let b = uni(rng, sh.clone(), -1.0, 1.0);
                let w = uni(rng, sh, -1.0, 1.0);
                check(
                    &[a, b],
                    |t, ids| {
                        let y = t.add(ids[0], ids[1])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "mul",
            Box::new(|rng, seed| {
                let sh = vec![rng.next_below(3) as usize + 1, 4];
                let a = uni(rng, sh.clone(), -1.0, 1.0);
                let b = uni(rng, sh.clone(), -1.0, 1.0);
                let w = uni(rng, sh, -1.0, 1.0);
                check(
                    &[a, b],
                    |t, ids| {
                        let y = t.mul(ids[0], ids[1])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "add_bias",
            Box::new(|rng, seed| {
                let (r, c) = (rng.next_below(4) as usize + 1, rng.next_below(5) as usize + 1);
                let a = uni(rng, vec![r, c], -1.0, 1.0);
                let b = uni(rng, vec![c], -1.0, 1.0);
                let w = uni(rng, vec![r, c], -1.0, 1.0);
                check(
                    &[a, b],
                    |t, ids| {
                        let y = t.add_bias(ids[0], ids[1])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "silu",
            Box::new(|rng, seed| {
                let x = uni(rng, vec![12], -3.0, 3.0);
                let w = uni(rng, vec![12], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.silu(ids[0])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "gelu",
            Box::new(|rng, seed| {
                let x = uni(rng, vec![12], -3.0, 3.0);
                let w = uni(rng, vec![12], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.gelu(ids[0])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "softplus",
            Box::new(|rng, seed| {
                let x = uni(rng, vec![12], -4.0, 4.0);
                let w = uni(rng, vec![12], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.softplus(ids[0])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "neg_exp",
            Box::new(|rng, seed| {
                let x = uni(rng, vec![12], -2.0, 2.0);
                let w = uni(rng, vec![12], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.neg_exp(ids[0])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "softmax",
            Box::new(|rng, seed| {
                let (r, v) = (2usize, rng.next_below(6) as usize + 2);
                let x = uni(rng, vec![r, v], -2.0, 2.0);
                let w = uni(rng, vec![r, v], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.softmax(ids[0])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "layer_norm",
            Box::new(|rng, seed| {
                let (r, d) = (2usize, rng.next_below(5) as usize + 3);
                let x = uni(rng, vec![r, d], -2.0, 2.0);
                let g = uni(rng, vec![d], 0.5, 1.5);
                let b = uni(rng, vec![d], -0.5, 0.5);
                let w = uni(rng, vec![r, d], -1.0, 1.0);
                check(
                    &[x, g, b],
                    |t, ids| {
                        let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "dropout",
            Box::new(|rng, seed| {
                let x = uni(rng, vec![16], -2.0, 2.0);
                let w = uni(rng, vec![16], -1.0, 1.0);
                // fresh fixed-seed rng per call keeps the mask identical
                // across FD probes
                check(
                    &[x],
                    |t, ids| {
                        let mut mask_rng = Rng::new(99);
                        let y = t.dropout(ids[0], 0.4, &mut mask_rng, true)?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "causal_depthwise_conv1d",
            Box::new(|rng, seed| {
                let (bsz, l, c, k) = (2usize, rng.next_below(5) as usize + 2, 2usize, 3usize);
                let x = uni(rng, vec![bsz, l, c], -1.0, 1.0);
                let wconv = uni(rng, vec![c, k], -1.0, 1.0);
                let bias = uni(rng, vec![c], -0.5, 0.5);
                let w = uni(rng, vec![bsz, l, c], -1.0, 1.0);
                check(
                    &[x, wconv, bias],
                    |t, ids| {
                        let y = t.causal_conv1d(ids[0], ids[1], ids[2])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "cross_entropy",
            Box::new(|rng, seed| {
                let (bsz, v) = (3usize, rng.next_below(6) as usize + 2);
                let logits = uni(rng, vec![bsz, v], -2.0, 2.0);
                let targets: Vec<u32> =
                    (0..bsz).map(|_| rng.next_below(v as u64) as u32).collect();
                check(
                    &[logits],
                    move |t, ids| t.cross_entropy(ids[0], &targets),
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "cross_entropy_masked",
            Box::new(|rng, seed| {
                // Rank-3 logits with pad targets sprinkled in; those rows
                // must contribute no loss and no gradient.
                let (b, l, v) = (2usize, 3usize, rng.next_below(5) as usize + 2);
                let logits = uni(rng, vec![b, l, v], -2.0, 2.0);
                let mut targets: Vec<u32> = (0..b * l)
                    .map(|_| rng.next_below(v as u64) as u32)
                    .collect();
                targets[0] = 0;
                targets[b * l - 1] = 1.min(v as u32 - 1);
                check(
                    &[logits],
                    move |t, ids| t.cross_entropy_masked(ids[0], &targets),
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "embed",
            Box::new(|rng, seed| {
                let (rows, d) = (5usize, 3usize);
                let table = uni(rng, vec![rows, d], -1.0, 1.0);
                // repeated index exercises gradient accumulation in a row
                let indices = vec![1u32, 3, 1, 0];
                let w = uni(rng, vec![4, d], -1.0, 1.0);
                check(
                    &[table],
                    move |t, ids| {
                        let y = t.embed(ids[0], &indices, &[4])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "slice_last",
            Box::new(|rng, seed| {
                let (r, d) = (3usize, 6usize);
                let x = uni(rng, vec![r, d], -1.0, 1.0);
                let w = uni(rng, vec![r, 3], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.slice_last(ids[0], 2, 3)?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "last_position",
            Box::new(|rng, seed| {
                let (bsz, l, d) = (2usize, 4usize, 3usize);
                let x = uni(rng, vec![bsz, l, d], -1.0, 1.0);
                let w = uni(rng, vec![bsz, d], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.last_position(ids[0])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "mask_rows",
            Box::new(|rng, seed| {
                let (r, d) = (6usize, 3usize);
                let x = uni(rng, vec![r, d], -1.0, 1.0);
                let keep: Vec<bool> = (0..r).map(|_| rng.next_below(2) == 0).collect();
                let w = uni(rng, vec![r, d], -1.0, 1.0);
                check(
                    &[x],
                    move |t, ids| {
                        let y = t.mask_rows(ids[0], &keep)?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "broadcast_last",
            Box::new(|rng, seed| {
                let r = 5usize;
                let x = uni(rng, vec![r, 1], -1.0, 1.0);
                let w = uni(rng, vec![r, 4], -1.0, 1.0);
                check(
                    &[x],
                    |t, ids| {
                        let y = t.broadcast_last(ids[0], 4)?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "discretize_a",
            Box::new(|rng, seed| {
                let (bsz, l, c, n) = (1usize, 3usize, 2usize, 2usize);
                let delta = uni(rng, vec![bsz, l, c], 0.05, 1.0);
                let a = uni(rng, vec![c, n], -2.0, -0.1);
                let w = uni(rng, vec![bsz, l, c, n], -1.0, 1.0);
                check(
                    &[delta, a],
                    |t, ids| {
                        let y = t.discretize_a(ids[0], ids[1])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "discretize_b",
            Box::new(|rng, seed| {
                let (bsz, l, c, n) = (1usize, 3usize, 2usize, 2usize);
                // |delta*a| >= 5e-3 keeps probes away from the series branch
                let delta = uni(rng, vec![bsz, l, c], 0.05, 1.0);
                let a = uni(rng, vec![c, n], -2.0, -0.1);
                let b = uni(rng, vec![bsz, l, n], -1.0, 1.0);
                let w = uni(rng, vec![bsz, l, c, n], -1.0, 1.0);
                check(
                    &[delta, a, b],
                    |t, ids| {
                        let y = t.discretize_b(ids[0], ids[1], ids[2])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "mul_bcast_n",
            Box::new(|rng, seed| {
                let (bsz, l, c, n) = (1usize, 3usize, 2usize, 3usize);
                let big = uni(rng, vec![bsz, l, c, n], -1.0, 1.0);
                let x = uni(rng, vec![bsz, l, c], -1.0, 1.0);
                let w = uni(rng, vec![bsz, l, c, n], -1.0, 1.0);
                check(
                    &[big, x],
                    |t, ids| {
                        let y = t.mul_bcast_n(ids[0], ids[1])?;
                        wsum(t, y, &w)
                    },
                    FD_STEP,
                    PROBES,
                    seed,
                )
            }),
        ),
        (
            "selective_scan_sequential",
            Box::new(|rng, seed| scan_case(rng, seed, false)),
        ),
        (
            "selective_scan_parallel",
            Box::new(|rng, seed| scan_case(rng, seed, true)),
        ),
        (
            "ssm_scan_sequential",
            Box::new(|rng, seed| fused_case(rng, seed, false)),
        ),
        (
            "ssm_scan_parallel",
            Box::new(|rng, seed| fused_case(rng, seed, true)),
        ),
    ];

    fn scan_case(rng: &mut Rng, seed: u64, parallel: bool) -> Result<GradReport> {
        let (bsz, l, c, n) = (1usize, rng.next_below(6) as usize + 2, 2usize, 2usize);
        let a_bar = uni(rng, vec![bsz, l, c, n], 0.05, 0.95);
        let bx = uni(rng, vec![bsz, l, c, n], -1.0, 1.0);
        let cc = uni(rng, vec![bsz, l, n], -1.0, 1.0);
        let w = uni(rng, vec![bsz, l, c], -1.0, 1.0);
        check(
            &[a_bar, bx, cc],
            |t, ids| {
                let wi = t.input(w.clone());
                let y = t.scan(ids[0], ids[1], ids[2], parallel)?;
                let m = t.mul(y, wi)?;
                t.sum(m)
            },
            FD_STEP,
            PROBES,
            seed,
        )
    }

    fn fused_case(rng: &mut Rng, seed: u64, parallel: bool) -> Result<GradReport> {
        // L alternates between a single chunk and several, so the
        // checkpoint-recompute path is exercised.
        let l = if rng.next_below(2) == 0 { 5 } else { 280 };
        let (bsz, c, n) = (1usize, 2usize, 2usize);
        let delta = uni(rng, vec![bsz, l, c], 0.05, 0.8);
        let a = uni(rng, vec![c, n], -2.0, -0.1);
        let b = uni(rng, vec![bsz, l, n], -1.0, 1.0);
        let cc = uni(rng, vec![bsz, l, n], -1.0, 1.0);
        let x = uni(rng, vec![bsz, l, c], -1.0, 1.0);
        let w = uni(rng, vec![bsz, l, c], -1.0, 1.0);
        check(
            &[delta, a, b, cc, x],
            |t, ids| {
                let wi = t.input(w.clone());
                let y = t.ssm_scan(ids[0], ids[1], ids[2], ids[3], ids[4], parallel)?;
                let m = t.mul(y, wi)?;
                t.sum(m)
            },
            FD_STEP,
            PROBES,
            seed,
        )
    }

    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(ops.len());
    for (name, builder) in &ops {
        let mut worst = 0.0f64;
        let mut total = 0usize;
        for trial in 0..trials {
            let rep = builder(&mut rng, seed ^ (trial as u64).wrapping_mul(0x9e37_79b9))?;
            worst = worst.max(rep.max_rel_err);
            total += rep.probes;
        }
        out.push(OpCheck {
            name,
            max_rel_err: worst,
            probes: total,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_confirms_quadratic() {
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let rep = check(
            &[x],
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                t.sum(sq)
            },
            FD_STEP,
            16,
            7,
        )
        .unwrap();
        assert_eq!(rep.probes, 3);
        assert!(rep.max_rel_err < 1e-9, "err {}", rep.max_rel_err);
    }

    #[test]
    fn every_op_passes_fd_check() {
        for row in run_op_suite(3, 0xA11CE).unwrap() {
            assert!(
                row.max_rel_err <= 1e-4,
                "{} exceeded tolerance: {:.3e} over {} probes",
                row.name,
                row.max_rel_err,
                row.probes
            );
        }
    }
}
