//! Single-head causal self-attention, kept as the quadratic reference point
//! for scaling benchmarks. It is not part of the recommender itself.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

pub struct AttentionParams<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn init(d_model: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let shape = vec![d_model, d_model];
        AttentionParams {
            w_q: Tensor::uniform(shape.clone(), bound, &mut rng.fork("w_q")),
            w_k: Tensor::uniform(shape.clone(), bound, &mut rng.fork("w_k")),
            w_v: Tensor::uniform(shape, bound, &mut rng.fork("w_v")),
        }
    }
}

/// softmax(Q K^T / sqrt(D) + causal mask) V with learned projections.
/// Quadratic in sequence length by construction: every position attends to
/// all earlier ones.
pub fn reference_attention_forward<S: Scalar>(
    h: &Tensor<S>,
    params: &AttentionParams<S>,
) -> Result<Tensor<S>> {
    let sh = h.shape();
    if sh.len() != 3 {
        return Err(Error::dim(format!(
            "attention: expected [batch, len, d], got {sh:?}"
        )));
    }
    let (b, l, d) = (sh[0], sh[1], sh[2]);
    if params.w_q.shape() != [d, d] {
        return Err(Error::dim(format!(
            "attention: projections are {:?}, input feature dim is {d}",
            params.w_q.shape()
        )));
    }
    let rows = b * l;
    let mut q = vec![S::zero(); rows * d];
    let mut k = vec![S::zero(); rows * d];
    let mut v = vec![S::zero(); rows * d];
    gemm(rows, d, d, h.data(), false, params.w_q.data(), false, false, &mut q);
    gemm(rows, d, d, h.data(), false, params.w_k.data(), false, false, &mut k);
    gemm(rows, d, d, h.data(), false, params.w_v.data(), false, false, &mut v);

    let scale = S::one() / S::c((d as f64).sqrt());
    let mut out = vec![S::zero(); rows * d];
    let mut weights = vec![S::zero(); l];
    for bi in 0..b {
        let base = bi * l * d;
        for t in 0..l {
            let qt = &q[base + t * d..base + (t + 1) * d];
            let scores = &mut weights[..t + 1];
            let mut max = S::neg_infinity();
            for (u, s) in scores.iter_mut().enumerate() {
                let ku = &k[base + u * d..base + (u + 1) * d];
                let mut dot = S::zero();
                for j in 0..d {
                    dot += qt[j] * ku[j];
                }
                *s = dot * scale;
                max = max.max(*s);
            }
            let mut z = S::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp_fast();
                z += *s;
            }
            let row = &mut out[base + t * d..base + (t + 1) * d];
            for (u, &w) in scores.iter().enumerate() {
                let wu = w / z;
                let vu = &v[base + u * d..base + (u + 1) * d];
                for j in 0..d {
                    row[j] += wu * vu[j];
                }
            }
        }
    }
    Tensor::from_vec(vec![b, l, d], out)
}

/// Multiply-add count for one forward pass: three projections plus the
/// causal score/value pairs.
pub fn attention_macs(b: usize, l: usize, d: usize) -> u64 {
    let proj = 3 * b * l * d * d;
    let pairs = b * d * l * (l + 1);
    (proj + pairs) as u64
}

/// Peak transient buffer estimate in bytes (Q, K, V, output, score row).
pub fn attention_bytes(b: usize, l: usize, d: usize, elem: usize) -> usize {
    (4 * b * l * d + l) * elem
}
