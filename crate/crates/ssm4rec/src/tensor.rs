//! Dense row-major tensors: the carrier type for every value and gradient
//! in the stack.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform init in [-bound, bound), drawn elementwise in index order.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| S::c(rng.uniform(-bound, bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) -> &mut Self {
        self.requires_grad = on;
        self
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes except the last: the number of "rows" when the
    /// tensor is viewed as a 2-D matrix over its final axis.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Flat offset for a full multi-index (tests and small paths only).
    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Map to another element type (used when loading f32 checkpoints into
    /// an f64 model and vice versa).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::c(v.f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

/// C = A·B (or an accumulation into C) over row-major buffers, with either
/// side optionally interpreted as transposed. Parallel over fixed 256-row
/// blocks of the output so results are bitwise identical for any thread
/// count.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_transposed: bool,
    b: &[S],
    b_transposed: bool,
    accumulate: bool,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    assert_eq!(c.len(), m * n, "gemm: out buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(S::zero());
        }
        return;
    }
    let (rsa, csa) = if a_transposed {
        (1isize, m as isize) // stored [k, m]
    } else {
        (k as isize, 1isize) // stored [m, k]
    };
    let (rsb, csb) = if b_transposed {
        (1isize, k as isize) // stored [n, k]
    } else {
        (n as isize, 1isize) // stored [k, n]
    };
    let beta = if accumulate { S::one() } else { S::zero() };

    const ROW_BLOCK: usize = 256;
    if m <= ROW_BLOCK {
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    use rayon::prelude::*;
    let a_ptr = SendPtr(a.as_ptr());
    let b_ptr = SendPtr(b.as_ptr());
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(block, c_chunk)| {
            let r0 = block * ROW_BLOCK;
            let rows = c_chunk.len() / n;
            let a_off = if a_transposed { r0 as isize * csa } else { r0 as isize * rsa };
            unsafe {
                S::gemm(
                    rows,
                    k,
                    n,
                    S::one(),
                    a_ptr.get().offset(a_off),
                    rsa,
                    csa,
                    b_ptr.get(),
                    rsb,
                    csb,
                    beta,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

#[derive(Clone, Copy)]
struct SendPtr<S>(*const S);
unsafe impl<S> Send for SendPtr<S> {}
unsafe impl<S> Sync for SendPtr<S> {}

impl<S> SendPtr<S> {
    // method access keeps the closure capturing the wrapper, not the field
    fn get(&self) -> *const S {
        self.0
    }
}
