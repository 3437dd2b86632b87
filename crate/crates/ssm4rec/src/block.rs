//! Gated state-space block: linear projections into an expanded channel
//! space, a depthwise causal convolution, input-dependent generation of the
//! per-position scan parameters, the selective scan itself, and a
//! multiplicative gate back down to model width.
//!
//! The block is pure given its parameters. Dropout and normalization live in
//! the layer composition around it, so there is no randomness here.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::ssm::{init_state_matrix, StateMatrix};
use crate::tape::{Tape, Tid};
use crate::tensor::Tensor;

/// Shape hyperparameters of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    /// Width D of the stream entering and leaving the block.
    pub d_model: usize,
    /// State dimension N carried per channel by the scan.
    pub state_dim: usize,
    /// Causal convolution kernel width K.
    pub conv_kernel: usize,
    /// Expansion factor E; the block runs C = E*D internal channels.
    pub expand: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            state_dim: 32,
            conv_kernel: 4,
            expand: 2,
        }
    }
}

impl BlockConfig {
    /// Internal channel count C = E*D.
    pub fn inner_dim(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 1 || self.state_dim < 1 || self.conv_kernel < 1 || self.expand < 1 {
            return Err(Error::Config(format!(
                "block dims must all be >= 1: D={} N={} K={} E={}",
                self.d_model, self.state_dim, self.conv_kernel, self.expand
            )));
        }
        Ok(())
    }
}

/// Learnable state of one block. Linear maps carry no bias; the only biases
/// are the convolution's and the per-channel step-size shift `dt_bias`.
#[derive(Clone)]
pub struct MambaBlockParams<S: Scalar> {
    /// [D, 2C]: a single matmul produces the scan stream and the gate stream.
    pub w_in: Tensor<S>,
    /// Depthwise causal kernel [C, K] and its bias [C].
    pub conv_w: Tensor<S>,
    pub conv_bias: Tensor<S>,
    /// Per-position projections onto the state axis, [C, N] each.
    pub w_b: Tensor<S>,
    pub w_c: Tensor<S>,
    /// Rank-1 step-size head [C, 1]; broadcast across channels before the
    /// per-channel shift `dt_bias` [C].
    pub w_dt: Tensor<S>,
    pub dt_bias: Tensor<S>,
    /// Log-parameterized diagonal state matrix over C channels.
    pub state: StateMatrix<S>,
    /// [C, D] back to model width.
    pub w_out: Tensor<S>,
}

/// Handles for one block's parameters after registration on a tape, in the
/// same order `tensors()` lists them.
#[derive(Clone, Copy)]
pub struct BlockTids {
    pub w_in: Tid,
    pub conv_w: Tid,
    pub conv_bias: Tid,
    pub w_b: Tid,
    pub w_c: Tid,
    pub w_dt: Tid,
    pub dt_bias: Tid,
    pub a_log: Tid,
    pub w_out: Tid,
}

impl BlockTids {
    /// Handles in the same order as [`MambaBlockParams::tensors`].
    pub fn leaves(&self) -> [Tid; 9] {
        [
            self.w_in,
            self.conv_w,
            self.conv_bias,
            self.w_b,
            self.w_c,
            self.w_dt,
            self.dt_bias,
            self.a_log,
            self.w_out,
        ]
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// dt_bias such that softplus(dt_bias) is log-uniform in [1e-3, 1e-1].
fn init_dt_bias<S: Scalar>(channels: usize, rng: &mut Rng) -> Tensor<S> {
    let (lo, hi) = ((1e-3f64).ln(), (1e-1f64).ln());
    Tensor::from_fn(vec![channels], |_| {
        let dt = rng.uniform(lo, hi).exp();
        // Inverse softplus: ln(exp(dt) - 1).
        S::c(dt.exp_m1().ln())
    })
}

impl<S: Scalar> MambaBlockParams<S> {
    /// Fresh parameters: projections and kernel uniform in +-1/sqrt(fan_in),
    /// conv bias zero, step sizes initialized small (see `init_dt_bias`).
    pub fn init(cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, n, k) = (cfg.d_model, cfg.state_dim, cfg.conv_kernel);
        let c = cfg.inner_dim();
        Ok(Self {
            w_in: Tensor::uniform(vec![d, 2 * c], fan_in_bound(d), &mut rng.fork("w_in")),
            conv_w: Tensor::uniform(vec![c, k], fan_in_bound(k), &mut rng.fork("conv_w")),
            conv_bias: Tensor::zeros(vec![c]),
            w_b: Tensor::uniform(vec![c, n], fan_in_bound(c), &mut rng.fork("w_b")),
            w_c: Tensor::uniform(vec![c, n], fan_in_bound(c), &mut rng.fork("w_c")),
            w_dt: Tensor::uniform(vec![c, 1], fan_in_bound(c), &mut rng.fork("w_dt")),
            dt_bias: init_dt_bias(c, &mut rng.fork("dt_bias")),
            state: init_state_matrix(c, n)?,
            w_out: Tensor::uniform(vec![c, d], fan_in_bound(c), &mut rng.fork("w_out")),
        })
    }

    /// Stable name/tensor listing, the block's optimizer and checkpoint view.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("w_in", &self.w_in),
            ("conv_w", &self.conv_w),
            ("conv_bias", &self.conv_bias),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_dt", &self.w_dt),
            ("dt_bias", &self.dt_bias),
            ("a_log", &self.state.a_log),
            ("w_out", &self.w_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![
            ("w_in", &mut self.w_in),
            ("conv_w", &mut self.conv_w),
            ("conv_bias", &mut self.conv_bias),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
            ("w_dt", &mut self.w_dt),
            ("dt_bias", &mut self.dt_bias),
            ("a_log", &mut self.state.a_log),
            ("w_out", &mut self.w_out),
        ]
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn register(&self, tape: &mut Tape<S>) -> BlockTids {
        BlockTids {
            w_in: tape.param(self.w_in.clone()),
            conv_w: tape.param(self.conv_w.clone()),
            conv_bias: tape.param(self.conv_bias.clone()),
            w_b: tape.param(self.w_b.clone()),
            w_c: tape.param(self.w_c.clone()),
            w_dt: tape.param(self.w_dt.clone()),
            dt_bias: tape.param(self.dt_bias.clone()),
            a_log: tape.param(self.state.a_log.clone()),
            w_out: tape.param(self.w_out.clone()),
        }
    }

    pub fn cast<T: Scalar>(&self) -> MambaBlockParams<T> {
        MambaBlockParams {
            w_in: self.w_in.cast(),
            conv_w: self.conv_w.cast(),
            conv_bias: self.conv_bias.cast(),
            w_b: self.w_b.cast(),
            w_c: self.w_c.cast(),
            w_dt: self.w_dt.cast(),
            dt_bias: self.dt_bias.cast(),
            state: StateMatrix {
                a_log: self.state.a_log.cast(),
            },
            w_out: self.w_out.cast(),
        }
    }
}

/// Single input projection split into the scan stream and the gate stream.
/// No bias, so a zero input yields two zero streams.
pub fn project_in<S: Scalar>(
    tape: &mut Tape<S>,
    h_in: Tid,
    tids: &BlockTids,
    cfg: &BlockConfig,
) -> Result<(Tid, Tid)> {
    let c = cfg.inner_dim();
    if tape.value(h_in).last_dim() != cfg.d_model
        || tape.shape(tids.w_in) != [cfg.d_model, 2 * c]
    {
        return Err(Error::dim(format!(
            "project_in: input {:?} / weights {:?} do not fit D={}, C={}",
            tape.shape(h_in),
            tape.shape(tids.w_in),
            cfg.d_model,
            c
        )));
    }
    let both = tape.matmul(h_in, tids.w_in)?;
    let h_x = tape.slice_last(both, 0, c)?;
    let h_z = tape.slice_last(both, c, c)?;
    Ok((h_x, h_z))
}

/// Per-position scan parameters from the convolved stream [B,L,C]:
/// input/readout projections onto the state axis and a softplus-positive
/// step size, with the rank-1 head broadcast across channels.
pub fn generate_ssm_params<S: Scalar>(
    tape: &mut Tape<S>,
    h_conv: Tid,
    tids: &BlockTids,
) -> Result<(Tid, Tid, Tid)> {
    let b = tape.matmul(h_conv, tids.w_b)?;
    let c = tape.matmul(h_conv, tids.w_c)?;
    let dt_raw = tape.matmul(h_conv, tids.w_dt)?;
    let channels = tape.value(h_conv).last_dim();
    let dt_wide = tape.broadcast_last(dt_raw, channels)?;
    let dt_shifted = tape.add_bias(dt_wide, tids.dt_bias)?;
    let delta = tape.softplus(dt_shifted)?;
    Ok((b, c, delta))
}

/// The full block over h_in[B,L,D], producing [B,L,D].
///
/// `pad_keep`, when given, flags the real rows of the flattened [B*L]
/// position grid; padded rows have their post-convolution activations
/// zeroed. Zero activations inject nothing into the scan state, so the
/// output at real positions is invariant to extra left padding.
pub fn mamba_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    h_in: Tid,
    tids: &BlockTids,
    cfg: &BlockConfig,
    pad_keep: Option<&[bool]>,
    parallel: bool,
) -> Result<Tid> {
    let (h_x, h_z) = project_in(tape, h_in, tids, cfg)?;
    let conv = tape.causal_conv1d(h_x, tids.conv_w, tids.conv_bias)?;
    let act = tape.silu(conv)?;
    let act = match pad_keep {
        Some(keep) => tape.mask_rows(act, keep)?,
        None => act,
    };
    let (b, c, delta) = generate_ssm_params(tape, act, tids)?;
    let a = tape.neg_exp(tids.a_log)?;
    let y = tape.ssm_scan(delta, a, b, c, act, parallel)?;
    let gate = tape.silu(h_z)?;
    let gated = tape.mul(y, gate)?;
    tape.matmul(gated, tids.w_out)
}

/// Convenience forward on plain tensors (builds a throwaway tape).
pub fn forward<S: Scalar>(
    params: &MambaBlockParams<S>,
    cfg: &BlockConfig,
    h_in: &Tensor<S>,
    parallel: bool,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let tids = params.register(&mut tape);
    let x = tape.input(h_in.clone());
    let y = mamba_block_forward(&mut tape, x, &tids, cfg, None, parallel)?;
    Ok(tape.value(y).clone())
}
