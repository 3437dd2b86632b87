//! The full recommender network: item embeddings (optionally positional),
//! one or two gated state-space layers with position-wise feed-forward,
//! dropout and layer normalization, and tied-embedding scoring.
//!
//! Residual policy follows the layer count: a single layer normalizes the
//! sublayer outputs directly, stacked layers wrap each sublayer in a
//! residual add before normalizing.

use crate::block::{mamba_block_forward, BlockConfig, BlockTids, MambaBlockParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Tid};
use crate::tensor::Tensor;

/// Variance floor inside every layer normalization.
pub const LN_EPS: f64 = 1e-12;

/// Item index reserved for left padding; never a real item and never ranked.
pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// |V|+1 embedding rows; row 0 is the pad item.
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub use_positional_embedding: bool,
    pub use_pffn: bool,
    pub use_layernorm: bool,
    pub dropout_embed: f64,
    pub dropout_hidden: f64,
    /// Padded sequence length every batch is shaped to.
    pub max_len: usize,
    pub block: BlockConfig,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            num_layers: 1,
            use_positional_embedding: false,
            use_pffn: true,
            use_layernorm: true,
            dropout_embed: 0.2,
            dropout_hidden: 0.2,
            max_len,
            block: BlockConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no real items",
                self.vocab_size
            )));
        }
        if self.num_layers < 1 || self.max_len < 1 {
            return Err(Error::Config(format!(
                "need num_layers >= 1 and max_len >= 1, got {} and {}",
                self.num_layers, self.max_len
            )));
        }
        if self.d_model != self.block.d_model {
            return Err(Error::Config(format!(
                "model width {} disagrees with block width {}",
                self.d_model, self.block.d_model
            )));
        }
        self.block.validate()
    }
}

/// Per-layer learnable state around one block.
#[derive(Clone)]
pub struct LayerParams<S: Scalar> {
    pub block: MambaBlockParams<S>,
    /// Position-wise feed-forward D -> 4D -> D.
    pub pffn_w1: Tensor<S>,
    pub pffn_b1: Tensor<S>,
    pub pffn_w2: Tensor<S>,
    pub pffn_b2: Tensor<S>,
    /// Affine pairs for the post-block and post-feed-forward norms.
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

#[derive(Clone)]
pub struct ModelParams<S: Scalar> {
    /// [|V|+1, D]; row 0 stays zero (pad) and is never updated.
    pub item_embedding: Tensor<S>,
    /// [L, D] when positional embeddings are enabled.
    pub pos_embedding: Option<Tensor<S>>,
    /// Affine pair of the embedding-layer norm (always applied).
    pub embed_ln_gamma: Tensor<S>,
    pub embed_ln_beta: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut item_embedding = Tensor::uniform(
            vec![cfg.vocab_size, d],
            bound(d),
            &mut rng.fork("item_embedding"),
        );
        item_embedding.data_mut()[..d].fill(S::zero());
        let pos_embedding = cfg.use_positional_embedding.then(|| {
            Tensor::uniform(vec![cfg.max_len, d], bound(d), &mut rng.fork("pos_embedding"))
        });
        let layers = (0..cfg.num_layers)
            .map(|li| {
                let lr = rng.fork(&format!("layer{li}"));
                Ok(LayerParams {
                    block: MambaBlockParams::init(&cfg.block, &mut lr.fork("block"))?,
                    pffn_w1: Tensor::uniform(vec![d, 4 * d], bound(d), &mut lr.fork("pffn_w1")),
                    pffn_b1: Tensor::zeros(vec![4 * d]),
                    pffn_w2: Tensor::uniform(
                        vec![4 * d, d],
                        bound(4 * d),
                        &mut lr.fork("pffn_w2"),
                    ),
                    pffn_b2: Tensor::zeros(vec![d]),
                    ln1_gamma: Tensor::full(vec![d], S::one()),
                    ln1_beta: Tensor::zeros(vec![d]),
                    ln2_gamma: Tensor::full(vec![d], S::one()),
                    ln2_beta: Tensor::zeros(vec![d]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            item_embedding,
            pos_embedding,
            embed_ln_gamma: Tensor::full(vec![d], S::one()),
            embed_ln_beta: Tensor::zeros(vec![d]),
            layers,
        })
    }

    /// Stable name/tensor listing used by the optimizer and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("item_embedding".into(), &self.item_embedding),
            ("embed_ln_gamma".into(), &self.embed_ln_gamma),
            ("embed_ln_beta".into(), &self.embed_ln_beta),
        ];
        if let Some(pe) = &self.pos_embedding {
            out.push(("pos_embedding".into(), pe));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.block.tensors() {
                out.push((format!("layer{li}.block.{name}"), t));
            }
            out.push((format!("layer{li}.pffn_w1"), &layer.pffn_w1));
            out.push((format!("layer{li}.pffn_b1"), &layer.pffn_b1));
            out.push((format!("layer{li}.pffn_w2"), &layer.pffn_w2));
            out.push((format!("layer{li}.pffn_b2"), &layer.pffn_b2));
            out.push((format!("layer{li}.ln1_gamma"), &layer.ln1_gamma));
            out.push((format!("layer{li}.ln1_beta"), &layer.ln1_beta));
            out.push((format!("layer{li}.ln2_gamma"), &layer.ln2_gamma));
            out.push((format!("layer{li}.ln2_beta"), &layer.ln2_beta));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("item_embedding".into(), &mut self.item_embedding),
            ("embed_ln_gamma".into(), &mut self.embed_ln_gamma),
            ("embed_ln_beta".into(), &mut self.embed_ln_beta),
        ];
        if let Some(pe) = &mut self.pos_embedding {
            out.push(("pos_embedding".into(), pe));
        }
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.block.tensors_mut() {
                out.push((format!("layer{li}.block.{name}"), t));
            }
            out.push((format!("layer{li}.pffn_w1"), &mut layer.pffn_w1));
            out.push((format!("layer{li}.pffn_b1"), &mut layer.pffn_b1));
            out.push((format!("layer{li}.pffn_w2"), &mut layer.pffn_w2));
            out.push((format!("layer{li}.pffn_b2"), &mut layer.pffn_b2));
            out.push((format!("layer{li}.ln1_gamma"), &mut layer.ln1_gamma));
            out.push((format!("layer{li}.ln1_beta"), &mut layer.ln1_beta));
            out.push((format!("layer{li}.ln2_gamma"), &mut layer.ln2_gamma));
            out.push((format!("layer{li}.ln2_beta"), &mut layer.ln2_beta));
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            item_embedding: self.item_embedding.cast(),
            pos_embedding: self.pos_embedding.as_ref().map(|t| t.cast()),
            embed_ln_gamma: self.embed_ln_gamma.cast(),
            embed_ln_beta: self.embed_ln_beta.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    block: l.block.cast(),
                    pffn_w1: l.pffn_w1.cast(),
                    pffn_b1: l.pffn_b1.cast(),
                    pffn_w2: l.pffn_w2.cast(),
                    pffn_b2: l.pffn_b2.cast(),
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles mirroring `ModelParams`, in `tensors()` order.
pub struct LayerTids {
    pub block: BlockTids,
    pub pffn_w1: Tid,
    pub pffn_b1: Tid,
    pub pffn_w2: Tid,
    pub pffn_b2: Tid,
    pub ln1_gamma: Tid,
    pub ln1_beta: Tid,
    pub ln2_gamma: Tid,
    pub ln2_beta: Tid,
}

pub struct ModelTids {
    pub item_embedding: Tid,
    pub pos_embedding: Option<Tid>,
    pub embed_ln_gamma: Tid,
    pub embed_ln_beta: Tid,
    pub layers: Vec<LayerTids>,
}

impl ModelTids {
    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn leaves(&self) -> Vec<Tid> {
        let mut out = vec![self.item_embedding, self.embed_ln_gamma, self.embed_ln_beta];
        if let Some(pe) = self.pos_embedding {
            out.push(pe);
        }
        for l in &self.layers {
            out.extend(l.block.leaves());
            out.extend([
                l.pffn_w1,
                l.pffn_b1,
                l.pffn_w2,
                l.pffn_b2,
                l.ln1_gamma,
                l.ln1_beta,
                l.ln2_gamma,
                l.ln2_beta,
            ]);
        }
        out
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn register(&self, tape: &mut Tape<S>) -> ModelTids {
        ModelTids {
            item_embedding: tape.param(self.item_embedding.clone()),
            embed_ln_gamma: tape.param(self.embed_ln_gamma.clone()),
            embed_ln_beta: tape.param(self.embed_ln_beta.clone()),
            pos_embedding: self.pos_embedding.as_ref().map(|t| tape.param(t.clone())),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTids {
                    block: l.block.register(tape),
                    pffn_w1: tape.param(l.pffn_w1.clone()),
                    pffn_b1: tape.param(l.pffn_b1.clone()),
                    pffn_w2: tape.param(l.pffn_w2.clone()),
                    pffn_b2: tape.param(l.pffn_b2.clone()),
                    ln1_gamma: tape.param(l.ln1_gamma.clone()),
                    ln1_beta: tape.param(l.ln1_beta.clone()),
                    ln2_gamma: tape.param(l.ln2_gamma.clone()),
                    ln2_beta: tape.param(l.ln2_beta.clone()),
                })
                .collect(),
        }
    }
}

fn keep_flags(items: &[u32]) -> Vec<bool> {
    items.iter().map(|&it| it != PAD).collect()
}

/// Lookup, optional positional offset, dropout, normalization; pad rows are
/// forced back to zero afterwards so padding never carries signal.
///
/// `pos_offset` shifts position indices so a window whose left edge was
/// trimmed keeps the indices it had before trimming.
#[allow(clippy::too_many_arguments)]
pub fn embed_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    items: &[u32],
    batch: usize,
    tids: &ModelTids,
    cfg: &ModelConfig,
    pos_offset: usize,
    rng: &mut Rng,
    training: bool,
) -> Result<Tid> {
    if items.len() != batch * cfg.max_len {
        return Err(Error::dim(format!(
            "embed_sequence: {} indices for batch {} x len {}",
            items.len(),
            batch,
            cfg.max_len
        )));
    }
    let mut h = tape.embed(tids.item_embedding, items, &[batch, cfg.max_len])?;
    if let Some(pe) = tids.pos_embedding {
        let lo = pos_offset as u32;
        let hi = (pos_offset + cfg.max_len) as u32;
        let pos_idx: Vec<u32> = (0..batch).flat_map(|_| lo..hi).collect();
        let pos = tape.embed(pe, &pos_idx, &[batch, cfg.max_len])?;
        h = tape.add(h, pos)?;
    }
    h = tape.dropout(h, cfg.dropout_embed, rng, training)?;
    h = tape.layer_norm(h, tids.embed_ln_gamma, tids.embed_ln_beta, LN_EPS)?;
    tape.mask_rows(h, &keep_flags(items))
}

/// GELU(h W1 + b1) W2 + b2, applied at every position independently.
pub fn pffn_forward<S: Scalar>(tape: &mut Tape<S>, h: Tid, layer: &LayerTids) -> Result<Tid> {
    let a = tape.matmul(h, layer.pffn_w1)?;
    let a = tape.add_bias(a, layer.pffn_b1)?;
    let a = tape.gelu(a)?;
    let b = tape.matmul(a, layer.pffn_w2)?;
    tape.add_bias(b, layer.pffn_b2)
}

/// One layer: block and feed-forward sublayers, each followed by dropout and
/// (by default) layer normalization. Stacked models add the residual input
/// back before normalizing; a single-layer model does not.
#[allow(clippy::too_many_arguments)]
pub fn mamba_layer_forward<S: Scalar>(
    tape: &mut Tape<S>,
    h: Tid,
    layer: &LayerTids,
    cfg: &ModelConfig,
    pad_keep: Option<&[bool]>,
    rng: &mut Rng,
    training: bool,
    parallel: bool,
) -> Result<Tid> {
    let stacked = cfg.num_layers >= 2;
    let block_out = mamba_block_forward(tape, h, &layer.block, &cfg.block, pad_keep, parallel)?;
    let mut x = tape.dropout(block_out, cfg.dropout_hidden, rng, training)?;
    if stacked {
        x = tape.add(h, x)?;
    }
    if cfg.use_layernorm {
        x = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    }
    if !cfg.use_pffn {
        return Ok(x);
    }
    let ff = pffn_forward(tape, x, layer)?;
    let mut y = tape.dropout(ff, cfg.dropout_hidden, rng, training)?;
    if stacked {
        y = tape.add(x, y)?;
    }
    if cfg.use_layernorm {
        y = tape.layer_norm(y, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    }
    Ok(y)
}

/// Drops all-pad leading columns shared by every row; the output at real
/// positions is unchanged (padding carries no state) and short batches get
/// proportionally cheaper.
fn trim_leading_pads(items: &[u32], batch: usize, len: usize) -> (Vec<u32>, usize) {
    let shared = (0..batch)
        .map(|b| {
            items[b * len..(b + 1) * len]
                .iter()
                .take_while(|&&it| it == PAD)
                .count()
        })
        .min()
        .unwrap_or(0);
    if shared == 0 {
        return (items.to_vec(), len);
    }
    let kept = len - shared;
    let mut out = Vec::with_capacity(batch * kept);
    for b in 0..batch {
        out.extend_from_slice(&items[b * len + shared..(b + 1) * len]);
    }
    (out, kept)
}

/// Hidden states for every position: embed, run the layers, return the full
/// [batch, eff_len, d_model] stack where eff_len is max_len minus however
/// many all-pad leading columns were shared by the whole batch. Positions
/// that held padding come back as zero rows.
#[allow(clippy::too_many_arguments)]
pub fn model_forward_states<S: Scalar>(
    tape: &mut Tape<S>,
    items: &[u32],
    batch: usize,
    tids: &ModelTids,
    cfg: &ModelConfig,
    rng: &mut Rng,
    training: bool,
    parallel: bool,
) -> Result<(Tid, usize)> {
    if items.len() != batch * cfg.max_len || batch == 0 {
        return Err(Error::dim(format!(
            "model_forward: {} indices for batch {} x len {}",
            items.len(),
            batch,
            cfg.max_len
        )));
    }
    for b in 0..batch {
        if items[b * cfg.max_len..(b + 1) * cfg.max_len]
            .iter()
            .all(|&it| it == PAD)
        {
            return Err(Error::contract(format!("row {b} is entirely padding")));
        }
    }
    let (trimmed, eff_len) = trim_leading_pads(items, batch, cfg.max_len);
    let eff_cfg = ModelConfig {
        max_len: eff_len,
        ..cfg.clone()
    };
    let keep = keep_flags(&trimmed);
    let pos_offset = cfg.max_len - eff_len;
    let mut h = embed_sequence(
        tape, &trimmed, batch, tids, &eff_cfg, pos_offset, rng, training,
    )?;
    for layer in &tids.layers {
        h = mamba_layer_forward(
            tape, h, layer, &eff_cfg, Some(&keep), rng, training, parallel,
        )?;
    }
    Ok((h, eff_len))
}

/// Hidden state of the most recent item for every row: embed, run the
/// layers, read position L-1 (the last real item under left padding).
#[allow(clippy::too_many_arguments)]
pub fn model_forward<S: Scalar>(
    tape: &mut Tape<S>,
    items: &[u32],
    batch: usize,
    tids: &ModelTids,
    cfg: &ModelConfig,
    rng: &mut Rng,
    training: bool,
    parallel: bool,
) -> Result<Tid> {
    let (h, _) = model_forward_states(tape, items, batch, tids, cfg, rng, training, parallel)?;
    tape.last_position(h)
}

/// Tied-embedding logits h E^T over the full catalog, pad column included
/// (targets never point at it; rankers mask it to -inf first).
pub fn predict_scores<S: Scalar>(tape: &mut Tape<S>, h: Tid, tids: &ModelTids) -> Result<Tid> {
    tape.matmul_nt(h, tids.item_embedding)
}

/// Ranking view of the logits: the pad column can never win.
pub fn mask_pad_column<S: Scalar>(scores: &mut Tensor<S>) {
    let v = scores.last_dim();
    for r in 0..scores.rows() {
        scores.data_mut()[r * v] = S::neg_infinity();
    }
}

/// Full-catalog logits for a batch on a throwaway tape (inference only).
pub fn score_batch<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    items: &[u32],
    batch: usize,
    parallel: bool,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let tids = params.register(&mut tape);
    let mut rng = Rng::new(0); // dropout disabled below; stream is unused
    let h = model_forward(
        &mut tape, items, batch, &tids, cfg, &mut rng, false, parallel,
    )?;
    let scores = predict_scores(&mut tape, h, &tids)?;
    Ok(tape.value(scores).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 4,
            num_layers: 1,
            use_positional_embedding: false,
            use_pffn: true,
            use_layernorm: true,
            dropout_embed: 0.0,
            dropout_hidden: 0.0,
            max_len: 5,
            block: BlockConfig {
                d_model: 4,
                state_dim: 2,
                conv_kernel: 2,
                expand: 1,
            },
        }
    }

    fn forward_vec(
        params: &ModelParams<f32>,
        cfg: &ModelConfig,
        items: &[u32],
        batch: usize,
    ) -> Vec<f32> {
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let mut rng = Rng::new(5);
        let h = model_forward(&mut tape, items, batch, &tids, cfg, &mut rng, false, false)
            .unwrap();
        tape.value(h).data().to_vec()
    }

    #[test]
    fn all_pad_row_is_contract_error() {
        let cfg = tiny_cfg(8);
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let items = vec![0u32; cfg.max_len];
        let mut rng = Rng::new(2);
        assert!(matches!(
            model_forward(&mut tape, &items, 1, &tids, &cfg, &mut rng, false, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pad_rows_embed_to_zero_and_real_row_is_normalized() {
        let cfg = tiny_cfg(8);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let items = vec![0, 0, 0, 0, 6u32];
        let mut rng = Rng::new(4);
        let h = embed_sequence(&mut tape, &items, 1, &tids, &cfg, 0, &mut rng, false).unwrap();
        let d = cfg.d_model;
        let data = tape.value(h).data();
        assert!(data[..4 * d].iter().all(|&v| v == 0.0));
        // Last row equals the hand-normalized embedding row (gamma=1, beta=0
        // at init).
        let row = &params.item_embedding.data()[6 * d..7 * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (j, &got) in data[4 * d..].iter().enumerate() {
            let want = (row[j] - mean) / (var + LN_EPS).sqrt();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn positional_embeddings_change_the_output() {
        let mut cfg = tiny_cfg(8);
        let base = forward_vec(
            &ModelParams::<f32>::init(&cfg, &mut Rng::new(7)).unwrap(),
            &cfg,
            &[1, 2, 3, 4, 5],
            1,
        );
        cfg.use_positional_embedding = true;
        let with_pe = forward_vec(
            &ModelParams::<f32>::init(&cfg, &mut Rng::new(7)).unwrap(),
            &cfg,
            &[1, 2, 3, 4, 5],
            1,
        );
        assert_ne!(base, with_pe);
    }

    #[test]
    fn pffn_bias_collapse_and_position_wise() {
        let cfg = tiny_cfg(8);
        let mut params = ModelParams::<f64>::init(&cfg, &mut Rng::new(8)).unwrap();
        let d = cfg.d_model;
        params.layers[0].pffn_w1 = Tensor::zeros(vec![d, 4 * d]);
        params.layers[0].pffn_w2 = Tensor::zeros(vec![4 * d, d]);
        params.layers[0].pffn_b2 = Tensor::from_fn(vec![d], |i| i as f64 + 1.0);
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let h = tape.input(Tensor::uniform(vec![1, 3, d], 1.0, &mut Rng::new(9)));
        let y = pffn_forward(&mut tape, h, &tids.layers[0]).unwrap();
        for r in 0..3 {
            for j in 0..d {
                assert_eq!(tape.value(y).data()[r * d + j], j as f64 + 1.0);
            }
        }

        // Position-wise: permuting input rows permutes output rows.
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(10)).unwrap();
        let rows = Tensor::<f64>::uniform(vec![1, 3, d], 1.0, &mut Rng::new(11));
        let perm = Tensor::from_fn(vec![1, 3, d], |i| {
            let (r, j) = (i / d, i % d);
            rows.data()[((r + 1) % 3) * d + j]
        });
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let tids = params.register(&mut tape);
            let h = tape.input(x.clone());
            let y = pffn_forward(&mut tape, h, &tids.layers[0]).unwrap();
            tape.value(y).data().to_vec()
        };
        let (a, b) = (run(&rows), run(&perm));
        for r in 0..3 {
            assert_eq!(
                &a[((r + 1) % 3) * d..((r + 1) % 3 + 1) * d],
                &b[r * d..(r + 1) * d]
            );
        }
    }

    #[test]
    fn pffn_matches_direct_composition() {
        let cfg = tiny_cfg(8);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(12)).unwrap();
        let d = cfg.d_model;
        let x = Tensor::<f64>::uniform(vec![2, 3, d], 1.0, &mut Rng::new(13));
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let h = tape.input(x.clone());
        let y = pffn_forward(&mut tape, h, &tids.layers[0]).unwrap();

        let l = &params.layers[0];
        let gelu = |v: f64| {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
        };
        for r in 0..6 {
            for j in 0..d {
                let mut acc = l.pffn_b2.data()[j];
                for m in 0..4 * d {
                    let mut inner = l.pffn_b1.data()[m];
                    for q in 0..d {
                        inner += x.data()[r * d + q] * l.pffn_w1.data()[q * 4 * d + m];
                    }
                    acc += gelu(inner) * l.pffn_w2.data()[m * d + j];
                }
                let got = tape.value(y).data()[r * d + j];
                assert!((got - acc).abs() <= 1e-12 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn layer_flags_bypass_sublayers() {
        let mut cfg = tiny_cfg(8);
        cfg.use_pffn = false;
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(14)).unwrap();
        let x = Tensor::<f64>::uniform(vec![1, 4, cfg.d_model], 1.0, &mut Rng::new(15));

        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let h = tape.input(x.clone());
        let mut rng = Rng::new(16);
        let y = mamba_layer_forward(
            &mut tape, h, &tids.layers[0], &cfg, None, &mut rng, false, false,
        )
        .unwrap();

        // By hand: LN(Block(h)) since dropout is 0 and there is one layer.
        let mut oracle = Tape::<f64>::new();
        let otids = params.register(&mut oracle);
        let oh = oracle.input(x);
        let ob = mamba_block_forward(&mut oracle, oh, &otids.layers[0].block, &cfg.block, None, false)
            .unwrap();
        let oy = oracle
            .layer_norm(
                ob,
                otids.layers[0].ln1_gamma,
                otids.layers[0].ln1_beta,
                LN_EPS,
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), oracle.value(oy).data());
    }

    #[test]
    fn zero_sublayers_in_stacked_config_reduce_to_double_norm() {
        let mut cfg = tiny_cfg(8);
        cfg.num_layers = 2;
        let mut params = ModelParams::<f64>::init(&cfg, &mut Rng::new(17)).unwrap();
        let d = cfg.d_model;
        for l in &mut params.layers {
            l.block.w_out = Tensor::zeros(vec![cfg.block.inner_dim(), d]);
            l.pffn_w2 = Tensor::zeros(vec![4 * d, d]);
            l.pffn_b2 = Tensor::zeros(vec![d]);
        }
        let x = Tensor::<f64>::uniform(vec![1, 4, d], 1.0, &mut Rng::new(18));

        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let h = tape.input(x.clone());
        let mut rng = Rng::new(19);
        let y = mamba_layer_forward(
            &mut tape, h, &tids.layers[0], &cfg, None, &mut rng, false, false,
        )
        .unwrap();

        let mut oracle = Tape::<f64>::new();
        let otids = params.register(&mut oracle);
        let oh = oracle.input(x);
        let l0 = &otids.layers[0];
        let ln1 = oracle.layer_norm(oh, l0.ln1_gamma, l0.ln1_beta, LN_EPS).unwrap();
        let ln2 = oracle.layer_norm(ln1, l0.ln2_gamma, l0.ln2_beta, LN_EPS).unwrap();
        assert_eq!(tape.value(y).data(), oracle.value(ln2).data());
    }

    #[test]
    fn residual_policy_differs_between_single_and_stacked() {
        let cfg1 = tiny_cfg(8);
        let mut cfg2 = tiny_cfg(8);
        cfg2.num_layers = 2; // policy switch; still evaluating layer 0 only
        let params = ModelParams::<f64>::init(&cfg1, &mut Rng::new(20)).unwrap();
        let x = Tensor::<f64>::uniform(vec![1, 4, cfg1.d_model], 1.0, &mut Rng::new(21));
        let run = |cfg: &ModelConfig| {
            let mut tape = Tape::new();
            let tids = params.register(&mut tape);
            let h = tape.input(x.clone());
            let mut rng = Rng::new(22);
            let y = mamba_layer_forward(
                &mut tape, h, &tids.layers[0], cfg, None, &mut rng, false, false,
            )
            .unwrap();
            tape.value(y).data().to_vec()
        };
        assert_ne!(run(&cfg1), run(&cfg2));
    }

    #[test]
    fn batch_membership_does_not_change_a_row() {
        let cfg = tiny_cfg(12);
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(23)).unwrap();
        let row = [0u32, 3, 7, 2, 9];
        let solo = forward_vec(&params, &cfg, &row, 1);
        let mut big = Vec::new();
        let mut rng = Rng::new(24);
        for _ in 0..31 {
            big.push(PAD);
            big.extend((1..cfg.max_len).map(|_| 1 + rng.next_below(11) as u32));
        }
        big.extend_from_slice(&row);
        let batched = forward_vec(&params, &cfg, &big, 32);
        let d = cfg.d_model;
        assert_eq!(&batched[31 * d..], &solo[..]);
    }

    #[test]
    fn position_indices_survive_pad_trimming() {
        // With positional embeddings on, trimming shared pad columns must
        // not shift which position vector a real item receives.
        let mut cfg = tiny_cfg(9);
        cfg.use_positional_embedding = true;
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(11)).unwrap();
        // Alone this row trims two leading pad columns; next to a full row
        // it trims none.
        let short = [0u32, 0, 3, 7, 2];
        let full = [5u32, 1, 4, 8, 6];
        let alone = forward_vec(&params, &cfg, &short, 1);
        let mut both = short.to_vec();
        both.extend_from_slice(&full);
        let paired = forward_vec(&params, &cfg, &both, 2);
        for (a, b) in alone.iter().zip(&paired[..cfg.d_model]) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn all_position_states_match_per_prefix_forward() {
        // Training reads the state at every position as "the prediction for
        // the prefix ending there"; each one must equal a standalone forward
        // on that left-padded prefix. Pad columns must come back zero.
        let cfg = tiny_cfg(9);
        assert!(!cfg.use_positional_embedding);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(31)).unwrap();
        let full = [3u32, 7, 2, 5, 1];
        let short = [0u32, 0, 4, 6, 8];
        let mut items = full.to_vec();
        items.extend_from_slice(&short);

        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let mut rng = Rng::new(32);
        let (states, eff_len) =
            model_forward_states(&mut tape, &items, 2, &tids, &cfg, &mut rng, false, false)
                .unwrap();
        assert_eq!(eff_len, cfg.max_len);
        let d = cfg.d_model;
        let data = tape.value(states).data().to_vec();

        let single = |prefix: &[u32]| -> Vec<f64> {
            let mut window = vec![PAD; cfg.max_len - prefix.len()];
            window.extend_from_slice(prefix);
            let mut tape = Tape::new();
            let tids = params.register(&mut tape);
            let mut rng = Rng::new(33);
            let h = model_forward(&mut tape, &window, 1, &tids, &cfg, &mut rng, false, false)
                .unwrap();
            tape.value(h).data().to_vec()
        };
        for (row, seq) in [(0usize, &full[..]), (1, &short[2..])] {
            let pads = cfg.max_len - seq.len();
            for col in 0..cfg.max_len {
                let got = &data[(row * cfg.max_len + col) * d..(row * cfg.max_len + col + 1) * d];
                if col < pads {
                    assert!(got.iter().all(|&v| v == 0.0), "pad state row {row} col {col}");
                    continue;
                }
                let want = single(&seq[..col - pads + 1]);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12, "row {row} col {col}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn longer_history_changes_the_output() {
        let cfg = tiny_cfg(12);
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(25)).unwrap();
        let short = forward_vec(&params, &cfg, &[0, 0, 0, 5, 7], 1);
        let long = forward_vec(&params, &cfg, &[0, 3, 4, 5, 7], 1);
        assert_ne!(short, long);
    }

    #[test]
    fn order_of_history_matters_without_positional_embeddings() {
        let cfg = tiny_cfg(12);
        assert!(!cfg.use_positional_embedding);
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(26)).unwrap();
        let fwd = forward_vec(&params, &cfg, &[0, 0, 2, 5, 9], 1);
        let rev = forward_vec(&params, &cfg, &[0, 0, 9, 5, 2], 1);
        assert_ne!(fwd, rev);
    }

    #[test]
    fn extra_left_padding_leaves_output_unchanged() {
        // Ragged batch: row 1 keeps internal padding after the shared trim.
        let cfg5 = tiny_cfg(12);
        let mut cfg8 = tiny_cfg(12);
        cfg8.max_len = 8;
        let params = ModelParams::<f32>::init(&cfg5, &mut Rng::new(27)).unwrap();
        let narrow = forward_vec(&params, &cfg5, &[1, 2, 3, 4, 5, 0, 0, 6, 11, 3], 2);
        let wide = forward_vec(
            &params,
            &cfg8,
            &[0, 0, 0, 1, 2, 3, 4, 5, 0, 0, 0, 0, 0, 6, 11, 3],
            2,
        );
        for (a, b) in narrow.iter().zip(&wide) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn scores_are_tied_to_the_embedding_table() {
        // A table with a dominant self-inner-product row must rank itself
        // first when the hidden state equals that row.
        let cfg = tiny_cfg(6);
        let params = {
            let mut p = ModelParams::<f64>::init(&cfg, &mut Rng::new(28)).unwrap();
            let d = cfg.d_model;
            p.item_embedding = Tensor::from_fn(vec![6, d], |i| {
                let (r, j) = (i / d, i % d);
                if r == 0 {
                    0.0
                } else if j == (r - 1) % d {
                    2.0 + r as f64 * 0.1
                } else {
                    0.05
                }
            });
            p
        };
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let d = cfg.d_model;
        let v = 3usize;
        let h = tape.input(Tensor::from_vec(
            vec![1, d],
            params.item_embedding.data()[v * d..(v + 1) * d].to_vec(),
        )
        .unwrap());
        let scores = predict_scores(&mut tape, h, &tids).unwrap();
        let mut ranked = tape.value(scores).clone();
        mask_pad_column(&mut ranked);
        let row = ranked.data();
        let argmax = (0..6).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(argmax, v);
        assert_eq!(row[0], f64::NEG_INFINITY);
    }

    #[test]
    fn ranking_ignores_constant_logit_shifts() {
        let cfg = tiny_cfg(10);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(29)).unwrap();
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let h = tape.input(Tensor::uniform(vec![1, cfg.d_model], 1.0, &mut Rng::new(30)));
        let scores = predict_scores(&mut tape, h, &tids).unwrap();
        let base = tape.value(scores).data().to_vec();
        let shifted: Vec<f64> = base.iter().map(|&v| v + 17.25).collect();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (1..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
            idx
        };
        assert_eq!(order(&base), order(&shifted));
    }

    #[test]
    fn softmax_over_scores_normalizes() {
        let cfg = tiny_cfg(10);
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(31)).unwrap();
        let mut tape = Tape::new();
        let tids = params.register(&mut tape);
        let h = tape.input(Tensor::uniform(vec![3, cfg.d_model], 1.0, &mut Rng::new(32)));
        let scores = predict_scores(&mut tape, h, &tids).unwrap();
        let probs = tape.softmax(scores).unwrap();
        for r in 0..3 {
            let s: f32 = tape.value(probs).data()[r * 10..(r + 1) * 10].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_matches_module_composition() {
        // The one-tape model equals the same stages run on separate tapes.
        let cfg = tiny_cfg(9);
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(33)).unwrap();
        let items = [0u32, 4, 1, 8, 2];
        let got = forward_vec(&params, &cfg, &items, 1);

        let keep: Vec<bool> = items.iter().map(|&i| i != 0).collect();
        let trimmed = &items[1..]; // one shared pad column trims away
        let keep_t = &keep[1..];
        let mut cfg_t = cfg.clone();
        cfg_t.max_len = 4;

        let mut t1 = Tape::<f32>::new();
        let tids1 = params.register(&mut t1);
        let mut rng = Rng::new(99);
        let e = embed_sequence(&mut t1, trimmed, 1, &tids1, &cfg_t, 1, &mut rng, false).unwrap();
        let embedded = t1.value(e).clone();

        let mut t2 = Tape::<f32>::new();
        let tids2 = params.register(&mut t2);
        let eh = t2.input(embedded);
        let b = mamba_block_forward(&mut t2, eh, &tids2.layers[0].block, &cfg.block, Some(keep_t), false)
            .unwrap();
        let n1 = t2
            .layer_norm(b, tids2.layers[0].ln1_gamma, tids2.layers[0].ln1_beta, LN_EPS)
            .unwrap();
        let f = pffn_forward(&mut t2, n1, &tids2.layers[0]).unwrap();
        let n2 = t2
            .layer_norm(f, tids2.layers[0].ln2_gamma, tids2.layers[0].ln2_beta, LN_EPS)
            .unwrap();
        let last = t2.last_position(n2).unwrap();
        assert_eq!(got, t2.value(last).data());
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let cfg = tiny_cfg(11); // |V| = 10 real items
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(34)).unwrap();
        let items = [0u32, 3, 9, 1, 4, 2, 2, 7, 8, 5]; // two rows of length 5
        let targets = [6u32, 10];
        let named = params.tensors();
        let leaves: Vec<Tensor<f64>> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let layout = ParamLayout::of(&params);
        let report = gradcheck::check(
            &leaves,
            |tape, tids| {
                let mt = layout.tids(tids);
                let mut rng = Rng::new(0);
                let h = model_forward(tape, &items, 2, &mt, &cfg, &mut rng, false, false)?;
                let scores = predict_scores(tape, h, &mt)?;
                tape.cross_entropy(scores, &targets)
            },
            1e-5,
            4,
            0xE2E,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
    }

    /// Rebuilds ModelTids from a flat leaf list in `tensors()` order.
    struct ParamLayout {
        has_pe: bool,
        layers: usize,
    }

    impl ParamLayout {
        fn of<S: Scalar>(p: &ModelParams<S>) -> Self {
            Self {
                has_pe: p.pos_embedding.is_some(),
                layers: p.layers.len(),
            }
        }

        fn tids(&self, t: &[Tid]) -> ModelTids {
            let mut it = t.iter().copied();
            let mut next = || it.next().expect("leaf list too short");
            let item_embedding = next();
            let embed_ln_gamma = next();
            let embed_ln_beta = next();
            let pos_embedding = self.has_pe.then(&mut next);
            let layers = (0..self.layers)
                .map(|_| LayerTids {
                    block: BlockTids {
                        w_in: next(),
                        conv_w: next(),
                        conv_bias: next(),
                        w_b: next(),
                        w_c: next(),
                        w_dt: next(),
                        dt_bias: next(),
                        a_log: next(),
                        w_out: next(),
                    },
                    pffn_w1: next(),
                    pffn_b1: next(),
                    pffn_w2: next(),
                    pffn_b2: next(),
                    ln1_gamma: next(),
                    ln1_beta: next(),
                    ln2_gamma: next(),
                    ln2_beta: next(),
                })
                .collect();
            ModelTids {
                item_embedding,
                pos_embedding,
                embed_ln_gamma,
                embed_ln_beta,
                layers,
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_pad_row_zero() {
        let cfg = tiny_cfg(9);
        let a = ModelParams::<f32>::init(&cfg, &mut Rng::new(40)).unwrap();
        let b = ModelParams::<f32>::init(&cfg, &mut Rng::new(40)).unwrap();
        for ((na, ta), (nb, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert!(a.item_embedding.data()[..cfg.d_model].iter().all(|&v| v == 0.0));
    }
}
