//! Full-catalog ranking evaluation: HR@K, NDCG@K, MRR@K.
//!
//! Every candidate item is ranked for every evaluated user; no negative
//! sampling. Ties break deterministically by item index so two runs of the
//! same model produce the same report byte for byte.

use serde::{Deserialize, Serialize};

use crate::data::{pad_and_batch, InteractionDataset, SplitInstance};
use crate::error::{Error, Result};
use crate::model::{score_batch, ModelConfig, ModelParams, PAD};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ranking metrics at cutoff `k`, averaged over users.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub k: u32,
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub num_users: usize,
    /// 1-based rank of each target, in evaluation order.
    pub ranks: Vec<u32>,
}

/// The on-disk form of a report, one JSON object per evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub k: u32,
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub num_users: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(split: &str, m: &MetricsReport, seed: u64, config_hash: &str) -> Self {
        EvalReport {
            split: split.to_string(),
            k: m.k,
            hr: m.hr,
            ndcg: m.ndcg,
            mrr: m.mrr,
            num_users: m.num_users,
            seed,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

/// 1-based rank of `target` among the unmasked catalog. Higher score wins;
/// equal scores rank by item index. The pad index is always masked.
///
/// `scores` covers the whole catalog including pad at index 0; `mask` lists
/// item indices excluded from ranking (the target must not be among them).
pub fn rank_target(scores: &[f32], target: u32, mask: &[u32]) -> Result<u32> {
    let v = scores.len();
    let t = target as usize;
    if t >= v {
        return Err(Error::Index(format!(
            "target {target} outside catalog of size {v}"
        )));
    }
    if target == PAD {
        return Err(Error::contract("cannot rank the pad index"));
    }
    let mut masked = vec![false; v];
    masked[PAD as usize] = true;
    for &m in mask {
        let mi = m as usize;
        if mi >= v {
            return Err(Error::Index(format!(
                "masked item {m} outside catalog of size {v}"
            )));
        }
        masked[mi] = true;
    }
    if masked[t] {
        return Err(Error::contract(format!("target {target} is masked")));
    }
    let st = scores[t];
    let mut rank = 1u32;
    for (i, &s) in scores.iter().enumerate() {
        if masked[i] || i == t {
            continue;
        }
        if s > st || (s == st && (i as u32) < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Means of the per-user metrics: hit = [r <= k], ndcg = [r <= k]/log2(r+1),
/// mrr = [r <= k]/r. Ranks are 1-based.
pub fn metrics_at_k(ranks: &[u32], k: u32) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::contract("metrics over an empty rank list"));
    }
    if k == 0 {
        return Err(Error::Config("metric cutoff k must be >= 1".into()));
    }
    let mut hr = 0.0f64;
    let mut ndcg = 0.0f64;
    let mut mrr = 0.0f64;
    for &r in ranks {
        if r == 0 {
            return Err(Error::contract("ranks are 1-based; got 0"));
        }
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / (r as f64 + 1.0).log2();
            mrr += 1.0 / r as f64;
        }
    }
    let n = ranks.len() as f64;
    Ok(MetricsReport {
        k,
        hr: hr / n,
        ndcg: ndcg / n,
        mrr: mrr / n,
        num_users: ranks.len(),
        ranks: ranks.to_vec(),
    })
}

/// Anything that can score the full catalog for a batch of contexts.
///
/// `items` is row-major [batch, width] with left padding; the returned
/// tensor is [batch, vocab] with one score per catalog entry (pad included;
/// rankers mask it).
pub trait Scorer {
    fn score(&self, items: &[u32], batch: usize) -> Result<Tensor<f32>>;
}

/// Default padded-position budget per scoring pass, sized so a throwaway
/// forward tape stays around a couple hundred MB for the stock model.
pub const SCORE_CHUNK_POSITIONS: usize = 16_384;

/// Scores by a forward pass of the trained model.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams<f32>,
    pub cfg: &'a ModelConfig,
    pub parallel: bool,
    /// Rows per forward pass are capped at `chunk_positions / max_len` so
    /// activation memory stays flat however large the caller's batch is;
    /// scores are batch-size invariant, so chunking is output-preserving.
    pub chunk_positions: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams<f32>, cfg: &'a ModelConfig, parallel: bool) -> Self {
        ModelScorer {
            params,
            cfg,
            parallel,
            chunk_positions: SCORE_CHUNK_POSITIONS,
        }
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, items: &[u32], batch: usize) -> Result<Tensor<f32>> {
        let width = self.cfg.max_len;
        let rows_cap = (self.chunk_positions / width.max(1)).max(1);
        if batch <= rows_cap {
            return score_batch(self.params, self.cfg, items, batch, self.parallel);
        }
        let v = self.cfg.vocab_size;
        let mut out = Vec::with_capacity(batch * v);
        for chunk in items.chunks(rows_cap * width) {
            let rows = chunk.len() / width;
            let scores = score_batch(self.params, self.cfg, chunk, rows, self.parallel)?;
            out.extend_from_slice(scores.data());
        }
        Tensor::from_vec(vec![batch, v], out)
    }
}

/// Non-personalized baseline: every user sees the same global popularity
/// ranking.
pub struct PopularityScorer {
    scores: Vec<f32>,
}

impl PopularityScorer {
    /// Counts item occurrences outside the held-out tail (the last two
    /// positions of each sequence feed validation and test and are skipped).
    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        let mut counts = vec![0.0f32; ds.vocab_size()];
        for seq in &ds.sequences {
            let train_end = seq.len().saturating_sub(2);
            for &it in &seq[..train_end] {
                counts[it as usize] += 1.0;
            }
        }
        PopularityScorer { scores: counts }
    }

    pub fn from_counts(counts: Vec<f32>) -> Self {
        PopularityScorer { scores: counts }
    }
}

impl Scorer for PopularityScorer {
    fn score(&self, _items: &[u32], batch: usize) -> Result<Tensor<f32>> {
        let v = self.scores.len();
        let mut data = Vec::with_capacity(batch * v);
        for _ in 0..batch {
            data.extend_from_slice(&self.scores);
        }
        Tensor::from_vec(vec![batch, v], data)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub k: u32,
    pub eval_batch: usize,
    /// Window width fed to the scorer (the model's max_len).
    pub max_len: usize,
    /// Exclude the user's already-seen items from the candidate set.
    pub mask_history: bool,
}

impl EvalOptions {
    pub fn new(max_len: usize) -> Self {
        EvalOptions {
            k: 10,
            eval_batch: 4096,
            max_len,
            mask_history: true,
        }
    }
}

/// Ranks the target of every instance against the full catalog and averages
/// the metrics. Instances are processed in the given order with a fresh
/// scoring pass per batch.
///
/// With `mask_history` the candidate set excludes the user's whole context
/// `seq[..end]`, not just the window the model sees; a repeat of the target
/// inside the context stays rankable.
pub fn evaluate(
    scorer: &dyn Scorer,
    ds: &InteractionDataset,
    instances: &[SplitInstance],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(Error::contract("evaluation over an empty split"));
    }
    let mut rng = Rng::new(0); // order is kept, stream is unused
    let stream = pad_and_batch(ds, instances, opts.max_len, opts.eval_batch, &mut rng, false)?;
    let mut ranks = Vec::with_capacity(instances.len());
    let mut next = 0usize;
    for batch in stream {
        let scores = scorer.score(&batch.items, batch.batch)?;
        let v = scores.last_dim();
        if scores.rows() != batch.batch {
            return Err(Error::dim(format!(
                "scorer returned {} rows for a batch of {}",
                scores.rows(),
                batch.batch
            )));
        }
        for bi in 0..batch.batch {
            let inst = &instances[next];
            next += 1;
            let target = batch.targets[bi];
            let row = &scores.data()[bi * v..(bi + 1) * v];
            let mask: Vec<u32> = if opts.mask_history {
                let seq = &ds.sequences[inst.user as usize];
                seq[..inst.end as usize]
                    .iter()
                    .copied()
                    .filter(|&it| it != target)
                    .collect()
            } else {
                Vec::new()
            };
            ranks.push(rank_target(row, target, &mask)?);
        }
    }
    metrics_at_k(&ranks, opts.k)
}
