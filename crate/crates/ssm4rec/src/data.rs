//! Interaction-log ingestion and preparation: parsing three log formats,
//! iterative k-core filtering, chronological per-user sequences, the
//! leave-one-out split, and left-padded batch streaming.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

/// Largest integer the f32-based cache container can hold exactly.
const F32_EXACT: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `user::item::rating::timestamp` lines.
    Ml1m,
    /// `user,item,rating,timestamp` lines.
    AmazonCsv,
    /// `user<TAB>item<TAB>timestamp` lines.
    Tsv,
}

impl Format {
    pub fn name(&self) -> &'static str {
        match self {
            Format::Ml1m => "ml-1m",
            Format::AmazonCsv => "amazon-csv",
            Format::Tsv => "tsv",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml-1m" => Ok(Format::Ml1m),
            "amazon-csv" => Ok(Format::AmazonCsv),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::Config(format!(
                "unknown format {other:?}; expected ml-1m, amazon-csv, or tsv"
            ))),
        }
    }
}

/// One logged interaction. Ratings are dropped at parse time: the task is
/// implicit-feedback next-item prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

pub fn parse_interactions(path: &Path, format: Format) -> Result<Vec<InteractionRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_interactions_str(&text, format)
}

pub fn parse_interactions_str(text: &str, format: Format) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let bad_fields = |got: usize, want: usize, sep: &str| Error::Parse {
            line: lineno,
            msg: format!("expected {want} {sep}-separated fields, got {got}"),
        };
        let (user, item, ts) = match format {
            Format::Ml1m => {
                let f: Vec<&str> = line.split("::").collect();
                if f.len() != 4 {
                    return Err(bad_fields(f.len(), 4, "::"));
                }
                (f[0], f[1], f[3])
            }
            Format::AmazonCsv => {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(bad_fields(f.len(), 4, "comma"));
                }
                (f[0], f[1], f[3])
            }
            Format::Tsv => {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(bad_fields(f.len(), 3, "tab"));
                }
                (f[0], f[1], f[2])
            }
        };
        let timestamp = ts.trim().parse::<i64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("timestamp {ts:?} is not an integer"),
        })?;
        out.push(InteractionRecord {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

/// Alternating removal of users and items with fewer than `k` retained
/// interactions, repeated to fixpoint. Input order is preserved.
pub fn k_core_filter(records: Vec<InteractionRecord>, k: usize) -> Result<Vec<InteractionRecord>> {
    if k < 1 {
        return Err(Error::Config("k-core threshold must be >= 1".into()));
    }
    let mut users = HashMap::new();
    let mut items = HashMap::new();
    let mut u_of = Vec::with_capacity(records.len());
    let mut i_of = Vec::with_capacity(records.len());
    for r in &records {
        let nu = users.len();
        u_of.push(*users.entry(r.user.clone()).or_insert(nu));
        let ni = items.len();
        i_of.push(*items.entry(r.item.clone()).or_insert(ni));
    }
    let (nu, ni) = (users.len(), items.len());
    let mut alive = vec![true; records.len()];
    loop {
        let mut changed = false;
        let mut uc = vec![0usize; nu];
        for (idx, &a) in alive.iter().enumerate() {
            if a {
                uc[u_of[idx]] += 1;
            }
        }
        for (idx, a) in alive.iter_mut().enumerate() {
            if *a && uc[u_of[idx]] < k {
                *a = false;
                changed = true;
            }
        }
        let mut ic = vec![0usize; ni];
        for (idx, &a) in alive.iter().enumerate() {
            if a {
                ic[i_of[idx]] += 1;
            }
        }
        for (idx, a) in alive.iter_mut().enumerate() {
            if *a && ic[i_of[idx]] < k {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut keep = alive.into_iter();
    let out: Vec<InteractionRecord> = records
        .into_iter()
        .filter(|_| keep.next().unwrap())
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(out)
}

/// Filtered interactions as dense, chronologically ordered index sequences.
/// Item indices are 1-based; 0 is the pad token.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    /// Dense user index -> original id, in first-appearance order.
    pub user_ids: Vec<String>,
    /// item_ids[j] is the original id of item index j+1.
    pub item_ids: Vec<String>,
    /// Per-user item indices sorted by (timestamp, file order).
    pub sequences: Vec<Vec<u32>>,
}

impl InteractionDataset {
    pub fn from_records(records: &[InteractionRecord]) -> Result<Self> {
        let mut user_of = HashMap::new();
        let mut item_of = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut grouped: Vec<Vec<(i64, u32)>> = Vec::new();
        for r in records {
            let u = *user_of.entry(r.user.clone()).or_insert_with(|| {
                user_ids.push(r.user.clone());
                grouped.push(Vec::new());
                user_ids.len() - 1
            });
            let it = *item_of.entry(r.item.clone()).or_insert_with(|| {
                item_ids.push(r.item.clone());
                item_ids.len() as u32 // 1-based
            });
            grouped[u].push((r.timestamp, it));
        }
        let sequences = grouped
            .into_iter()
            .map(|mut g| {
                // Stable sort: equal timestamps keep file order.
                g.sort_by_key(|&(t, _)| t);
                g.into_iter().map(|(_, it)| it).collect()
            })
            .collect();
        Ok(Self {
            user_ids,
            item_ids,
            sequences,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Embedding rows needed: real items plus the pad row.
    pub fn vocab_size(&self) -> usize {
        self.item_ids.len() + 1
    }

    pub fn interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions = self.interactions();
        DatasetStats {
            users: self.num_users(),
            items: self.num_items(),
            interactions,
            avg_len: interactions as f64 / self.num_users().max(1) as f64,
        }
    }

    /// Keeps a uniform random subsample of users (used for desk-scale runs).
    pub fn subsample_users(&self, count: usize, rng: &mut Rng) -> Self {
        if count >= self.num_users() {
            return self.clone();
        }
        let mut order: Vec<u32> = (0..self.num_users() as u32).collect();
        rng.shuffle(&mut order);
        let mut picked: Vec<u32> = order[..count].to_vec();
        picked.sort_unstable();
        // Items are re-densified so the embedding table stays tight.
        let mut item_map = vec![0u32; self.item_ids.len() + 1];
        let mut item_ids = Vec::new();
        let mut user_ids = Vec::new();
        let mut sequences = Vec::new();
        for &u in &picked {
            user_ids.push(self.user_ids[u as usize].clone());
            let seq = self.sequences[u as usize]
                .iter()
                .map(|&it| {
                    if item_map[it as usize] == 0 {
                        item_ids.push(self.item_ids[it as usize - 1].clone());
                        item_map[it as usize] = item_ids.len() as u32;
                    }
                    item_map[it as usize]
                })
                .collect();
            sequences.push(seq);
        }
        Self {
            user_ids,
            item_ids,
            sequences,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
}

/// One evaluation or training instance: the target sits at `end` in the
/// user's sequence and the context is everything before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitInstance {
    pub user: u32,
    pub end: u32,
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<SplitInstance>,
    pub valid: Vec<SplitInstance>,
    pub test: Vec<SplitInstance>,
}

/// Leave-one-out protocol: last item is the test target, second-to-last the
/// validation target, and every earlier position (from the second) becomes a
/// training instance. Users with fewer than 3 interactions cannot hold out
/// two positions and are skipped.
pub fn build_splits(ds: &InteractionDataset) -> Splits {
    let mut s = Splits::default();
    for (u, seq) in ds.sequences.iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            continue;
        }
        s.test.push(SplitInstance {
            user: u as u32,
            end: (n - 1) as u32,
        });
        s.valid.push(SplitInstance {
            user: u as u32,
            end: (n - 2) as u32,
        });
        for t in 1..=(n - 3) {
            s.train.push(SplitInstance {
                user: u as u32,
                end: t as u32,
            });
        }
    }
    s
}

/// Fixed-width batch of left-padded contexts. `items` is row-major
/// [batch, width]; the last column of every row is a real item.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub items: Vec<u32>,
    pub targets: Vec<u32>,
    pub lengths: Vec<usize>,
}

pub struct BatchStream<'a> {
    ds: &'a InteractionDataset,
    instances: &'a [SplitInstance],
    order: Vec<u32>,
    width: usize,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let take = (self.order.len() - self.pos).min(self.batch_size);
        let mut items = vec![0u32; take * self.width];
        let mut targets = Vec::with_capacity(take);
        let mut lengths = Vec::with_capacity(take);
        for (bi, &oi) in self.order[self.pos..self.pos + take].iter().enumerate() {
            let inst = &self.instances[oi as usize];
            let seq = &self.ds.sequences[inst.user as usize];
            let end = inst.end as usize;
            // Keep the most recent `width` items of the context.
            let ctx = &seq[end.saturating_sub(self.width)..end];
            let off = self.width - ctx.len();
            items[bi * self.width + off..(bi + 1) * self.width].copy_from_slice(ctx);
            targets.push(seq[end]);
            lengths.push(ctx.len());
        }
        self.pos += take;
        Some(Batch {
            batch: take,
            items,
            targets,
            lengths,
        })
    }
}

/// Streams `instances` in batches; `shuffle` draws a fresh permutation from
/// `rng`, otherwise the given order is kept. Contexts longer than `width`
/// are truncated from the old end, shorter ones left-padded with 0.
pub fn pad_and_batch<'a>(
    ds: &'a InteractionDataset,
    instances: &'a [SplitInstance],
    width: usize,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<BatchStream<'a>> {
    if width < 1 || batch_size < 1 {
        return Err(Error::Config(format!(
            "need width >= 1 and batch_size >= 1, got {width} and {batch_size}"
        )));
    }
    let mut order: Vec<u32> = (0..instances.len() as u32).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(BatchStream {
        ds,
        instances,
        order,
        width,
        batch_size,
        pos: 0,
    })
}

// ---- prepared-dataset cache ---------------------------------------------

/// Content hash naming a cache entry: raw input bytes, format, and filter
/// strength all participate.
pub fn cache_key(input: &[u8], format: Format, k: usize) -> String {
    let mut h = Sha256::new();
    h.update(input);
    h.update([0]);
    h.update(format.name().as_bytes());
    h.update([0]);
    h.update((k as u64).to_le_bytes());
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

fn str_tensor(parts: &[String]) -> Tensor<f32> {
    let joined = parts.join("\n");
    Tensor::from_vec(
        vec![joined.len()],
        joined.bytes().map(|b| b as f32).collect(),
    )
    .expect("shape matches data")
}

fn tensor_str(t: &Tensor<f32>) -> Result<Vec<String>> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    let joined = String::from_utf8(bytes)
        .map_err(|_| Error::Format("cache vocab block is not UTF-8".into()))?;
    if joined.is_empty() {
        return Ok(Vec::new());
    }
    Ok(joined.split('\n').map(str::to_string).collect())
}

/// Writes the dataset into the tensor container. Indices and offsets are
/// stored as f32, exact below 2^24; larger corpora are rejected loudly
/// rather than silently corrupted.
pub fn save_cache(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let total = ds.interactions();
    if total >= F32_EXACT || ds.item_ids.len() >= F32_EXACT {
        return Err(Error::Format(format!(
            "dataset too large for the cache encoding ({total} interactions)"
        )));
    }
    let mut flat = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(ds.sequences.len() + 1);
    offsets.push(0f32);
    for seq in &ds.sequences {
        flat.extend(seq.iter().map(|&v| v as f32));
        offsets.push(flat.len() as f32);
    }
    let flat_t = Tensor::from_vec(vec![flat.len()], flat)?;
    let off_t = Tensor::from_vec(vec![offsets.len()], offsets)?;
    let users_t = str_tensor(&ds.user_ids);
    let items_t = str_tensor(&ds.item_ids);
    checkpoint::write_tensors(
        path,
        &[
            ("sequences".into(), &flat_t),
            ("offsets".into(), &off_t),
            ("user_vocab".into(), &users_t),
            ("item_vocab".into(), &items_t),
        ],
    )
}

pub fn load_cache(path: &Path) -> Result<InteractionDataset> {
    let tensors = checkpoint::read_tensors(path)?;
    let mut by_name: HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let mut take = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Format(format!("cache is missing tensor {name}")))
    };
    let flat = take("sequences")?;
    let offsets = take("offsets")?;
    let user_ids = tensor_str(&take("user_vocab")?)?;
    let item_ids = tensor_str(&take("item_vocab")?)?;
    if offsets.numel() != user_ids.len() + 1 {
        return Err(Error::Format(format!(
            "cache offsets ({}) disagree with user vocabulary ({})",
            offsets.numel(),
            user_ids.len()
        )));
    }
    let off = offsets.data();
    let mut sequences = Vec::with_capacity(user_ids.len());
    for w in off.windows(2) {
        let (a, b) = (w[0] as usize, w[1] as usize);
        if a > b || b > flat.numel() {
            return Err(Error::Format("cache offsets out of order".into()));
        }
        sequences.push(flat.data()[a..b].iter().map(|&v| v as u32).collect());
    }
    Ok(InteractionDataset {
        user_ids,
        item_ids,
        sequences,
    })
}
