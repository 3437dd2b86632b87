//! Run configuration: a flat key=value file with optional section headers,
//! command-line overrides layered on top, and a content hash that every
//! output artifact echoes so a report can be traced to its exact settings.
//!
//! Defaults depend on the data format: MovieLens logs get the long-context
//! settings (max_len 200, dropout 0.2), Amazon review logs the short ones
//! (max_len 50, dropout 0.4), generic TSV the short context with the lighter
//! dropout. An explicit key in the file or on the command line always wins.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::block::BlockConfig;
use crate::data::Format;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Dataset name that selects the built-in Markov fixture instead of a file.
pub const FIXTURE: &str = "fixture";

const SECTIONS: [&str; 4] = ["data", "model", "train", "eval"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Path of the raw interaction log, or [`FIXTURE`].
    pub dataset: String,
    pub format: Format,
    pub k_core: usize,
    /// Prepared datasets are cached here, keyed by content hash.
    pub cache_dir: PathBuf,
    /// Checkpoints, histories, and reports land here.
    pub out_dir: PathBuf,

    pub d_model: usize,
    pub state_dim: usize,
    pub conv_kernel: usize,
    pub expand: usize,
    pub num_layers: usize,
    pub max_len: usize,
    /// One rate for both the embedding-layer and hidden dropout.
    pub dropout: f64,
    pub use_pe: bool,
    pub use_pffn: bool,
    pub use_layernorm: bool,

    pub lr: f64,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mask_history: bool,
    pub parallel: bool,

    pub k: u32,
    /// Which held-out split `eval` scores: "valid" or "test".
    pub split: String,
}

impl RunConfig {
    /// Baseline settings for a data format, before any file or flag.
    pub fn defaults_for(format: Format) -> Self {
        let (max_len, dropout) = match format {
            Format::Ml1m => (200, 0.2),
            Format::AmazonCsv => (50, 0.4),
            Format::Tsv => (50, 0.2),
        };
        RunConfig {
            dataset: FIXTURE.to_string(),
            format,
            k_core: 5,
            cache_dir: PathBuf::from("cache"),
            out_dir: PathBuf::from("runs"),
            d_model: 64,
            state_dim: 32,
            conv_kernel: 4,
            expand: 2,
            num_layers: 1,
            max_len,
            dropout,
            use_pe: false,
            use_pffn: true,
            use_layernorm: true,
            lr: 1e-3,
            train_batch: 2048,
            eval_batch: 4096,
            max_epochs: 300,
            patience: 10,
            seed: 42,
            mask_history: true,
            parallel: true,
            k: 10,
            split: "test".to_string(),
        }
    }

    /// Merges a config file (optional) and override pairs, in that order.
    /// The format key is resolved first so format-conditional defaults are
    /// in place before the remaining keys apply on top of them.
    pub fn load(file: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut pairs = match file {
            Some(text) => parse_pairs(text)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        let format = match pairs.iter().rev().find(|(k, _)| k == "format") {
            Some((_, v)) => v.parse::<Format>()?,
            None => Format::Tsv,
        };
        let mut cfg = RunConfig::defaults_for(format);
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one key. Unknown keys are rejected, never ignored.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("key {key}: cannot parse {value:?}"))
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!(
                    "key {key}: expected true/false, got {value:?}"
                ))),
            }
        }
        match key {
            "dataset" => self.dataset = value.to_string(),
            "format" => self.format = value.parse()?,
            "k_core" => self.k_core = num(key, value)?,
            "cache_dir" => self.cache_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "d_model" => self.d_model = num(key, value)?,
            "state_dim" => self.state_dim = num(key, value)?,
            "conv_kernel" => self.conv_kernel = num(key, value)?,
            "expand" => self.expand = num(key, value)?,
            "num_layers" => self.num_layers = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "use_pe" => self.use_pe = flag(key, value)?,
            "use_pffn" => self.use_pffn = flag(key, value)?,
            "use_layernorm" => self.use_layernorm = flag(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "train_batch" => self.train_batch = num(key, value)?,
            "eval_batch" => self.eval_batch = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mask_history" => self.mask_history = flag(key, value)?,
            "parallel" => self.parallel = flag(key, value)?,
            "k" => self.k = num(key, value)?,
            "split" => self.split = value.to_string(),
            other => {
                return Err(Error::Config(format!("unknown configuration key {other:?}")))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.split != "valid" && self.split != "test" {
            return Err(Error::Config(format!(
                "split {:?} is neither \"valid\" nor \"test\"",
                self.split
            )));
        }
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(())
    }

    /// The model view of this config; `vocab_size` comes from the prepared
    /// dataset, not the file.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            num_layers: self.num_layers,
            use_positional_embedding: self.use_pe,
            use_pffn: self.use_pffn,
            use_layernorm: self.use_layernorm,
            dropout_embed: self.dropout,
            dropout_hidden: self.dropout,
            max_len: self.max_len,
            block: BlockConfig {
                d_model: self.d_model,
                state_dim: self.state_dim,
                conv_kernel: self.conv_kernel,
                expand: self.expand,
            },
        }
    }

    pub fn train_config(&self, checkpoint_path: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            train_batch: self.train_batch,
            eval_batch: self.eval_batch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            lr: self.lr,
            mask_history: self.mask_history,
            parallel_scan: self.parallel,
            checkpoint_path,
        }
    }

    /// Canonical echo of every resolved setting, stable across runs.
    pub fn resolved(&self) -> String {
        format!(
            "[data]\n\
             dataset = {}\n\
             format = {}\n\
             k_core = {}\n\
             cache_dir = {}\n\
             out_dir = {}\n\
             \n[model]\n\
             d_model = {}\n\
             state_dim = {}\n\
             conv_kernel = {}\n\
             expand = {}\n\
             num_layers = {}\n\
             max_len = {}\n\
             dropout = {}\n\
             use_pe = {}\n\
             use_pffn = {}\n\
             use_layernorm = {}\n\
             \n[train]\n\
             lr = {}\n\
             train_batch = {}\n\
             eval_batch = {}\n\
             max_epochs = {}\n\
             patience = {}\n\
             seed = {}\n\
             mask_history = {}\n\
             parallel = {}\n\
             \n[eval]\n\
             k = {}\n\
             split = {}\n",
            self.dataset,
            self.format.name(),
            self.k_core,
            self.cache_dir.display(),
            self.out_dir.display(),
            self.d_model,
            self.state_dim,
            self.conv_kernel,
            self.expand,
            self.num_layers,
            self.max_len,
            self.dropout,
            self.use_pe,
            self.use_pffn,
            self.use_layernorm,
            self.lr,
            self.train_batch,
            self.eval_batch,
            self.max_epochs,
            self.patience,
            self.seed,
            self.mask_history,
            self.parallel,
            self.k,
            self.split,
        )
    }

    /// 16-hex-digit digest naming the experiment; the tag every artifact
    /// carries. Storage locations are excluded: re-running into a different
    /// directory is still the same experiment.
    pub fn hash(&self) -> String {
        let hashed: String = self
            .resolved()
            .lines()
            .filter(|l| !l.starts_with("cache_dir") && !l.starts_with("out_dir"))
            .collect::<Vec<_>>()
            .join("\n");
        let digest = Sha256::digest(hashed.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses `key = value` lines. `#` starts a comment, blank lines are
/// skipped, and `[section]` headers are organizational: they are checked
/// against the known set but do not scope the keys, which stay unique.
fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                line: ln + 1,
                msg: format!("unterminated section header {line:?}"),
            })?;
            if !SECTIONS.contains(&name) {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("unknown section [{name}]"),
                });
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: ln + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}
