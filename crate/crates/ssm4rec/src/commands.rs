//! The five commands behind the binary: `prepare`, `train`, `eval`,
//! `bench`, and `ablate`. Each one prints a human-readable summary and
//! writes machine-readable artifacts (stamped with the config hash) under
//! the configured output directory so runs can be diffed and reproduced.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::{run_bench, BenchReport, DEFAULT_LENGTHS};
use crate::checkpoint::{load_model, save_model};
use crate::config::{RunConfig, FIXTURE};
use crate::data::{
    build_splits, cache_key, k_core_filter, load_cache, parse_interactions_str, save_cache,
    DatasetStats, InteractionDataset, Splits,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, ModelScorer};
use crate::fixture::default_markov_dataset;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::trainer::{history_to_json, train, TrainResult};

/// Where the prepared form of `cfg.dataset` lives. The name is a content
/// hash, so editing the raw log or changing the filter re-prepares instead
/// of serving stale data.
fn cache_path(cfg: &RunConfig, raw: &[u8]) -> PathBuf {
    let key = cache_key(raw, cfg.format, cfg.k_core);
    cfg.cache_dir.join(format!("{key}.ds"))
}

fn read_raw(cfg: &RunConfig) -> Result<Vec<u8>> {
    fs::read(&cfg.dataset).map_err(|e| {
        Error::Config(format!("cannot read dataset {:?}: {e}", cfg.dataset))
    })
}

/// The dataset a command should operate on: the built-in fixture, or the
/// prepared cache of `cfg.dataset` (pointing at `prepare` when absent).
pub fn load_prepared(cfg: &RunConfig) -> Result<InteractionDataset> {
    if cfg.dataset == FIXTURE {
        return Ok(default_markov_dataset());
    }
    let raw = read_raw(cfg)?;
    let path = cache_path(cfg, &raw);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no prepared cache for {:?}; run: ssm4rec prepare --dataset {} --format {}",
            cfg.dataset,
            cfg.dataset,
            cfg.format.name()
        )));
    }
    load_cache(&path)
}

fn print_stats(stats: &DatasetStats, splits: &Splits) {
    println!(
        "users {}  items {}  interactions {}  avg length {:.1}",
        stats.users, stats.items, stats.interactions, stats.avg_len
    );
    println!(
        "splits: {} train / {} valid / {} test instances",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );
}

/// Parses, filters, splits, caches, and prints the dataset statistics.
/// `expect` is "users,items,interactions"; a mismatch is a validation
/// failure so shell scripts can gate on the exit code.
pub fn cmd_prepare(
    cfg: &RunConfig,
    expect: Option<&str>,
    force_rebuild: bool,
) -> Result<DatasetStats> {
    let ds = if cfg.dataset == FIXTURE {
        default_markov_dataset()
    } else {
        let raw = read_raw(cfg)?;
        let path = cache_path(cfg, &raw);
        if path.exists() && !force_rebuild {
            println!("cache hit: {}", path.display());
            load_cache(&path)?
        } else {
            let text = String::from_utf8(raw).map_err(|_| {
                Error::Format(format!("dataset {:?} is not UTF-8", cfg.dataset))
            })?;
            let records = parse_interactions_str(&text, cfg.format)?;
            let records = k_core_filter(records, cfg.k_core)?;
            let ds = InteractionDataset::from_records(&records)?;
            fs::create_dir_all(&cfg.cache_dir)?;
            save_cache(&ds, &path)?;
            println!("prepared: {}", path.display());
            ds
        }
    };
    let stats = ds.stats();
    let splits = build_splits(&ds);
    print_stats(&stats, &splits);
    if let Some(spec) = expect {
        check_expect(&stats, spec)?;
        println!("expected statistics confirmed");
    }
    Ok(stats)
}

fn check_expect(stats: &DatasetStats, spec: &str) -> Result<()> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "--expect wants users,items,interactions; got {spec:?}"
        )));
    }
    let want: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("--expect: bad count {p:?}")))
        })
        .collect::<Result<_>>()?;
    let got = [stats.users, stats.items, stats.interactions];
    if got != want[..] {
        return Err(Error::Expect(format!(
            "users/items/interactions {}/{}/{} differ from expected {}/{}/{}",
            got[0], got[1], got[2], want[0], want[1], want[2]
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// First line of a history file: the run's identity.
fn history_meta(cfg: &RunConfig) -> String {
    format!("{{\"config_hash\":\"{}\",\"seed\":{}}}\n", cfg.hash(), cfg.seed)
}

/// Trains from a fresh initialization and leaves three artifacts in
/// `out_dir`: the best checkpoint, the epoch history (JSON lines behind an
/// identity header), and the resolved config text.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainResult> {
    let ds = load_prepared(cfg)?;
    let splits = build_splits(&ds);
    let model_cfg = cfg.model_config(ds.vocab_size());
    let mut params = ModelParams::init(&model_cfg, &mut Rng::new(cfg.seed).fork("init"))?;
    let tcfg = cfg.train_config(Some(cfg.out_dir.join("checkpoint.bin")));
    fs::create_dir_all(&cfg.out_dir)?;
    write_text(
        &cfg.out_dir.join("config.txt"),
        &format!("# hash {}\n{}", cfg.hash(), cfg.resolved()),
    )?;
    let result = train(&mut params, &model_cfg, &ds, &splits.train, &splits.valid, &tcfg)?;
    for rec in &result.history {
        println!(
            "epoch {:>3}  loss {:.4}  valid ndcg@{} {:.4}  ({:.2}s)",
            rec.epoch, rec.loss, cfg.k, rec.valid_ndcg10, rec.seconds
        );
    }
    println!(
        "best epoch {}  valid ndcg@10 {:.4}  checkpoint {}",
        result.best_epoch,
        result.best_valid_ndcg,
        cfg.out_dir.join("checkpoint.bin").display()
    );
    let mut history = history_meta(cfg);
    history.push_str(&history_to_json(&result.history));
    write_text(&cfg.out_dir.join("history.jsonl"), &history)?;
    Ok(result)
}

/// Scores one held-out split with a stored checkpoint and writes the report
/// next to it.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let ds = load_prepared(cfg)?;
    let splits = build_splits(&ds);
    let model_cfg = cfg.model_config(ds.vocab_size());
    let default_path = cfg.out_dir.join("checkpoint.bin");
    let path = checkpoint.unwrap_or(&default_path);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no checkpoint at {}; run: ssm4rec train",
            path.display()
        )));
    }
    let params = load_model(path, &model_cfg)?;
    let instances = if cfg.split == "valid" {
        &splits.valid
    } else {
        &splits.test
    };
    let scorer = ModelScorer::new(&params, &model_cfg, cfg.parallel);
    let mut opts = EvalOptions::new(model_cfg.max_len);
    opts.k = cfg.k;
    opts.eval_batch = cfg.eval_batch;
    opts.mask_history = cfg.mask_history;
    let metrics = evaluate(&scorer, &ds, instances, &opts)?;
    let report = EvalReport::new(&cfg.split, &metrics, cfg.seed, &cfg.hash());
    println!(
        "{} split: HR@{} {:.4}  NDCG@{} {:.4}  MRR@{} {:.4}  ({} users)",
        cfg.split, cfg.k, report.hr, cfg.k, report.ndcg, cfg.k, report.mrr, report.num_users
    );
    write_text(
        &cfg.out_dir.join(format!("report-{}.json", cfg.split)),
        &(report.to_json() + "\n"),
    )?;
    Ok(report)
}

/// Times the recurrent layer against the quadratic attention reference over
/// the length grid and reports fitted growth exponents.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let report = run_bench(8, cfg.d_model, DEFAULT_LENGTHS, 5, cfg.seed)?;
    println!("{}", report.table());
    println!(
        "fitted exponents: recurrent {:.3}, attention {:.3}",
        report.mamba_exponent, report.attention_exponent
    );
    write_text(
        &cfg.out_dir.join("bench.json"),
        &format!(
            "{{\"config_hash\":\"{}\",\"bench\":{}}}\n",
            cfg.hash(),
            report.to_json()
        ),
    )?;
    Ok(report)
}

/// One ablation row: the variant name and its held-out metrics.
pub struct VariantReport {
    pub name: &'static str,
    pub report: EvalReport,
    pub best_epoch: usize,
}

/// The ablation matrix: named single-setting deviations from the default
/// model. The hidden dropout is zeroed for "Block Only" (the variant strips
/// the layer down to the bare block) while the embedding stage keeps its
/// usual processing.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let mut block_only = base.clone();
    block_only.use_pffn = false;
    block_only.use_layernorm = false;
    block_only.dropout_hidden = 0.0;
    let mut two_layers = base.clone();
    two_layers.num_layers = 2;
    let mut with_pe = base.clone();
    with_pe.use_positional_embedding = true;
    let mut no_pffn = base.clone();
    no_pffn.use_pffn = false;
    let mut no_ln = base.clone();
    no_ln.use_layernorm = false;
    vec![
        ("Default", base.clone()),
        ("Block Only", block_only),
        ("2 Layers", two_layers),
        ("w/ PE", with_pe),
        ("w/o PFFN", no_pffn),
        ("w/o LayerNorm", no_ln),
    ]
}

fn variant_dir(out: &Path, name: &str) -> PathBuf {
    let slug: String = name
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '-' })
        .collect();
    out.join("ablate").join(slug.trim_matches('-').replace("--", "-"))
}

/// Trains and evaluates all six variants with a shared seed. Every variant
/// leaves its initial checkpoint, best checkpoint, and report on disk as
/// soon as they exist, so a failure aborts with partial results saved.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<VariantReport>> {
    let ds = load_prepared(cfg)?;
    let splits = build_splits(&ds);
    let base = cfg.model_config(ds.vocab_size());
    let mut rows = Vec::new();
    for (name, model_cfg) in ablation_variants(&base) {
        let dir = variant_dir(&cfg.out_dir, name);
        fs::create_dir_all(&dir)?;
        let mut params = ModelParams::init(&model_cfg, &mut Rng::new(cfg.seed).fork("init"))?;
        save_model(&dir.join("init.bin"), &params)?;
        let tcfg = cfg.train_config(Some(dir.join("checkpoint.bin")));
        let result = train(&mut params, &model_cfg, &ds, &splits.train, &splits.valid, &tcfg)?;
        let instances = if cfg.split == "valid" {
            &splits.valid
        } else {
            &splits.test
        };
        let scorer = ModelScorer::new(&params, &model_cfg, cfg.parallel);
        let mut opts = EvalOptions::new(model_cfg.max_len);
        opts.k = cfg.k;
        opts.eval_batch = cfg.eval_batch;
        opts.mask_history = cfg.mask_history;
        let metrics = evaluate(&scorer, &ds, instances, &opts)?;
        let report = EvalReport::new(&cfg.split, &metrics, cfg.seed, &cfg.hash());
        write_text(&dir.join("report.json"), &(report.to_json() + "\n"))?;
        println!(
            "{name:<14} HR@{} {:.4}  NDCG@{} {:.4}  (best epoch {})",
            cfg.k, report.hr, cfg.k, report.ndcg, result.best_epoch
        );
        rows.push(VariantReport {
            name,
            report,
            best_epoch: result.best_epoch,
        });
        // The running table is rewritten after every variant.
        write_ablation_table(cfg, &rows)?;
    }
    Ok(rows)
}

fn write_ablation_table(cfg: &RunConfig, rows: &[VariantReport]) -> Result<()> {
    let k = cfg.k;
    let mut md = format!("| Variant | HR@{k} | NDCG@{k} | MRR@{k} |\n|---|---|---|---|\n");
    let mut json = format!(
        "{{\"config_hash\":\"{}\",\"split\":\"{}\",\"variants\":[",
        cfg.hash(),
        cfg.split
    );
    for (i, row) in rows.iter().enumerate() {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} |\n",
            row.name, row.report.hr, row.report.ndcg, row.report.mrr
        ));
        if i > 0 {
            json.push(',');
        }
        json.push_str(&format!(
            "{{\"name\":\"{}\",\"hr\":{},\"ndcg\":{},\"mrr\":{},\"best_epoch\":{}}}",
            row.name, row.report.hr, row.report.ndcg, row.report.mrr, row.best_epoch
        ));
    }
    json.push_str("]}\n");
    let out = cfg.out_dir.join("ablate");
    write_text(&out.join("table.md"), &md)?;
    write_text(&out.join("table.json"), &json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Format;

    fn fixture_cfg(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::defaults_for(Format::Tsv);
        cfg.dataset = FIXTURE.to_string();
        cfg.out_dir = out.to_path_buf();
        cfg.max_len = 30;
        cfg.dropout = 0.0;
        cfg.max_epochs = 2;
        cfg.patience = 5;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn prepare_on_the_fixture_prints_and_checks_stats() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture_cfg(dir.path());
        let stats = cmd_prepare(&cfg, Some("200,50,6000"), false).unwrap();
        assert_eq!(stats.users, 200);
        let err = cmd_prepare(&cfg, Some("200,50,6001"), false).unwrap_err();
        assert!(matches!(err, Error::Expect(_)));
        assert!(err.is_validation());
        let err = cmd_prepare(&cfg, Some("200,50"), false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn prepare_caches_and_reuses_real_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("log.tsv");
        let mut text = String::new();
        // 6 users x 6 items, everyone sees everything: survives 5-core.
        for u in 0..6 {
            for (t, i) in (0..6).enumerate() {
                text.push_str(&format!("u{u}\ti{i}\t{t}\n"));
            }
        }
        fs::write(&data, &text).unwrap();
        let mut cfg = RunConfig::defaults_for(Format::Tsv);
        cfg.dataset = data.display().to_string();
        cfg.cache_dir = dir.path().join("cache");
        cfg.out_dir = dir.path().join("runs");
        let stats = cmd_prepare(&cfg, None, false).unwrap();
        assert_eq!((stats.users, stats.items, stats.interactions), (6, 6, 36));
        // Second call loads the cache; the prepared dataset must be intact.
        let again = cmd_prepare(&cfg, None, false).unwrap();
        assert_eq!(stats, again);
        let ds = load_prepared(&cfg).unwrap();
        assert_eq!(ds.num_users(), 6);
    }

    #[test]
    fn unprepared_dataset_points_at_prepare() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("log.tsv");
        fs::write(&data, "u1\ti1\t0\n").unwrap();
        let mut cfg = RunConfig::defaults_for(Format::Tsv);
        cfg.dataset = data.display().to_string();
        cfg.cache_dir = dir.path().join("cache");
        let err = load_prepared(&cfg).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("prepare"), "{msg}"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn train_writes_checkpoint_history_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture_cfg(dir.path());
        let result = cmd_train(&cfg).unwrap();
        assert_eq!(result.history.len(), 2);
        assert!(dir.path().join("checkpoint.bin").exists());
        let history = fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
        let lines: Vec<&str> = history.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains(&cfg.hash()));
        assert!(lines[1].starts_with("{\"epoch\":0,"));
        let config_txt = fs::read_to_string(dir.path().join("config.txt")).unwrap();
        assert!(config_txt.contains("max_len = 30"));
    }

    #[test]
    fn eval_reads_the_checkpoint_and_writes_a_stamped_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture_cfg(dir.path());
        cfg.max_epochs = 3;
        cmd_train(&cfg).unwrap();
        let report = cmd_eval(&cfg, None).unwrap();
        assert_eq!(report.config_hash, cfg.hash());
        assert_eq!(report.num_users, 200);
        assert!(report.hr > 0.5, "fixture should be mostly learned: {}", report.hr);
        let disk = fs::read_to_string(dir.path().join("report-test.json")).unwrap();
        let back: EvalReport = serde_json::from_str(disk.trim()).unwrap();
        assert_eq!(back, report);
        // A config that disagrees with the stored shapes is rejected.
        let mut wrong = cfg.clone();
        wrong.d_model = 32;
        assert!(matches!(cmd_eval(&wrong, None), Err(Error::Format(_))));
    }

    #[test]
    fn eval_without_a_checkpoint_points_at_train() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture_cfg(dir.path());
        let err = cmd_eval(&cfg, None).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("train"), "{msg}"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn ablate_emits_six_variants_with_pe_isolated() {
        let variants = ablation_variants(&ModelConfig::new(51, 30));
        assert_eq!(variants.len(), 6);
        let names: Vec<&str> = variants.iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            ["Default", "Block Only", "2 Layers", "w/ PE", "w/o PFFN", "w/o LayerNorm"]
        );
        let default = &variants[0].1;
        let with_pe = &variants[3].1;
        assert!(with_pe.use_positional_embedding);
        let mut pe_off = with_pe.clone();
        pe_off.use_positional_embedding = false;
        assert_eq!(&pe_off, default);
        let block_only = &variants[1].1;
        assert!(!block_only.use_pffn && !block_only.use_layernorm);
        assert_eq!(block_only.dropout_hidden, 0.0);
        assert_eq!(block_only.dropout_embed, default.dropout_embed);
        assert_eq!(variants[2].1.num_layers, 2);
    }
}
