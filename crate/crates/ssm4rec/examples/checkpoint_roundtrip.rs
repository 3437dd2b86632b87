//! Saves a freshly initialized model, loads it back, and verifies the trip
//! was lossless: every tensor bitwise identical and the scores for a probe
//! batch exactly equal. Also shows the shape check rejecting a checkpoint
//! written under a different architecture.
//!
//!     cargo run --example checkpoint_roundtrip

use ssm4rec::checkpoint::{load_model, save_model};
use ssm4rec::eval::{Scorer, ModelScorer};
use ssm4rec::model::{ModelConfig, ModelParams};
use ssm4rec::rng::Rng;

fn main() -> ssm4rec::error::Result<()> {
    let cfg = ModelConfig::new(120, 30);
    let params = ModelParams::init(&cfg, &mut Rng::new(11))?;
    let dir = std::env::temp_dir().join("ssm4rec-checkpoint-roundtrip");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.bin");

    save_model(&path, &params)?;
    let loaded = load_model(&path, &cfg)?;
    println!(
        "wrote {} ({} bytes), read it back",
        path.display(),
        std::fs::metadata(&path)?.len()
    );

    let mut tensors = 0usize;
    for ((name, a), (_, b)) in params.tensors().iter().zip(loaded.tensors().iter()) {
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "tensor {name} changed across the round trip");
        tensors += 1;
    }
    println!("{tensors} tensors bitwise identical");

    // Same weights, same scores: rank a probe batch through both copies.
    let items: Vec<u32> = (0..2 * cfg.max_len).map(|i| 1 + (i as u32 % 100)).collect();
    let sa = ModelScorer::new(&params, &cfg, true).score(&items, 2)?;
    let sb = ModelScorer::new(&loaded, &cfg, true).score(&items, 2)?;
    assert_eq!(sa.data(), sb.data());
    println!("probe batch scores identical ({} logits)", sa.numel());

    let mut other = cfg.clone();
    other.d_model = 32;
    other.block.d_model = 32;
    match load_model(&path, &other) {
        Err(e) => println!("mismatched architecture rejected: {e}"),
        Ok(_) => panic!("a d_model=32 load against a d_model=64 file must fail"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
