//! Shows the evaluation machinery without training anything: closed-form
//! checks of HR/NDCG/MRR from raw ranks, then a full-catalog pass of the
//! non-personalized popularity baseline over the fixture, with and without
//! masking each user's own history out of the candidate set.
//!
//!     cargo run --example rank_metrics

use ssm4rec::data::build_splits;
use ssm4rec::eval::{evaluate, metrics_at_k, EvalOptions, PopularityScorer};
use ssm4rec::fixture::default_markov_dataset;

fn main() -> ssm4rec::error::Result<()> {
    // A target ranked 3rd scores ndcg = 1/log2(4) = 0.5 and mrr = 1/3; one
    // ranked past the cutoff scores zero everywhere.
    let m = metrics_at_k(&[3], 10)?;
    println!("rank 3  -> hr {:.4}  ndcg {:.4}  mrr {:.4}", m.hr, m.ndcg, m.mrr);
    let m = metrics_at_k(&[11], 10)?;
    println!("rank 11 -> hr {:.4}  ndcg {:.4}  mrr {:.4}", m.hr, m.ndcg, m.mrr);

    let ds = default_markov_dataset();
    let splits = build_splits(&ds);
    let pop = PopularityScorer::from_dataset(&ds);

    let mut opts = EvalOptions::new(200);
    for masked in [true, false] {
        opts.mask_history = masked;
        let r = evaluate(&pop, &ds, &splits.test, &opts)?;
        println!(
            "popularity, mask_history={masked:<5} -> HR@10 {:.4}  NDCG@10 {:.4}  MRR@10 {:.4}  ({} users)",
            r.hr, r.ndcg, r.mrr, r.num_users
        );
    }
    println!("a trained model should clear the masked popularity row; see train_fixture");
    Ok(())
}
