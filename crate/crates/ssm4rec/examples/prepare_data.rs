//! Walks a raw interaction log through the full preparation pipeline:
//! parse, 5-core filter to fixpoint, id assignment in first-seen order,
//! timestamp-sorted sequences, and leave-one-out splits. The log is
//! generated inline so the example runs without any download.
//!
//!     cargo run --example prepare_data

use std::fmt::Write as _;

use ssm4rec::data::{build_splits, k_core_filter, parse_interactions_str, Format, InteractionDataset};
use ssm4rec::rng::Rng;

/// Synthetic tab-separated log: a loyal core of users cycling through a
/// shared catalog, plus drive-by users and a long-tail item that the 5-core
/// filter should remove.
fn synthetic_log() -> String {
    let mut rng = Rng::new(3);
    let mut text = String::new();
    for u in 0..12 {
        let visits = 6 + rng.next_below(5) as usize;
        for v in 0..visits {
            let item = (u + 3 * v) % 9;
            writeln!(text, "user{u}\titem{item}\t{}", 1_000 + 10 * v).unwrap();
        }
    }
    // Too few interactions to survive: two drive-by users, one rare item.
    text.push_str("lurker\titem0\t50\nlurker\titem1\t60\n");
    text.push_str("tourist\titem-rare\t70\nuser0\titem-rare\t80\n");
    text
}

fn main() -> ssm4rec::error::Result<()> {
    let text = synthetic_log();
    let records = parse_interactions_str(&text, Format::Tsv)?;
    println!("parsed      {:>4} interactions", records.len());

    let kept = k_core_filter(records, 5)?;
    println!("5-core kept {:>4}", kept.len());

    let ds = InteractionDataset::from_records(&kept)?;
    let st = ds.stats();
    println!(
        "dataset     {} users, {} items, {} interactions, avg length {:.2}",
        st.users, st.items, st.interactions, st.avg_len
    );

    let splits = build_splits(&ds);
    println!(
        "splits      train {} / valid {} / test {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );
    // Leave-one-out: one valid and one test target per user; the first item
    // of each sequence is context only, so n - 3 train targets remain.
    assert_eq!(splits.valid.len(), st.users);
    assert_eq!(splits.test.len(), st.users);
    assert_eq!(splits.train.len(), st.interactions - 3 * st.users);

    let u0 = &ds.sequences[0];
    println!(
        "user {:?}: sequence {:?} -> test target {}",
        ds.user_ids[0],
        &u0[..u0.len() - 1],
        u0[u0.len() - 1]
    );
    Ok(())
}
