//! Writes `samples/reference_scores.csv`.
//!
//! At the threshold calibrated to 1% overall FMR, the same-group subgroup
//! rates come out as FNMR 0.96% (M) and 1.07% (F), FMR 3.80% (M) and
//! 4.49% (F). Low-scoring cross-group non-mated trials bring the overall FMR
//! down to exactly 1% without entering either subgroup.
//!
//! Run with `cargo run --example reference_scores -- samples/reference_scores.csv`.

use std::fs::File;
use std::io::{BufWriter, Write};

use fairgate::metrics::{write_scores, TrialRecord};
use fairgate::Group;

/// `n` evenly spaced values in `[lo, hi)`.
fn spread(n: usize, lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / n as f64)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "samples/reference_scores.csv".into());
    let mut trials = Vec::new();
    let mut push = |scores: &mut dyn Iterator<Item = f64>, mated: bool, ge: Group, gt: Group| {
        for s in scores {
            let n = trials.len();
            trials.push(TrialRecord {
                enroll_id: format!("e{n}"),
                test_id: format!("t{n}"),
                score: (s * 1e6).round() / 1e6,
                mated,
                group_enroll: ge,
                group_test: gt,
            });
        }
    };
    use Group::{F, M};
    // Mated: false non-matches in [0, 0.2), accepted trials in [0.7, 1).
    push(&mut spread(24, 0.0, 0.2), true, M, M);
    push(&mut spread(2500 - 24, 0.7, 1.0), true, M, M);
    push(&mut spread(107, 0.0, 0.2), true, F, F);
    push(&mut spread(10000 - 107, 0.7, 1.0), true, F, F);
    // Non-mated: false matches in [0.7, 0.8), rejected trials in [0.2, 0.6).
    push(&mut spread(19, 0.7, 0.8), false, M, M);
    push(&mut spread(500 - 19, 0.2, 0.6), false, M, M);
    push(&mut spread(449, 0.7, 0.8), false, F, F);
    push(&mut spread(10000 - 449, 0.2, 0.6), false, F, F);
    // 468 false matches out of 46800 non-mated trials is exactly 1%.
    push(&mut spread(18150, 0.2, 0.6), false, M, F);
    push(&mut spread(18150, 0.2, 0.6), false, F, M);

    let mut out = BufWriter::new(File::create(&path)?);
    writeln!(out, "# Same-group subgroup rates at the 1% FMR threshold:")?;
    writeln!(out, "# FNMR M 0.96% F 1.07%, FMR M 3.80% F 4.49%.")?;
    write_scores(&mut out, &trials)?;
    out.flush()?;
    println!("wrote {} trials to {path}", trials.len());
    Ok(())
}
