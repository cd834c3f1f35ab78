//! Delimited score files.
//!
//! ```text
//! # comment lines start with '#'
//! enroll_id,test_id,group_enroll,group_test,label,score
//! spk01_u3,spk01_u7,M,M,mated,0.8123
//! ```

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{MetricsError, TrialRecord};
use crate::group::Group;

pub const SCORE_HEADER: [&str; 6] = [
    "enroll_id",
    "test_id",
    "group_enroll",
    "group_test",
    "label",
    "score",
];

fn parse_err(line: u64, message: impl Into<String>) -> MetricsError {
    MetricsError::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_scores<R: Read>(mut reader: R) -> Result<Vec<TrialRecord>, MetricsError> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| MetricsError::Io(e.to_string()))?;
    // Comment lines are dropped before CSV parsing; `physical[i]` maps the
    // i-th remaining line back to its line number in the file.
    let mut physical = Vec::new();
    let mut body = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        if !line.starts_with('#') {
            physical.push(i as u64 + 1);
            body.push_str(line);
            body.push('\n');
        }
    }
    let to_physical = |csv_line: u64| {
        let idx = csv_line.saturating_sub(1) as usize;
        physical.get(idx).copied().unwrap_or(csv_line)
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(body.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| csv_err(&e, &to_physical))?
        .clone();
    if header.iter().ne(SCORE_HEADER.iter().copied()) {
        let line = to_physical(header.position().map_or(1, |p| p.line()));
        return Err(parse_err(
            line,
            format!(
                "header must be exactly '{}', found '{}'",
                SCORE_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut trials = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(&e, &to_physical))?;
        let line = to_physical(record.position().map_or(0, |p| p.line()));
        let group = |i: usize| {
            record[i]
                .parse::<Group>()
                .map_err(|e| parse_err(line, format!("{}: {e}", SCORE_HEADER[i])))
        };
        let mated = match &record[4] {
            "mated" => true,
            "nonmated" => false,
            other => {
                return Err(parse_err(
                    line,
                    format!("label must be 'mated' or 'nonmated', found '{other}'"),
                ))
            }
        };
        let score: f64 = record[5]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("score '{}' is not a number", &record[5])))?;
        if !score.is_finite() {
            return Err(parse_err(line, format!("score '{}' is not finite", &record[5])));
        }
        trials.push(TrialRecord {
            enroll_id: record[0].to_string(),
            test_id: record[1].to_string(),
            group_enroll: group(2)?,
            group_test: group(3)?,
            score,
            mated,
        });
    }
    Ok(trials)
}

fn csv_err(e: &csv::Error, to_physical: &dyn Fn(u64) -> u64) -> MetricsError {
    let line = to_physical(e.position().map_or(0, |p| p.line()));
    match e.kind() {
        csv::ErrorKind::Io(io) => MetricsError::Io(io.to_string()),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => parse_err(
            line,
            format!("expected {expected_len} fields, found {len}"),
        ),
        _ => parse_err(line, e.to_string()),
    }
}

pub fn read_scores(path: &Path) -> Result<Vec<TrialRecord>, MetricsError> {
    let file = File::open(path)
        .map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))?;
    parse_scores(file)
}

/// Writes trials in the score-file format. Scores use the shortest
/// representation that parses back to the same value.
pub fn write_scores<W: Write>(writer: W, trials: &[TrialRecord]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| MetricsError::Io(e.to_string());
    w.write_record(SCORE_HEADER).map_err(io)?;
    for t in trials {
        w.write_record([
            t.enroll_id.as_str(),
            t.test_id.as_str(),
            t.group_enroll.as_str(),
            t.group_test.as_str(),
            if t.mated { "mated" } else { "nonmated" },
            &t.score.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| MetricsError::Io(e.to_string()))
}
