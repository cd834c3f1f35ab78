use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairgate::autodiff::registered_checks;
use fairgate::metrics::{self, ReportConfig};

fn fairgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairgate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const HEADER: &str = "enroll_id,test_id,group_enroll,group_test,label,score\n";

fn separated_scores() -> String {
    let mut s = String::from(HEADER);
    for (i, g) in ["M", "F", "M", "F"].iter().enumerate() {
        s.push_str(&format!("a{i},b{i},{g},{g},mated,0.{}\n", 90 + i));
        s.push_str(&format!("c{i},d{i},{g},{g},nonmated,0.{}\n", 10 + i));
    }
    s
}

#[test]
fn eval_reference_sample_prints_garbe_0_07() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let scores = sample("reference_scores.csv");
    let o = fairgate(&["eval", "--scores", p(&scores), "--report", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().next().unwrap().ends_with("GARBE 0.07"), "{out}");
    assert!(out.contains("M: FNMR 0.96%  FMR 3.80%"), "{out}");
    assert!(out.contains("F: FNMR 1.07%  FMR 4.49%"), "{out}");

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let lib = metrics::fairness_report(&metrics::read_scores(&scores).unwrap(), &ReportConfig::default()).unwrap();
    assert_eq!(json["garbe"].as_f64().unwrap(), lib.garbe);
    assert_eq!(json["eer"].as_f64().unwrap(), lib.eer);
    assert_eq!(json["min_dcf"].as_f64().unwrap(), lib.min_dcf);
    assert!((lib.garbe - 0.0687).abs() < 5e-4);
}

#[test]
fn eval_separated_scores_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.csv");
    fs::write(&scores, separated_scores()).unwrap();
    let o = fairgate(&["eval", "--scores", p(&scores)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(first.starts_with("EER 0.00%"), "{first}");
    assert!(first.ends_with("GARBE 0.00"), "{first}");
}

#[test]
fn malformed_row_exits_2_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("bad.csv");
    let mut text = separated_scores();
    text.push_str("x,y,M,M,maybe,0.5\n");
    fs::write(&scores, text).unwrap();
    let o = fairgate(&["eval", "--scores", p(&scores)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[input]:"), "{err}");
    assert!(err.contains("line 10"), "{err}");

    fs::write(&scores, format!("{HEADER}a,b,M,M,mated\n")).unwrap();
    let o = fairgate(&["sweep", "--scores", p(&scores), "--out", p(&dir.path().join("o.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_class_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("mated_only.csv");
    fs::write(&scores, format!("{HEADER}a,b,M,M,mated,0.5\nc,d,F,F,mated,0.7\n")).unwrap();
    let o = fairgate(&["eval", "--scores", p(&scores)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[protocol]:"), "{}", stderr(&o));
}

#[test]
fn sweep_rows_are_sorted_monotone_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let scores = sample("reference_scores.csv");
    let o = fairgate(&["sweep", "--scores", p(&scores), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("threshold,fmr,fnmr,dcf"));
    let rows: Vec<[f64; 4]> = lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect();
    for w in rows.windows(2) {
        assert!(w[0][0] < w[1][0]);
        assert!(w[0][1] >= w[1][1] && w[0][2] <= w[1][2]);
    }
    let trials = metrics::read_scores(&scores).unwrap();
    let mut distinct: Vec<f64> = trials.iter().map(|t| t.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    assert_eq!(rows.len(), distinct.len() + 2);

    let report = dir.path().join("r.json");
    assert!(fairgate(&["eval", "--scores", p(&scores), "--report", p(&report)]).status.success());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let min = rows.iter().map(|r| r[3]).fold(f64::INFINITY, f64::min);
    assert_eq!(min, json["min_dcf"].as_f64().unwrap());
}

#[test]
fn gradcheck_lists_every_op_once_and_catches_a_fault() {
    let o = fairgate(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    for name in registered_checks() {
        let hits = out.lines().filter(|l| l.split_whitespace().next() == Some(name)).count();
        assert_eq!(hits, 1, "{name} listed {hits} times");
    }
    let o = fairgate(&["gradcheck", "--seed", "2", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("sigmoid") && l.ends_with("FAIL")));
}

#[test]
fn train_toy_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.cfg");
    fs::write(&cfg, "steps = 5\nlamda_rex = 0.1\n").unwrap();
    let o = fairgate(&["train-toy", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda_rex"), "{}", stderr(&o));

    fs::write(&cfg, "steps = 20\nlearning_rate = 1e200\ncorpus.speakers_per_group = 2\n").unwrap();
    let o = fairgate(&["train-toy", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[numerical]: training diverged"), "{}", stderr(&o));
}

#[test]
fn train_toy_defaults_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = fairgate(&["train-toy", "--seed", "0", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["config.cfg", "run_log.jsonl", "report.json", "final.ckpt", "checkpoint_000200.ckpt"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let log = fs::read_to_string(out.join("run_log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().filter(|r| r["kind"] == "step").count(), 400);
    assert_eq!(records.iter().filter(|r| r["kind"] == "eval").count(), 2);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let g = report["garbe"].as_f64().unwrap();
    let rebuilt = 0.5 * report["gini_fmr"].as_f64().unwrap() + 0.5 * report["gini_fnmr"].as_f64().unwrap();
    assert_eq!(g, rebuilt);
}

fn gate_stats(checkpoint: &Path, utterance: &Path) -> (f64, f64, f64) {
    let o = fairgate(&["gate-demo", "--checkpoint", p(checkpoint), "--utterance", p(utterance)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let field = |key: &str| -> f64 {
        out.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    let entries: Vec<f64> = out
        .lines()
        .take_while(|l| !l.starts_with("mean"))
        .flat_map(|l| l.split_whitespace().map(|v| v.parse::<f64>().unwrap()))
        .collect();
    let matrix_mean = entries.iter().sum::<f64>() / entries.len() as f64;
    (field("mean "), field("near_binary_fraction "), matrix_mean)
}

#[test]
fn gate_demo_before_and_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let toy = sample("toy.cfg");
    let corpus = dir.path().join("corpus");
    assert!(fairgate(&["export-corpus", "--config", p(&toy), "--out", p(&corpus)]).status.success());
    assert!(corpus.join("manifest.tsv").exists() && corpus.join("trials.csv").exists());

    let fresh_cfg = dir.path().join("fresh.cfg");
    fs::write(&fresh_cfg, format!("{}\nsteps = 0\n", fs::read_to_string(&toy).unwrap())).unwrap();
    let fresh = dir.path().join("fresh");
    let trained = dir.path().join("trained");
    assert!(fairgate(&["train-toy", "--config", p(&fresh_cfg), "--out", p(&fresh)]).status.success());
    assert!(fairgate(&["train-toy", "--config", p(&toy), "--out", p(&trained)]).status.success());

    let (mut near_fresh, mut near_trained) = (0.0, 0.0);
    let utts = ["spk000_ev00", "spk005_ev03", "spk013_ev01", "spk020_ev07"];
    for u in utts {
        let utt = corpus.join("features").join(format!("{u}.f64"));
        let (mean, near, matrix_mean) = gate_stats(&fresh.join("final.ckpt"), &utt);
        assert!((mean - 0.5).abs() < 0.01, "fresh mean {mean}");
        assert!((mean - matrix_mean).abs() < 1e-4, "{mean} vs {matrix_mean}");
        near_fresh += near;
        let (mean, near, matrix_mean) = gate_stats(&trained.join("final.ckpt"), &utt);
        assert!((mean - matrix_mean).abs() < 1e-4, "{mean} vs {matrix_mean}");
        near_trained += near;
    }
    assert!(near_trained > near_fresh, "{near_trained} vs {near_fresh}");

    let bad = dir.path().join("bad.f64");
    let mut bytes = Vec::new();
    bytes.extend(3u64.to_le_bytes());
    bytes.extend(2u64.to_le_bytes());
    bytes.extend([0u8; 48]);
    fs::write(&bad, bytes).unwrap();
    let o = fairgate(&["gate-demo", "--checkpoint", p(&trained.join("final.ckpt")), "--utterance", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("feature bins"), "{}", stderr(&o));
}
