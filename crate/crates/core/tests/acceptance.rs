//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits with status 1 if any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fairgate::autodiff::{gradcheck_all, registered_checks, Graph, Tensor};
use fairgate::gate::{self, GateMask, GateParams};
use fairgate::metrics::{self, garbe, DcfConfig, Sweep, SubgroupRates, TrialRecord};
use fairgate::model::ModelParams;
use fairgate::objectives;
use fairgate::trainer::{self, TrainConfig};
use fairgate::{synthdata, Group};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY_CONFIG: &str = include_str!("../../../samples/toy.cfg");

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(elapsed: Duration, budget: Duration, detail: String) -> Outcome {
    check(
        elapsed < budget,
        format!("{detail}; runtime {:.2}s (budget {:.0}s)", elapsed.as_secs_f64(), budget.as_secs_f64()),
    )
}

/// Gini of two values in closed form, `|a − b| / (a + b)`.
fn gini_pair(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

fn garbe_round_trip() -> Outcome {
    let start = Instant::now();
    // (FNMR M, FNMR F, FMR M, FMR F) in percent, with the printed GARBE.
    let rows = [
        ("Main, Full", [0.96, 1.07, 3.80, 4.49], 0.07),
        ("w/o Cap", [1.03, 0.95, 4.76, 6.30], 0.09),
    ];
    let expected = [0.0687, 0.0898];
    let mut details = Vec::new();
    let mut ok = true;
    for ((name, r, printed), want) in rows.iter().zip(expected) {
        let sub = SubgroupRates::from_rates([r[2] / 100.0, r[3] / 100.0], [r[0] / 100.0, r[1] / 100.0]);
        let got = garbe(&sub, 0.5).map_err(|e| e.to_string())?;
        let oracle = 0.5 * gini_pair(r[2], r[3]) + 0.5 * gini_pair(r[0], r[1]);
        let rounded = (got * 100.0).round() / 100.0;
        ok &= (got - want).abs() <= 5e-4 && (got - oracle).abs() < 1e-12 && rounded == *printed;
        details.push(format!("{name}: {got:.4} (oracle {oracle:.4}, prints {rounded:.2})"));
    }
    if !ok {
        return Err(details.join(", "));
    }
    within_budget(start.elapsed(), Duration::from_secs(1), details.join(", "))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let names = registered_checks();
    let mut worst = (0.0_f64, String::new());
    for seed in 0..5 {
        let reports = gradcheck_all(seed, 1e-4);
        let mut seen: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
        seen.sort_unstable();
        let mut want = names.clone();
        want.sort_unstable();
        if seen != want {
            return Err(format!("seed {seed}: reported ops differ from the registry"));
        }
        for r in &reports {
            if !r.passed {
                return Err(format!("seed {seed}: {} max rel error {:.3e}", r.op, r.max_rel_error));
            }
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, r.op.clone());
            }
        }
    }
    within_budget(
        start.elapsed(),
        Duration::from_secs(120),
        format!(
            "{} checks x 5 seeds, worst {:.2e} ({})",
            names.len(),
            worst.0,
            worst.1
        ),
    )
}

fn ulp(x: f64) -> f64 {
    let a = x.abs();
    a.next_up() - a
}

fn complementarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_ulps = 0.0_f64;
    for draw in 0..100 {
        let (b, c, t, k) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..20), 2 * rng.random_range(0..3) + 1);
        let magnitude = 10f64.powi(rng.random_range(-6..7));
        let u = Tensor::randn([b, c, t], magnitude, &mut rng);
        let params = GateParams {
            kernel: Tensor::randn([c, k], rng.random_range(0.1..4.0), &mut rng),
            bias: Tensor::randn([c], 1.0, &mut rng),
        };
        let mut g = Graph::new();
        let uv = g.leaf(u.clone());
        let gp = params.map("gate", &mut |_, t| g.leaf(t.clone()));
        let mask = gate::compute_mask(&mut g, uv, &gp).map_err(|e| e.to_string())?;
        let routed = gate::route(&mut g, uv, mask).map_err(|e| e.to_string())?;
        let (id, sex) = (g.value(routed.identity), g.value(routed.sex));
        for ((&x, &a), &s) in u.data().iter().zip(id.data()).zip(sex.data()) {
            let err = ((a + s) - x).abs();
            let units = if x == 0.0 { err } else { err / ulp(x) };
            worst_ulps = worst_ulps.max(units);
            if units > 1.0 {
                return Err(format!("draw {draw}: |(U_id + U_sex) - U| = {units} ulp at U = {x:e}"));
            }
        }
    }
    Ok(format!("100 draws, worst deviation {worst_ulps} ulp"))
}

fn closed_form_losses() -> Outcome {
    let mut g = Graph::new();
    let mut results = Vec::new();
    let half = g.leaf(Tensor::full([2, 3, 4], 0.5));
    let sat_half = gate::sat_loss(&mut g, GateMask { mask: half });
    results.push(("sat(A=0.5)", g.value(sat_half).item(), 0.25));
    let binary = g.leaf(Tensor::new([1, 2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    let sat_bin = gate::sat_loss(&mut g, GateMask { mask: binary });
    results.push(("sat(binary)", g.value(sat_bin).item(), 0.0));
    let rho = 0.3;
    let at_rho = g.leaf(Tensor::new([1, 1, 4], vec![0.1, 0.5, 0.3, 0.3]).unwrap());
    let cap = gate::cap_loss(&mut g, GateMask { mask: at_rho }, rho).map_err(|e| e.to_string())?;
    results.push(("cap(mean=rho)", g.value(cap).item(), 0.0));
    let risks = g.leaf(Tensor::from_vec(vec![0.8, 0.8, 1.2, 1.2]));
    let (rex, _) = objectives::rex_penalty(&mut g, risks, &[Group::M, Group::M, Group::F, Group::F], 2)
        .map_err(|e| e.to_string())?;
    results.push(("rex({0.8,1.2})", g.value(rex).item(), 0.04));
    let a = g.leaf(Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap());
    let b = g.leaf(Tensor::new([2, 3], vec![0.0, 3.0, 0.0, 0.0, 0.0, -1.0]).unwrap());
    let orth = objectives::decor_loss(&mut g, a, b).map_err(|e| e.to_string())?;
    results.push(("decor(orthogonal)", g.value(orth).item(), 0.0));
    let same = objectives::decor_loss(&mut g, a, a).map_err(|e| e.to_string())?;
    results.push(("decor(identical)", g.value(same).item(), 1.0));

    let worst = results
        .iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(name, got, _)| format!("{name}={got}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst <= 1e-12, format!("{detail}; worst deviation {worst:e}"))
}

fn random_trials(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<TrialRecord> {
    let shift = rng.random_range(0.0..3.0);
    (0..n)
        .map(|i| {
            // Guarantees both classes are present.
            let mated = if i < 2 { i == 0 } else { rng.random_bool(0.3) };
            let mut score: f64 = rng.random::<f64>() + rng.random::<f64>() + if mated { shift } else { 0.0 };
            if ties {
                score = (score * 20.0).round() / 20.0;
            }
            let g = if rng.random_bool(0.5) { Group::M } else { Group::F };
            TrialRecord {
                enroll_id: format!("e{i}"),
                test_id: format!("t{i}"),
                score,
                mated,
                group_enroll: g,
                group_test: g,
            }
        })
        .collect()
}

/// Error rates at `tau` by binary search over class-sorted scores.
struct BruteForce {
    mated: Vec<f64>,
    non_mated: Vec<f64>,
}

impl BruteForce {
    fn new(trials: &[TrialRecord]) -> Self {
        let mut mated: Vec<f64> = trials.iter().filter(|t| t.mated).map(|t| t.score).collect();
        let mut non_mated: Vec<f64> = trials.iter().filter(|t| !t.mated).map(|t| t.score).collect();
        mated.sort_by(f64::total_cmp);
        non_mated.sort_by(f64::total_cmp);
        Self { mated, non_mated }
    }

    /// (FMR, FNMR) under the rule "accept iff score >= tau".
    fn rates(&self, tau: f64) -> (f64, f64) {
        let rejected_non = self.non_mated.partition_point(|&s| s < tau);
        let rejected_mated = self.mated.partition_point(|&s| s < tau);
        (
            (self.non_mated.len() - rejected_non) as f64 / self.non_mated.len() as f64,
            rejected_mated as f64 / self.mated.len() as f64,
        )
    }

    /// Candidate thresholds: every distinct score plus one beyond each end.
    fn grid(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.mated.iter().chain(&self.non_mated).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let mut grid = vec![all[0].next_down()];
        grid.extend(&all);
        grid.push(all[all.len() - 1].next_up());
        grid
    }

    /// Linear interpolation of the FMR/FNMR crossing on the grid.
    fn eer(&self) -> f64 {
        let grid = self.grid();
        let mut prev: Option<(f64, f64)> = None;
        for tau in grid {
            let (fmr, fnmr) = self.rates(tau);
            if fnmr >= fmr {
                return match prev {
                    Some((pf, pn)) if fnmr != fmr => {
                        let t = (pf - pn) / ((pf - pn) - (fmr - fnmr));
                        pf + t * (fmr - pf)
                    }
                    _ => fmr,
                };
            }
            prev = Some((fmr, fnmr));
        }
        unreachable!("rates cross before the top of the grid")
    }

    /// Minimum cost over thresholds at the grid ends and between adjacent scores.
    fn min_dcf(&self, cost: &DcfConfig) -> f64 {
        let grid = self.grid();
        let mut taus = vec![grid[0], grid[grid.len() - 1]];
        taus.extend(grid[1..grid.len() - 1].windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        taus.extend(&grid[1..grid.len() - 1]);
        let norm = (cost.c_fnmr * cost.p_target).min(cost.c_fmr * (1.0 - cost.p_target));
        taus.into_iter()
            .map(|tau| {
                let (fmr, fnmr) = self.rates(tau);
                (cost.c_fnmr * cost.p_target * fnmr + cost.c_fmr * (1.0 - cost.p_target) * fmr) / norm
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cost = DcfConfig::default();
    let (mut worst_eer, mut worst_dcf) = (0.0_f64, 0.0_f64);
    for set in 0..50 {
        let n = if set % 10 == 0 { 10_000 } else { rng.random_range(2..=10_000) };
        let trials = random_trials(&mut rng, n, set % 3 == 0);
        let brute = BruteForce::new(&trials);
        let sweep = Sweep::new(&trials).map_err(|e| e.to_string())?;
        let (eer, _) = sweep.eer();
        let (dcf, _) = sweep.min_dcf(&cost);
        worst_eer = worst_eer.max((eer - brute.eer()).abs());
        worst_dcf = worst_dcf.max((dcf - brute.min_dcf(&cost)).abs());
        for w in sweep.points.windows(2) {
            if w[1].fmr > w[0].fmr || w[1].fnmr < w[0].fnmr || w[1].threshold <= w[0].threshold {
                return Err(format!("set {set}: sweep not monotone at tau {}", w[1].threshold));
            }
        }
        for p in sweep.points.iter().step_by(97) {
            let (fmr, fnmr) = brute.rates(p.threshold);
            if fmr != p.fmr || fnmr != p.fnmr {
                return Err(format!("set {set}: rates differ at tau {}", p.threshold));
            }
        }
    }
    if worst_eer > 1e-9 || worst_dcf > 1e-12 {
        return Err(format!("worst |dEER| {worst_eer:e}, worst |dminDCF| {worst_dcf:e}"));
    }
    within_budget(
        start.elapsed(),
        Duration::from_secs(60),
        format!("50 sets, worst |dEER| {worst_eer:e}, worst |dminDCF| {worst_dcf:e}"),
    )
}

fn min_dcf_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw = DcfConfig {
        normalized: false,
        ..DcfConfig::default()
    };
    let norm = DcfConfig::default();
    let mut max_raw = 0.0_f64;
    for set in 0..200 {
        let n = rng.random_range(2..2000);
        let trials = random_trials(&mut rng, n, set % 2 == 0);
        let (r, _) = metrics::min_dcf(&trials, &raw).map_err(|e| e.to_string())?;
        let (v, _) = metrics::min_dcf(&trials, &norm).map_err(|e| e.to_string())?;
        max_raw = max_raw.max(r);
        if r > 0.01 || !(0.0..=1.0).contains(&v) {
            return Err(format!("set {set}: raw {r}, normalized {v}"));
        }
    }
    let mut equal = random_trials(&mut rng, 50, false);
    for t in &mut equal {
        t.score = 0.42;
    }
    let (v, _) = metrics::min_dcf(&equal, &norm).map_err(|e| e.to_string())?;
    check(
        v == 1.0,
        format!("200 sets, max raw minDCF {max_raw:.6}; all-equal scores give {v}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn rex_mitigation() -> Outcome {
    let start = Instant::now();
    let base = TrainConfig::parse(TOY_CONFIG).map_err(|e| e.to_string())?;
    if base.corpus.shortcut != 5.0 || base.weights.lambda_rex != 0.005 {
        return Err("sample config no longer uses shortcut 5 and lambda_rex 0.005".into());
    }
    let mut on = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut off = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        for lambda in [0.0, 0.005] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.corpus.seed = seed;
            cfg.weights.lambda_rex = lambda;
            let out = trainer::train(&cfg, None).map_err(|e| e.to_string())?;
            let fin = &out.final_eval;
            let bucket = if lambda > 0.0 { &mut on } else { &mut off };
            bucket.0.push(fin.train_risks.gap().ok_or("missing training risk")?);
            bucket.1.push(fin.report.garbe);
            bucket.2.push(fin.report.eer);
            bucket.3.push(fin.heldout_risks.gap().ok_or("missing held-out risk")?);
        }
    }
    let (gap_on, gap_off) = (median(on.0), median(off.0));
    let (garbe_on, garbe_off) = (median(on.1), median(off.1));
    let (eer_on, eer_off) = (median(on.2), median(off.2));
    let (held_on, held_off) = (median(on.3), median(off.3));
    let detail = format!(
        "median |R_M-R_F| {gap_on:.4} vs {gap_off:.4} (held-out {held_on:.4} vs {held_off:.4}), \
         GARBE {garbe_on:.4} vs {garbe_off:.4}, EER {eer_on:.4} vs {eer_off:.4} (REx on vs off)"
    );
    let ok = gap_on < gap_off && garbe_on < garbe_off && eer_on <= 1.1 * eer_off;
    if !ok {
        return Err(detail);
    }
    within_budget(start.elapsed(), Duration::from_secs(600), detail)
}

fn grl_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Tensor::randn([4, 3], 1.0, &mut rng);
    let w = Tensor::randn([4, 3], 1.0, &mut rng);
    let run = |gamma: Option<f64>| -> Result<(Tensor, f64, Tensor), String> {
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let wv = g.leaf(w.clone());
        let y = match gamma {
            Some(gm) => g.grl(zv, gm).map_err(|e| e.to_string())?,
            None => zv,
        };
        let h = g.tanh(y);
        let p = g.mul(h, wv).map_err(|e| e.to_string())?;
        let out = g.sum_all(p);
        let grads = g.backward(out);
        Ok((g.value(y).clone(), g.value(out).item(), grads.wrt(zv)))
    };
    let (_, plain_out, plain_grad) = run(None)?;
    let mut worst = 0.0_f64;
    for gamma in [0.0, 0.5, 1.0] {
        let (y, out, grad) = run(Some(gamma))?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&y) != bits(&z) || out.to_bits() != plain_out.to_bits() {
            return Err(format!("gamma {gamma}: forward values changed"));
        }
        for (a, b) in grad.data().iter().zip(plain_grad.data()) {
            worst = worst.max((a + gamma * b).abs());
        }
    }
    check(worst <= 1e-12, format!("gamma in {{0, 0.5, 1}}, worst gradient deviation {worst:e}"))
}

fn deployment_isolation() -> Outcome {
    let mut cfg = TrainConfig::parse(TOY_CONFIG).map_err(|e| e.to_string())?;
    cfg.corpus.speakers_per_group = 4;
    cfg.corpus.utterances_per_speaker = 4;
    let corpus = synthdata::generate_corpus(&cfg.corpus).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = ModelParams::init(&cfg.model_config(), &mut rng);
    let base = trainer::score_trials(&params, &corpus).map_err(|e| e.to_string())?;
    for round in 0..5 {
        let mut perturbed = params.clone();
        let mut jitter = |_: &str, t: &mut Tensor| {
            for v in t.data_mut() {
                *v += rng.random_range(-5.0..5.0);
            }
        };
        perturbed.sex.visit_mut("sex", &mut jitter);
        perturbed.heads.sex.visit_mut("heads.sex", &mut jitter);
        perturbed.heads.adversary.visit_mut("heads.adversary", &mut jitter);
        let after = trainer::score_trials(&perturbed, &corpus).map_err(|e| e.to_string())?;
        for (a, b) in base.iter().zip(&after) {
            if a.score.to_bits() != b.score.to_bits() {
                return Err(format!("round {round}: score of {}/{} changed", a.enroll_id, a.test_id));
            }
        }
    }
    Ok(format!("{} trials bitwise identical over 5 perturbations", base.len()))
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fairgate"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(out.stdout)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("short.cfg");
    let short = format!("{TOY_CONFIG}\nsteps = 60\neval_interval = 30\n");
    fs::write(&cfg_path, short).map_err(|e| e.to_string())?;
    let scores = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples/reference_scores.csv");
    let mut compared = 0;
    // Both runs use the same output path; the first run is moved aside.
    let live = dir.path().join("run");
    let runs = [dir.path().join("first"), live.clone()];
    let mut stdouts = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let mut out = run_cli(&[
            "train-toy",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            live.to_str().unwrap(),
        ])?;
        let report = live.join("eval.json");
        out.extend(run_cli(&[
            "eval",
            "--scores",
            scores.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ])?);
        stdouts.push(out);
        if i == 0 {
            fs::rename(&live, run).map_err(|e| e.to_string())?;
        }
    }
    if stdouts[0] != stdouts[1] {
        return Err("stdout differs between runs".into());
    }
    let mut names: Vec<_> = fs::read_dir(&runs[0])
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in &names {
        let a = fs::read(runs[0].join(name)).map_err(|e| e.to_string())?;
        let b = fs::read(runs[1].join(name)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{} differs between runs", name.to_string_lossy()));
        }
        compared += 1;
    }
    let wanted = ["run_log.jsonl", "report.json", "eval.json", "final.ckpt"];
    for w in wanted {
        if !names.iter().any(|n| n == w) {
            return Err(format!("{w} was not written"));
        }
    }
    Ok(format!("{compared} artifacts and stdout byte-identical across two runs"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("GARBE round-trip on reported subgroup rates", garbe_round_trip),
        ("gradient suite against central differences", gradient_suite),
        ("complementary routing reconstructs U", complementarity),
        ("closed-form loss values", closed_form_losses),
        ("EER/minDCF equal a brute-force sweep", metric_oracle),
        ("minDCF bounds", min_dcf_bounds),
        ("REx mitigation on the shortcut corpus", rex_mitigation),
        ("gradient reversal contract", grl_contract),
        ("verification scores ignore the sex branch", deployment_isolation),
        ("train-toy and eval are byte-deterministic", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}: {name}: {detail}", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
