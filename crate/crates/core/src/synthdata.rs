//! Deterministic two-group synthetic corpus with a controllable sex shortcut.
//!
//! Every frame of an utterance is
//!
//! ```text
//! x_t = prototype(speaker) + κ·sign(group)·g + noise_t
//! ```
//!
//! where `g` is one seeded unit vector per corpus (+ for M, − for F), speaker
//! prototypes are drawn from a spherical Gaussian and frame noise is
//! independent Gaussian. Training and evaluation utterances are drawn from the
//! same speakers; evaluation trials only use evaluation utterances.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::group::Group;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("corpus I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed feature file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub speakers_per_group: usize,
    /// Training utterances per speaker.
    pub utterances_per_speaker: usize,
    /// Held-out utterances per speaker, used only for evaluation trials.
    pub eval_utterances_per_speaker: usize,
    pub frames: usize,
    pub feature_bins: usize,
    /// Shortcut strength κ.
    pub shortcut: f64,
    /// Standard deviation of speaker prototypes.
    pub identity_scale: f64,
    /// Standard deviation of frame noise for group M.
    pub noise_scale: f64,
    /// Multiplier on the frame noise of group F, making one group harder.
    pub f_noise_ratio: f64,
    pub mated_per_speaker: usize,
    pub nonmated_per_speaker: usize,
    pub cross_group_per_speaker: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            speakers_per_group: 8,
            utterances_per_speaker: 8,
            eval_utterances_per_speaker: 6,
            frames: 24,
            feature_bins: 16,
            shortcut: 5.0,
            identity_scale: 1.0,
            noise_scale: 1.0,
            f_noise_ratio: 1.0,
            mated_per_speaker: 10,
            nonmated_per_speaker: 10,
            cross_group_per_speaker: 2,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("speakers_per_group", self.speakers_per_group),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("eval_utterances_per_speaker", self.eval_utterances_per_speaker),
            ("frames", self.frames),
            ("feature_bins", self.feature_bins),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SynthError::InvalidSpec(format!("{name} must be at least 1")));
            }
        }
        let reals = [
            ("shortcut", self.shortcut),
            ("identity_scale", self.identity_scale),
            ("noise_scale", self.noise_scale),
            ("f_noise_ratio", self.f_noise_ratio),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SynthError::InvalidSpec(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn speakers(&self) -> usize {
        2 * self.speakers_per_group
    }

    /// Group of speaker `k`: the first half is M, the second half F.
    pub fn group_of(&self, speaker: usize) -> Group {
        if speaker < self.speakers_per_group {
            Group::M
        } else {
            Group::F
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub group: Group,
    /// `[F, T]`.
    pub features: Tensor,
}

/// A trial between two evaluation utterances, by index into [`Corpus::eval`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub mated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub trials: Vec<Trial>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v = Tensor::randn([dim], 1.0, rng).into_data();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (f, t) = (spec.feature_bins, spec.frames);
    let direction = unit_vector(f, &mut rng);
    let prototypes: Vec<Vec<f64>> = (0..spec.speakers())
        .map(|_| Tensor::randn([f], spec.identity_scale, &mut rng).into_data())
        .collect();

    let utterance = |speaker: usize, id: String, rng: &mut ChaCha8Rng| {
        let group = spec.group_of(speaker);
        let sign = if group == Group::M { 1.0 } else { -1.0 };
        let noise = match group {
            Group::M => spec.noise_scale,
            Group::F => spec.noise_scale * spec.f_noise_ratio,
        };
        let mut data = Tensor::randn([f, t], noise, rng).into_data();
        for (bin, row) in data.chunks_mut(t).enumerate() {
            let offset = prototypes[speaker][bin] + spec.shortcut * sign * direction[bin];
            row.iter_mut().for_each(|x| *x += offset);
        }
        Utterance {
            id,
            speaker,
            group,
            features: Tensor::new([f, t], data).expect("sized above"),
        }
    };

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for s in 0..spec.speakers() {
        for u in 0..spec.utterances_per_speaker {
            train.push(utterance(s, format!("spk{s:03}_tr{u:02}"), &mut rng));
        }
        for u in 0..spec.eval_utterances_per_speaker {
            eval.push(utterance(s, format!("spk{s:03}_ev{u:02}"), &mut rng));
        }
    }
    let trials = make_trials(spec, &eval, &mut rng);
    Ok(Corpus {
        spec: spec.clone(),
        train,
        eval,
        trials,
    })
}

fn make_trials(spec: &CorpusSpec, eval: &[Utterance], rng: &mut ChaCha8Rng) -> Vec<Trial> {
    let by_speaker: Vec<Vec<usize>> = (0..spec.speakers())
        .map(|s| (0..eval.len()).filter(|&i| eval[i].speaker == s).collect())
        .collect();
    let mut trials = Vec::new();
    for s in 0..spec.speakers() {
        let own = &by_speaker[s];
        if own.len() >= 2 {
            for _ in 0..spec.mated_per_speaker {
                let i = rng.random_range(0..own.len());
                let mut j = rng.random_range(0..own.len() - 1);
                if j >= i {
                    j += 1;
                }
                trials.push(Trial {
                    enroll: own[i],
                    test: own[j],
                    mated: true,
                });
            }
        }
        let group = spec.group_of(s);
        let same: Vec<usize> = (0..spec.speakers())
            .filter(|&o| o != s && spec.group_of(o) == group)
            .collect();
        let cross: Vec<usize> = (0..spec.speakers())
            .filter(|&o| spec.group_of(o) != group)
            .collect();
        for (pool, count) in [
            (&same, spec.nonmated_per_speaker),
            (&cross, spec.cross_group_per_speaker),
        ] {
            if pool.is_empty() {
                continue;
            }
            for _ in 0..count {
                let other = pool[rng.random_range(0..pool.len())];
                let enroll = own[rng.random_range(0..own.len())];
                let test = by_speaker[other][rng.random_range(0..by_speaker[other].len())];
                trials.push(Trial {
                    enroll,
                    test,
                    mated: false,
                });
            }
        }
    }
    trials
}

fn utterance_mean(u: &Utterance) -> Vec<f64> {
    let t = u.features.shape()[1];
    u.features
        .data()
        .chunks(t)
        .map(|row| row.iter().sum::<f64>() / t as f64)
        .collect()
}

fn centroid(rows: &[&Vec<f64>], dim: usize) -> Option<Vec<f64>> {
    if rows.is_empty() {
        return None;
    }
    let mut c = vec![0.0; dim];
    for r in rows {
        for (a, b) in c.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    Some(c.into_iter().map(|v| v / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Held-out accuracy of a nearest-centroid proxy-sex probe on utterance means.
///
/// Speakers are split by index parity; the probe is fit on one half and
/// scored on the other, in both directions, so no test speaker is ever seen
/// during fitting. Returns 0.5 when a fold lacks a group.
pub fn shortcut_severity(corpus: &Corpus) -> f64 {
    let utts: Vec<&Utterance> = corpus.train.iter().chain(&corpus.eval).collect();
    let means: Vec<Vec<f64>> = utts.iter().map(|u| utterance_mean(u)).collect();
    let dim = corpus.spec.feature_bins;
    let (mut correct, mut total) = (0usize, 0usize);
    for fold in 0..2 {
        let fit = |g: Group| {
            let rows: Vec<&Vec<f64>> = utts
                .iter()
                .zip(&means)
                .filter(|(u, _)| u.speaker % 2 == fold && u.group == g)
                .map(|(_, m)| m)
                .collect();
            centroid(&rows, dim)
        };
        let (Some(cm), Some(cf)) = (fit(Group::M), fit(Group::F)) else {
            return 0.5;
        };
        for (u, m) in utts.iter().zip(&means) {
            if u.speaker % 2 == fold {
                continue;
            }
            let guess = if sq_dist(m, &cm) <= sq_dist(m, &cf) {
                Group::M
            } else {
                Group::F
            };
            correct += usize::from(guess == u.group);
            total += 1;
        }
    }
    if total == 0 {
        0.5
    } else {
        correct as f64 / total as f64
    }
}

/// Writes one `[F, T]` feature file: `u64` F, `u64` T (little endian), then
/// the row-major `f64` values.
pub fn write_features<W: Write>(w: &mut W, features: &Tensor) -> io::Result<()> {
    let (f, t) = (features.shape()[0], features.shape()[1]);
    w.write_all(&(f as u64).to_le_bytes())?;
    w.write_all(&(t as u64).to_le_bytes())?;
    for v in features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<Tensor, SynthError> {
    let mut word = [0u8; 8];
    let mut dims = [0usize; 2];
    for d in &mut dims {
        r.read_exact(&mut word)
            .map_err(|_| SynthError::Format("truncated header".into()))?;
        *d = u64::from_le_bytes(word) as usize;
    }
    let [f, t] = dims;
    if f == 0 || t == 0 || f.saturating_mul(t) > 1 << 28 {
        return Err(SynthError::Format(format!("implausible shape [{f}, {t}]")));
    }
    let mut data = Vec::with_capacity(f * t);
    for _ in 0..f * t {
        r.read_exact(&mut word)
            .map_err(|_| SynthError::Format(format!("expected {} values", f * t)))?;
        data.push(f64::from_le_bytes(word));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(SynthError::Format(format!("{} trailing bytes", rest.len())));
    }
    Tensor::new([f, t], data).map_err(|e| SynthError::Format(e.to_string()))
}

pub fn load_features(path: &Path) -> Result<Tensor, SynthError> {
    read_features(&mut File::open(path)?)
}

/// Exports feature files, a tab-separated manifest and the trial list.
///
/// Layout under `dir`: `features/<utterance>.f64`, `manifest.tsv`
/// (`utterance_id speaker_id group split path`) and `trials.csv`.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<(), SynthError> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join("manifest.tsv"))?);
    writeln!(manifest, "utterance_id\tspeaker_id\tgroup\tsplit\tpath")?;
    for (split, utts) in [("train", &corpus.train), ("eval", &corpus.eval)] {
        for u in utts {
            let rel = format!("features/{}.f64", u.id);
            let mut w = BufWriter::new(File::create(dir.join(&rel))?);
            write_features(&mut w, &u.features)?;
            w.flush()?;
            writeln!(
                manifest,
                "{}\tspk{:03}\t{}\t{split}\t{rel}",
                u.id, u.speaker, u.group
            )?;
        }
    }
    manifest.flush()?;

    let mut trials = BufWriter::new(File::create(dir.join("trials.csv"))?);
    writeln!(trials, "enroll_id,test_id,group_enroll,group_test,label")?;
    for t in &corpus.trials {
        let (e, s) = (&corpus.eval[t.enroll], &corpus.eval[t.test]);
        let label = if t.mated { "mated" } else { "nonmated" };
        writeln!(trials, "{},{},{},{},{label}", e.id, s.id, e.group, s.group)?;
    }
    trials.flush()?;
    Ok(())
}
