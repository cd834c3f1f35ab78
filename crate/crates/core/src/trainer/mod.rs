//! Toy training loop: SGD with momentum on the full objective, periodic
//! held-out evaluation through the identity branch, and checkpoints.

mod batch;
mod config;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::branches::{cosine_score, BranchError};
use crate::group::Group;
use crate::metrics::{self, FairnessReport, MetricsError, ReportConfig, TrialRecord};
use crate::model::{self, ModelError, ModelParams, SavedModel};
use crate::objectives::{self, LossBreakdown, MarginConfig, ObjectiveError, ObjectiveInputs, RiskStats};
use crate::synthdata::{self, Corpus, SynthError, Utterance};

pub use batch::{make_batches, BatchStream};
pub use config::TrainConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub rex_applied: bool,
    pub risk_m: Option<f64>,
    pub risk_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub report: FairnessReport,
    /// Per-group speaker risks over the whole training split.
    pub train_risks: RiskStats,
    /// Per-group speaker risks over the held-out utterances.
    pub heldout_risks: RiskStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn steps(&self) -> impl DoubleEndedIterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Eval(_) => None,
        })
    }

    pub fn evals(&self) -> impl DoubleEndedIterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    /// Newline-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records are finite"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SavedModel,
    pub log: RunLog,
    pub final_eval: EvalRecord,
}

/// Stacks `[F, T]` utterances into a `[B, F, T]` batch.
pub fn stack(utts: &[&Utterance]) -> Tensor {
    let shape = utts[0].features.shape();
    let mut data = Vec::with_capacity(utts.len() * utts[0].features.numel());
    for u in utts {
        data.extend_from_slice(u.features.data());
    }
    Tensor::new([utts.len(), shape[0], shape[1]], data).expect("utterances share a shape")
}

const EVAL_CHUNK: usize = 64;

/// Identity embeddings for every utterance, computed in chunks.
pub fn embed_all(params: &ModelParams, utts: &[Utterance]) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(EVAL_CHUNK) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let z = model::identity_embeddings(params, &stack(&refs))?;
        let d = z.shape()[1];
        out.extend(z.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Scores every held-out trial with the cosine of identity embeddings.
pub fn score_trials(params: &ModelParams, corpus: &Corpus) -> Result<Vec<TrialRecord>, TrainError> {
    let emb = embed_all(params, &corpus.eval)?;
    corpus
        .trials
        .iter()
        .map(|t| {
            let (e, s) = (&corpus.eval[t.enroll], &corpus.eval[t.test]);
            let score = cosine_score(&emb[t.enroll], &emb[t.test])
                .map_err(|err| TrainError::Model(ModelError::Branch(err)))?;
            Ok(TrialRecord {
                enroll_id: e.id.clone(),
                test_id: s.id.clone(),
                score,
                mated: t.mated,
                group_enroll: e.group,
                group_test: s.group,
            })
        })
        .collect()
}

/// Per-group mean speaker loss over `utts`.
pub fn group_risks(
    saved: &SavedModel,
    utts: &[Utterance],
    min_per_group: usize,
) -> Result<RiskStats, TrainError> {
    let params = &saved.params;
    let mut per_sample = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(EVAL_CHUNK) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let x = stack(&refs);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let enc = params.encoder.map("encoder", &mut |_, t| g.leaf(t.clone()));
        let gp = params.gate.map("gate", &mut |_, t| g.leaf(t.clone()));
        let id = params.identity.map("identity", &mut |_, t| g.leaf(t.clone()));
        let rows = g.leaf(params.heads.speaker.clone());
        let (_, _, _, z) = model::identity_path(&mut g, xv, &enc, &gp, &id)?;
        let speakers: Vec<usize> = chunk.iter().map(|u| u.speaker).collect();
        let margin = MarginConfig {
            scale: saved.aam_scale,
            margin: saved.aam_margin,
        };
        let ce = objectives::spk_loss(&mut g, z.vectors, &speakers, rows, margin)?.per_sample;
        per_sample.extend_from_slice(g.value(ce).data());
    }
    let groups: Vec<Group> = utts.iter().map(|u| u.group).collect();
    let mut g = Graph::new();
    let risks = g.leaf(Tensor::from_vec(per_sample));
    Ok(objectives::rex_penalty(&mut g, risks, &groups, min_per_group)?.1)
}

/// Held-out fairness report plus per-group risks on both splits.
pub fn evaluate(
    saved: &SavedModel,
    corpus: &Corpus,
    min_per_group: usize,
) -> Result<EvalRecord, TrainError> {
    let trials = score_trials(&saved.params, corpus)?;
    Ok(EvalRecord {
        step: saved.step,
        report: metrics::fairness_report(&trials, &ReportConfig::default())?,
        train_risks: group_risks(saved, &corpus.train, min_per_group)?,
        heldout_risks: group_risks(saved, &corpus.eval, min_per_group)?,
    })
}

/// True when a forward error stems from activations that overflowed.
fn overflowed(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Autodiff(AutodiffError::DegenerateNorm { norm, .. })
            | ModelError::Branch(BranchError::Autodiff(AutodiffError::DegenerateNorm { norm, .. }))
            if !norm.is_finite()
    )
}

/// Runs training on the configured synthetic corpus.
///
/// With `out` set, checkpoints are written there at every evaluation and as
/// `final.ckpt` at the end.
pub fn train(config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let corpus = synthdata::generate_corpus(&config.corpus)?;
    train_on(config, &corpus, out)
}

/// Runs training on an already generated corpus.
pub fn train_on(
    config: &TrainConfig,
    corpus: &Corpus,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(&config.model_config(), &mut rng);
    let groups: Vec<Group> = corpus.train.iter().map(|u| u.group).collect();
    let mut batches = make_batches(&groups, config.batch_size, config.seed ^ 0x0ba7_c4e5)
        .ok_or(TrainError::EmptyCorpus)?;
    let mut velocity: Vec<Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let margin = MarginConfig {
        scale: config.aam_scale,
        margin: config.aam_margin,
    };
    let mut log = RunLog::default();
    let snapshot = |params: &ModelParams, step: usize| SavedModel {
        params: params.clone(),
        aam_scale: config.aam_scale,
        aam_margin: config.aam_margin,
        step,
    };

    for step in 1..=config.steps {
        let batch = batches.next().expect("batch stream is endless");
        let utts: Vec<&Utterance> = batch.iter().map(|&i| &corpus.train[i]).collect();
        let speakers: Vec<usize> = utts.iter().map(|u| u.speaker).collect();
        let batch_groups: Vec<Group> = utts.iter().map(|u| u.group).collect();

        let mut g = Graph::new();
        let x = g.leaf(stack(&utts));
        let p = params.bind(&mut g);
        let fp = model::forward(&mut g, x, &p).map_err(|e| match overflowed(&e) {
            true => TrainError::Diverged {
                step,
                reason: e.to_string(),
            },
            false => e.into(),
        })?;
        for (what, v) in [("identity", fp.z_id.vectors), ("sex", fp.z_sex.vectors)] {
            if !g.value(v).is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    reason: format!("{what} embeddings are not finite"),
                });
            }
        }
        let inputs = ObjectiveInputs {
            z_id: fp.z_id.vectors,
            z_sex: fp.z_sex.vectors,
            mask: fp.mask,
            speakers: &speakers,
            groups: &batch_groups,
            heads: &p.heads,
            margin,
            min_per_group: config.min_per_group,
        };
        let obj = objectives::total_loss(&mut g, &inputs, &config.weights)?;
        if !obj.breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: format!("total loss is {}", obj.breakdown.total),
            });
        }
        let grads = g.backward(obj.total);
        let mut grad_list = Vec::with_capacity(velocity.len());
        p.visit(&mut |_, v| grad_list.push(grads.wrt(*v)));
        let norm = grad_list
            .iter()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if config.grad_clip > 0.0 && norm > config.grad_clip {
            config.grad_clip / norm
        } else {
            1.0
        };

        let mut k = 0;
        params.visit_mut(&mut |_, theta| {
            let v = &mut velocity[k];
            for ((vi, gi), ti) in v
                .data_mut()
                .iter_mut()
                .zip(grad_list[k].data())
                .zip(theta.data_mut())
            {
                *vi = config.momentum * *vi + clip * gi;
                *ti -= config.learning_rate * *vi;
            }
            k += 1;
        });
        let mut bad = None;
        params.visit(&mut |name, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(TrainError::Diverged {
                step,
                reason: format!("parameter {name} is not finite"),
            });
        }
        params.heads.normalize_speaker_rows();

        log.records.push(LogRecord::Step(StepRecord {
            step,
            loss: obj.breakdown,
            rex_applied: obj.risks.applied,
            risk_m: obj.risks.risk_m,
            risk_f: obj.risks.risk_f,
        }));

        if step % config.eval_interval == 0 && step != config.steps {
            let saved = snapshot(&params, step);
            log.records
                .push(LogRecord::Eval(evaluate(&saved, corpus, config.min_per_group)?));
            if let Some(dir) = out {
                saved.save(&dir.join(format!("checkpoint_{step:06}.ckpt")))?;
            }
        }
    }

    let saved = snapshot(&params, config.steps);
    let final_eval = evaluate(&saved, corpus, config.min_per_group)?;
    log.records.push(LogRecord::Eval(final_eval.clone()));
    if let Some(dir) = out {
        saved.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        model: saved,
        log,
        final_eval,
    })
}

/// Writes the run log and the final report next to the checkpoints.
pub fn write_artifacts(outcome: &TrainOutcome, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run_log.jsonl"), outcome.log.to_jsonl())?;
    let mut f = fs::File::create(dir.join("report.json"))?;
    f.write_all(outcome.final_eval.report.to_json().as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
