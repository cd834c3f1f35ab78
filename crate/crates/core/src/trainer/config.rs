//! `key = value` training configuration files.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every
//! key is optional; missing keys keep the defaults listed by
//! [`TrainConfig::render`].

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::synthdata::CorpusSpec;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub min_per_group: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_interval: usize,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    pub channels: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub gate_width: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub aam_scale: f64,
    pub aam_margin: f64,
    pub corpus: CorpusSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            min_per_group: crate::objectives::DEFAULT_MIN_PER_GROUP,
            learning_rate: 0.01,
            momentum: 0.9,
            grad_clip: 5.0,
            batch_size: 32,
            steps: 400,
            eval_interval: 200,
            seed: 0,
            channels: 16,
            encoder_layers: 2,
            encoder_width: 3,
            gate_width: crate::gate::DEFAULT_GATE_WIDTH,
            attention_dim: 8,
            embedding_dim: 16,
            aam_scale: 30.0,
            aam_margin: 0.2,
            corpus: CorpusSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, TrainError> {
    value.parse().map_err(|_| TrainError::Config {
        line,
        message: format!("invalid value '{value}' for key '{key}'"),
    })
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_bins: self.corpus.feature_bins,
            channels: self.channels,
            encoder_layers: self.encoder_layers,
            encoder_width: self.encoder_width,
            gate_width: self.gate_width,
            attention_dim: self.attention_dim,
            embedding_dim: self.embedding_dim,
            speakers: self.corpus.speakers(),
            aam_scale: self.aam_scale,
            aam_margin: self.aam_margin,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let invalid = |message: String| Err(TrainError::InvalidConfig(message));
        self.weights.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.corpus.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return invalid(format!("grad_clip must be a finite value >= 0, got {}", self.grad_clip));
        }
        if self.batch_size < 2 * self.min_per_group.max(1) {
            return invalid(format!(
                "batch_size {} cannot hold {} utterances of each group",
                self.batch_size, self.min_per_group
            ));
        }
        if self.eval_interval == 0 {
            return invalid("eval_interval must be at least 1".into());
        }
        if self.gate_width.is_multiple_of(2) || self.encoder_width.is_multiple_of(2) {
            return invalid("gate_width and encoder_width must be odd".into());
        }
        let sizes = [
            ("channels", self.channels),
            ("encoder_layers", self.encoder_layers),
            ("attention_dim", self.attention_dim),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), TrainError> {
        let w = &mut self.weights;
        let c = &mut self.corpus;
        match key {
            "lambda_s" => w.lambda_s = parse(key, value, line)?,
            "lambda_adv" => w.lambda_adv = parse(key, value, line)?,
            "lambda_decor" => w.lambda_decor = parse(key, value, line)?,
            "lambda_cap" => w.lambda_cap = parse(key, value, line)?,
            "lambda_sat" => w.lambda_sat = parse(key, value, line)?,
            "lambda_rex" => w.lambda_rex = parse(key, value, line)?,
            "gamma" => w.gamma = parse(key, value, line)?,
            "rho_id" => w.rho_id = parse(key, value, line)?,
            "min_per_group" => self.min_per_group = parse(key, value, line)?,
            "learning_rate" => self.learning_rate = parse(key, value, line)?,
            "momentum" => self.momentum = parse(key, value, line)?,
            "grad_clip" => self.grad_clip = parse(key, value, line)?,
            "batch_size" => self.batch_size = parse(key, value, line)?,
            "steps" => self.steps = parse(key, value, line)?,
            "eval_interval" => self.eval_interval = parse(key, value, line)?,
            "seed" => self.seed = parse(key, value, line)?,
            "channels" => self.channels = parse(key, value, line)?,
            "encoder_layers" => self.encoder_layers = parse(key, value, line)?,
            "encoder_width" => self.encoder_width = parse(key, value, line)?,
            "gate_width" => self.gate_width = parse(key, value, line)?,
            "attention_dim" => self.attention_dim = parse(key, value, line)?,
            "embedding_dim" => self.embedding_dim = parse(key, value, line)?,
            "aam_scale" => self.aam_scale = parse(key, value, line)?,
            "aam_margin" => self.aam_margin = parse(key, value, line)?,
            "corpus.speakers_per_group" => c.speakers_per_group = parse(key, value, line)?,
            "corpus.utterances_per_speaker" => c.utterances_per_speaker = parse(key, value, line)?,
            "corpus.eval_utterances_per_speaker" => {
                c.eval_utterances_per_speaker = parse(key, value, line)?
            }
            "corpus.frames" => c.frames = parse(key, value, line)?,
            "corpus.feature_bins" => c.feature_bins = parse(key, value, line)?,
            "corpus.shortcut" => c.shortcut = parse(key, value, line)?,
            "corpus.identity_scale" => c.identity_scale = parse(key, value, line)?,
            "corpus.noise_scale" => c.noise_scale = parse(key, value, line)?,
            "corpus.f_noise_ratio" => c.f_noise_ratio = parse(key, value, line)?,
            "corpus.mated_per_speaker" => c.mated_per_speaker = parse(key, value, line)?,
            "corpus.nonmated_per_speaker" => c.nonmated_per_speaker = parse(key, value, line)?,
            "corpus.cross_group_per_speaker" => {
                c.cross_group_per_speaker = parse(key, value, line)?
            }
            "corpus.seed" => c.seed = parse(key, value, line)?,
            _ => {
                return Err(TrainError::Config {
                    line,
                    message: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    /// Parses a configuration file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(TrainError::Config {
                    line,
                    message: format!("expected 'key = value', found '{content}'"),
                });
            };
            cfg.set(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    /// Every key with its current value, in a form [`TrainConfig::parse`] accepts.
    pub fn render(&self) -> String {
        let w = &self.weights;
        let c = &self.corpus;
        let mut s = String::new();
        let mut put = |section: Option<&str>, entries: &[(&str, String)]| {
            if let Some(title) = section {
                let _ = writeln!(s, "\n# {title}");
            }
            for (k, v) in entries {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        put(
            Some("loss weights"),
            &[
                ("lambda_s", w.lambda_s.to_string()),
                ("lambda_adv", w.lambda_adv.to_string()),
                ("lambda_decor", w.lambda_decor.to_string()),
                ("lambda_cap", w.lambda_cap.to_string()),
                ("lambda_sat", w.lambda_sat.to_string()),
                ("lambda_rex", w.lambda_rex.to_string()),
                ("gamma", w.gamma.to_string()),
                ("rho_id", w.rho_id.to_string()),
                ("min_per_group", self.min_per_group.to_string()),
            ],
        );
        put(
            Some("optimizer"),
            &[
                ("learning_rate", self.learning_rate.to_string()),
                ("momentum", self.momentum.to_string()),
                ("grad_clip", self.grad_clip.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("steps", self.steps.to_string()),
                ("eval_interval", self.eval_interval.to_string()),
                ("seed", self.seed.to_string()),
            ],
        );
        put(
            Some("model"),
            &[
                ("channels", self.channels.to_string()),
                ("encoder_layers", self.encoder_layers.to_string()),
                ("encoder_width", self.encoder_width.to_string()),
                ("gate_width", self.gate_width.to_string()),
                ("attention_dim", self.attention_dim.to_string()),
                ("embedding_dim", self.embedding_dim.to_string()),
                ("aam_scale", self.aam_scale.to_string()),
                ("aam_margin", self.aam_margin.to_string()),
            ],
        );
        put(
            Some("synthetic corpus"),
            &[
                ("corpus.speakers_per_group", c.speakers_per_group.to_string()),
                ("corpus.utterances_per_speaker", c.utterances_per_speaker.to_string()),
                (
                    "corpus.eval_utterances_per_speaker",
                    c.eval_utterances_per_speaker.to_string(),
                ),
                ("corpus.frames", c.frames.to_string()),
                ("corpus.feature_bins", c.feature_bins.to_string()),
                ("corpus.shortcut", c.shortcut.to_string()),
                ("corpus.identity_scale", c.identity_scale.to_string()),
                ("corpus.noise_scale", c.noise_scale.to_string()),
                ("corpus.f_noise_ratio", c.f_noise_ratio.to_string()),
                ("corpus.mated_per_speaker", c.mated_per_speaker.to_string()),
                ("corpus.nonmated_per_speaker", c.nonmated_per_speaker.to_string()),
                ("corpus.cross_group_per_speaker", c.cross_group_per_speaker.to_string()),
                ("corpus.seed", c.seed.to_string()),
            ],
        );
        s.trim_start().to_string()
    }
}
