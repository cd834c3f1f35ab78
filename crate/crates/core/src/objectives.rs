//! Loss terms and their weighted combination.
//!
//! ```text
//! total = L_spk + λ_s·L_sex + λ_adv·L_adv + λ_decor·L_decor
//!       + λ_cap·L_cap + λ_sat·L_sat + λ_rex·L_rex
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::branches::{self, BranchError, HeadParams, Linear, EMBED_EPS};
use crate::gate::{self, GateError, GateMask};
use crate::group::Group;

/// Default minimum number of samples per group before REx is applied.
pub const DEFAULT_MIN_PER_GROUP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_adv: f64,
    pub lambda_decor: f64,
    pub lambda_cap: f64,
    pub lambda_sat: f64,
    pub lambda_rex: f64,
    /// Gradient reversal strength.
    pub gamma: f64,
    /// Target routing mass of the identity branch.
    pub rho_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_adv: 0.1,
            lambda_decor: 0.1,
            lambda_cap: 0.1,
            lambda_sat: 0.01,
            lambda_rex: 0.005,
            gamma: 1.0,
            rho_id: 0.5,
        }
    }
}

impl LossWeights {
    /// All λ set to zero: the objective reduces to the speaker loss.
    pub fn speaker_only() -> Self {
        Self {
            lambda_s: 0.0,
            lambda_adv: 0.0,
            lambda_decor: 0.0,
            lambda_cap: 0.0,
            lambda_sat: 0.0,
            lambda_rex: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let named = [
            ("lambda_s", self.lambda_s),
            ("lambda_adv", self.lambda_adv),
            ("lambda_decor", self.lambda_decor),
            ("lambda_cap", self.lambda_cap),
            ("lambda_sat", self.lambda_sat),
            ("lambda_rex", self.lambda_rex),
            ("gamma", self.gamma),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ObjectiveError::InvalidWeight { name, value: v });
            }
        }
        if !(self.rho_id > 0.0 && self.rho_id < 1.0) {
            return Err(ObjectiveError::InvalidWeight {
                name: "rho_id",
                value: self.rho_id,
            });
        }
        Ok(())
    }
}

/// Per-group speaker risks and the variance penalty over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskStats {
    /// Mean risk of group M, when it has any samples.
    pub risk_m: Option<f64>,
    /// Mean risk of group F, when it has any samples.
    pub risk_f: Option<f64>,
    pub count_m: usize,
    pub count_f: usize,
    /// Mean of the group risks (only when the penalty applies).
    pub mean_risk: Option<f64>,
    pub penalty: f64,
    /// False when a group has fewer than `min_per_group` samples.
    pub applied: bool,
}

impl RiskStats {
    pub fn gap(&self) -> Option<f64> {
        Some((self.risk_m? - self.risk_f?).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_spk: f64,
    pub l_sex: f64,
    pub l_adv: f64,
    pub l_decor: f64,
    pub l_cap: f64,
    pub l_sat: f64,
    pub l_rex: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted total from the individual terms.
    pub fn reconstruct(&self, w: &LossWeights) -> f64 {
        self.l_spk
            + w.lambda_s * self.l_sex
            + w.lambda_adv * self.l_adv
            + w.lambda_decor * self.l_decor
            + w.lambda_cap * self.l_cap
            + w.lambda_sat * self.l_sat
            + w.lambda_rex * self.l_rex
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid loss weight {name} = {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("batch has {found} labels for {expected} samples")]
    LabelCount { expected: usize, found: usize },
    #[error("non-finite risk value")]
    NonFiniteRisk,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Gate(#[from] GateError),
}

/// Speaker loss and the per-sample risks it averages.
#[derive(Debug, Clone, Copy)]
pub struct SpeakerLoss {
    pub loss: Var,
    /// `[B]` cross-entropy per utterance.
    pub per_sample: Var,
}

/// AAM scale and margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.2,
        }
    }
}

fn group_targets(labels: &[Group]) -> Vec<usize> {
    labels.iter().map(|g| g.index()).collect()
}

fn check_batch(g: &Graph, z: Var, n: usize) -> Result<(), ObjectiveError> {
    let b = g.shape(z)[0];
    if b != n {
        return Err(ObjectiveError::LabelCount {
            expected: b,
            found: n,
        });
    }
    Ok(())
}

/// Batch-mean cross-entropy over AAM logits of the identity embeddings.
pub fn spk_loss(
    g: &mut Graph,
    z_id: Var,
    speakers: &[usize],
    speaker_rows: Var,
    margin: MarginConfig,
) -> Result<SpeakerLoss, ObjectiveError> {
    check_batch(g, z_id, speakers.len())?;
    let logits = branches::aam_logits(g, z_id, speakers, speaker_rows, margin.scale, margin.margin)?;
    let per_sample = g.cross_entropy_per_sample(logits, speakers)?;
    let loss = g.mean_all(per_sample);
    Ok(SpeakerLoss { loss, per_sample })
}

/// Cross-entropy of the sex head on the sex embeddings.
pub fn sex_loss(
    g: &mut Graph,
    z_sex: Var,
    labels: &[Group],
    head: &Linear<Var>,
) -> Result<Var, ObjectiveError> {
    check_batch(g, z_sex, labels.len())?;
    let logits = branches::linear(g, z_sex, head)?;
    Ok(g.cross_entropy_logits(logits, &group_targets(labels))?)
}

/// Cross-entropy of the adversarial head seen through gradient reversal.
pub fn adv_loss(
    g: &mut Graph,
    z_id: Var,
    labels: &[Group],
    head: &Linear<Var>,
    gamma: f64,
) -> Result<Var, ObjectiveError> {
    check_batch(g, z_id, labels.len())?;
    let reversed = branches::grl(g, z_id, gamma)?;
    let logits = branches::linear(g, reversed, head)?;
    Ok(g.cross_entropy_logits(logits, &group_targets(labels))?)
}

/// Batch mean of the squared cosine between paired identity and sex embeddings.
pub fn decor_loss(g: &mut Graph, z_id: Var, z_sex: Var) -> Result<Var, ObjectiveError> {
    let a = g.l2_normalize(z_id, EMBED_EPS)?;
    let b = g.l2_normalize(z_sex, EMBED_EPS)?;
    let dots = g.inner(a, b)?;
    let sq = g.mul(dots, dots)?;
    Ok(g.mean_all(sq))
}

/// Variance of the per-group mean risks.
///
/// Groups with fewer than `min_per_group` samples disable the penalty: it is
/// then a constant zero and `applied` is false.
pub fn rex_penalty(
    g: &mut Graph,
    per_sample: Var,
    groups: &[Group],
    min_per_group: usize,
) -> Result<(Var, RiskStats), ObjectiveError> {
    check_batch(g, per_sample, groups.len())?;
    if !g.value(per_sample).is_finite() {
        return Err(ObjectiveError::NonFiniteRisk);
    }
    let members: Vec<Vec<usize>> = Group::ALL
        .iter()
        .map(|grp| {
            groups
                .iter()
                .enumerate()
                .filter(|(_, s)| *s == grp)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let risks = members
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return Ok(None);
            }
            let sel = g.select_rows(per_sample, idx)?;
            Ok::<_, ObjectiveError>(Some(g.mean_all(sel)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let risk_value = |r: Option<Var>, g: &Graph| r.map(|v| g.value(v).item());
    let applied = members.iter().all(|m| m.len() >= min_per_group.max(1));
    let mut stats = RiskStats {
        risk_m: risk_value(risks[0], g),
        risk_f: risk_value(risks[1], g),
        count_m: members[0].len(),
        count_f: members[1].len(),
        mean_risk: None,
        penalty: 0.0,
        applied,
    };
    if !applied {
        let zero = g.leaf(Tensor::scalar(0.0));
        return Ok((zero, stats));
    }
    let risks: Vec<Var> = risks.into_iter().flatten().collect();
    let n = risks.len() as f64;
    let mut sum = risks[0];
    for &r in &risks[1..] {
        sum = g.add(sum, r)?;
    }
    let mean = g.scale(sum, 1.0 / n);
    let mut sq_sum: Option<Var> = None;
    for &r in &risks {
        let d = g.sub(r, mean)?;
        let sq = g.mul(d, d)?;
        sq_sum = Some(match sq_sum {
            Some(s) => g.add(s, sq)?,
            None => sq,
        });
    }
    let penalty = g.scale(sq_sum.expect("two groups present"), 1.0 / n);
    stats.mean_risk = Some(g.value(mean).item());
    stats.penalty = g.value(penalty).item();
    Ok((penalty, stats))
}

/// Everything the objective consumes for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub z_id: Var,
    pub z_sex: Var,
    pub mask: GateMask,
    pub speakers: &'a [usize],
    pub groups: &'a [Group],
    pub heads: &'a HeadParams<Var>,
    pub margin: MarginConfig,
    pub min_per_group: usize,
}

/// The weighted objective as a graph node, with its breakdown.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    /// The adversarial term, the only one reached through gradient reversal.
    pub adv: Var,
    pub breakdown: LossBreakdown,
    pub risks: RiskStats,
}

pub fn total_loss(
    g: &mut Graph,
    inputs: &ObjectiveInputs<'_>,
    weights: &LossWeights,
) -> Result<Objective, ObjectiveError> {
    weights.validate()?;
    let spk = spk_loss(g, inputs.z_id, inputs.speakers, inputs.heads.speaker, inputs.margin)?;
    let sex = sex_loss(g, inputs.z_sex, inputs.groups, &inputs.heads.sex)?;
    let adv = adv_loss(g, inputs.z_id, inputs.groups, &inputs.heads.adversary, weights.gamma)?;
    let decor = decor_loss(g, inputs.z_id, inputs.z_sex)?;
    let cap = gate::cap_loss(g, inputs.mask, weights.rho_id)?;
    let sat = gate::sat_loss(g, inputs.mask);
    let (rex, risks) = rex_penalty(g, spk.per_sample, inputs.groups, inputs.min_per_group)?;

    let mut total = spk.loss;
    for (term, lambda) in [
        (sex, weights.lambda_s),
        (adv, weights.lambda_adv),
        (decor, weights.lambda_decor),
        (cap, weights.lambda_cap),
        (sat, weights.lambda_sat),
        (rex, weights.lambda_rex),
    ] {
        let weighted = g.scale(term, lambda);
        total = g.add(total, weighted)?;
    }
    let v = |x: Var| g.value(x).item();
    let breakdown = LossBreakdown {
        l_spk: v(spk.loss),
        l_sex: v(sex),
        l_adv: v(adv),
        l_decor: v(decor),
        l_cap: v(cap),
        l_sat: v(sat),
        l_rex: v(rex),
        total: v(total),
    };
    Ok(Objective {
        total,
        adv,
        breakdown,
        risks,
    })
}
