use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DcfConfig, ErrorRates, MetricsError, Sweep, TrialRecord};
use crate::group::Group;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Which trials count toward a group's subgroup rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentPolicy {
    /// Both sides must carry the group; cross-group trials only enter pooled metrics.
    #[default]
    BothSides,
    /// The enrollment side decides.
    EnrollSide,
    /// The test side decides.
    TestSide,
}

impl AssignmentPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            AssignmentPolicy::BothSides => "both_sides",
            AssignmentPolicy::EnrollSide => "enroll_side",
            AssignmentPolicy::TestSide => "test_side",
        }
    }

    pub fn assigns(self, trial: &TrialRecord, group: Group) -> bool {
        match self {
            AssignmentPolicy::BothSides => trial.group_enroll == group && trial.group_test == group,
            AssignmentPolicy::EnrollSide => trial.group_enroll == group,
            AssignmentPolicy::TestSide => trial.group_test == group,
        }
    }
}

impl fmt::Display for AssignmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AssignmentPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both_sides" => Ok(AssignmentPolicy::BothSides),
            "enroll_side" => Ok(AssignmentPolicy::EnrollSide),
            "test_side" => Ok(AssignmentPolicy::TestSide),
            other => Err(format!(
                "unknown assignment policy '{other}' (expected both_sides, enroll_side or test_side)"
            )),
        }
    }
}

/// Per-group error rates at one shared threshold. A group without both
/// mated and non-mated trials has no rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRates {
    pub threshold: f64,
    pub policy: AssignmentPolicy,
    pub m: Option<ErrorRates>,
    pub f: Option<ErrorRates>,
}

impl SubgroupRates {
    /// Builds subgroup rates directly from per-group FMR/FNMR values.
    pub fn from_rates(fmr: [f64; 2], fnmr: [f64; 2]) -> Self {
        let rates = |i: usize| {
            Some(ErrorRates {
                threshold: 0.0,
                fmr: fmr[i],
                fnmr: fnmr[i],
                mated: 0,
                non_mated: 0,
                false_matches: 0,
                false_non_matches: 0,
            })
        };
        Self {
            threshold: 0.0,
            policy: AssignmentPolicy::default(),
            m: rates(0),
            f: rates(1),
        }
    }

    pub fn get(&self, group: Group) -> Option<&ErrorRates> {
        match group {
            Group::M => self.m.as_ref(),
            Group::F => self.f.as_ref(),
        }
    }

    pub fn missing(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.get(*g).is_none())
            .collect()
    }

    fn complete(&self) -> Result<[&ErrorRates; 2], MetricsError> {
        match (self.m.as_ref(), self.f.as_ref()) {
            (Some(m), Some(f)) => Ok([m, f]),
            _ => Err(MetricsError::Protocol(format!(
                "subgroup(s) {:?} lack mated or non-mated trials under policy {}",
                self.missing(),
                self.policy
            ))),
        }
    }
}

pub fn subgroup_rates(
    trials: &[TrialRecord],
    threshold: f64,
    policy: AssignmentPolicy,
) -> Result<SubgroupRates, MetricsError> {
    let rates_for = |group: Group| {
        let members: Vec<TrialRecord> = trials
            .iter()
            .filter(|t| policy.assigns(t, group))
            .cloned()
            .collect();
        match super::error_rates(&members, threshold) {
            Ok(r) => Ok(Some(r)),
            Err(MetricsError::Protocol(why)) => {
                log::warn!("group {group} has no subgroup rates: {why}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    Ok(SubgroupRates {
        threshold,
        policy,
        m: rates_for(Group::M)?,
        f: rates_for(Group::F)?,
    })
}

/// Sample-corrected Gini coefficient of nonnegative values.
pub fn gini(values: &[f64]) -> Result<f64, MetricsError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::InvalidArgument(format!(
            "Gini coefficient needs at least two values, got {n}"
        )));
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(MetricsError::InvalidArgument(format!(
            "Gini coefficient needs finite nonnegative values, got {values:?}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let mut spread = 0.0;
    for a in values {
        for b in values {
            spread += (a - b).abs();
        }
    }
    Ok(nf / (nf - 1.0) * spread / (2.0 * nf * nf * mean))
}

/// `α·G(FMR) + (1−α)·G(FNMR)` over the subgroups.
pub fn garbe(sub: &SubgroupRates, alpha: f64) -> Result<f64, MetricsError> {
    Ok(garbe_parts(sub, alpha)?.2)
}

fn garbe_parts(sub: &SubgroupRates, alpha: f64) -> Result<(f64, f64, f64), MetricsError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MetricsError::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let [m, f] = sub.complete()?;
    let g_fmr = gini(&[m.fmr, f.fmr])?;
    let g_fnmr = gini(&[m.fnmr, f.fnmr])?;
    Ok((g_fmr, g_fnmr, alpha * g_fmr + (1.0 - alpha) * g_fnmr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub alpha: f64,
    pub fmr_target: f64,
    pub dcf: DcfConfig,
    pub policy: AssignmentPolicy,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            fmr_target: 0.01,
            dcf: DcfConfig::default(),
            policy: AssignmentPolicy::default(),
        }
    }
}

/// One row of the subgroup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: Group,
    pub mated: usize,
    pub non_mated: usize,
    pub false_matches: usize,
    pub false_non_matches: usize,
    pub fmr: f64,
    pub fnmr: f64,
    pub fmr_percent: f64,
    pub fnmr_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub trials: usize,
    pub mated: usize,
    pub non_mated: usize,
    pub policy: AssignmentPolicy,
    pub alpha: f64,
    pub fmr_target: f64,
    pub p_target: f64,
    pub c_fnmr: f64,
    pub c_fmr: f64,
    pub accept_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub schema_version: u32,
    pub eer: f64,
    pub eer_percent: f64,
    pub eer_threshold: f64,
    /// Normalized minimum detection cost.
    pub min_dcf: f64,
    pub min_dcf_unnormalized: f64,
    pub min_dcf_threshold: f64,
    pub threshold_at_fmr: f64,
    pub fmr_at_threshold: f64,
    pub fnmr_at_threshold: f64,
    pub fmr_at_threshold_percent: f64,
    pub fnmr_at_threshold_percent: f64,
    pub gini_fmr: f64,
    pub gini_fnmr: f64,
    pub garbe: f64,
    pub subgroups: Vec<GroupRow>,
    pub protocol: Protocol,
}

impl FairnessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are finite")
    }

    /// One human-readable line: EER in percent, normalized minDCF and GARBE.
    pub fn summary_line(&self) -> String {
        format!(
            "EER {:.2}%  minDCF {:.2}  GARBE {:.2}",
            self.eer_percent, self.min_dcf, self.garbe
        )
    }

    /// GARBE recomputed from the report's own Gini fields.
    pub fn reconstructed_garbe(&self) -> f64 {
        self.protocol.alpha * self.gini_fmr + (1.0 - self.protocol.alpha) * self.gini_fnmr
    }
}

pub fn fairness_report(
    trials: &[TrialRecord],
    config: &ReportConfig,
) -> Result<FairnessReport, MetricsError> {
    let sweep = Sweep::new(trials)?;
    let (eer, eer_threshold) = sweep.eer();
    let normalized = DcfConfig {
        normalized: true,
        ..config.dcf
    };
    let raw = DcfConfig {
        normalized: false,
        ..config.dcf
    };
    let (min_dcf, min_dcf_threshold) = super::min_dcf(trials, &normalized)?;
    let (min_dcf_unnormalized, _) = sweep.min_dcf(&raw);
    let at = super::threshold_at_fmr(trials, config.fmr_target)?;
    let sub = subgroup_rates(trials, at.threshold, config.policy)?;
    let (gini_fmr, gini_fnmr, garbe) = garbe_parts(&sub, config.alpha)?;

    let subgroups = Group::ALL
        .iter()
        .map(|&group| {
            let r = sub.get(group).expect("checked by garbe_parts");
            GroupRow {
                group,
                mated: r.mated,
                non_mated: r.non_mated,
                false_matches: r.false_matches,
                false_non_matches: r.false_non_matches,
                fmr: r.fmr,
                fnmr: r.fnmr,
                fmr_percent: 100.0 * r.fmr,
                fnmr_percent: 100.0 * r.fnmr,
            }
        })
        .collect();

    Ok(FairnessReport {
        schema_version: REPORT_SCHEMA_VERSION,
        eer,
        eer_percent: 100.0 * eer,
        eer_threshold,
        min_dcf,
        min_dcf_unnormalized,
        min_dcf_threshold,
        threshold_at_fmr: at.threshold,
        fmr_at_threshold: at.fmr,
        fnmr_at_threshold: at.fnmr,
        fmr_at_threshold_percent: 100.0 * at.fmr,
        fnmr_at_threshold_percent: 100.0 * at.fnmr,
        gini_fmr,
        gini_fnmr,
        garbe,
        subgroups,
        protocol: Protocol {
            trials: trials.len(),
            mated: sweep.mated(),
            non_mated: sweep.non_mated(),
            policy: config.policy,
            alpha: config.alpha,
            fmr_target: config.fmr_target,
            p_target: config.dcf.p_target,
            c_fnmr: config.dcf.c_fnmr,
            c_fmr: config.dcf.c_fmr,
            accept_rule: "score >= threshold".into(),
        },
    })
}
