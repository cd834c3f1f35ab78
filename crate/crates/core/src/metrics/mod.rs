//! Score-level verification metrics and subgroup fairness measures.
//!
//! A trial is accepted when `score >= τ`. Every threshold search runs over the
//! same finite sweep: one point just below the lowest score, one point at each
//! distinct score and one point just above the highest score. Between two
//! adjacent distinct scores the error rates are constant, so this sweep visits
//! every operating point the trial list can produce.

mod fairness;
mod scorefile;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::Group;

pub use fairness::{
    fairness_report, garbe, gini, subgroup_rates, AssignmentPolicy, FairnessReport, GroupRow,
    ReportConfig, SubgroupRates, REPORT_SCHEMA_VERSION,
};
pub use scorefile::{parse_scores, read_scores, write_scores, SCORE_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub mated: bool,
    pub group_enroll: Group,
    pub group_test: Group,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("evaluation protocol error: {0}")]
    Protocol(String),
    #[error("non-finite score {score} in trial {enroll_id}/{test_id}")]
    NonFiniteScore {
        enroll_id: String,
        test_id: String,
        score: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("score file line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("score file I/O: {0}")]
    Io(String),
}

/// Error rates of a trial list at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub mated: usize,
    pub non_mated: usize,
    pub false_matches: usize,
    pub false_non_matches: usize,
}

impl ErrorRates {
    fn from_counts(threshold: f64, mated: usize, non_mated: usize, fm: usize, fnm: usize) -> Self {
        Self {
            threshold,
            fmr: fm as f64 / non_mated as f64,
            fnmr: fnm as f64 / mated as f64,
            mated,
            non_mated,
            false_matches: fm,
            false_non_matches: fnm,
        }
    }
}

fn class_counts(trials: &[TrialRecord]) -> Result<(usize, usize), MetricsError> {
    let mut mated = 0;
    for t in trials {
        if !t.score.is_finite() {
            return Err(MetricsError::NonFiniteScore {
                enroll_id: t.enroll_id.clone(),
                test_id: t.test_id.clone(),
                score: t.score,
            });
        }
        mated += usize::from(t.mated);
    }
    let non_mated = trials.len() - mated;
    if mated == 0 {
        return Err(MetricsError::Protocol("no mated trials".into()));
    }
    if non_mated == 0 {
        return Err(MetricsError::Protocol("no non-mated trials".into()));
    }
    Ok((mated, non_mated))
}

pub fn error_rates(trials: &[TrialRecord], threshold: f64) -> Result<ErrorRates, MetricsError> {
    let (mated, non_mated) = class_counts(trials)?;
    let mut fm = 0;
    let mut fnm = 0;
    for t in trials {
        let accept = t.score >= threshold;
        match (t.mated, accept) {
            (true, false) => fnm += 1,
            (false, true) => fm += 1,
            _ => {}
        }
    }
    Ok(ErrorRates::from_counts(threshold, mated, non_mated, fm, fnm))
}

/// Every distinct operating point of a trial list, by increasing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub points: Vec<ErrorRates>,
}

impl Sweep {
    pub fn new(trials: &[TrialRecord]) -> Result<Self, MetricsError> {
        let (mated, non_mated) = class_counts(trials)?;
        let mut sorted: Vec<(f64, bool)> = trials.iter().map(|t| (t.score, t.mated)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        let lowest = sorted[0].0;
        let highest = sorted[sorted.len() - 1].0;
        let mut points = Vec::with_capacity(sorted.len() + 2);
        points.push(ErrorRates::from_counts(
            lowest.next_down(),
            mated,
            non_mated,
            non_mated,
            0,
        ));
        // Trials strictly below the current threshold, per class.
        let (mut below_mated, mut below_non) = (0, 0);
        let mut i = 0;
        while i < sorted.len() {
            let tau = sorted[i].0;
            points.push(ErrorRates::from_counts(
                tau,
                mated,
                non_mated,
                non_mated - below_non,
                below_mated,
            ));
            while i < sorted.len() && sorted[i].0 == tau {
                if sorted[i].1 {
                    below_mated += 1;
                } else {
                    below_non += 1;
                }
                i += 1;
            }
        }
        points.push(ErrorRates::from_counts(
            highest.next_up(),
            mated,
            non_mated,
            0,
            mated,
        ));
        Ok(Self { points })
    }

    pub fn mated(&self) -> usize {
        self.points[0].mated
    }

    pub fn non_mated(&self) -> usize {
        self.points[0].non_mated
    }

    /// Equal error rate and its threshold.
    ///
    /// Takes the first sweep point where FNMR reaches FMR and, unless the two
    /// coincide there, interpolates linearly from the previous point.
    pub fn eer(&self) -> (f64, f64) {
        let p = &self.points;
        let k = p
            .iter()
            .position(|r| r.fnmr >= r.fmr)
            .expect("the last sweep point has FNMR = 1 and FMR = 0");
        if p[k].fnmr == p[k].fmr || k == 0 {
            return (p[k].fmr, p[k].threshold);
        }
        let (a, b) = (&p[k - 1], &p[k]);
        let d0 = a.fnmr - a.fmr;
        let d1 = b.fnmr - b.fmr;
        let t = -d0 / (d1 - d0);
        let rate = a.fmr + t * (b.fmr - a.fmr);
        let tau = a.threshold + t * (b.threshold - a.threshold);
        (rate, tau)
    }

    /// Minimum detection cost over the sweep and the threshold attaining it.
    pub fn min_dcf(&self, cost: &DcfConfig) -> (f64, f64) {
        let mut best = (f64::INFINITY, f64::NAN);
        for r in &self.points {
            let dcf = cost.c_fnmr * cost.p_target * r.fnmr
                + cost.c_fmr * (1.0 - cost.p_target) * r.fmr;
            if dcf < best.0 {
                best = (dcf, r.threshold);
            }
        }
        if cost.normalized {
            best.0 /= cost.normalizer();
        }
        best
    }

    /// Smallest swept threshold whose FMR does not exceed `target`.
    pub fn threshold_at_fmr(&self, target: f64) -> ErrorRates {
        *self
            .points
            .iter()
            .find(|r| r.fmr <= target)
            .expect("the last sweep point has FMR = 0")
    }
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_fnmr: f64,
    pub c_fmr: f64,
    pub normalized: bool,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_fnmr: 1.0,
            c_fmr: 1.0,
            normalized: true,
        }
    }
}

impl DcfConfig {
    /// Cost of the better trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_fnmr * self.p_target).min(self.c_fmr * (1.0 - self.p_target))
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(MetricsError::InvalidArgument(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_fnmr > 0.0 && self.c_fmr > 0.0) {
            return Err(MetricsError::InvalidArgument("costs must be positive".into()));
        }
        Ok(())
    }
}

/// Equal error rate and the interpolated threshold at which it occurs.
pub fn eer(trials: &[TrialRecord]) -> Result<(f64, f64), MetricsError> {
    Ok(Sweep::new(trials)?.eer())
}

pub fn min_dcf(trials: &[TrialRecord], cost: &DcfConfig) -> Result<(f64, f64), MetricsError> {
    cost.validate()?;
    Ok(Sweep::new(trials)?.min_dcf(cost))
}

/// Conservative threshold for an FMR target, with the rates it yields.
pub fn threshold_at_fmr(trials: &[TrialRecord], target: f64) -> Result<ErrorRates, MetricsError> {
    if !(0.0..=1.0).contains(&target) {
        return Err(MetricsError::InvalidArgument(format!(
            "FMR target must lie in [0, 1], got {target}"
        )));
    }
    let sweep = Sweep::new(trials)?;
    if sweep.non_mated() < 100 {
        log::warn!(
            "only {} non-mated trials; an FMR target of {target} is coarsely resolved",
            sweep.non_mated()
        );
    }
    Ok(sweep.threshold_at_fmr(target))
}
