//! Calibration and selectivity measurement: ECE, Brier, AUC, explained
//! variance, per-tier tool rates, and the sign-behavior audit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolworld::Tier;

pub const METRICS_SCHEMA: &str = "segcredit.metrics.v1";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("predictions and outcomes differ in length: {preds} vs {outcomes}")]
    LengthMismatch { preds: usize, outcomes: usize },
    #[error("outcome variance is zero")]
    ZeroVarianceOutcomes,
}

/// One decile bin of a reliability diagram. Bins are left-closed,
/// right-open; the last bin is closed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_pred: f64,
    pub actual_rate: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema: String,
    pub bins: Vec<CalibrationBin>,
    /// Count-weighted mean |mean_pred - actual_rate| over populated bins.
    pub ece: f64,
    /// Mean squared error of the probabilistic prediction.
    pub brier: f64,
    /// Rank-statistic AUC of predictions against the binary outcomes.
    pub auc: f64,
}

/// Mann-Whitney AUC with average ranks, so tied predictions contribute 0.5
/// per tied (positive, negative) pair. Labels are 1.0 for the positive class.
pub fn auc(preds: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), outcomes: labels.len() });
    }
    let n_pos = labels.iter().filter(|l| **l >= 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::ZeroVarianceOutcomes);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].partial_cmp(&preds[b]).unwrap());
    // Average ranks across tied groups (ranks are 1-based).
    let mut rank = vec![0.0; preds.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            rank[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(l, _)| **l >= 1.0)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Decile-binned calibration of success predictions against binary outcomes.
pub fn calibration(preds: &[f64], outcomes: &[f64]) -> Result<CalibrationReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if preds.len() != outcomes.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            outcomes: outcomes.len(),
        });
    }
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); 10];
    for (p, y) in preds.iter().zip(outcomes) {
        let mut b = (p * 10.0).floor() as usize;
        if b >= 10 {
            b = 9; // the last bin is closed at 1.0
        }
        sums[b].0 += p;
        sums[b].1 += y;
        sums[b].2 += 1;
    }
    let n = preds.len() as f64;
    let mut bins = Vec::with_capacity(10);
    let mut ece = 0.0;
    for (b, (ps, ys, c)) in sums.into_iter().enumerate() {
        let (mean_pred, actual_rate) = if c > 0 {
            (ps / c as f64, ys / c as f64)
        } else {
            (0.0, 0.0)
        };
        if c > 0 {
            ece += (c as f64 / n) * (mean_pred - actual_rate).abs();
        }
        bins.push(CalibrationBin {
            lo: b as f64 / 10.0,
            hi: (b + 1) as f64 / 10.0,
            mean_pred,
            actual_rate,
            count: c,
        });
    }
    let brier = preds
        .iter()
        .zip(outcomes)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n;
    let auc = auc(preds, outcomes).unwrap_or(0.5);
    Ok(CalibrationReport { schema: METRICS_SCHEMA.to_string(), bins, ece, brier, auc })
}

/// `EV = 1 - Var(R - V) / Var(R)` over held-out (prediction, outcome) pairs.
pub fn explained_variance(preds: &[f64], outcomes: &[f64]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if preds.len() != outcomes.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            outcomes: outcomes.len(),
        });
    }
    let var = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
    };
    let var_r = var(outcomes);
    if var_r == 0.0 {
        return Err(MetricsError::ZeroVarianceOutcomes);
    }
    let residuals: Vec<f64> = outcomes.iter().zip(preds).map(|(r, v)| r - v).collect();
    Ok(1.0 - var(&residuals) / var_r)
}

/// What selectivity needs to know about one evaluated trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalTrajectory {
    pub tier: Tier,
    pub tool_calls: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub schema: String,
    /// Fraction of Tier-1 trajectories with at least one invoke.
    pub tier1_tool_rate: f64,
    /// Fraction of Tier-2 trajectories with at least one invoke.
    pub tier2_tool_rate: f64,
    /// Exact-match rate on Tier-2 questions regardless of tool use.
    pub tier2_em: f64,
    pub mean_tool_calls_tier1: f64,
    pub mean_tool_calls_tier2: f64,
    pub mean_tool_calls: f64,
    pub n_tier1: usize,
    pub n_tier2: usize,
}

/// Per-tier tool rates and Tier-2 EM. Empty slices yield zero rates.
pub fn selectivity(items: &[EvalTrajectory]) -> SelectivityReport {
    let slice = |tier: Tier| -> Vec<&EvalTrajectory> {
        items.iter().filter(|t| t.tier == tier).collect()
    };
    let rate = |xs: &[&EvalTrajectory]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().filter(|t| t.tool_calls >= 1).count() as f64 / xs.len() as f64
        }
    };
    let mean_calls = |xs: &[&EvalTrajectory]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|t| t.tool_calls as f64).sum::<f64>() / xs.len() as f64
        }
    };
    let t1 = slice(Tier::Tier1);
    let t2 = slice(Tier::Tier2);
    let tier2_em = if t2.is_empty() {
        0.0
    } else {
        t2.iter().map(|t| t.reward).sum::<f64>() / t2.len() as f64
    };
    let all: Vec<&EvalTrajectory> = items.iter().collect();
    SelectivityReport {
        schema: METRICS_SCHEMA.to_string(),
        tier1_tool_rate: rate(&t1),
        tier2_tool_rate: rate(&t2),
        tier2_em,
        mean_tool_calls_tier1: mean_calls(&t1),
        mean_tool_calls_tier2: mean_calls(&t2),
        mean_tool_calls: mean_calls(&all),
        n_tier1: t1.len(),
        n_tier2: t2.len(),
    }
}

/// One invoke-assimilate pair prepared for the sign audit: the oracle
/// annotations plus the critic's values on either side of the assimilate
/// boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssimilatePair {
    pub surfaced: bool,
    pub kept: bool,
    pub v_transient: f64,
    pub v_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignBehaviorReport {
    pub schema: String,
    /// Pairs where retrieval surfaced the fact and extraction kept it.
    pub n_good_extraction: usize,
    /// ... of which the critic's value rose across the assimilate boundary.
    pub n_rise_on_good: usize,
    /// Pairs where retrieval surfaced the fact but extraction lost it.
    pub n_lost_answer: usize,
    /// ... of which the critic's value dropped.
    pub n_drop_on_lost: usize,
}

impl SignBehaviorReport {
    pub fn rise_rate(&self) -> f64 {
        if self.n_good_extraction == 0 {
            0.0
        } else {
            self.n_rise_on_good as f64 / self.n_good_extraction as f64
        }
    }

    pub fn drop_rate(&self) -> f64 {
        if self.n_lost_answer == 0 {
            0.0
        } else {
            self.n_drop_on_lost as f64 / self.n_lost_answer as f64
        }
    }
}

/// Partitions surfaced pairs into kept vs lost and reports how often the
/// value moved in the expected direction. An exactly-zero delta counts as
/// neither rise nor drop.
pub fn sign_behavior(pairs: &[AssimilatePair]) -> SignBehaviorReport {
    let mut report = SignBehaviorReport {
        schema: METRICS_SCHEMA.to_string(),
        n_good_extraction: 0,
        n_rise_on_good: 0,
        n_lost_answer: 0,
        n_drop_on_lost: 0,
    };
    for p in pairs {
        if !p.surfaced {
            continue;
        }
        let dv = p.v_after - p.v_transient;
        if p.kept {
            report.n_good_extraction += 1;
            if dv > 0.0 {
                report.n_rise_on_good += 1;
            }
        } else {
            report.n_lost_answer += 1;
            if dv < 0.0 {
                report.n_drop_on_lost += 1;
            }
        }
    }
    report
}
