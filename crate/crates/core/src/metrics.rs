//! Detection metrics over deviation scores, where a higher score means
//! "more out-of-distribution". In-distribution examples are the positives.

use crate::deviation::{percentile_nearest_rank, DEFAULT_TARGET_TPR};
use crate::error::{OodError, Result};

fn check_inputs(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(OodError::Empty("no in-distribution scores"));
    }
    if ood.is_empty() {
        return Err(OodError::Empty("no out-of-distribution scores"));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(OodError::NonFinite("NaN score".into()));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Fraction of OOD scores above the nearest-rank 95th percentile of the
/// in-distribution scores.
pub fn tnr_at_95tpr(id: &[f64], ood: &[f64]) -> Result<f64> {
    tnr_at_tpr(id, ood, DEFAULT_TARGET_TPR)
}

pub fn tnr_at_tpr(id: &[f64], ood: &[f64], target_tpr: f64) -> Result<f64> {
    check_inputs(id, ood)?;
    let tau = percentile_nearest_rank(id, target_tpr)?;
    let rejected = ood.iter().filter(|&&v| v > tau).count();
    Ok(rejected as f64 / ood.len() as f64)
}

/// Probability that an OOD score exceeds an in-distribution score, ties
/// counting one half. Computed by binary search over the sorted ID scores,
/// with the pair count kept as an exact integer.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_inputs(id, ood)?;
    let id = sorted(id);
    let mut twice_wins: u128 = 0;
    for &v in ood {
        let below = id.partition_point(|&x| x < v) as u128;
        let at_or_below = id.partition_point(|&x| x <= v) as u128;
        twice_wins += 2 * below + (at_or_below - below);
    }
    Ok(twice_wins as f64 / (2.0 * id.len() as f64 * ood.len() as f64))
}

/// Best balanced accuracy `0.5·P_id(Δ ≤ τ) + 0.5·P_ood(Δ > τ)` over all
/// thresholds. The objective is piecewise constant between distinct pooled
/// scores, so evaluating at each distinct score and at `-∞` is exact.
pub fn detection_accuracy(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_inputs(id, ood)?;
    let id = sorted(id);
    let ood = sorted(ood);
    let (n, m) = (id.len(), ood.len());
    let accuracy = |a: usize, b: usize| 0.5 * (a as f64 / n as f64) + 0.5 * ((m - b) as f64 / m as f64);

    let mut best = accuracy(0, 0);
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let tau = match (id.get(i), ood.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < n && id[i] <= tau {
            i += 1;
        }
        while j < m && ood[j] <= tau {
            j += 1;
        }
        best = best.max(accuracy(i, j));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub tnr_at_95tpr: f64,
    pub auroc: f64,
    pub detection_accuracy: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "id_count,ood_count,tnr_at_95tpr,auroc,dtacc";

    /// One CSV row with the three metrics as percentages to two decimals.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.2},{:.2}",
            self.id_count,
            self.ood_count,
            100.0 * self.tnr_at_95tpr,
            100.0 * self.auroc,
            100.0 * self.detection_accuracy
        )
    }
}

pub fn evaluate(id: &[f64], ood: &[f64]) -> Result<EvalResult> {
    Ok(EvalResult {
        tnr_at_95tpr: tnr_at_95tpr(id, ood)?,
        auroc: auroc(id, ood)?,
        detection_accuracy: detection_accuracy(id, ood)?,
        id_count: id.len(),
        ood_count: ood.len(),
    })
}
