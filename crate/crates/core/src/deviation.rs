//! Scoring of records against a fitted table.
//!
//! Per-feature deviations are summed over every order and feature of a
//! layer to give `δ_l`. Layer deviations are then added up, optionally after
//! dividing each by its mean over a validation set, to give the total
//! deviation `Δ`. A record is flagged out-of-distribution when `Δ > τ`.

use std::fmt;
use std::str::FromStr;

use crate::error::{OodError, Result};
use crate::gram::GramStat;
use crate::ingest::ActivationRecord;
use crate::tables::{StatTable, TableSpec};

/// Floor applied to every denominator.
pub const EPSILON: f64 = 1e-12;

/// Minimum number of in-distribution scores accepted for calibration.
pub const MIN_CALIBRATION_SIZE: usize = 20;

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

#[inline]
fn minmax_unchecked(min: f64, max: f64, value: f64) -> f64 {
    if value < min {
        (min - value) / min.abs().max(EPSILON)
    } else if value > max {
        (value - max) / max.abs().max(EPSILON)
    } else {
        0.0
    }
}

/// Relative excursion of `value` outside the closed interval `[min, max]`.
pub fn deviation_scalar(min: f64, max: f64, value: f64) -> Result<f64> {
    if !min.is_finite() || !max.is_finite() {
        return Err(OodError::InvalidArgument(
            "bounds are unset (empty class sentinel)".into(),
        ));
    }
    if min > max {
        return Err(OodError::InvalidArgument(format!("min {min} exceeds max {max}")));
    }
    Ok(minmax_unchecked(min, max, value))
}

/// Squared standardized distance with the variance floored at [`EPSILON`].
#[inline]
pub fn deviation_gaussian(mean: f64, variance: f64, value: f64) -> f64 {
    let d = value - mean;
    d * d / variance.max(EPSILON)
}

/// Per-`(layer, order)` deviation sums for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationGrid {
    num_orders: usize,
    values: Vec<f64>,
}

impl DeviationGrid {
    pub fn num_layers(&self) -> usize {
        self.values.len() / self.num_orders.max(1)
    }

    pub fn get(&self, layer: usize, order_index: usize) -> f64 {
        self.values[layer * self.num_orders + order_index]
    }

    /// `δ_l` summed over the given order indices (all when `None`).
    pub fn layer_deviations(&self, order_indices: Option<&[usize]>) -> Vec<f64> {
        self.values
            .chunks(self.num_orders)
            .map(|row| match order_indices {
                None => row.iter().sum(),
                Some(ix) => ix.iter().map(|&k| row[k]).sum(),
            })
            .collect()
    }
}

fn check_scorable(table: &StatTable, class: usize) -> Result<()> {
    let spec = table.spec();
    if class >= spec.num_classes {
        return Err(OodError::ClassOutOfRange {
            class,
            num_classes: spec.num_classes,
        });
    }
    if table.counts()[class] == 0 {
        return Err(OodError::EmptyClass { class });
    }
    Ok(())
}

fn slot_sum(table: &StatTable, class: usize, range: std::ops::Range<usize>, values: &[f64]) -> f64 {
    match table {
        StatTable::MinMax(t) => {
            let (mins, maxs) = (&t.class_mins(class)[range.clone()], &t.class_maxs(class)[range]);
            mins.iter()
                .zip(maxs)
                .zip(values)
                .map(|((&lo, &hi), &v)| minmax_unchecked(lo, hi, v))
                .sum()
        }
        StatTable::Gaussian(t) => {
            let (means, vars) = (&t.class_means(class)[range.clone()], &t.class_variances(class)[range]);
            means
                .iter()
                .zip(vars)
                .zip(values)
                .map(|((&m, &s), &v)| deviation_gaussian(m, s, v))
                .sum()
        }
    }
}

/// Deviation contributions of a flattened feature vector, per layer and order.
pub fn deviation_grid(table: &StatTable, class: usize, features: &[f64]) -> Result<DeviationGrid> {
    check_scorable(table, class)?;
    let spec = table.spec();
    if features.len() != spec.features_per_class() {
        return Err(OodError::ShapeMismatch(format!(
            "expected {} features, got {}",
            spec.features_per_class(),
            features.len()
        )));
    }
    let num_orders = spec.orders.len();
    let mut values = Vec::with_capacity(spec.num_layers() * num_orders);
    for l in 0..spec.num_layers() {
        for k in 0..num_orders {
            let r = spec.slot_range(l, k);
            values.push(slot_sum(table, class, r.clone(), &features[r]));
        }
    }
    Ok(DeviationGrid { num_orders, values })
}

/// `δ_l` of one layer from its per-order statistics.
pub fn layer_deviation(stats: &[GramStat], table: &StatTable, class: usize, layer: usize) -> Result<f64> {
    check_scorable(table, class)?;
    let spec: &TableSpec = table.spec();
    if layer >= spec.num_layers() {
        return Err(OodError::ShapeMismatch(format!(
            "layer {layer} out of range for {} layers",
            spec.num_layers()
        )));
    }
    let mut total = 0.0;
    for s in stats {
        if s.variant != spec.variant {
            return Err(OodError::SpecMismatch(format!(
                "stat variant {} does not match table variant {}",
                s.variant, spec.variant
            )));
        }
        let k = spec
            .orders
            .position(s.order)
            .ok_or_else(|| OodError::SpecMismatch(format!("order {} not present in table", s.order)))?;
        let r = spec.slot_range(layer, k);
        if s.values.len() != r.len() {
            return Err(OodError::ShapeMismatch(format!(
                "layer {layer} order {}: {} values, table expects {}",
                s.order,
                s.values.len(),
                r.len()
            )));
        }
        total += slot_sum(table, class, r, &s.values);
    }
    Ok(total)
}

/// Layer deviations `δ_l` of a record against its predicted class.
pub fn score_record(table: &StatTable, record: &ActivationRecord) -> Result<Vec<f64>> {
    check_scorable(table, record.predicted_class)?;
    let features = table.spec().record_features(record)?;
    Ok(deviation_grid(table, record.predicted_class, &features)?.layer_deviations(None))
}

/// How layer deviations are combined into a total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Normalized,
    Unnormalized,
}

impl Aggregation {
    pub const ALL: [Aggregation; 2] = [Aggregation::Normalized, Aggregation::Unnormalized];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Normalized => "norm",
            Aggregation::Unnormalized => "unnorm",
        }
    }
}

impl FromStr for Aggregation {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| OodError::InvalidArgument(format!("unknown aggregation {s:?}")))
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-layer mean deviation over a validation set, shared by all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerVector {
    expected: Vec<f64>,
    clamped: Vec<bool>,
    pub epsilon: f64,
}

impl NormalizerVector {
    /// Arithmetic mean of each layer's deviation, floored at [`EPSILON`].
    pub fn from_layer_deviations<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut sums: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for row in rows {
            if n == 0 {
                sums = vec![0.0; row.len()];
            } else if row.len() != sums.len() {
                return Err(OodError::ShapeMismatch(
                    "validation deviations have ragged layers".into(),
                ));
            }
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(OodError::Empty("validation set has no records"));
        }
        let mut clamped = Vec::with_capacity(sums.len());
        let expected = sums
            .into_iter()
            .map(|s| {
                let mean = s / n as f64;
                let keep = mean >= EPSILON;
                clamped.push(!keep);
                if keep {
                    mean
                } else {
                    EPSILON
                }
            })
            .collect();
        Ok(Self {
            expected,
            clamped,
            epsilon: EPSILON,
        })
    }

    pub fn expected(&self) -> &[f64] {
        &self.expected
    }

    /// Layers whose mean deviation fell below the floor.
    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }

    pub fn len(&self) -> usize {
        self.expected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expected.is_empty()
    }

    pub fn select(&self, layers: &[usize]) -> Self {
        Self {
            expected: layers.iter().map(|&l| self.expected[l]).collect(),
            clamped: layers.iter().map(|&l| self.clamped[l]).collect(),
            epsilon: self.epsilon,
        }
    }
}

/// Normalizer from scoring every validation record against `table`.
pub fn compute_normalizer<I>(table: &StatTable, validation: I) -> Result<NormalizerVector>
where
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    let rows = validation
        .into_iter()
        .map(|r| score_record(table, &r?))
        .collect::<Result<Vec<_>>>()?;
    NormalizerVector::from_layer_deviations(rows.iter().map(Vec::as_slice))
}

/// `Σ_l δ_l / E[δ_l]` or `Σ_l δ_l`.
pub fn total_deviation(
    layer_deviations: &[f64],
    normalizer: Option<&NormalizerVector>,
    mode: Aggregation,
) -> Result<f64> {
    match mode {
        Aggregation::Unnormalized => Ok(layer_deviations.iter().sum()),
        Aggregation::Normalized => {
            let norm = normalizer.ok_or_else(|| {
                OodError::InvalidArgument("normalized aggregation needs a validation normalizer".into())
            })?;
            if norm.len() != layer_deviations.len() {
                return Err(OodError::ShapeMismatch(format!(
                    "{} layer deviations, normalizer has {} layers",
                    layer_deviations.len(),
                    norm.len()
                )));
            }
            Ok(layer_deviations.iter().zip(norm.expected()).map(|(d, e)| d / e).sum())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub predicted_class: usize,
    pub layer_deviations: Vec<f64>,
    pub total_deviation: f64,
}

impl ScoredExample {
    pub fn new(
        predicted_class: usize,
        layer_deviations: Vec<f64>,
        normalizer: Option<&NormalizerVector>,
        mode: Aggregation,
    ) -> Result<Self> {
        let total_deviation = total_deviation(&layer_deviations, normalizer, mode)?;
        Ok(Self {
            predicted_class,
            layer_deviations,
            total_deviation,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub target_tpr: f64,
    pub calibration_size: usize,
}

/// 1-based nearest rank `ceil(target · n)`, clamped to `[1, n]`, tolerant of
/// the rounding error in `target · n` when the product is an integer.
pub fn nearest_rank(target: f64, n: usize) -> usize {
    let x = target * n as f64;
    let nearest = x.round();
    let rank = if (x - nearest).abs() <= 1e-9 * (n as f64).max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (rank as usize).clamp(1, n.max(1))
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile_nearest_rank(values: &[f64], target: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(OodError::Empty("no values for percentile"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(OodError::NonFinite("NaN score".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(target, sorted.len()) - 1])
}

/// Threshold such that at least `target_tpr` of the calibration scores are ≤ τ.
pub fn calibrate_threshold(id_deviations: &[f64], target_tpr: f64) -> Result<Threshold> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(OodError::InvalidArgument(format!(
            "target TPR must be in (0, 1], got {target_tpr}"
        )));
    }
    if id_deviations.len() < MIN_CALIBRATION_SIZE {
        return Err(OodError::TooFewValues {
            needed: MIN_CALIBRATION_SIZE,
            got: id_deviations.len(),
        });
    }
    Ok(Threshold {
        tau: percentile_nearest_rank(id_deviations, target_tpr)?,
        target_tpr,
        calibration_size: id_deviations.len(),
    })
}

#[inline]
pub fn is_ood(total_deviation: f64, threshold: &Threshold) -> bool {
    total_deviation > threshold.tau
}
