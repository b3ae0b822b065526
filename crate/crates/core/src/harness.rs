//! End-to-end experiment driver: fit, score, calibrate and evaluate, the
//! twelve-cell ablation grid, and single-order / single-block sweeps.
//!
//! Tables are fit once per configuration. Each repetition only redraws the
//! validation split of the in-distribution test set, which changes the
//! normalizer and the held-out test partition.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::deviation::{deviation_grid, score_record, Aggregation, DeviationGrid, NormalizerVector, ScoredExample};
use crate::error::{OodError, Result};
use crate::fsutil::write_atomic;
use crate::gram::{OrderSet, StatVariant};
use crate::ingest::{read_all, split_indices, ActivationRecord, GactLayout};
use crate::metrics::{evaluate, EvalResult};
use crate::report::{fmt_f64, save_scores};
use crate::tables::{compute_features, load_table, save_table, MetricKind, StatTable, TableSpec};

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.10;

pub fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// Parses `0-9`, `1,5,7` or mixtures.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || OodError::InvalidArgument(format!("cannot parse seed list {s:?}"));
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once('-') {
            let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
            if lo > hi {
                return Err(bad());
            }
            seeds.extend(lo..=hi);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// Parses a comma list of layer indices.
pub fn parse_layers(s: &str) -> Result<Vec<usize>> {
    let bad = || OodError::InvalidArgument(format!("cannot parse layer list {s:?}"));
    let v = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<Vec<usize>>>()?;
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: StatVariant,
    pub metric: MetricKind,
    pub aggregation: Aggregation,
    pub orders: OrderSet,
    /// Restrict scoring to these layers; all layers when `None`.
    pub layers: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub validation_fraction: f64,
}

impl RunConfig {
    /// Row-sum statistics, min/max bounds, normalized total, orders 1–10.
    pub fn headline() -> Self {
        Self {
            variant: StatVariant::FullRowSums,
            metric: MetricKind::MinMax,
            aggregation: Aggregation::Normalized,
            orders: OrderSet::default(),
            layers: None,
            seeds: default_seeds(),
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
        }
    }

    pub fn is_headline(&self) -> bool {
        self.variant == StatVariant::FullRowSums
            && self.metric == MetricKind::MinMax
            && self.aggregation == Aggregation::Normalized
    }

    pub fn repetitions(&self) -> usize {
        self.seeds.len()
    }
}

/// In-memory train, in-distribution test and OOD test sets.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub layout: GactLayout,
    pub train: Vec<ActivationRecord>,
    pub id_test: Vec<ActivationRecord>,
    pub ood_test: Vec<ActivationRecord>,
}

impl Benchmark {
    pub fn load(train: impl AsRef<Path>, id_test: impl AsRef<Path>, ood_test: impl AsRef<Path>) -> Result<Self> {
        let (layout, train) = read_all(train)?;
        let (id_layout, id_test) = read_all(id_test)?;
        let (ood_layout, ood_test) = read_all(ood_test)?;
        for (name, other) in [("id_test", &id_layout), ("ood_test", &ood_layout)] {
            if other.num_classes != layout.num_classes || other.layer_shapes != layout.layer_shapes {
                return Err(OodError::ShapeMismatch(format!(
                    "{name} layout differs from train layout"
                )));
            }
        }
        Ok(Self {
            layout,
            train,
            id_test,
            ood_test,
        })
    }
}

/// Mean and sample standard deviation of a metric across repetitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sums in sorted order so the result does not depend on seed order.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() < 2 {
            0.0
        } else {
            let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
            sq.sort_by(f64::total_cmp);
            (sq.iter().sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalResult>,
    pub tnr: MeanStd,
    pub auroc: MeanStd,
    pub dtacc: MeanStd,
}

impl RunSummary {
    fn new(seeds: Vec<u64>, per_seed: Vec<EvalResult>) -> Self {
        let col = |f: fn(&EvalResult) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            tnr: col(|r| r.tnr_at_95tpr),
            auroc: col(|r| r.auroc),
            dtacc: col(|r| r.detection_accuracy),
            seeds,
            per_seed,
        }
    }

    pub const CSV_COLUMNS: &'static str = "reps,tnr_mean,tnr_std,auroc_mean,auroc_std,dtacc_mean,dtacc_std";

    /// Metrics as percentages to two decimals.
    pub fn csv_fields(&self) -> String {
        let pct = |m: MeanStd| format!("{:.2},{:.2}", 100.0 * m.mean, 100.0 * m.std);
        format!(
            "{},{},{},{}",
            self.per_seed.len(),
            pct(self.tnr),
            pct(self.auroc),
            pct(self.dtacc)
        )
    }
}

/// A fitted table with deviation grids for every train, ID and OOD record.
pub struct ScoredBenchmark {
    pub table: StatTable,
    pub train: Vec<DeviationGrid>,
    pub id_test: Vec<DeviationGrid>,
    pub ood_test: Vec<DeviationGrid>,
}

fn grids(table: &StatTable, records: &[ActivationRecord], features: &[Vec<f64>]) -> Result<Vec<DeviationGrid>> {
    records
        .par_iter()
        .zip(features)
        .map(|(r, f)| deviation_grid(table, r.predicted_class, f))
        .collect()
}

/// Statistic features of a benchmark for one `(variant, orders)` choice.
pub struct BenchmarkFeatures {
    pub spec: TableSpec,
    train: Vec<Vec<f64>>,
    id_test: Vec<Vec<f64>>,
    ood_test: Vec<Vec<f64>>,
}

impl BenchmarkFeatures {
    pub fn compute(bench: &Benchmark, variant: StatVariant, orders: &OrderSet) -> Result<Self> {
        let spec = TableSpec::from_layout(&bench.layout, orders.clone(), variant)?;
        Ok(Self {
            train: compute_features(&spec, &bench.train)?,
            id_test: compute_features(&spec, &bench.id_test)?,
            ood_test: compute_features(&spec, &bench.ood_test)?,
            spec,
        })
    }

    pub fn score(&self, bench: &Benchmark, metric: MetricKind) -> Result<ScoredBenchmark> {
        let table = fit_table(metric, self.spec.clone(), &bench.train, &self.train)?;
        Ok(ScoredBenchmark {
            train: grids(&table, &bench.train, &self.train)?,
            id_test: grids(&table, &bench.id_test, &self.id_test)?,
            ood_test: grids(&table, &bench.ood_test, &self.ood_test)?,
            table,
        })
    }
}

/// Fits a table from precomputed features, visiting records in input order.
pub fn fit_table(
    metric: MetricKind,
    spec: TableSpec,
    records: &[ActivationRecord],
    features: &[Vec<f64>],
) -> Result<StatTable> {
    let classes: Vec<usize> = records.iter().map(|r| r.predicted_class).collect();
    StatTable::fit_features(metric, spec, &classes, features)
}

/// Which layers and orders a run sums over.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub layers: Option<Vec<usize>>,
    pub order_indices: Option<Vec<usize>>,
}

impl Selection {
    fn layer_deviations(&self, grid: &DeviationGrid) -> Vec<f64> {
        let all = grid.layer_deviations(self.order_indices.as_deref());
        match &self.layers {
            None => all,
            Some(ls) => ls.iter().map(|&l| all[l]).collect(),
        }
    }

    fn validate(&self, num_layers: usize, num_orders: usize) -> Result<()> {
        if let Some(ls) = &self.layers {
            if ls.is_empty() {
                return Err(OodError::InvalidArgument("empty layer selection".into()));
            }
            if let Some(&l) = ls.iter().find(|&&l| l >= num_layers) {
                return Err(OodError::InvalidArgument(format!(
                    "layer {l} out of range for {num_layers} layers"
                )));
            }
        }
        if let Some(ix) = &self.order_indices {
            if ix.is_empty() || ix.iter().any(|&k| k >= num_orders) {
                return Err(OodError::InvalidArgument("bad order selection".into()));
            }
        }
        Ok(())
    }
}

impl ScoredBenchmark {
    /// True when every training record has zero deviation at every layer.
    pub fn train_zero(&self) -> bool {
        self.train
            .iter()
            .all(|g| g.layer_deviations(None).iter().all(|&d| d == 0.0))
    }

    /// Runs the repetition protocol for one aggregation mode.
    pub fn evaluate(
        &self,
        aggregation: Aggregation,
        selection: &Selection,
        seeds: &[u64],
        validation_fraction: f64,
    ) -> Result<RunSummary> {
        let spec = self.table.spec();
        selection.validate(spec.num_layers(), spec.orders.len())?;
        let id_rows: Vec<Vec<f64>> = self.id_test.iter().map(|g| selection.layer_deviations(g)).collect();
        let ood_rows: Vec<Vec<f64>> = self.ood_test.iter().map(|g| selection.layer_deviations(g)).collect();
        let per_seed = seeds
            .iter()
            .map(|&seed| {
                let split = split_indices(id_rows.len(), validation_fraction, seed)?;
                let normalizer = match aggregation {
                    Aggregation::Normalized => Some(NormalizerVector::from_layer_deviations(
                        split.validation.iter().map(|&i| id_rows[i].as_slice()),
                    )?),
                    Aggregation::Unnormalized => None,
                };
                let total = |row: &Vec<f64>| crate::deviation::total_deviation(row, normalizer.as_ref(), aggregation);
                let id: Vec<f64> = split.test.iter().map(|&i| total(&id_rows[i])).collect::<Result<_>>()?;
                let ood: Vec<f64> = ood_rows.iter().map(total).collect::<Result<_>>()?;
                evaluate(&id, &ood)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunSummary::new(seeds.to_vec(), per_seed))
    }
}

/// Fit, score and evaluate one configuration.
pub fn run(bench: &Benchmark, config: &RunConfig) -> Result<RunSummary> {
    let feats = BenchmarkFeatures::compute(bench, config.variant, &config.orders)?;
    let scored = feats.score(bench, config.metric)?;
    let selection = Selection {
        layers: config.layers.clone(),
        order_indices: None,
    };
    scored.evaluate(
        config.aggregation,
        &selection,
        &config.seeds,
        config.validation_fraction,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: StatVariant,
    pub metric: MetricKind,
    pub aggregation: Aggregation,
    pub summary: RunSummary,
    /// Min/max rows only: every training record scored zero.
    pub train_zero: Option<bool>,
}

impl AblationRow {
    pub fn is_headline(&self) -> bool {
        self.variant == StatVariant::FullRowSums
            && self.metric == MetricKind::MinMax
            && self.aggregation == Aggregation::Normalized
    }
}

pub const ABLATION_VARIANTS: [StatVariant; 3] = [
    StatVariant::Diagonal,
    StatVariant::OffDiagonalRowSums,
    StatVariant::FullRowSums,
];

/// The 3 × 2 × 2 grid over statistic, metric and aggregation.
pub fn ablate(
    bench: &Benchmark,
    orders: &OrderSet,
    seeds: &[u64],
    validation_fraction: f64,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(12);
    for variant in ABLATION_VARIANTS {
        let feats = BenchmarkFeatures::compute(bench, variant, orders)?;
        for metric in MetricKind::ALL {
            let scored = feats.score(bench, metric)?;
            let train_zero = (metric == MetricKind::MinMax).then(|| scored.train_zero());
            for aggregation in Aggregation::ALL {
                let summary = scored.evaluate(aggregation, &Selection::default(), seeds, validation_fraction)?;
                rows.push(AblationRow {
                    variant,
                    metric,
                    aggregation,
                    summary,
                    train_zero,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(w: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "stat,metric,agg,{},train_zero,note", RunSummary::CSV_COLUMNS)?;
    for r in rows {
        let flag = match r.train_zero {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "n/a",
        };
        let note = if r.is_headline() { "headline" } else { "" };
        writeln!(
            w,
            "{},{},{},{},{flag},{note}",
            r.variant,
            r.metric,
            r.aggregation,
            r.summary.csv_fields()
        )?;
    }
    Ok(())
}

/// Per-seed metrics of every ablation cell, in seed-list order.
pub fn write_ablation_raw_csv<W: Write>(w: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "stat,metric,agg,seed,tnr_at_95tpr,auroc,dtacc")?;
    for r in rows {
        for (seed, e) in r.summary.seeds.iter().zip(&r.summary.per_seed) {
            writeln!(
                w,
                "{},{},{},{seed},{},{},{}",
                r.variant,
                r.metric,
                r.aggregation,
                fmt_f64(e.tnr_at_95tpr),
                fmt_f64(e.auroc),
                fmt_f64(e.detection_accuracy)
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Order,
    Layer,
}

impl FromStr for SweepAxis {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(SweepAxis::Order),
            "layer" => Ok(SweepAxis::Layer),
            _ => Err(OodError::InvalidArgument(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Order => "order",
            SweepAxis::Layer => "layer",
        })
    }
}

/// A named block of layers for layer sweeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGroup {
    pub name: String,
    pub layers: Vec<usize>,
}

/// Parses `name:0,1;other:2,3`. A group without a name is called `blockN`.
pub fn parse_layer_groups(s: &str) -> Result<Vec<LayerGroup>> {
    let groups = s
        .split(';')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .enumerate()
        .map(|(i, g)| {
            let (name, list) = match g.split_once(':') {
                Some((n, l)) => (n.trim().to_string(), l),
                None => (format!("block{i}"), g),
            };
            Ok(LayerGroup {
                name,
                layers: parse_layers(list)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if groups.is_empty() {
        return Err(OodError::InvalidArgument(format!("cannot parse layer groups {s:?}")));
    }
    Ok(groups)
}

/// One group per layer.
pub fn singleton_groups(num_layers: usize) -> Vec<LayerGroup> {
    (0..num_layers)
        .map(|l| LayerGroup {
            name: format!("layer{l}"),
            layers: vec![l],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub label: String,
    pub summary: RunSummary,
}

/// Order axis: one run per single order using all selected layers. Layer
/// axis: one run per layer group using all orders.
pub fn sweep(
    bench: &Benchmark,
    axis: SweepAxis,
    config: &RunConfig,
    groups: Option<&[LayerGroup]>,
) -> Result<Vec<SweepRow>> {
    let feats = BenchmarkFeatures::compute(bench, config.variant, &config.orders)?;
    let scored = feats.score(bench, config.metric)?;
    let eval = |sel: Selection| scored.evaluate(config.aggregation, &sel, &config.seeds, config.validation_fraction);
    match axis {
        SweepAxis::Order => config
            .orders
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                Ok(SweepRow {
                    axis,
                    label: format!("p={p}"),
                    summary: eval(Selection {
                        layers: config.layers.clone(),
                        order_indices: Some(vec![k]),
                    })?,
                })
            })
            .collect(),
        SweepAxis::Layer => {
            let owned;
            let groups = match groups {
                Some(g) => g,
                None => {
                    owned = singleton_groups(bench.layout.num_layers());
                    &owned
                }
            };
            groups
                .iter()
                .map(|g| {
                    Ok(SweepRow {
                        axis,
                        label: g.name.clone(),
                        summary: eval(Selection {
                            layers: Some(g.layers.clone()),
                            order_indices: None,
                        })?,
                    })
                })
                .collect()
        }
    }
}

pub fn write_sweep_csv<W: Write>(w: &mut W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "axis,slice,{}", RunSummary::CSV_COLUMNS)?;
    for r in rows {
        writeln!(w, "{},{},{}", r.axis, r.label, r.summary.csv_fields())?;
    }
    Ok(())
}

/// `fit`: fits a table on a training file and writes it as GBND.
pub fn cmd_fit(
    train: impl AsRef<Path>,
    variant: StatVariant,
    metric: MetricKind,
    orders: &OrderSet,
    out: impl AsRef<Path>,
) -> Result<StatTable> {
    let (layout, records) = read_all(train)?;
    if records.is_empty() {
        return Err(OodError::Empty("training file has no records"));
    }
    let spec = TableSpec::from_layout(&layout, orders.clone(), variant)?;
    let features = compute_features(&spec, &records)?;
    let table = fit_table(metric, spec, &records, &features)?;
    save_table(out, &table)?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub scored: Vec<ScoredExample>,
    pub layers: Vec<usize>,
    pub normalizer: Option<NormalizerVector>,
    pub warnings: Vec<String>,
}

/// `score`: layer and total deviations for every record of `data`.
pub fn cmd_score(
    table: impl AsRef<Path>,
    data: impl AsRef<Path>,
    validation: Option<&Path>,
    aggregation: Aggregation,
    layers: Option<&[usize]>,
    out: Option<&Path>,
) -> Result<ScoreReport> {
    let table = load_table(table)?;
    let spec = table.spec();
    let layers: Vec<usize> = layers.map_or_else(|| (0..spec.num_layers()).collect(), <[usize]>::to_vec);
    Selection {
        layers: Some(layers.clone()),
        order_indices: None,
    }
    .validate(spec.num_layers(), spec.orders.len())?;

    let mut warnings = Vec::new();
    let normalizer = match (aggregation, validation) {
        (Aggregation::Normalized, None) => {
            return Err(OodError::InvalidArgument(
                "normalized scoring needs a validation file".into(),
            ))
        }
        (Aggregation::Normalized, Some(va)) => {
            let (_, va_records) = read_all(va)?;
            let rows = score_all(&table, &va_records)?;
            let full = NormalizerVector::from_layer_deviations(rows.iter().map(Vec::as_slice))?;
            let n = full.select(&layers);
            for (l, clamped) in layers.iter().zip(n.clamped()) {
                if *clamped {
                    warnings.push(format!("layer {l}: validation mean deviation is zero; clamped"));
                }
            }
            Some(n)
        }
        (Aggregation::Unnormalized, Some(_)) => {
            warnings.push("unnormalized aggregation: validation file ignored".into());
            None
        }
        (Aggregation::Unnormalized, None) => None,
    };

    let (_, records) = read_all(data)?;
    let rows = score_all(&table, &records)?;
    let scored = records
        .iter()
        .zip(rows)
        .map(|(r, row)| {
            let selected: Vec<f64> = layers.iter().map(|&l| row[l]).collect();
            ScoredExample::new(r.predicted_class, selected, normalizer.as_ref(), aggregation)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(out) = out {
        save_scores(out, &layers, &scored)?;
    }
    Ok(ScoreReport {
        scored,
        layers,
        normalizer,
        warnings,
    })
}

fn score_all(table: &StatTable, records: &[ActivationRecord]) -> Result<Vec<Vec<f64>>> {
    records.par_iter().map(|r| score_record(table, r)).collect()
}

/// `eval`: metrics from two scores CSVs.
pub fn cmd_eval(id_scores: impl AsRef<Path>, ood_scores: impl AsRef<Path>, out: Option<&Path>) -> Result<EvalResult> {
    let id = crate::report::load_total_deviations(id_scores)?;
    let ood = crate::report::load_total_deviations(ood_scores)?;
    let result = evaluate(&id, &ood)?;
    if let Some(out) = out {
        crate::report::save_eval(out, &result)?;
    }
    Ok(result)
}

/// `ablate`: the twelve-row grid as CSV.
pub fn cmd_ablate(
    train: impl AsRef<Path>,
    id_test: impl AsRef<Path>,
    ood_test: impl AsRef<Path>,
    orders: &OrderSet,
    seeds: &[u64],
    out: &Path,
    raw_out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let bench = Benchmark::load(train, id_test, ood_test)?;
    let rows = ablate(&bench, orders, seeds, DEFAULT_VALIDATION_FRACTION)?;
    write_atomic(out, |w| write_ablation_csv(w, &rows))?;
    if let Some(raw) = raw_out {
        write_atomic(raw, |w| write_ablation_raw_csv(w, &rows))?;
    }
    Ok(rows)
}

/// `sweep`: one row per order or per layer group.
pub fn cmd_sweep(
    axis: SweepAxis,
    train: impl AsRef<Path>,
    id_test: impl AsRef<Path>,
    ood_test: impl AsRef<Path>,
    config: &RunConfig,
    groups: Option<&[LayerGroup]>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let bench = Benchmark::load(train, id_test, ood_test)?;
    let rows = sweep(&bench, axis, config, groups)?;
    write_atomic(out, |w| write_sweep_csv(w, &rows))?;
    Ok(rows)
}

/// `split`: writes `validation.gact` and `test.gact` for one seed.
pub fn cmd_split(input: impl AsRef<Path>, fraction: f64, seed: u64, out_dir: &Path) -> Result<(usize, usize)> {
    let (layout, records) = read_all(input)?;
    let split = split_indices(records.len(), fraction, seed)?;
    let (va, te) = split.select(&records);
    std::fs::create_dir_all(out_dir)?;
    crate::ingest::write_activations(out_dir.join("validation.gact"), &layout, &va)?;
    crate::ingest::write_activations(out_dir.join("test.gact"), &layout, &te)?;
    Ok((va.len(), te.len()))
}
