//! Class-conditional statistic tables.
//!
//! A table holds one cell per `(class, layer, order, feature)`. Cells are
//! stored densely per class in layer-major, then order, then feature order;
//! layers keep their own feature lengths, so the layout is ragged rather
//! than padded to the widest layer.
//!
//! Tables are conditioned on the *predicted* class of each record.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, ErrorKind, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{FormatError, OodError, Result};
use crate::fsutil::write_atomic;
use crate::gram::{append_layer_features, OrderSet, StatVariant};
use crate::ingest::{ActivationRecord, GactLayout};

/// Deviation metric a table supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    MinMax,
    Gaussian,
}

impl MetricKind {
    pub const ALL: [MetricKind; 2] = [MetricKind::MinMax, MetricKind::Gaussian];

    pub fn code(self) -> u8 {
        match self {
            MetricKind::MinMax => 0,
            MetricKind::Gaussian => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MinMax => "minmax",
            MetricKind::Gaussian => "gaussian",
        }
    }
}

impl FromStr for MetricKind {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| OodError::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of a statistic table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSpec {
    pub num_classes: usize,
    pub orders: OrderSet,
    pub variant: StatVariant,
    feature_lens: Vec<usize>,
    layer_offsets: Vec<usize>,
    features_per_class: usize,
}

impl TableSpec {
    pub fn new(num_classes: usize, orders: OrderSet, variant: StatVariant, feature_lens: Vec<usize>) -> Result<Self> {
        if num_classes == 0 {
            return Err(OodError::InvalidArgument("table needs at least one class".into()));
        }
        if orders.is_empty() {
            return Err(OodError::InvalidArgument("table needs at least one order".into()));
        }
        if feature_lens.is_empty() || feature_lens.contains(&0) {
            return Err(OodError::InvalidArgument(
                "table needs at least one layer and non-empty layers".into(),
            ));
        }
        let mut layer_offsets = Vec::with_capacity(feature_lens.len());
        let mut acc = 0;
        for &len in &feature_lens {
            layer_offsets.push(acc);
            acc += len * orders.len();
        }
        Ok(Self {
            num_classes,
            orders,
            variant,
            feature_lens,
            layer_offsets,
            features_per_class: acc,
        })
    }

    /// Spec for records laid out as `layout`.
    pub fn from_layout(layout: &GactLayout, orders: OrderSet, variant: StatVariant) -> Result<Self> {
        let lens = layout
            .layer_shapes
            .iter()
            .map(|&(c, _)| variant.feature_len(c))
            .collect();
        Self::new(layout.num_classes, orders, variant, lens)
    }

    pub fn num_layers(&self) -> usize {
        self.feature_lens.len()
    }

    pub fn feature_lens(&self) -> &[usize] {
        &self.feature_lens
    }

    /// Total features per class (N_S).
    pub fn features_per_class(&self) -> usize {
        self.features_per_class
    }

    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        let start = self.layer_offsets[layer];
        start..start + self.feature_lens[layer] * self.orders.len()
    }

    /// Cells of one `(layer, order index)` slot within a class block.
    pub fn slot_range(&self, layer: usize, order_index: usize) -> Range<usize> {
        let len = self.feature_lens[layer];
        let start = self.layer_offsets[layer] + order_index * len;
        start..start + len
    }

    fn class_range(&self, class: usize) -> Range<usize> {
        class * self.features_per_class..(class + 1) * self.features_per_class
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(OodError::ClassOutOfRange {
                class,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Flattened statistic vector of a record, in table cell order.
    pub fn record_features(&self, record: &ActivationRecord) -> Result<Vec<f64>> {
        self.check_class(record.predicted_class)?;
        if record.layers.len() != self.num_layers() {
            return Err(OodError::ShapeMismatch(format!(
                "record has {} layers, table has {}",
                record.layers.len(),
                self.num_layers()
            )));
        }
        let mut out = Vec::with_capacity(self.features_per_class);
        for (l, fm) in record.layers.iter().enumerate() {
            let len = self.variant.feature_len(fm.channels());
            if len != self.feature_lens[l] {
                return Err(OodError::ShapeMismatch(format!(
                    "layer {l} yields {len} features, table expects {}",
                    self.feature_lens[l]
                )));
            }
            append_layer_features(fm, &self.orders, self.variant, l, &mut out)?;
        }
        Ok(out)
    }
}

/// Statistic vectors of `records`, computed in parallel, in input order.
pub fn compute_features(spec: &TableSpec, records: &[ActivationRecord]) -> Result<Vec<Vec<f64>>> {
    records.par_iter().map(|r| spec.record_features(r)).collect()
}

const CHUNK: usize = 64;

/// Per-class element-wise minima and maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsTable {
    spec: TableSpec,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    counts: Vec<u64>,
}

impl BoundsTable {
    /// Table with no observations: `+∞` minima and `-∞` maxima.
    pub fn empty(spec: TableSpec) -> Self {
        let n = spec.num_classes * spec.features_per_class;
        Self {
            mins: vec![f64::INFINITY; n],
            maxs: vec![f64::NEG_INFINITY; n],
            counts: vec![0; spec.num_classes],
            spec,
        }
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn class_mins(&self, class: usize) -> &[f64] {
        &self.mins[self.spec.class_range(class)]
    }

    pub fn class_maxs(&self, class: usize) -> &[f64] {
        &self.maxs[self.spec.class_range(class)]
    }

    /// Widens the bounds of `class` to include `features`.
    pub fn observe(&mut self, class: usize, features: &[f64]) -> Result<()> {
        self.spec.check_class(class)?;
        if features.len() != self.spec.features_per_class {
            return Err(OodError::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.spec.features_per_class,
                features.len()
            )));
        }
        let range = self.spec.class_range(class);
        for ((lo, hi), &v) in self.mins[range.clone()]
            .iter_mut()
            .zip(&mut self.maxs[range])
            .zip(features)
        {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
        self.counts[class] += 1;
        Ok(())
    }

    pub fn observe_record(&mut self, record: &ActivationRecord) -> Result<()> {
        let f = self.spec.record_features(record)?;
        self.observe(record.predicted_class, &f)
    }

    /// Element-wise min of minima, max of maxima, sum of counts.
    pub fn merge(&self, other: &BoundsTable) -> Result<BoundsTable> {
        if self.spec != other.spec {
            return Err(OodError::SpecMismatch(
                "cannot merge bounds tables with different specs".into(),
            ));
        }
        Ok(BoundsTable {
            spec: self.spec.clone(),
            mins: self.mins.iter().zip(&other.mins).map(|(a, b)| a.min(*b)).collect(),
            maxs: self.maxs.iter().zip(&other.maxs).map(|(a, b)| a.max(*b)).collect(),
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }

    /// Fits from precomputed features, `classes[i]` being the class of `features[i]`.
    pub fn fit_features(spec: TableSpec, classes: &[usize], features: &[Vec<f64>]) -> Result<Self> {
        let mut t = Self::empty(spec);
        for (&c, f) in classes.iter().zip(features) {
            t.observe(c, f)?;
        }
        Ok(t)
    }
}

/// Fits min/max bounds over a record stream.
pub fn fit_bounds_stream<I>(spec: TableSpec, records: I) -> Result<BoundsTable>
where
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    let mut table = BoundsTable::empty(spec);
    let mut seen = 0u64;
    for r in records {
        table.observe_record(&r?)?;
        seen += 1;
    }
    if seen == 0 {
        return Err(OodError::Empty("training set has no records"));
    }
    Ok(table)
}

/// Fits min/max bounds over in-memory records: fixed-size chunks are fit in
/// parallel and merged left to right.
pub fn fit_bounds(spec: TableSpec, records: &[ActivationRecord]) -> Result<BoundsTable> {
    if records.is_empty() {
        return Err(OodError::Empty("training set has no records"));
    }
    let parts: Vec<BoundsTable> = records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut t = BoundsTable::empty(spec.clone());
            for r in chunk {
                t.observe_record(r)?;
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let first = iter.next().expect("non-empty");
    iter.try_fold(first, |acc, t| acc.merge(&t))
}

/// Free-function form of [`BoundsTable::merge`].
pub fn merge_bounds(a: &BoundsTable, b: &BoundsTable) -> Result<BoundsTable> {
    a.merge(b)
}

/// Per-class running mean and sum of squared deviations.
#[derive(Debug, Clone)]
struct MomentsAccumulator {
    spec: TableSpec,
    means: Vec<f64>,
    m2: Vec<f64>,
    counts: Vec<u64>,
}

impl MomentsAccumulator {
    fn new(spec: TableSpec) -> Self {
        let n = spec.num_classes * spec.features_per_class;
        Self {
            means: vec![0.0; n],
            m2: vec![0.0; n],
            counts: vec![0; spec.num_classes],
            spec,
        }
    }

    fn observe(&mut self, class: usize, features: &[f64]) -> Result<()> {
        self.spec.check_class(class)?;
        if features.len() != self.spec.features_per_class {
            return Err(OodError::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.spec.features_per_class,
                features.len()
            )));
        }
        self.counts[class] += 1;
        let n = self.counts[class] as f64;
        let range = self.spec.class_range(class);
        for ((mean, m2), &x) in self.means[range.clone()]
            .iter_mut()
            .zip(&mut self.m2[range])
            .zip(features)
        {
            let d = x - *mean;
            *mean += d / n;
            *m2 += d * (x - *mean);
        }
        Ok(())
    }

    fn merge(mut self, other: &MomentsAccumulator) -> Self {
        let per = self.spec.features_per_class;
        for c in 0..self.spec.num_classes {
            let (na, nb) = (self.counts[c], other.counts[c]);
            if nb == 0 {
                continue;
            }
            let range = c * per..(c + 1) * per;
            if na == 0 {
                self.means[range.clone()].copy_from_slice(&other.means[range.clone()]);
                self.m2[range.clone()].copy_from_slice(&other.m2[range]);
            } else {
                let (fa, fb) = (na as f64, nb as f64);
                let n = fa + fb;
                for i in range {
                    let d = other.means[i] - self.means[i];
                    self.means[i] += d * fb / n;
                    self.m2[i] += other.m2[i] + d * d * fa * fb / n;
                }
            }
            self.counts[c] = na + nb;
        }
        self
    }

    fn finish(self) -> MomentsTable {
        let per = self.spec.features_per_class;
        let mut variances = self.m2;
        for (c, &n) in self.counts.iter().enumerate() {
            for v in &mut variances[c * per..(c + 1) * per] {
                *v = if n == 0 { 0.0 } else { (*v / n as f64).max(0.0) };
            }
        }
        MomentsTable {
            spec: self.spec,
            means: self.means,
            variances,
            counts: self.counts,
        }
    }
}

/// Per-class means and population variances. Classes without observations
/// hold zeros and are rejected at scoring time.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentsTable {
    spec: TableSpec,
    means: Vec<f64>,
    variances: Vec<f64>,
    counts: Vec<u64>,
}

impl MomentsTable {
    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn class_means(&self, class: usize) -> &[f64] {
        &self.means[self.spec.class_range(class)]
    }

    pub fn class_variances(&self, class: usize) -> &[f64] {
        &self.variances[self.spec.class_range(class)]
    }

    fn accumulator(&self) -> MomentsAccumulator {
        let per = self.spec.features_per_class;
        let mut m2 = self.variances.clone();
        for (c, &n) in self.counts.iter().enumerate() {
            for v in &mut m2[c * per..(c + 1) * per] {
                *v *= n as f64;
            }
        }
        MomentsAccumulator {
            spec: self.spec.clone(),
            means: self.means.clone(),
            m2,
            counts: self.counts.clone(),
        }
    }

    /// Pairwise combination of two moment tables over disjoint record sets.
    pub fn merge(&self, other: &MomentsTable) -> Result<MomentsTable> {
        if self.spec != other.spec {
            return Err(OodError::SpecMismatch(
                "cannot merge moments tables with different specs".into(),
            ));
        }
        Ok(self.accumulator().merge(&other.accumulator()).finish())
    }

    pub fn fit_features(spec: TableSpec, classes: &[usize], features: &[Vec<f64>]) -> Result<Self> {
        let mut acc = MomentsAccumulator::new(spec);
        for (&c, f) in classes.iter().zip(features) {
            acc.observe(c, f)?;
        }
        Ok(acc.finish())
    }
}

pub fn fit_moments_stream<I>(spec: TableSpec, records: I) -> Result<MomentsTable>
where
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    let mut acc = MomentsAccumulator::new(spec);
    let mut seen = 0u64;
    for r in records {
        let r = r?;
        let f = acc.spec.record_features(&r)?;
        acc.observe(r.predicted_class, &f)?;
        seen += 1;
    }
    if seen == 0 {
        return Err(OodError::Empty("training set has no records"));
    }
    Ok(acc.finish())
}

/// Fits means and variances with a Welford update per chunk; chunk results
/// are combined left to right, so the output is independent of thread count.
pub fn fit_moments(spec: TableSpec, records: &[ActivationRecord]) -> Result<MomentsTable> {
    if records.is_empty() {
        return Err(OodError::Empty("training set has no records"));
    }
    let parts: Vec<MomentsAccumulator> = records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = MomentsAccumulator::new(spec.clone());
            for r in chunk {
                let f = spec.record_features(r)?;
                acc.observe(r.predicted_class, &f)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let first = iter.next().expect("non-empty");
    Ok(iter.fold(first, |acc, p| acc.merge(&p)).finish())
}

/// A fitted table of either metric.
#[derive(Debug, Clone, PartialEq)]
pub enum StatTable {
    MinMax(BoundsTable),
    Gaussian(MomentsTable),
}

impl StatTable {
    pub fn fit(metric: MetricKind, spec: TableSpec, records: &[ActivationRecord]) -> Result<Self> {
        Ok(match metric {
            MetricKind::MinMax => StatTable::MinMax(fit_bounds(spec, records)?),
            MetricKind::Gaussian => StatTable::Gaussian(fit_moments(spec, records)?),
        })
    }

    pub fn fit_features(metric: MetricKind, spec: TableSpec, classes: &[usize], features: &[Vec<f64>]) -> Result<Self> {
        if features.is_empty() {
            return Err(OodError::Empty("training set has no records"));
        }
        Ok(match metric {
            MetricKind::MinMax => StatTable::MinMax(BoundsTable::fit_features(spec, classes, features)?),
            MetricKind::Gaussian => StatTable::Gaussian(MomentsTable::fit_features(spec, classes, features)?),
        })
    }

    pub fn metric(&self) -> MetricKind {
        match self {
            StatTable::MinMax(_) => MetricKind::MinMax,
            StatTable::Gaussian(_) => MetricKind::Gaussian,
        }
    }

    pub fn spec(&self) -> &TableSpec {
        match self {
            StatTable::MinMax(t) => t.spec(),
            StatTable::Gaussian(t) => t.spec(),
        }
    }

    pub fn counts(&self) -> &[u64] {
        match self {
            StatTable::MinMax(t) => t.counts(),
            StatTable::Gaussian(t) => t.counts(),
        }
    }

    fn arrays(&self) -> (&[f64], &[f64]) {
        match self {
            StatTable::MinMax(t) => (&t.mins, &t.maxs),
            StatTable::Gaussian(t) => (&t.means, &t.variances),
        }
    }
}

pub const TABLE_MAGIC: [u8; 4] = *b"GBND";
pub const TABLE_VERSION: u16 = 1;

fn encode_table<W: Write>(w: &mut W, table: &StatTable) -> std::io::Result<()> {
    let spec = table.spec();
    w.write_all(&TABLE_MAGIC)?;
    w.write_all(&TABLE_VERSION.to_le_bytes())?;
    w.write_all(&[table.metric().code(), spec.variant.code()])?;
    w.write_all(&(spec.num_classes as u32).to_le_bytes())?;
    w.write_all(&(spec.num_layers() as u32).to_le_bytes())?;
    w.write_all(&(spec.orders.len() as u32).to_le_bytes())?;
    for &p in spec.orders.as_slice() {
        w.write_all(&p.to_le_bytes())?;
    }
    for &len in spec.feature_lens() {
        w.write_all(&(len as u64).to_le_bytes())?;
    }
    let (a, b) = table.arrays();
    for v in a.iter().chain(b) {
        w.write_all(&v.to_le_bytes())?;
    }
    for &c in table.counts() {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a table atomically in the GBND format.
pub fn save_table(path: impl AsRef<Path>, table: &StatTable) -> Result<()> {
    write_atomic(path.as_ref(), |w| Ok(encode_table(w, table)?))
}

pub fn table_to_bytes(table: &StatTable) -> Vec<u8> {
    let mut out = Vec::new();
    encode_table(&mut out, table).expect("writing to a Vec cannot fail");
    out
}

struct Decoder<R> {
    r: R,
}

impl<R: Read> Decoder<R> {
    fn bytes<const N: usize>(&mut self, ctx: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => OodError::from(FormatError::Truncated {
                context: ctx.to_string(),
            }),
            _ => OodError::Io(e),
        })?;
        Ok(b)
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(ctx)?))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(ctx)?))
    }

    fn f64s(&mut self, n: usize, ctx: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes(ctx)?))).collect()
    }
}

/// Reads a GBND table.
pub fn read_table<R: Read>(r: R) -> Result<StatTable> {
    let mut d = Decoder { r };
    let corrupt = |m: String| OodError::from(FormatError::CorruptHeader(m));
    let magic: [u8; 4] = d.bytes("table magic")?;
    if magic != TABLE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: TABLE_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = u16::from_le_bytes(d.bytes("table version")?);
    if version != TABLE_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: TABLE_VERSION,
        }
        .into());
    }
    let [metric, variant] = d.bytes::<2>("table kind bytes")?;
    let metric = MetricKind::from_code(metric).ok_or_else(|| corrupt(format!("unknown metric kind {metric}")))?;
    let variant = StatVariant::from_code(variant).ok_or_else(|| corrupt(format!("unknown stat variant {variant}")))?;
    let num_classes = d.u32("class count")? as usize;
    let num_layers = d.u32("layer count")? as usize;
    let num_orders = d.u32("order count")? as usize;
    if num_classes == 0 || num_layers == 0 || num_orders == 0 {
        return Err(corrupt("zero classes, layers or orders".into()));
    }
    let orders = (0..num_orders)
        .map(|_| d.u32("order values"))
        .collect::<Result<Vec<_>>>()?;
    if orders.contains(&0) || orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(corrupt("orders must be positive and strictly ascending".into()));
    }
    let lens = (0..num_layers)
        .map(|_| d.u64("feature lengths").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec =
        TableSpec::new(num_classes, OrderSet::new(orders)?, variant, lens).map_err(|e| corrupt(e.to_string()))?;
    let n = num_classes
        .checked_mul(spec.features_per_class())
        .ok_or_else(|| corrupt("table size overflows".into()))?;
    let first = d.f64s(n, "table values")?;
    let second = d.f64s(n, "table values")?;
    let counts = (0..num_classes)
        .map(|_| d.u64("class counts"))
        .collect::<Result<Vec<_>>>()?;
    let mut probe = [0u8; 1];
    if d.r.read(&mut probe)? != 0 {
        return Err(FormatError::TrailingData { records: 0 }.into());
    }
    Ok(match metric {
        MetricKind::MinMax => StatTable::MinMax(BoundsTable {
            spec,
            mins: first,
            maxs: second,
            counts,
        }),
        MetricKind::Gaussian => StatTable::Gaussian(MomentsTable {
            spec,
            means: first,
            variances: second,
            counts,
        }),
    })
}

pub fn load_table(path: impl AsRef<Path>) -> Result<StatTable> {
    read_table(BufReader::new(File::open(path)?))
}
