//! Higher-order Gram matrices of layer feature maps and the per-layer
//! statistic vectors derived from them.
//!
//! For a feature map `F` with `n` channels and `q` pixels per channel, the
//! order-`p` Gram matrix is `G^p = (F^p · (F^p)ᵀ)^(1/p)` with both the power
//! and the root taken element-wise. Odd orders use the signed root
//! `sign(x)·|x|^(1/p)` so that negative activations are handled totally.

use std::fmt;
use std::str::FromStr;

use crate::error::{OodError, Result};

/// One layer's activations for one example, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    pixels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, pixels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || pixels == 0 {
            return Err(OodError::ShapeMismatch(format!(
                "feature map must have at least one channel and pixel, got {channels}x{pixels}"
            )));
        }
        if values.len() != channels * pixels {
            return Err(OodError::ShapeMismatch(format!(
                "expected {} values for a {channels}x{pixels} feature map, got {}",
                channels * pixels,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(OodError::NonFinite(format!(
                "value at channel {}, pixel {} is {}",
                pos / pixels,
                pos % pixels,
                values[pos]
            )));
        }
        Ok(Self {
            channels,
            pixels,
            values,
        })
    }

    /// Builds a feature map from per-channel rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.len();
        let pixels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != pixels) {
            return Err(OodError::ShapeMismatch("ragged feature map rows".into()));
        }
        Self::new(channels, pixels, rows.concat())
    }

    pub fn zeros(channels: usize, pixels: usize) -> Result<Self> {
        Self::new(channels, pixels, vec![0.0; channels * pixels])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.pixels..(c + 1) * self.pixels]
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.channels,
            self.pixels,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Sorted, de-duplicated set of Gram matrix orders.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderSet(Vec<u32>);

impl OrderSet {
    pub const DEFAULT_MAX: u32 = 10;

    pub fn new(mut orders: Vec<u32>) -> Result<Self> {
        if orders.contains(&0) {
            return Err(OodError::InvalidArgument("gram order must be >= 1".into()));
        }
        orders.sort_unstable();
        orders.dedup();
        Ok(Self(orders))
    }

    pub fn range(max: u32) -> Self {
        Self((1..=max).collect())
    }

    pub fn single(order: u32) -> Result<Self> {
        Self::new(vec![order])
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, order: u32) -> Option<usize> {
        self.0.binary_search(&order).ok()
    }
}

impl Default for OrderSet {
    fn default() -> Self {
        Self::range(Self::DEFAULT_MAX)
    }
}

impl FromStr for OrderSet {
    type Err = OodError;

    /// Accepts `1-10`, `1,2,4` or mixtures such as `1-3,8`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || OodError::InvalidArgument(format!("cannot parse order set {s:?}"));
        let mut orders = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((lo, hi)) = part.split_once('-') {
                let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
                let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                orders.extend(lo..=hi);
            } else {
                orders.push(part.parse().map_err(|_| bad())?);
            }
        }
        if orders.is_empty() {
            return Err(bad());
        }
        Self::new(orders)
    }
}

impl fmt::Display for OrderSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// How a Gram matrix is reduced to a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatVariant {
    Diagonal,
    OffDiagonalRowSums,
    FullRowSums,
    FullUpperTriangular,
}

impl StatVariant {
    pub const ALL: [StatVariant; 4] = [
        StatVariant::Diagonal,
        StatVariant::OffDiagonalRowSums,
        StatVariant::FullRowSums,
        StatVariant::FullUpperTriangular,
    ];

    /// Length of the statistic vector for a layer with `channels` channels.
    pub fn feature_len(self, channels: usize) -> usize {
        match self {
            StatVariant::FullUpperTriangular => channels * (channels + 1) / 2,
            _ => channels,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            StatVariant::Diagonal => 0,
            StatVariant::OffDiagonalRowSums => 1,
            StatVariant::FullRowSums => 2,
            StatVariant::FullUpperTriangular => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    /// Short name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            StatVariant::Diagonal => "diag",
            StatVariant::OffDiagonalRowSums => "offdiag",
            StatVariant::FullRowSums => "rowsum",
            StatVariant::FullUpperTriangular => "full",
        }
    }
}

impl FromStr for StatVariant {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| OodError::InvalidArgument(format!("unknown stat variant {s:?}")))
    }
}

impl fmt::Display for StatVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense symmetric `n × n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(OodError::ShapeMismatch(
                "gram matrix must be square and non-empty".into(),
            ));
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate().take(i) {
                if v != rows[j][i] {
                    return Err(OodError::ShapeMismatch(format!(
                        "gram matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            values: rows.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

/// A statistic vector extracted from one layer's order-`p` Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStat {
    pub layer_index: usize,
    pub order: u32,
    pub variant: StatVariant,
    pub values: Vec<f64>,
}

/// Element-wise `p`-th root; signed for odd `p`.
pub(crate) fn signed_root(x: f64, p: u32) -> f64 {
    match p {
        1 => x,
        2 => x.sqrt(),
        3 => x.cbrt(),
        _ if p.is_multiple_of(2) => x.powf(1.0 / f64::from(p)),
        _ => x.signum() * x.abs().powf(1.0 / f64::from(p)),
    }
}

fn gram_impl(fm: &FeatureMap, p: u32, layer: Option<usize>) -> Result<GramMatrix> {
    if p == 0 {
        return Err(OodError::InvalidArgument("gram order must be >= 1".into()));
    }
    let n = fm.channels;
    let q = fm.pixels;
    let powered: Vec<f64> = if p == 1 {
        fm.values.clone()
    } else {
        let exp = p as i32;
        fm.values.iter().map(|v| v.powi(exp)).collect()
    };
    let overflow = || OodError::Overflow { layer, order: p };
    if powered.iter().any(|v| !v.is_finite()) {
        return Err(overflow());
    }

    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let ri = &powered[i * q..(i + 1) * q];
        for j in i..n {
            let rj = &powered[j * q..(j + 1) * q];
            let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            if !dot.is_finite() {
                return Err(overflow());
            }
            let g = signed_root(dot, p);
            values[i * n + j] = g;
            values[j * n + i] = g;
        }
    }
    Ok(GramMatrix { n, values })
}

/// Order-`p` Gram matrix of a feature map, accumulated in `f64`.
pub fn gram_matrix(fm: &FeatureMap, p: u32) -> Result<GramMatrix> {
    gram_impl(fm, p, None)
}

fn push_stat(g: &GramMatrix, variant: StatVariant, out: &mut Vec<f64>) {
    let n = g.n;
    match variant {
        StatVariant::Diagonal => out.extend((0..n).map(|i| g.get(i, i))),
        StatVariant::OffDiagonalRowSums => out.extend((0..n).map(|i| off_diagonal_sum(g, i))),
        StatVariant::FullRowSums => out.extend((0..n).map(|i| g.get(i, i) + off_diagonal_sum(g, i))),
        StatVariant::FullUpperTriangular => {
            for i in 0..n {
                out.extend_from_slice(&g.row(i)[i..]);
            }
        }
    }
}

fn off_diagonal_sum(g: &GramMatrix, i: usize) -> f64 {
    g.row(i)
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, v)| v)
        .sum()
}

/// Reduces a Gram matrix to the requested statistic.
///
/// `FullRowSums` is computed as `diagonal + off-diagonal sum`, so it equals
/// the element-wise sum of the other two row variants exactly.
pub fn extract_stat(g: &GramMatrix, variant: StatVariant, layer_index: usize, order: u32) -> GramStat {
    let mut values = Vec::with_capacity(variant.feature_len(g.n));
    push_stat(g, variant, &mut values);
    GramStat {
        layer_index,
        order,
        variant,
        values,
    }
}

/// One statistic per order, ascending by order.
pub fn compute_all_stats(
    fm: &FeatureMap,
    orders: &OrderSet,
    variant: StatVariant,
    layer_index: usize,
) -> Result<Vec<GramStat>> {
    orders
        .as_slice()
        .iter()
        .map(|&p| {
            let g = gram_impl(fm, p, Some(layer_index))?;
            Ok(extract_stat(&g, variant, layer_index, p))
        })
        .collect()
}

/// Appends the flattened statistics of one layer for every order onto `out`.
pub(crate) fn append_layer_features(
    fm: &FeatureMap,
    orders: &OrderSet,
    variant: StatVariant,
    layer_index: usize,
    out: &mut Vec<f64>,
) -> Result<()> {
    for &p in orders.as_slice() {
        let g = gram_impl(fm, p, Some(layer_index))?;
        push_stat(&g, variant, out);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[&[f64]]) -> FeatureMap {
        FeatureMap::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
        for (ra, rb) in a.iter().zip(b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() <= tol, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn order_one_is_plain_gram() {
        let g = gram_matrix(&fm(&[&[1.0, 2.0], &[3.0, 4.0]]), 1).unwrap();
        assert_eq!(g.to_rows(), vec![vec![5.0, 11.0], vec![11.0, 25.0]]);
    }

    #[test]
    fn order_two_takes_square_root() {
        let g = gram_matrix(&fm(&[&[1.0, 2.0], &[3.0, 4.0]]), 2).unwrap();
        assert_close(&g.to_rows(), &[vec![4.1231, 8.5440], vec![8.5440, 18.3576]], 1e-4);
        assert_eq!(g.get(0, 1), 73f64.sqrt());
    }

    #[test]
    fn zero_map_gives_zero_matrix() {
        let z = FeatureMap::zeros(3, 5).unwrap();
        for p in 1..=10 {
            let g = gram_matrix(&z, p).unwrap();
            assert!(g.to_rows().iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_order_uses_signed_root() {
        let g = gram_matrix(&fm(&[&[-2.0, 0.0], &[1.0, 0.0]]), 3).unwrap();
        assert_close(&g.to_rows(), &[vec![4.0, -2.0], vec![-2.0, 1.0]], 1e-12);
    }

    #[test]
    fn stat_variants_on_small_matrix() {
        let g = GramMatrix::from_rows(&[vec![5.0, 11.0], vec![11.0, 25.0]]).unwrap();
        let s = |v| extract_stat(&g, v, 0, 1).values;
        assert_eq!(s(StatVariant::FullRowSums), vec![16.0, 36.0]);
        assert_eq!(s(StatVariant::Diagonal), vec![5.0, 25.0]);
        assert_eq!(s(StatVariant::FullUpperTriangular), vec![5.0, 11.0, 25.0]);
        assert_eq!(s(StatVariant::OffDiagonalRowSums), vec![11.0, 11.0]);
    }

    #[test]
    fn all_stats_per_order() {
        let f = fm(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let orders = OrderSet::new(vec![2, 1]).unwrap();
        let stats = compute_all_stats(&f, &orders, StatVariant::FullRowSums, 0).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].order, 1);
        assert_eq!(stats[0].values, vec![16.0, 36.0]);
        assert_eq!(stats[1].order, 2);
        assert!((stats[1].values[0] - 12.667).abs() < 1e-3);
        assert!((stats[1].values[1] - 26.902).abs() < 1e-3);
    }

    #[test]
    fn empty_order_set_gives_no_stats() {
        let f = fm(&[&[1.0]]);
        let orders = OrderSet::new(vec![]).unwrap();
        assert!(compute_all_stats(&f, &orders, StatVariant::Diagonal, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_channel_cubic() {
        let f = fm(&[&[2.0, 2.0]]);
        let stats = compute_all_stats(&f, &OrderSet::single(3).unwrap(), StatVariant::Diagonal, 0).unwrap();
        assert!((stats[0].values[0] - 5.0397).abs() < 1e-4);
    }

    #[test]
    fn overflow_names_layer_and_order() {
        let f = fm(&[&[1e100, 1.0]]);
        let err = compute_all_stats(&f, &OrderSet::range(3), StatVariant::Diagonal, 7).unwrap_err();
        match err {
            OodError::Overflow { layer, order } => {
                assert_eq!(layer, Some(7));
                assert_eq!(order, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_feature_maps() {
        assert!(FeatureMap::new(0, 3, vec![]).is_err());
        assert!(FeatureMap::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            FeatureMap::new(1, 2, vec![1.0, f64::NAN]),
            Err(OodError::NonFinite(_))
        ));
    }

    #[test]
    fn order_set_parsing() {
        assert_eq!("1-10".parse::<OrderSet>().unwrap(), OrderSet::default());
        assert_eq!("4,1,2".parse::<OrderSet>().unwrap().as_slice(), &[1, 2, 4]);
        assert_eq!("1-3,8".parse::<OrderSet>().unwrap().as_slice(), &[1, 2, 3, 8]);
        assert!("0-3".parse::<OrderSet>().is_err());
        assert!("5-2".parse::<OrderSet>().is_err());
        assert!("".parse::<OrderSet>().is_err());
    }

    #[test]
    fn variant_codes_round_trip() {
        for v in StatVariant::ALL {
            assert_eq!(StatVariant::from_code(v.code()), Some(v));
            assert_eq!(v.name().parse::<StatVariant>().unwrap(), v);
        }
        assert_eq!(StatVariant::from_code(9), None);
    }
}
