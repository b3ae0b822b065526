use gramood_core::gram::{compute_all_stats, extract_stat, gram_matrix, FeatureMap, OrderSet, StatVariant};
use proptest::prelude::*;

/// Straightforward triple loop with `powf` powers and roots.
fn naive_gram(rows: &[Vec<f64>], p: u32) -> Vec<Vec<f64>> {
    let n = rows.len();
    let pf = f64::from(p);
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for (a, b) in rows[i].iter().zip(&rows[j]) {
                s += a.powf(pf) * b.powf(pf);
            }
            g[i][j] = if s < 0.0 {
                -(-s).powf(1.0 / pf)
            } else {
                s.powf(1.0 / pf)
            };
        }
    }
    g
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn feature_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=8, 1usize..=16).prop_flat_map(|(n, q)| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, q), n))
}

proptest! {
    #[test]
    fn matches_naive_oracle(rows in feature_rows(), p in 1u32..=10) {
        let fm = FeatureMap::from_rows(&rows).unwrap();
        let g = gram_matrix(&fm, p).unwrap().to_rows();
        let oracle = naive_gram(&rows, p);
        for (ga, oa) in g.iter().zip(&oracle) {
            for (&x, &y) in ga.iter().zip(oa) {
                prop_assert!(rel_err(x, y) <= 1e-9, "p={p}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn output_is_exactly_symmetric(rows in feature_rows(), p in 1u32..=10) {
        let g = gram_matrix(&FeatureMap::from_rows(&rows).unwrap(), p).unwrap();
        for i in 0..g.dim() {
            for j in 0..g.dim() {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
    }

    #[test]
    fn scale_covariance(rows in feature_rows(), p in 1u32..=10, c in 0.1f64..4.0) {
        let fm = FeatureMap::from_rows(&rows).unwrap();
        let g = gram_matrix(&fm, p).unwrap();
        let gs = gram_matrix(&fm.scaled(c).unwrap(), p).unwrap();
        for i in 0..g.dim() {
            for j in 0..g.dim() {
                let expected = c * c * g.get(i, j);
                let got = gs.get(i, j);
                prop_assert!(
                    (got - expected).abs() <= 1e-10 * expected.abs().max(f64::MIN_POSITIVE),
                    "{got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn row_sums_split_exactly(rows in feature_rows(), p in 1u32..=10) {
        let g = gram_matrix(&FeatureMap::from_rows(&rows).unwrap(), p).unwrap();
        let diag = extract_stat(&g, StatVariant::Diagonal, 0, p).values;
        let off = extract_stat(&g, StatVariant::OffDiagonalRowSums, 0, p).values;
        let full = extract_stat(&g, StatVariant::FullRowSums, 0, p).values;
        for i in 0..full.len() {
            prop_assert_eq!(full[i], diag[i] + off[i]);
        }
        let tri = extract_stat(&g, StatVariant::FullUpperTriangular, 0, p).values;
        prop_assert_eq!(tri.len(), g.dim() * (g.dim() + 1) / 2);
    }

    #[test]
    fn order_one_is_plain_product(rows in feature_rows()) {
        let g = gram_matrix(&FeatureMap::from_rows(&rows).unwrap(), 1).unwrap();
        for i in 0..rows.len() {
            for j in i..rows.len() {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                prop_assert_eq!(g.get(i, j), dot);
            }
        }
    }

    #[test]
    fn all_stats_agree_with_per_order(rows in feature_rows(), max_p in 1u32..=10) {
        let fm = FeatureMap::from_rows(&rows).unwrap();
        let orders = OrderSet::range(max_p);
        let stats = compute_all_stats(&fm, &orders, StatVariant::FullRowSums, 3).unwrap();
        prop_assert_eq!(stats.len(), max_p as usize);
        for (k, s) in stats.iter().enumerate() {
            prop_assert_eq!(s.order, k as u32 + 1);
            prop_assert_eq!(s.layer_index, 3);
            let g = gram_matrix(&fm, s.order).unwrap();
            prop_assert_eq!(&s.values, &extract_stat(&g, StatVariant::FullRowSums, 3, s.order).values);
        }
    }
}
