use gramood_core::harness::{
    ablate, parse_layer_groups, run, sweep, Benchmark, RunConfig, SweepAxis, DEFAULT_VALIDATION_FRACTION,
};
use gramood_core::ingest::synthetic::{generate_synthetic_benchmark, OodKind, SyntheticConfig};
use gramood_core::tables::{fit_bounds, fit_bounds_stream, fit_moments, fit_moments_stream, TableSpec};
use gramood_core::{Aggregation, MetricKind, OrderSet, StatVariant};

fn bench(layers: Vec<(usize, usize)>, kind: OodKind) -> Benchmark {
    let mut cfg = SyntheticConfig::new(4, layers, 30);
    cfg.ood_kind = kind;
    cfg.seed = 3;
    let b = generate_synthetic_benchmark(&cfg).unwrap();
    Benchmark {
        layout: b.layout,
        train: b.train,
        id_test: b.id_test,
        ood_test: b.ood_test,
    }
}

fn small() -> Benchmark {
    bench(vec![(4, 6), (6, 4), (3, 5), (5, 3)], OodKind::Shifted)
}

fn seeds() -> Vec<u64> {
    (0..4).collect()
}

fn config(variant: StatVariant, metric: MetricKind, aggregation: Aggregation) -> RunConfig {
    RunConfig {
        variant,
        metric,
        aggregation,
        orders: OrderSet::range(6),
        layers: None,
        seeds: seeds(),
        validation_fraction: DEFAULT_VALIDATION_FRACTION,
    }
}

#[test]
fn ablation_grid_has_twelve_cells_matching_single_runs() {
    let b = small();
    let rows = ablate(&b, &OrderSet::range(6), &seeds(), DEFAULT_VALIDATION_FRACTION).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().filter(|r| r.is_headline()).count(), 1);
    for r in &rows {
        match r.metric {
            MetricKind::MinMax => assert_eq!(r.train_zero, Some(true)),
            MetricKind::Gaussian => assert_eq!(r.train_zero, None),
        }
        let single = run(&b, &config(r.variant, r.metric, r.aggregation)).unwrap();
        assert_eq!(single, r.summary, "{} {} {}", r.variant, r.metric, r.aggregation);
    }
}

#[test]
fn order_sweep_rows_equal_single_order_runs() {
    let b = small();
    let cfg = config(StatVariant::FullRowSums, MetricKind::MinMax, Aggregation::Normalized);
    let rows = sweep(&b, SweepAxis::Order, &cfg, None).unwrap();
    assert_eq!(rows.len(), 6);
    for (row, p) in rows.iter().zip(1u32..) {
        assert_eq!(row.label, format!("p={p}"));
        let restricted = RunConfig {
            orders: OrderSet::single(p).unwrap(),
            ..cfg.clone()
        };
        assert_eq!(row.summary, run(&b, &restricted).unwrap(), "p={p}");
    }
}

#[test]
fn layer_sweep_rows_equal_layer_restricted_runs() {
    let b = small();
    let cfg = config(
        StatVariant::FullRowSums,
        MetricKind::Gaussian,
        Aggregation::Unnormalized,
    );
    let groups = parse_layer_groups("early:0,1;late:2,3").unwrap();
    let rows = sweep(&b, SweepAxis::Layer, &cfg, Some(&groups)).unwrap();
    assert_eq!(rows.len(), 2);
    for (row, g) in rows.iter().zip(&groups) {
        assert_eq!(row.label, g.name);
        let restricted = RunConfig {
            layers: Some(g.layers.clone()),
            ..cfg.clone()
        };
        assert_eq!(row.summary, run(&b, &restricted).unwrap());
    }
    let singles = sweep(&b, SweepAxis::Layer, &cfg, None).unwrap();
    assert_eq!(singles.len(), 4);
}

#[test]
fn seed_order_changes_raw_rows_not_summary() {
    let b = small();
    let mut cfg = config(StatVariant::Diagonal, MetricKind::MinMax, Aggregation::Normalized);
    cfg.seeds = vec![0, 1, 2, 3, 4, 5];
    let a = run(&b, &cfg).unwrap();
    cfg.seeds = vec![5, 3, 1, 0, 4, 2];
    let c = run(&b, &cfg).unwrap();
    assert_eq!(a.tnr, c.tnr);
    assert_eq!(a.auroc, c.auroc);
    assert_eq!(a.dtacc, c.dtacc);
    assert_eq!(c.per_seed[0], a.per_seed[5]);
}

#[test]
fn parallel_fit_equals_streaming_fit() {
    let b = bench(vec![(5, 7), (3, 9)], OodKind::Gaussian);
    let mut train = b.train.clone();
    train.extend(b.id_test.iter().cloned());
    train.extend((0..3).flat_map(|_| b.train.iter().cloned()));
    for variant in StatVariant::ALL {
        let spec = TableSpec::from_layout(&b.layout, OrderSet::range(4), variant).unwrap();
        let par = fit_bounds(spec.clone(), &train).unwrap();
        let seq = fit_bounds_stream(spec.clone(), train.iter().cloned().map(Ok)).unwrap();
        assert_eq!(par, seq);
        let par = fit_moments(spec.clone(), &train).unwrap();
        let seq = fit_moments_stream(spec, train.iter().cloned().map(Ok)).unwrap();
        for c in 0..4 {
            for (x, y) in par.class_means(c).iter().zip(seq.class_means(c)) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            for (x, y) in par.class_variances(c).iter().zip(seq.class_variances(c)) {
                assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
            }
        }
    }
}

#[test]
fn row_sums_track_upper_triangle() {
    let b = small();
    let mut cfg = config(StatVariant::FullRowSums, MetricKind::MinMax, Aggregation::Normalized);
    let rowsum = run(&b, &cfg).unwrap();
    cfg.variant = StatVariant::FullUpperTriangular;
    let full = run(&b, &cfg).unwrap();
    assert!((rowsum.tnr.mean - full.tnr.mean).abs() <= 0.005);
    assert!((rowsum.auroc.mean - full.auroc.mean).abs() <= 0.005);
}

#[test]
fn mismatched_layouts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_synthetic_benchmark(&SyntheticConfig::new(2, vec![(2, 3)], 10)).unwrap();
    let b = generate_synthetic_benchmark(&SyntheticConfig::new(2, vec![(3, 2)], 10)).unwrap();
    let fa = a.write_to_dir(dir.path().join("a")).unwrap();
    let fb = b.write_to_dir(dir.path().join("b")).unwrap();
    assert!(Benchmark::load(&fa.train, &fa.id_test, &fb.ood_test).is_err());
    assert!(Benchmark::load(&fa.train, &fa.id_test, &fa.ood_test).is_ok());
}
