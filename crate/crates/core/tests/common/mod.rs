#![allow(dead_code)]

use gramood_core::gram::FeatureMap;
use gramood_core::ActivationRecord;
use proptest::prelude::*;

pub const SHAPES: [(usize, usize); 2] = [(3, 4), (2, 5)];
pub const CLASSES: usize = 3;

fn layer(channels: usize, pixels: usize, lo: f64) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(lo..2.0, channels * pixels).prop_map(move |v| FeatureMap::new(channels, pixels, v).unwrap())
}

fn record_from(lo: f64) -> impl Strategy<Value = ActivationRecord> {
    (
        0..CLASSES,
        layer(SHAPES[0].0, SHAPES[0].1, lo),
        layer(SHAPES[1].0, SHAPES[1].1, lo),
    )
        .prop_map(|(c, a, b)| ActivationRecord {
            predicted_class: c,
            layers: vec![a, b],
        })
}

pub fn record() -> impl Strategy<Value = ActivationRecord> {
    record_from(-2.0)
}

pub fn records(max: usize) -> impl Strategy<Value = Vec<ActivationRecord>> {
    prop::collection::vec(record(), 1..=max)
}

/// Post-ReLU style activations.
pub fn nonneg_record() -> impl Strategy<Value = ActivationRecord> {
    record_from(0.0)
}

pub fn nonneg_records(max: usize) -> impl Strategy<Value = Vec<ActivationRecord>> {
    prop::collection::vec(nonneg_record(), 1..=max)
}
