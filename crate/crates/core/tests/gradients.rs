//! Finite-difference checks of every differentiable tape operation on small
//! random shapes, ten seeds each, and of the full objective.

mod common;

use common::Reports;

const SEEDS: u64 = 10;

fn assert_all(family: fn(u64) -> Reports) {
    for seed in 0..SEEDS {
        for (name, report) in family(seed) {
            assert!(report.passed(), "{name} seed {seed}: max rel error {} at {}", report.max_rel_error, report.worst_coord);
        }
    }
}

#[test]
fn elementwise_ops() {
    assert_all(common::elementwise_reports);
}

#[test]
fn linear_and_bmm() {
    assert_all(common::matmul_reports);
}

#[test]
fn softmax_layer_norm_normalize() {
    assert_all(common::normalization_reports);
}

#[test]
fn structural_ops() {
    assert_all(common::structural_reports);
}

#[test]
fn attention_core() {
    assert_all(common::attention_reports);
}

#[test]
fn losses() {
    assert_all(common::loss_reports);
}

#[test]
fn transformer_block_and_mha() {
    assert_all(common::block_reports);
}

#[test]
fn full_objective() {
    let report = common::objective_report(0);
    assert!(report.passed(), "max rel error {} at {}", report.max_rel_error, report.worst_coord);
}
