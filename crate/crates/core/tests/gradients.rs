//! Finite-difference checks of every tape primitive and composite block.

mod common;

use common::gradcheck::{self, Check, TOL};

fn run(group: gradcheck::Group) {
    let mut checks: Vec<Check> = Vec::new();
    group(&mut checks);
    assert!(!checks.is_empty());
    let bad: Vec<String> = checks.iter().filter(|c| !(c.rel_err < TOL)).map(|c| format!("{}: {:e}", c.name, c.rel_err)).collect();
    assert!(bad.is_empty(), "relative error >= {TOL}:\n{}", bad.join("\n"));
}

#[test]
fn elementwise_primitives() {
    run(gradcheck::elementwise_primitives);
}

#[test]
fn matmul_primitives() {
    run(gradcheck::matmul_primitives);
}

#[test]
fn shape_primitives() {
    run(gradcheck::shape_primitives);
}

#[test]
fn reduction_and_normalization_primitives() {
    run(gradcheck::reduction_and_normalization_primitives);
}

#[test]
fn spectral_normalize_primitive() {
    run(gradcheck::spectral_normalize_primitive);
}

#[test]
fn linear_feed_forward_and_layer_norm_blocks() {
    run(gradcheck::linear_feed_forward_and_layer_norm_blocks);
}

#[test]
fn row_attention_block() {
    run(gradcheck::row_attention_block);
}

#[test]
fn inter_sample_attention_block() {
    run(gradcheck::inter_sample_attention_block);
}

#[test]
fn sngp_head_block() {
    run(gradcheck::sngp_head_block);
}

#[test]
fn focal_loss_block() {
    run(gradcheck::focal_loss_block);
}

#[test]
fn info_nce_block() {
    run(gradcheck::info_nce_block);
}

#[test]
fn plain_reconstruction_losses() {
    run(gradcheck::plain_reconstruction_losses);
}

#[test]
fn all_five_reconstruction_losses_through_the_model() {
    run(gradcheck::all_five_reconstruction_losses_through_the_model);
}

#[test]
fn full_pretrain_objective() {
    run(gradcheck::full_pretrain_objective);
}

#[test]
fn finetune_objective_through_every_head() {
    run(gradcheck::finetune_objective_through_every_head);
}
