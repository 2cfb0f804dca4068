//! Structural properties of the model that hold regardless of training.

mod common;

#[test]
fn frozen_backbones_survive_a_hundred_steps() {
    common::invariants::frozen_backbones_survive_a_hundred_steps();
}

#[test]
fn domain_masked_attention_has_no_cross_gradients() {
    common::invariants::domain_masked_attention_has_no_cross_gradients();
}

#[test]
fn one_fusion_former_serves_all_four_streams() {
    common::invariants::one_fusion_former_serves_all_four_streams();
}

#[test]
fn final_heatmaps_are_unit_range_and_shrink_with_beta() {
    common::invariants::final_heatmaps_are_unit_range_and_shrink_with_beta();
}
