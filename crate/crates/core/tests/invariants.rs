mod common;

macro_rules! suites {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = common::$name() {
                    panic!("{e}");
                }
            }
        )*
    };
}

suites!(
    queue_bounds,
    classifier_extension_keeps_logits,
    forward_pure_and_zero_lr_step_is_identity,
    assignment_is_partial_bijection,
    hungarian_is_optimal_permutation,
    dataset_round_trip,
    label_algebra,
    proposals_overlap_their_source,
    gaussian_distance_properties,
    push_monotone_and_pull_zero,
    metric_invariances,
    majority_vote_and_det_pl_ids,
    protocol_determinism_and_config_round_trip,
);
