mod common;

#[test]
fn returns_to_go_telescope() {
    common::rtg_telescoping(256).unwrap();
}

#[test]
fn segment_count_matches_formula() {
    common::segment_count(256).unwrap();
}

#[test]
fn greedy_ties_go_to_lowest_index() {
    common::argmax_ties(256).unwrap();
}

#[test]
fn bandit_slots_update_independently() {
    common::slot_independence(32).unwrap();
}

#[test]
fn predictions_ignore_future_tokens() {
    common::causal_mask(32).unwrap();
}

#[test]
fn checkpoints_round_trip() {
    common::checkpoint_round_trip(64).unwrap();
}

#[test]
fn datasets_round_trip() {
    common::dataset_round_trip(16).unwrap();
}
