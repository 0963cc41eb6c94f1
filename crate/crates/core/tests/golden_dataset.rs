mod common;

use common::golden;

#[test]
fn shipped_defaults_match_the_fixture_parameters() {
    golden::shipped_defaults_match_the_fixture_parameters();
}

#[test]
fn mmr_decay_and_bounce_positions() {
    golden::mmr_decay_and_bounce_positions();
}

#[test]
fn sessions_carry_the_golden_labels() {
    golden::sessions_carry_the_golden_labels();
}
