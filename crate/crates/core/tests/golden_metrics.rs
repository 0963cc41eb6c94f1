mod common;

use common::golden;

#[test]
fn session_log_round_trips_byte_for_byte() {
    golden::session_log_round_trips_byte_for_byte();
}

#[test]
fn average_clicks_and_depth() {
    golden::average_clicks_and_depth();
}

#[test]
fn category_coverage_at_5_and_10() {
    golden::category_coverage_at_5_and_10();
}

#[test]
fn kl_at_5_and_10() {
    golden::kl_at_5_and_10();
}

#[test]
fn kl_is_zero_when_distributions_match() {
    golden::kl_is_zero_when_distributions_match();
}
