//! Golden fixtures: bounce synthesis on a three-query LTR file with values
//! computed independently in plain floating point (lambda = 0.1, threshold =
//! 0.8), hand-computed metric values, and a frozen session log.

use cterank::data::{load_sessions, parse_sessions, sessions_to_string};
use cterank::dataset::ltr::group_by_query;
use cterank::dataset::yahoo::{build_yahoo_sessions, trace_query};
use cterank::dataset::{parse_ltr, BounceConfig};
use cterank::metrics::{
    average_clicks, average_depth, category_coverage, evaluate, kl_at_k, smoothed_kl, RankedList, KL_SMOOTHING,
};
use std::path::{Path, PathBuf};

const DATASET_TOL: f64 = 1e-12;

struct Expected {
    qid: &'static str,
    order: &'static [usize],
    mmr: &'static [f64],
    decay: &'static [f64],
    bounce_at: Option<usize>,
}

const EXPECTED: [Expected; 3] = [
    Expected {
        qid: "1",
        order: &[0, 2],
        mmr: &[1.0634988443752773, 0.2812461179749811],
        decay: &[1.0634988443752773, 0.6723724811751293],
        bounce_at: Some(2),
    },
    Expected {
        qid: "2",
        order: &[1, 0, 2],
        mmr: &[2.7834664177026402, 1.41194713553794, 1.4430249470757708],
        decay: &[2.7834664177026402, 2.0977067766202904, 1.8794795001054505],
        bounce_at: None,
    },
    Expected {
        qid: "3",
        order: &[0, 1, 2],
        mmr: &[1.0442760399378044, 0.9911242977525354, 0.14863961030678935],
        decay: &[1.0442760399378044, 1.01770016884517, 0.7280133159990431],
        bounce_at: Some(3),
    },
];

fn fixture() -> Vec<cterank::dataset::LtrExample> {
    parse_ltr(golden("ltr3.txt"), 2).unwrap()
}

fn first_feature(f: &[f64]) -> f64 {
    f[0]
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= DATASET_TOL)
}

pub fn shipped_defaults_match_the_fixture_parameters() {
    let c = BounceConfig::default();
    assert_eq!((c.lambda, c.threshold, c.standardize), (0.1, 0.8, false));
}

pub fn mmr_decay_and_bounce_positions() {
    let examples = fixture();
    let cfg = BounceConfig::default();
    let groups = group_by_query(&examples);
    assert_eq!(groups.len(), 3);
    for ((qid, group), want) in groups.iter().zip(&EXPECTED) {
        assert_eq!(qid, want.qid);
        let reprs: Vec<Vec<f64>> = group.iter().map(|e| e.features.clone()).collect();
        let t = trace_query(group, &first_feature, &reprs, &cfg);
        assert_eq!(t.order, want.order, "query {qid}");
        assert!(close(&t.mmr, want.mmr), "query {qid}: mmr {:?}", t.mmr);
        assert!(close(&t.decay, want.decay), "query {qid}: decay {:?}", t.decay);
        assert_eq!(t.bounce_at, want.bounce_at, "query {qid}");
    }
}

pub fn sessions_carry_the_golden_labels() {
    let examples = fixture();
    let built = build_yahoo_sessions(&examples, &first_feature, &BounceConfig::default()).unwrap();
    assert!(built.skipped.is_empty());
    let summary: Vec<(String, Vec<(bool, bool)>, bool)> = built
        .sessions
        .iter()
        .map(|s| {
            (
                s.session_id.clone(),
                s.impressions.iter().map(|i| (i.click, i.bounce)).collect(),
                s.censored,
            )
        })
        .collect();
    assert_eq!(
        summary,
        vec![
            ("q1".into(), vec![(true, false), (true, true)], false),
            ("q2".into(), vec![(true, false), (false, false), (false, false)], true),
            ("q3".into(), vec![(true, false), (false, false), (true, true)], false),
        ]
    );
    assert_eq!(built.sessions[0].pool.as_ref().unwrap().len(), 4);
}

const METRIC_TOL: f64 = 1e-9;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn list(id: &str, ranked: &[u32], before: &[u32]) -> RankedList {
    RankedList {
        session_id: id.into(),
        ranked: ranked.to_vec(),
        clicked_before: before.to_vec(),
    }
}

fn lists() -> Vec<RankedList> {
    vec![
        list("l1", &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4], &[0, 0, 1]),
        list("l2", &[5, 5, 5, 5, 5, 0, 1, 2, 3, 4], &[]),
        list("l3", &[2, 3, 2, 3, 2, 3, 2, 3, 2, 3], &[2, 5]),
    ]
}

pub fn session_log_round_trips_byte_for_byte() {
    let path = golden("sessions.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let sessions = parse_sessions(&text, &path).unwrap();
    assert_eq!(sessions.len(), 4);
    assert_eq!(sessions_to_string(&sessions), text);
    assert!(sessions[1].censored && sessions[1].pool.is_none());
    assert_eq!(sessions[0].pool.as_ref().unwrap().len(), 3);
}

pub fn average_clicks_and_depth() {
    let s = load_sessions(golden("sessions.jsonl")).unwrap();
    // clicks 2, 0, 3, 1; depths 3, 5, 4, 1
    assert!((average_clicks(&s).unwrap() - 1.5).abs() < METRIC_TOL);
    assert!((average_depth(&s).unwrap() - 3.25).abs() < METRIC_TOL);
}

pub fn category_coverage_at_5_and_10() {
    let l = lists();
    // top-5: {0,1,2}, {5}, {2,3} of 6; top-10: 5, 6 and 2 of 6
    assert!((category_coverage(&l, 5, 6).unwrap() - 1.0 / 3.0).abs() < METRIC_TOL);
    assert!((category_coverage(&l, 10, 6).unwrap() - 13.0 / 18.0).abs() < METRIC_TOL);
}

pub fn kl_at_5_and_10() {
    let l = lists();
    let k5 = kl_at_k(&l, 5, KL_SMOOTHING).unwrap();
    let k10 = kl_at_k(&l, 10, KL_SMOOTHING).unwrap();
    assert_eq!((k5.sessions, k5.skipped), (2, 1));
    assert!((k5.value.unwrap() - 1.2440806153072728).abs() < METRIC_TOL);
    assert!((k10.value.unwrap() - 1.62895857046989).abs() < METRIC_TOL);
    let report = evaluate(&load_sessions(golden("sessions.jsonl")).unwrap(), &l, &[5, 10], 6, KL_SMOOTHING).unwrap();
    assert_eq!(report.kl_at_k[&5], k5);
    assert!((report.cc_at_k[&10] - 13.0 / 18.0).abs() < METRIC_TOL);
}

pub fn kl_is_zero_when_distributions_match() {
    assert_eq!(smoothed_kl(&[0, 1, 1, 2], &[2, 1, 0, 1], KL_SMOOTHING).unwrap(), 0.0);
    let same = [list("p", &[3, 3, 1, 1, 1], &[1, 3, 1, 3, 1])];
    assert_eq!(kl_at_k(&same, 5, KL_SMOOTHING).unwrap().value, Some(0.0));
    assert!(kl_at_k(&lists(), 5, KL_SMOOTHING).unwrap().value.unwrap() > 0.0);
}
