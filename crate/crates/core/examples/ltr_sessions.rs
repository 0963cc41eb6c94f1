//! Learning-to-rank queries turned into sessions: exposure by a pointwise
//! score, clicks from graded labels, bounce where the MMR decay rate drops
//! below the threshold.
//!
//! cargo run --release --example ltr_sessions [file.txt] [dim]

use cterank::data::sessions_to_string;
use cterank::dataset::{build_yahoo_sessions, parse_ltr, BounceConfig};

fn main() -> cterank::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/ltr3.txt").into());
    let dim = args.next().map_or(2, |d| d.parse().expect("dim is an integer"));
    let examples = parse_ltr(&path, dim)?;
    let cfg = BounceConfig::default();
    let build = build_yahoo_sessions(&examples, &|f: &[f64]| f[0], &cfg)?;
    for s in &build.sessions {
        let marks: Vec<String> = s
            .impressions
            .iter()
            .map(|i| format!("{}{}{}", i.item.id, if i.click { "*" } else { "" }, if i.bounce { "!" } else { "" }))
            .collect();
        println!("{:>4}  {}", s.session_id, marks.join("  "));
    }
    print!("{}", sessions_to_string(&build.sessions));
    Ok(())
}
