//! Learning-to-rank files in the sparse `rating qid:Q idx:val ...` format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LtrExample {
    pub query_id: String,
    /// Relevance grade 0..=4.
    pub rating: u8,
    pub features: Vec<f64>,
}

/// Parses LTR text into dense examples of dimension `dim`.
///
/// Feature indices are 1-based; missing indices are zero. Anything after a
/// `#` is ignored.
pub fn parse_ltr_str(text: &str, dim: usize, path: &Path) -> Result<Vec<LtrExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let rating_tok = tokens.next().unwrap();
        let rating: u8 = rating_tok
            .parse()
            .map_err(|_| err(format!("rating {rating_tok:?} is not an integer")))?;
        if rating > 4 {
            return Err(err(format!("rating {rating} outside 0..=4")));
        }
        let qid_tok = tokens.next().ok_or_else(|| err("missing qid".into()))?;
        let query_id = qid_tok
            .strip_prefix("qid:")
            .ok_or_else(|| err(format!("expected qid:<id>, got {qid_tok:?}")))?
            .to_string();
        let mut features = vec![0.0; dim];
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("malformed feature {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(format!("bad feature index {idx:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| err(format!("bad feature value {val:?}")))?;
            if idx == 0 || idx > dim {
                return Err(err(format!("feature index {idx} outside 1..={dim}")));
            }
            if !val.is_finite() {
                return Err(err(format!("non-finite feature value at index {idx}")));
            }
            features[idx - 1] = val;
        }
        out.push(LtrExample {
            query_id,
            rating,
            features,
        });
    }
    Ok(out)
}

pub fn parse_ltr(path: impl AsRef<Path>, dim: usize) -> Result<Vec<LtrExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ltr_str(&text, dim, path)
}

/// An item counts as clicked when its grade is strictly above 2.
pub fn click_label(rating: u8) -> bool {
    rating > 2
}

/// Groups examples by query id; groups are ordered by numeric query id when
/// every id is numeric, lexicographically otherwise.
pub fn group_by_query(examples: &[LtrExample]) -> Vec<(String, Vec<&LtrExample>)> {
    let mut groups: Vec<(String, Vec<&LtrExample>)> = Vec::new();
    for ex in examples {
        match groups.iter_mut().find(|(q, _)| *q == ex.query_id) {
            Some((_, g)) => g.push(ex),
            None => groups.push((ex.query_id.clone(), vec![ex])),
        }
    }
    let numeric = groups.iter().all(|(q, _)| q.parse::<u64>().is_ok());
    if numeric {
        groups.sort_by_key(|(q, _)| q.parse::<u64>().unwrap());
    } else {
        groups.sort_by(|a, b| a.0.cmp(&b.0));
    }
    groups
}
