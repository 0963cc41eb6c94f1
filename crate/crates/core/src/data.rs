//! Users, items, logged sessions and rollout trajectories, plus the
//! line-delimited session-log format.
//!
//! # Session-log format
//!
//! UTF-8, one JSON object per line, keys always written in this order:
//!
//! ```text
//! {"session_id":"s0","user_id":"u3","user_features":[0.1,1.0],"censored":false,
//!  "pool":[{"item_id":"i7","features":[..],"category":2}, ...],
//!  "impressions":[{"item_id":"i7","features":[..],"category":2,"click":1,"bounce":0}, ...]}
//! ```
//!
//! * `pool` is omitted when the upstream candidate set is unknown.
//! * `click` and `bounce` are the integers 0 or 1.
//! * Impression positions are implicit: the `j`-th entry is position `j + 1`.
//! * `censored` marks a session cut at the maximum length without a bounce.
//! * Floats are written in shortest round-trip form, so save and load are
//!   byte-stable.
//!
//! Golden files under `tests/golden/` freeze this grammar.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub features: Vec<f64>,
    pub category: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub id: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Impression {
    /// 1-based position in the session.
    pub position: usize,
    pub item: Item,
    pub click: bool,
    pub bounce: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub user: User,
    pub impressions: Vec<Impression>,
    pub pool: Option<Vec<Item>>,
    pub censored: bool,
}

impl SessionRecord {
    pub fn depth(&self) -> usize {
        self.impressions.len()
    }

    pub fn clicks(&self) -> usize {
        self.impressions.iter().filter(|i| i.click).count()
    }

    /// Candidate set for re-ranking: the logged pool, or the impressed items.
    pub fn candidates(&self) -> Vec<Item> {
        match &self.pool {
            Some(p) => p.clone(),
            None => self.impressions.iter().map(|i| i.item.clone()).collect(),
        }
    }

    /// Checks the ordering, bounce and uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Validation {
            session: self.session_id.clone(),
            msg,
        };
        let mut seen = HashSet::new();
        let last = self.impressions.len();
        for (j, imp) in self.impressions.iter().enumerate() {
            if imp.position != j + 1 {
                return Err(fail(format!(
                    "impression {j} has position {}, expected {}",
                    imp.position,
                    j + 1
                )));
            }
            if imp.bounce && j + 1 != last {
                return Err(fail(format!("bounce at position {} is not the last impression", j + 1)));
            }
            if !seen.insert(imp.item.id.as_str()) {
                return Err(fail(format!("item {} impressed twice", imp.item.id)));
            }
        }
        if self.censored && self.impressions.last().is_some_and(|i| i.bounce) {
            return Err(fail("censored session cannot end in a bounce".into()));
        }
        if let Some(pool) = &self.pool {
            let mut ids = HashSet::new();
            for it in pool {
                if !ids.insert(it.id.as_str()) {
                    return Err(fail(format!("item {} listed twice in pool", it.id)));
                }
            }
            for imp in &self.impressions {
                if !ids.contains(imp.item.id.as_str()) {
                    return Err(fail(format!("impressed item {} missing from pool", imp.item.id)));
                }
            }
        }
        Ok(())
    }
}

/// One step of a policy rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    /// Index of the chosen item in the candidate pool.
    pub action: usize,
    pub log_prob: f64,
    pub ctr: f64,
    pub pbr: f64,
    pub reward: f64,
    pub bounced: bool,
}

/// A rollout from the empty-history state of one (user, pool) pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// Index of the initial state (user + pool) the rollout started from.
    pub start: usize,
    pub steps: Vec<TrajectoryStep>,
    /// `G_t` for every step.
    pub returns: Vec<f64>,
    /// Baseline-adjusted returns `G'_t`.
    pub adjusted: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemWire {
    item_id: String,
    features: Vec<f64>,
    category: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImpressionWire {
    item_id: String,
    features: Vec<f64>,
    category: u32,
    click: u8,
    bounce: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionWire {
    session_id: String,
    user_id: String,
    user_features: Vec<f64>,
    #[serde(default)]
    censored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<Vec<ItemWire>>,
    impressions: Vec<ImpressionWire>,
}

fn flag(v: u8, what: &str) -> std::result::Result<bool, String> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(format!("{what} must be 0 or 1, got {v}")),
    }
}

impl SessionWire {
    fn from_record(r: &SessionRecord) -> Self {
        Self {
            session_id: r.session_id.clone(),
            user_id: r.user.id.clone(),
            user_features: r.user.features.clone(),
            censored: r.censored,
            pool: r.pool.as_ref().map(|p| {
                p.iter()
                    .map(|it| ItemWire {
                        item_id: it.id.clone(),
                        features: it.features.clone(),
                        category: it.category,
                    })
                    .collect()
            }),
            impressions: r
                .impressions
                .iter()
                .map(|i| ImpressionWire {
                    item_id: i.item.id.clone(),
                    features: i.item.features.clone(),
                    category: i.item.category,
                    click: i.click as u8,
                    bounce: i.bounce as u8,
                })
                .collect(),
        }
    }

    fn into_record(self) -> std::result::Result<SessionRecord, String> {
        let impressions = self
            .impressions
            .into_iter()
            .enumerate()
            .map(|(j, w)| {
                Ok(Impression {
                    position: j + 1,
                    item: Item {
                        id: w.item_id,
                        features: w.features,
                        category: w.category,
                    },
                    click: flag(w.click, "click")?,
                    bounce: flag(w.bounce, "bounce")?,
                })
            })
            .collect::<std::result::Result<_, String>>()?;
        Ok(SessionRecord {
            session_id: self.session_id,
            user: User {
                id: self.user_id,
                features: self.user_features,
            },
            impressions,
            pool: self.pool.map(|p| {
                p.into_iter()
                    .map(|w| Item {
                        id: w.item_id,
                        features: w.features,
                        category: w.category,
                    })
                    .collect()
            }),
            censored: self.censored,
        })
    }
}

/// Serializes one record as a single log line (no trailing newline).
pub fn record_to_line(r: &SessionRecord) -> String {
    serde_json::to_string(&SessionWire::from_record(r)).expect("session records always serialize")
}

pub fn record_from_line(line: &str) -> std::result::Result<SessionRecord, String> {
    let wire: SessionWire = serde_json::from_str(line).map_err(|e| e.to_string())?;
    wire.into_record()
}

/// Parses a whole session log held in memory.
pub fn parse_sessions(text: &str, path: &Path) -> Result<Vec<SessionRecord>> {
    let mut out = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = record_from_line(line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        rec.validate()?;
        let item_dims = rec
            .impressions
            .iter()
            .map(|i| &i.item)
            .chain(rec.pool.iter().flatten())
            .map(|it| it.features.len());
        let udim = rec.user.features.len();
        for idim in item_dims {
            match dims {
                None => dims = Some((udim, idim)),
                Some((u, d)) if u == udim && d == idim => {}
                Some((u, d)) => {
                    return Err(Error::Validation {
                        session: rec.session_id.clone(),
                        msg: format!(
                            "feature dimensions user {udim}/item {idim} differ from dataset {u}/{d}"
                        ),
                    })
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<SessionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sessions(&text, path)
}

pub fn sessions_to_string(records: &[SessionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&record_to_line(r));
        s.push('\n');
    }
    s
}

pub fn save_sessions(records: &[SessionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(sessions_to_string(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}
