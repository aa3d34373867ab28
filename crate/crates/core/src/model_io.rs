//! Plain-text (JSON) model definitions.
//!
//! ```json
//! {
//!   "num_states": 2,
//!   "num_actions": 2,
//!   "gamma": 0.9,
//!   "transitions": [[[0.5, 0.5], [0.2, 0.8]], [[1.0, 0.0], [0.3, 0.7]]],
//!   "rewards": [[1.0, 0.0], [0.0, 0.5]],
//!   "features": [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.0, 0.0]],
//!   "behavior_policy": [[0.5, 0.5], [0.5, 0.5]]
//! }
//! ```
//!
//! `transitions[a][s][s']` is action-major, `rewards[s][a]`, `features` has one
//! row per state-action pair in `s * |A| + a` order, `behavior_policy[s][a]`.
//! `features` defaults to the identity and `behavior_policy` to uniform.
//! Every invariant violation is reported with the line of the offending row.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{BehaviorPolicy, FeatureMap, Mdp, ROW_SUM_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_policy: Option<Vec<Vec<f64>>>,
}

/// A validated model definition.
#[derive(Debug, Clone)]
pub struct Model {
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub behavior: BehaviorPolicy,
}

impl Model {
    pub fn to_file(&self) -> ModelFile {
        let mdp = &self.mdp;
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        ModelFile {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            gamma: mdp.gamma(),
            transitions: mdp.transitions().iter().map(rows).collect(),
            rewards: rows(mdp.rewards()),
            features: Some(rows(self.features.matrix())),
            behavior_policy: Some(rows(self.behavior.policy().table())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<Model> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let locator = Locator::new(text);
    let loc = |path: &[Seg]| locator.line_of(path).unwrap_or(1);
    let fail = |path: &[Seg], message: String| Error::Parse {
        line: loc(path),
        message,
    };

    let (ns, na) = (file.num_states, file.num_actions);
    if ns == 0 || na == 0 {
        return Err(fail(&[Seg::Key("num_states")], "num_states and num_actions must be positive".into()));
    }
    if !(file.gamma > 0.0 && file.gamma < 1.0) {
        return Err(fail(&[Seg::Key("gamma")], format!("gamma {} must lie in (0, 1)", file.gamma)));
    }

    if file.transitions.len() != na {
        return Err(fail(
            &[Seg::Key("transitions")],
            format!("expected {na} transition matrices, found {}", file.transitions.len()),
        ));
    }
    for (a, pa) in file.transitions.iter().enumerate() {
        let here = [Seg::Key("transitions"), Seg::Index(a)];
        if pa.len() != ns {
            return Err(fail(&here, format!("transitions[{a}] has {} rows, expected {ns}", pa.len())));
        }
        for (s, row) in pa.iter().enumerate() {
            let here = [Seg::Key("transitions"), Seg::Index(a), Seg::Index(s)];
            check_distribution(row, ns, &format!("transitions[{a}][{s}]")).map_err(|m| fail(&here, m))?;
        }
    }

    if file.rewards.len() != ns {
        return Err(fail(&[Seg::Key("rewards")], format!("rewards has {} rows, expected {ns}", file.rewards.len())));
    }
    for (s, row) in file.rewards.iter().enumerate() {
        let here = [Seg::Key("rewards"), Seg::Index(s)];
        if row.len() != na {
            return Err(fail(&here, format!("rewards[{s}] has {} entries, expected {na}", row.len())));
        }
        if let Some(r) = row.iter().find(|r| !r.is_finite() || r.abs() > 1.0) {
            return Err(fail(&here, format!("rewards[{s}] contains {r}, which violates |R| <= 1")));
        }
    }

    let features = match &file.features {
        None => FeatureMap::tabular(ns, na),
        Some(rows) => {
            if rows.len() != ns * na {
                return Err(fail(
                    &[Seg::Key("features")],
                    format!("features has {} rows, expected {}", rows.len(), ns * na),
                ));
            }
            let d = rows.first().map_or(0, Vec::len);
            for (i, row) in rows.iter().enumerate() {
                let here = [Seg::Key("features"), Seg::Index(i)];
                if row.len() != d || d == 0 {
                    return Err(fail(&here, format!("features[{i}] has {} entries, expected {d}", row.len())));
                }
                let l1: f64 = row.iter().map(|v| v.abs()).sum();
                if !l1.is_finite() || l1 > 1.0 + 1e-12 {
                    return Err(fail(&here, format!("features[{i}] has L1 norm {l1} > 1")));
                }
            }
            let m = DMatrix::from_fn(ns * na, d, |i, j| rows[i][j]);
            FeatureMap::new(m).map_err(|e| fail(&[Seg::Key("features")], e.to_string()))?
        }
    };

    let behavior = match &file.behavior_policy {
        None => BehaviorPolicy::uniform(ns, na),
        Some(rows) => {
            if rows.len() != ns {
                return Err(fail(
                    &[Seg::Key("behavior_policy")],
                    format!("behavior_policy has {} rows, expected {ns}", rows.len()),
                ));
            }
            for (s, row) in rows.iter().enumerate() {
                let here = [Seg::Key("behavior_policy"), Seg::Index(s)];
                check_distribution(row, na, &format!("behavior_policy[{s}]")).map_err(|m| fail(&here, m))?;
                if row.iter().any(|p| *p <= 0.0) {
                    return Err(fail(&here, format!("behavior_policy[{s}] has a zero entry; every action needs positive probability")));
                }
            }
            BehaviorPolicy::new(DMatrix::from_fn(ns, na, |s, a| rows[s][a]))?
        }
    };

    let transitions = file
        .transitions
        .iter()
        .map(|pa| DMatrix::from_fn(ns, ns, |s, s2| pa[s][s2]))
        .collect();
    let rewards = DMatrix::from_fn(ns, na, |s, a| file.rewards[s][a]);
    let mdp = Mdp::new(transitions, rewards, file.gamma)?;
    Ok(Model {
        mdp,
        features,
        behavior,
    })
}

fn check_distribution(row: &[f64], len: usize, what: &str) -> std::result::Result<(), String> {
    if row.len() != len {
        return Err(format!("{what} has {} entries, expected {len}", row.len()));
    }
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(format!("{what} has negative or non-finite entry {p}"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("{what} sums to {sum}, expected 1"));
    }
    Ok(())
}

// ── Source locations ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Seg {
    Key(&'static str),
    Index(usize),
}

/// Finds the line on which the value at a key/index path starts. The input
/// has already been accepted by serde_json, so the scanner can be lenient.
struct Locator<'a> {
    bytes: &'a [u8],
}

impl<'a> Locator<'a> {
    fn new(text: &'a str) -> Self {
        Locator {
            bytes: text.as_bytes(),
        }
    }

    fn line_at(&self, pos: usize) -> usize {
        1 + self.bytes[..pos.min(self.bytes.len())].iter().filter(|&&b| b == b'\n').count()
    }

    fn skip_ws(&self, mut pos: usize) -> usize {
        while pos < self.bytes.len() && self.bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        pos
    }

    // Position just past the value starting at `pos`.
    fn skip_value(&self, pos: usize) -> usize {
        let b = self.bytes;
        match b.get(pos) {
            Some(b'"') => self.skip_string(pos),
            Some(b'[') | Some(b'{') => {
                let mut depth = 0usize;
                let mut p = pos;
                while p < b.len() {
                    match b[p] {
                        b'"' => {
                            p = self.skip_string(p);
                            continue;
                        }
                        b'[' | b'{' => depth += 1,
                        b']' | b'}' => {
                            depth -= 1;
                            if depth == 0 {
                                return p + 1;
                            }
                        }
                        _ => {}
                    }
                    p += 1;
                }
                p
            }
            _ => {
                let mut p = pos;
                while p < b.len() && !matches!(b[p], b',' | b']' | b'}') && !b[p].is_ascii_whitespace() {
                    p += 1;
                }
                p
            }
        }
    }

    fn skip_string(&self, pos: usize) -> usize {
        let b = self.bytes;
        let mut p = pos + 1;
        while p < b.len() {
            match b[p] {
                b'\\' => p += 2,
                b'"' => return p + 1,
                _ => p += 1,
            }
        }
        p
    }

    fn find(&self, mut pos: usize, path: &[Seg]) -> Option<usize> {
        pos = self.skip_ws(pos);
        let Some((first, rest)) = path.split_first() else {
            return Some(pos);
        };
        let b = self.bytes;
        match (*first, b.get(pos)) {
            (Seg::Key(key), Some(b'{')) => {
                let mut p = self.skip_ws(pos + 1);
                while p < b.len() && b[p] == b'"' {
                    let end = self.skip_string(p);
                    let name = std::str::from_utf8(&b[p + 1..end - 1]).ok()?;
                    p = self.skip_ws(end);
                    p = self.skip_ws(p + 1); // ':'
                    if name == key {
                        return self.find(p, rest);
                    }
                    p = self.skip_ws(self.skip_value(p));
                    if b.get(p) == Some(&b',') {
                        p = self.skip_ws(p + 1);
                    }
                }
                None
            }
            (Seg::Index(idx), Some(b'[')) => {
                let mut p = self.skip_ws(pos + 1);
                for _ in 0..idx {
                    if b.get(p) == Some(&b']') {
                        return None;
                    }
                    p = self.skip_ws(self.skip_value(p));
                    if b.get(p) == Some(&b',') {
                        p = self.skip_ws(p + 1);
                    }
                }
                if b.get(p) == Some(&b']') {
                    return None;
                }
                self.find(p, rest)
            }
            _ => None,
        }
    }

    fn line_of(&self, path: &[Seg]) -> Option<usize> {
        self.find(0, path).map(|p| self.line_at(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
  "num_states": 2,
  "num_actions": 2,
  "gamma": 0.9,
  "transitions": [
    [[0.5, 0.5],
     [0.2, 0.8]],
    [[1.0, 0.0],
     [0.3, 0.7]]
  ],
  "rewards": [[1.0, 0.0], [0.0, 0.5]],
  "behavior_policy": [[0.5, 0.5], [0.25, 0.75]]
}"#;

    #[test]
    fn parses_and_roundtrips() {
        let m = parse_model(GOOD).unwrap();
        assert_eq!(m.mdp.num_states(), 2);
        assert!(m.features.is_identity());
        assert_eq!(m.behavior.prob(1, 1), 0.75);
        let again = parse_model(&m.to_json()).unwrap();
        assert_eq!(again.mdp, m.mdp);
        assert_eq!(again.features, m.features);
    }

    #[test]
    fn bad_row_reports_its_line() {
        let text = GOOD.replace("[0.3, 0.7]", "[0.3, 0.6]");
        match parse_model(&text).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 9, "{message}");
                assert!(message.contains("transitions[1][1]"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn reward_bound_reports_line() {
        let text = GOOD.replace("[0.0, 0.5]]", "[0.0, 1.5]]");
        assert!(matches!(parse_model(&text).unwrap_err(), Error::Parse { line: 11, .. }));
    }

    #[test]
    fn zero_behavior_entry_rejected() {
        let text = GOOD.replace("[0.25, 0.75]", "[0.0, 1.0]");
        assert!(matches!(parse_model(&text).unwrap_err(), Error::Parse { line: 12, .. }));
    }

    #[test]
    fn syntax_error_line() {
        let text = GOOD.replace("\"gamma\": 0.9,", "\"gamma\": 0.9,,");
        assert!(matches!(parse_model(&text).unwrap_err(), Error::Parse { line: 4, .. }));
    }
}
