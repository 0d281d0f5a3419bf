//! Append-only store of timestamped natural-language facts.
//!
//! Facts are never physically removed. Deletion marks a fact as invalidated,
//! which hides it from every visibility query while keeping its id stable for
//! provenance and supervision files. Time is a logical, non-negative integer.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Stable identifier of a stored fact.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct FactId(pub u64);

impl fmt::Display for FactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Logical time. Larger is later.
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fact {
    pub id: FactId,
    pub text: String,
    pub timestamp: Timestamp,
    pub invalidated: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum FactStoreError {
    #[error("fact text is empty")]
    EmptyText,
    #[error("fact text must be a single line")]
    MultiLineText,
    #[error("timestamp {got} is earlier than the last appended timestamp {last}")]
    NonMonotonicTimestamp { last: Timestamp, got: Timestamp },
    #[error("unknown fact id {0}")]
    UnknownFactId(FactId),
    #[error("fact log line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether a piece of user input is a new fact or a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    Update,
    Query,
}

const INTERROGATIVES: &[&str] = &[
    "who", "what", "where", "when", "which", "how", "does", "is", "are", "was", "were", "did",
    "do", "has", "have", "list", "count",
];

/// Rule-based update/query split: a trailing `?` or a leading interrogative
/// word makes the input a query.
pub fn classify_input(text: &str) -> InputKind {
    let trimmed = text.trim();
    if trimmed.ends_with('?') {
        return InputKind::Query;
    }
    let first = trimmed
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .map(|w| w.to_lowercase());
    match first {
        Some(w) if INTERROGATIVES.contains(&w.as_str()) => InputKind::Query,
        _ => InputKind::Update,
    }
}

/// Ordered, append-only fact collection.
///
/// Single writer; readers take owned snapshots through [`Database::visible_facts`]
/// so a snapshot can be handed to worker threads while the writer continues.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Database {
    facts: Vec<Fact>,
    next_id: u64,
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// All stored facts, including invalidated ones, in insertion order.
    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn get(&self, id: FactId) -> Option<&Fact> {
        // Ids are dense for databases built through `append_fact`; fall back to a scan
        // for logs loaded with gaps.
        match self.facts.get(id.0 as usize) {
            Some(f) if f.id == id => Some(f),
            _ => self.facts.iter().find(|f| f.id == id),
        }
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.facts.last().map(|f| f.timestamp)
    }

    pub fn append_fact(
        &mut self,
        text: &str,
        timestamp: Timestamp,
    ) -> Result<FactId, FactStoreError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(FactStoreError::EmptyText);
        }
        if text.contains(['\n', '\r']) {
            return Err(FactStoreError::MultiLineText);
        }
        if let Some(last) = self.last_timestamp() {
            if timestamp < last {
                return Err(FactStoreError::NonMonotonicTimestamp {
                    last,
                    got: timestamp,
                });
            }
        }
        let id = FactId(self.next_id);
        self.next_id += 1;
        self.facts.push(Fact {
            id,
            text: text.to_string(),
            timestamp,
            invalidated: false,
        });
        Ok(id)
    }

    /// Tombstones a fact. Invalidating an already invalidated fact succeeds.
    pub fn invalidate_fact(&mut self, id: FactId) -> Result<(), FactStoreError> {
        let idx = self
            .facts
            .iter()
            .position(|f| f.id == id)
            .ok_or(FactStoreError::UnknownFactId(id))?;
        self.facts[idx].invalidated = true;
        Ok(())
    }

    /// Non-invalidated facts with `timestamp <= as_of`, in insertion order.
    pub fn visible_facts(&self, as_of: Timestamp) -> Vec<Fact> {
        self.facts
            .iter()
            .filter(|f| !f.invalidated && f.timestamp <= as_of)
            .cloned()
            .collect()
    }

    /// Rebuilds a database from already-identified facts, checking the log invariants.
    pub fn from_facts(facts: Vec<Fact>) -> Result<Self, FactStoreError> {
        let mut last: Option<Timestamp> = None;
        let mut prev_id: Option<FactId> = None;
        for (i, f) in facts.iter().enumerate() {
            let line = i + 1;
            if f.text.trim().is_empty() {
                return Err(FactStoreError::Malformed {
                    line,
                    message: "empty text".into(),
                });
            }
            if f.text.contains(['\n', '\r']) {
                return Err(FactStoreError::Malformed {
                    line,
                    message: "text spans several lines".into(),
                });
            }
            if let Some(l) = last {
                if f.timestamp < l {
                    return Err(FactStoreError::Malformed {
                        line,
                        message: format!("timestamp {} precedes {}", f.timestamp, l),
                    });
                }
            }
            if let Some(p) = prev_id {
                if f.id <= p {
                    return Err(FactStoreError::Malformed {
                        line,
                        message: format!("id {} is not greater than {}", f.id, p),
                    });
                }
            }
            last = Some(f.timestamp);
            prev_id = Some(f.id);
        }
        let next_id = prev_id.map_or(0, |p| p.0 + 1);
        Ok(Self { facts, next_id })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), FactStoreError> {
        for f in &self.facts {
            let line = serde_json::to_string(f).map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, FactStoreError> {
        let mut facts = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fact: Fact = serde_json::from_str(&line).map_err(|e| FactStoreError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            facts.push(fact);
        }
        Self::from_facts(facts)
    }

    pub fn save(&self, path: &Path) -> Result<(), FactStoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FactStoreError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn append_and_see() {
        let mut db = Database::new();
        let id = db.append_fact("Sheryl is Nicholas's spouse.", 3).unwrap();
        assert_eq!(id, FactId(0));
        let vis = db.visible_facts(3);
        assert_eq!(vis.len(), 1);
        assert_eq!(vis[0].text, "Sheryl is Nicholas's spouse.");
    }

    #[test]
    fn append_rejects_empty_and_time_travel() {
        let mut db = Database::new();
        assert!(matches!(db.append_fact("", 1), Err(FactStoreError::EmptyText)));
        db.append_fact("a", 5).unwrap();
        assert!(matches!(
            db.append_fact("b", 4),
            Err(FactStoreError::NonMonotonicTimestamp { last: 5, got: 4 })
        ));
        assert!(matches!(
            db.append_fact("x\ny", 6),
            Err(FactStoreError::MultiLineText)
        ));
    }

    #[test]
    fn invalidate_semantics() {
        let mut db = Database::new();
        let id = db.append_fact("Teuvo was born in 1912.", 0).unwrap();
        db.invalidate_fact(id).unwrap();
        assert!(db.visible_facts(10).is_empty());
        // second call is a no-op
        db.invalidate_fact(id).unwrap();
        assert!(matches!(
            Database::new().invalidate_fact(FactId(99)),
            Err(FactStoreError::UnknownFactId(FactId(99)))
        ));
        // ids are never reused
        assert_eq!(db.append_fact("again", 1).unwrap(), FactId(1));
    }

    #[test]
    fn visibility_window() {
        let mut db = Database::new();
        for (t, s) in [(1, "one"), (2, "two"), (5, "five")] {
            db.append_fact(s, t).unwrap();
        }
        let texts: Vec<_> = db.visible_facts(3).into_iter().map(|f| f.text).collect();
        assert_eq!(texts, ["one", "two"]);
        assert!(db.visible_facts(0).is_empty());
        assert_eq!(db.visible_facts(5).len(), 3);
    }

    #[test]
    fn input_classification() {
        assert_eq!(classify_input("Who is Sheryl's husband?"), InputKind::Query);
        assert_eq!(
            classify_input("Teuvo was born in 1912 in Ruskala."),
            InputKind::Update
        );
        assert_eq!(classify_input("List all people born in India"), InputKind::Query);
        assert_eq!(classify_input("In 1978, Sheryl's mother gave birth to her in Huntsville."), InputKind::Update);
    }

    #[test]
    fn jsonl_round_trip_and_rejections() {
        let mut db = Database::new();
        db.append_fact("Sue is Mary's mom.", 1).unwrap();
        db.append_fact("Gustavo likes espresso.", 2).unwrap();
        db.invalidate_fact(FactId(0)).unwrap();
        let mut buf = Vec::new();
        db.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            r#"{"id":0,"text":"Sue is Mary's mom.","timestamp":1,"invalidated":true}"#
        ));
        let back = Database::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, db);

        let bad_type = r#"{"id":0,"text":"x","timestamp":"1","invalidated":false}"#;
        assert!(Database::read_jsonl(bad_type.as_bytes()).is_err());
        let extra = r#"{"id":0,"text":"x","timestamp":1,"invalidated":false,"note":1}"#;
        assert!(Database::read_jsonl(extra.as_bytes()).is_err());
        let backwards = "{\"id\":0,\"text\":\"x\",\"timestamp\":4,\"invalidated\":false}\n{\"id\":1,\"text\":\"y\",\"timestamp\":3,\"invalidated\":false}";
        assert!(Database::read_jsonl(backwards.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn visible_is_ordered_subset(
            steps in proptest::collection::vec((0u64..4, any::<bool>()), 0..40),
            as_of in 0u64..100,
        ) {
            let mut db = Database::new();
            let mut t = 0;
            for (i, (dt, kill)) in steps.iter().enumerate() {
                t += dt;
                let id = db.append_fact(&format!("fact {i}"), t).unwrap();
                if *kill {
                    db.invalidate_fact(id).unwrap();
                }
            }
            let vis = db.visible_facts(as_of);
            prop_assert!(vis.iter().all(|f| !f.invalidated && f.timestamp <= as_of));
            prop_assert!(vis.windows(2).all(|w| w[0].id < w[1].id));
            let expected = db.facts().iter().filter(|f| !f.invalidated && f.timestamp <= as_of).count();
            prop_assert_eq!(vis.len(), expected);
        }

        #[test]
        fn append_then_invalidate_is_invisible(texts in proptest::collection::vec("[a-z]{1,8}", 1..10), extra in "[a-z]{1,8}") {
            let mut db = Database::new();
            for (i, s) in texts.iter().enumerate() {
                db.append_fact(s, i as u64).unwrap();
            }
            let before: Vec<String> = db.visible_facts(u64::MAX).into_iter().map(|f| f.text).collect();
            let id = db.append_fact(&extra, texts.len() as u64).unwrap();
            db.invalidate_fact(id).unwrap();
            let after: Vec<String> = db.visible_facts(u64::MAX).into_iter().map(|f| f.text).collect();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn classify_is_total(s in ".{1,40}") {
            let a = classify_input(&s);
            prop_assert_eq!(a, classify_input(&s));
        }
    }
}
