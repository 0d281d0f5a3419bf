//! Incremental support set generation.
//!
//! Starting from the empty set, each open state is scored against every fact
//! (by MIPS) and against STOP. Facts above the threshold spawn child states,
//! STOP closes the state. The frontier advances one level at a time.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::fact_store::{Fact, FactId};
use crate::retrieval::{Action, IndexMode, MipsIndex, RetrievalError};

mod model;
mod train;

pub use model::{ActionClassifier, SparseFact, StateFeatures, StateProbe, DEFAULT_TABLE_BITS};
pub use train::{linked_successors, train_action_classifier, LabelSource, TrainOptions};

#[derive(Debug, thiserror::Error)]
pub enum SsgError {
    #[error("no training cases with support sets")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsgConfig {
    pub tau: f64,
    pub max_depth: usize,
    pub max_open: usize,
    /// Fact actions kept per expansion.
    pub cap: usize,
}

impl Default for SsgConfig {
    fn default() -> Self {
        Self {
            tau: 0.0,
            max_depth: 3,
            max_open: 64,
            cap: 16,
        }
    }
}

impl SsgConfig {
    pub fn validate(&self) -> Result<(), SsgError> {
        if self.max_depth == 0 || self.max_open == 0 || self.cap == 0 {
            return Err(SsgError::InvalidConfig(format!(
                "max_depth, max_open and cap must be positive (got {}, {}, {})",
                self.max_depth, self.max_open, self.cap
            )));
        }
        if !self.tau.is_finite() {
            return Err(SsgError::InvalidConfig("tau must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SsgState {
    pub query: String,
    /// Sorted by (timestamp, text) once canonicalized against a snapshot.
    pub partial: Vec<FactId>,
}

impl SsgState {
    pub fn root(query: &str) -> Self {
        Self {
            query: query.to_string(),
            partial: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.partial.len()
    }
}

/// Encoded snapshot of visible facts: sparse vectors, the MIPS index over
/// them, and the union of their non-zero buckets.
#[derive(Debug, Clone)]
pub struct FactSpace {
    facts: Vec<Fact>,
    by_id: HashMap<FactId, usize>,
    sparse: Vec<SparseFact>,
    index: MipsIndex,
    active: Vec<u32>,
}

impl FactSpace {
    pub fn new(facts: &[Fact], dim: usize, mode: IndexMode) -> Result<Self, SsgError> {
        let sparse: Vec<SparseFact> = facts.iter().map(|f| SparseFact::encode(&f.text, dim)).collect();
        let vectors = facts
            .iter()
            .zip(&sparse)
            .map(|(f, s)| {
                let mut v = vec![0.0f32; dim];
                for (b, x) in &s.0 {
                    v[*b as usize] = *x;
                }
                (f.id, crate::retrieval::DenseVector(v))
            })
            .collect();
        let index = MipsIndex::build(dim, vectors, mode)?;
        let active: BTreeSet<u32> = sparse.iter().flat_map(|s| s.0.iter().map(|(b, _)| *b)).collect();
        Ok(Self {
            by_id: facts.iter().enumerate().map(|(i, f)| (f.id, i)).collect(),
            facts: facts.to_vec(),
            sparse,
            index,
            active: active.into_iter().collect(),
        })
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn index(&self) -> &MipsIndex {
        &self.index
    }

    pub fn fact(&self, id: FactId) -> Option<&Fact> {
        self.by_id.get(&id).map(|i| &self.facts[*i])
    }

    pub fn sparse(&self, id: FactId) -> Option<&SparseFact> {
        self.by_id.get(&id).map(|i| &self.sparse[*i])
    }

    /// Sorts the partial set by (timestamp, text, id).
    pub fn canonicalize(&self, state: &mut SsgState) {
        state.partial.sort_by(|a, b| {
            let (fa, fb) = (self.fact(*a), self.fact(*b));
            fa.map(|f| (f.timestamp, &f.text))
                .cmp(&fb.map(|f| (f.timestamp, &f.text)))
                .then(a.cmp(b))
        });
        state.partial.dedup();
    }

    /// Classifier features of a state, after canonicalization.
    pub fn features(&self, state: &SsgState) -> StateFeatures {
        let mut s = state.clone();
        self.canonicalize(&mut s);
        let texts: Vec<&str> = s
            .partial
            .iter()
            .filter_map(|id| self.fact(*id).map(|f| f.text.as_str()))
            .collect();
        StateFeatures::new(&state.query, &texts, self.dim())
    }
}

/// Fact-space probe for a state: query plus chosen facts in canonical order.
pub fn encode_state(model: &ActionClassifier, space: &FactSpace, state: &SsgState) -> StateProbe {
    model.probe(&space.features(state), None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    /// Child states with the score of the fact action that produced them.
    pub children: Vec<(SsgState, f64)>,
    pub close: bool,
}

impl Expansion {
    pub fn is_dead_end(&self) -> bool {
        self.children.is_empty() && !self.close
    }
}

/// One step of the search. At `max_depth` the state closes without scoring.
pub fn expand(
    state: &SsgState,
    space: &FactSpace,
    model: &ActionClassifier,
    cfg: &SsgConfig,
) -> Result<Expansion, SsgError> {
    if state.depth() >= cfg.max_depth {
        return Ok(Expansion {
            children: Vec::new(),
            close: true,
        });
    }
    let features = space.features(state);
    let probe = model.probe(&features, Some(&space.active));
    let close = probe.stop >= cfg.tau;
    let hits = space
        .index
        .search(&probe.probe, cfg.tau - probe.offset, cfg.cap + state.depth())?;
    let mut children = Vec::new();
    for h in hits {
        let Action::Fact(id) = h.action else { continue };
        if state.partial.contains(&id) {
            continue;
        }
        let mut child = SsgState {
            query: state.query.clone(),
            partial: state.partial.clone(),
        };
        child.partial.push(id);
        space.canonicalize(&mut child);
        children.push((child, h.score + probe.offset));
        if children.len() == cfg.cap {
            break;
        }
    }
    Ok(Expansion { children, close })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportSets {
    /// Each set sorted by id; the list sorted lexicographically.
    pub sets: Vec<Vec<FactId>>,
    pub expansions: usize,
}

/// Breadth-first search over open states, keeping the best `max_open` states
/// per level. Closed sets are deduplicated and capped at `max_open`.
/// `expansions` counts scored expansions, so it never exceeds
/// `max_open * max_depth`.
pub fn generate_support_sets(
    query: &str,
    space: &FactSpace,
    model: &ActionClassifier,
    cfg: &SsgConfig,
) -> Result<SupportSets, SsgError> {
    cfg.validate()?;
    if model.dim() != space.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: space.dim(),
            got: model.dim(),
        }
        .into());
    }
    let mut out = SupportSets::default();
    if space.is_empty() {
        return Ok(out);
    }
    let mut closed: BTreeSet<Vec<FactId>> = BTreeSet::new();
    let mut open = vec![SsgState::root(query)];
    while !open.is_empty() && closed.len() < cfg.max_open {
        let mut next: BTreeMap<Vec<FactId>, (SsgState, f64)> = BTreeMap::new();
        for state in &open {
            if state.depth() < cfg.max_depth {
                out.expansions += 1;
            }
            let e = expand(state, space, model, cfg)?;
            if e.close && closed.len() < cfg.max_open {
                let mut key = state.partial.clone();
                key.sort();
                // The empty set supports nothing.
                if !key.is_empty() {
                    closed.insert(key);
                }
            }
            for (child, score) in e.children {
                let mut key = child.partial.clone();
                key.sort();
                match next.get_mut(&key) {
                    Some(slot) if slot.1 >= score => {}
                    Some(slot) => slot.1 = score,
                    None => {
                        next.insert(key, (child, score));
                    }
                }
            }
        }
        let mut ranked: Vec<(Vec<FactId>, SsgState, f64)> =
            next.into_iter().map(|(k, (s, sc))| (k, s, sc)).collect();
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cfg.max_open);
        open = ranked.into_iter().map(|(_, s, _)| s).collect();
    }
    out.sets = closed.into_iter().collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(texts: &[&str]) -> FactSpace {
        let facts: Vec<Fact> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Fact {
                id: FactId(i as u64),
                text: t.to_string(),
                timestamp: i as u64 + 1,
                invalidated: false,
            })
            .collect();
        FactSpace::new(&facts, 256, IndexMode::Exact).unwrap()
    }

    #[test]
    fn zero_model_with_positive_tau_dead_ends() {
        let sp = space(&["a b", "c d"]);
        let m = ActionClassifier::zeros(256, 10);
        let cfg = SsgConfig {
            tau: 0.5,
            ..SsgConfig::default()
        };
        let e = expand(&SsgState::root("q"), &sp, &m, &cfg).unwrap();
        assert!(e.is_dead_end());
        let out = generate_support_sets("q", &sp, &m, &cfg).unwrap();
        assert!(out.sets.is_empty());
        assert_eq!(out.expansions, 1);
    }

    #[test]
    fn max_depth_forces_close() {
        let sp = space(&["a b", "c d"]);
        let m = ActionClassifier::zeros(256, 10);
        let cfg = SsgConfig {
            tau: 5.0,
            max_depth: 1,
            ..SsgConfig::default()
        };
        let st = SsgState {
            query: "q".into(),
            partial: vec![FactId(0)],
        };
        let e = expand(&st, &sp, &m, &cfg).unwrap();
        assert!(e.close && e.children.is_empty());
    }

    #[test]
    fn empty_snapshot_yields_nothing() {
        let sp = space(&[]);
        let m = ActionClassifier::zeros(256, 10);
        let out = generate_support_sets("Who is Sheryl's husband?", &sp, &m, &SsgConfig::default()).unwrap();
        assert_eq!(out, SupportSets::default());
    }

    #[test]
    fn state_encoding_is_canonical() {
        let sp = space(&["Sheryl is Nicholas's spouse.", "Sheryl lives in Washington D.C.", "Teuvo was born in 1912."]);
        let mut m = ActionClassifier::zeros(256, 10);
        let f = StateFeatures::new("x", &["Sheryl is Nicholas's spouse."], 256);
        let mut phi = Vec::new();
        m.phi(&f, model::Target::Fact(sp.sparse(FactId(1)).unwrap()), &mut phi);
        m.add_phi(&phi, 1.0);
        let q = "Does Nicholas's spouse live in Washington D.C.?";
        let a = SsgState {
            query: q.into(),
            partial: vec![FactId(0), FactId(1)],
        };
        let b = SsgState {
            query: q.into(),
            partial: vec![FactId(1), FactId(0)],
        };
        let (pa, pb) = (encode_state(&m, &sp, &a), encode_state(&m, &sp, &b));
        assert_eq!(pa.probe, pb.probe);
        assert_eq!(pa.offset, pb.offset);
        let root = encode_state(&m, &sp, &SsgState::root(q));
        let alone = m.probe(&StateFeatures::new(q, &[], 256), None);
        assert_eq!(root.probe, alone.probe);
    }
}
