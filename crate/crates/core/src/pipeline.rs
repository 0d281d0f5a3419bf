//! Query answering end to end: snapshot, support sets, one SPJ call per set,
//! aggregation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, classify_query, AggregationError, AggregationFunction, AnswerSet};
use crate::fact_store::{classify_input, Database, Fact, FactId, FactStoreError, InputKind, Timestamp};
use crate::retrieval::{tfidf_rank, Action, IndexMode, RetrievalError};
use crate::spj::{IntermediateResult, SpjError, SpjOperator};
use crate::ssg::{generate_support_sets, ActionClassifier, FactSpace, SsgConfig, SsgError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Spj(#[from] SpjError),
    #[error(transparent)]
    Ssg(#[from] SsgError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Store(#[from] FactStoreError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// Where support sets come from.
#[derive(Debug, Clone, Copy)]
pub enum SsgMode<'a> {
    Trained(&'a ActionClassifier),
    /// Reference sets, for evaluation only.
    Perfect(&'a [Vec<FactId>]),
    /// The top `k` TF-IDF hits with a positive score, as one set.
    TfidfTopK(usize),
}

impl SsgMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            SsgMode::Trained(_) => "trained",
            SsgMode::Perfect(_) => "perfect",
            SsgMode::TfidfTopK(_) => "tfidf",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// 0 means one worker per core.
    pub workers: usize,
    pub ssg: SsgConfig,
    pub approx_index: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub support: Vec<FactId>,
    pub result: IntermediateResult,
}

/// Wall time per stage, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub ssg_us: u64,
    pub spj_us: u64,
    pub aggregate_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub answers: AnswerSet,
    pub agg_used: AggregationFunction,
    /// Non-NULL intermediates with the set that produced each, sorted.
    pub provenance: Vec<ProvenanceEntry>,
    /// Every set the SPJ operator was run on.
    pub support_sets: Vec<Vec<FactId>>,
    pub timings: StageTimings,
    /// Set when the SPJ operator could not parse the query.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestOutcome {
    Stored(FactId),
    Answered(QueryResult),
}

pub struct Pipeline {
    cfg: PipelineConfig,
    pool: rayon::ThreadPool,
}

fn micros(t: Instant) -> u64 {
    t.elapsed().as_micros().min(u64::MAX as u128) as u64
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.ssg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        Ok(Self { cfg, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Runs `f` on the worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn support_sets(
        &self,
        query: &str,
        visible: &[Fact],
        mode: SsgMode<'_>,
    ) -> Result<Vec<Vec<FactId>>, PipelineError> {
        Ok(match mode {
            SsgMode::Trained(model) => {
                let index = if self.cfg.approx_index { IndexMode::Approx } else { IndexMode::Exact };
                let space = FactSpace::new(visible, model.dim(), index)?;
                generate_support_sets(query, &space, model, &self.cfg.ssg)?.sets
            }
            SsgMode::Perfect(sets) => sets
                .iter()
                .map(|s| {
                    let mut s: Vec<FactId> = s.iter().copied().filter(|id| visible.iter().any(|f| f.id == *id)).collect();
                    s.sort();
                    s.dedup();
                    s
                })
                .filter(|s| !s.is_empty())
                .collect(),
            SsgMode::TfidfTopK(k) => {
                if visible.is_empty() {
                    return Ok(Vec::new());
                }
                let mut set: Vec<FactId> = tfidf_rank(query, visible, k)?
                    .into_iter()
                    .filter(|h| h.score > 0.0)
                    .filter_map(|h| match h.action {
                        Action::Fact(id) => Some(id),
                        Action::Stop => None,
                    })
                    .collect();
                set.sort();
                if set.is_empty() {
                    Vec::new()
                } else {
                    vec![set]
                }
            }
        })
    }

    pub fn answer_query(
        &self,
        db: &Database,
        query: &str,
        as_of: Timestamp,
        mode: SsgMode<'_>,
        spj: &dyn SpjOperator,
    ) -> Result<QueryResult, PipelineError> {
        let visible = db.visible_facts(as_of);
        self.answer_over(&visible, query, mode, spj)
    }

    /// Answers `query` over an already taken snapshot.
    pub fn answer_over(
        &self,
        visible: &[Fact],
        query: &str,
        mode: SsgMode<'_>,
        spj: &dyn SpjOperator,
    ) -> Result<QueryResult, PipelineError> {
        let mut timings = StageTimings::default();
        let t = Instant::now();
        let sets = self.support_sets(query, visible, mode)?;
        timings.ssg_us = micros(t);

        let t = Instant::now();
        let outputs: Vec<Result<(Vec<FactId>, IntermediateResult), SpjError>> = self.pool.install(|| {
            sets.par_iter()
                .map(|set| {
                    let support: Vec<Fact> = set
                        .iter()
                        .filter_map(|id| visible.iter().find(|f| f.id == *id).cloned())
                        .collect();
                    spj.apply(query, &support).map(|out| (set.clone(), out.result))
                })
                .collect()
        });
        timings.spj_us = micros(t);

        let agg_used = classify_query(query);
        let mut provenance = Vec::new();
        for out in outputs {
            match out {
                Ok((_, IntermediateResult::Null)) => {}
                Ok((support, result)) => provenance.push(ProvenanceEntry { support, result }),
                Err(SpjError::UnparsedQuery(q)) => {
                    return Ok(QueryResult {
                        answers: AnswerSet::null(),
                        agg_used,
                        provenance: Vec::new(),
                        support_sets: sets,
                        timings,
                        warning: Some(format!("query not understood: {q:?}")),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        provenance.sort_by(|a, b| (&a.support, &a.result).cmp(&(&b.support, &b.result)));

        let t = Instant::now();
        let results: Vec<IntermediateResult> = provenance.iter().map(|p| p.result.clone()).collect();
        let answers = aggregate(agg_used, &results)?;
        timings.aggregate_us = micros(t);
        Ok(QueryResult {
            answers,
            agg_used,
            provenance,
            support_sets: sets,
            timings,
            warning: None,
        })
    }

    /// Stores `text` as a fact, or answers it as of `timestamp` when it reads
    /// as a question.
    pub fn ingest(
        &self,
        db: &mut Database,
        text: &str,
        timestamp: Timestamp,
        mode: SsgMode<'_>,
        spj: &dyn SpjOperator,
    ) -> Result<IngestOutcome, PipelineError> {
        if text.trim().is_empty() {
            return Err(FactStoreError::EmptyText.into());
        }
        match classify_input(text) {
            InputKind::Update => Ok(IngestOutcome::Stored(db.append_fact(text, timestamp)?)),
            InputKind::Query => Ok(IngestOutcome::Answered(self.answer_query(db, text.trim(), timestamp, mode, spj)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Grammar;
    use crate::spj::OracleSpj;

    fn fig1() -> Database {
        let mut db = Database::new();
        for (i, t) in [
            "Nicholas lives in Washington D.C. with Sheryl.",
            "Sheryl is Nicholas's spouse.",
            "Teuvo was born in 1912 in Ruskala.",
            "Sheryl's mother is Mary.",
        ]
        .iter()
        .enumerate()
        {
            db.append_fact(t, i as u64 + 1).unwrap();
        }
        db
    }

    #[test]
    fn perfect_mode_on_figure_one() {
        let oracle = OracleSpj::new(Grammar::standard());
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let db = fig1();
        let r = p
            .answer_query(&db, "Who is Sheryl's husband?", 10, SsgMode::Perfect(&[vec![FactId(1)]]), &oracle)
            .unwrap();
        assert_eq!(r.answers, AnswerSet::single("Nicholas"));
        assert_eq!(r.provenance.len(), 1);
        assert_eq!(r.provenance[0].support, vec![FactId(1)]);
        let r = p.answer_query(&db, "Who is Sheryl's mother?", 10, SsgMode::TfidfTopK(2), &oracle).unwrap();
        assert!(r.answers.is_null() || r.answers == AnswerSet::single("Mary"));
    }

    #[test]
    fn unparsed_query_is_null_with_warning() {
        let oracle = OracleSpj::new(Grammar::standard());
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let r = p
            .answer_query(&fig1(), "Colorless green ideas?", 10, SsgMode::Perfect(&[vec![FactId(0)]]), &oracle)
            .unwrap();
        assert!(r.answers.is_null());
        assert!(r.warning.is_some());
    }

    #[test]
    fn ingest_dispatches() {
        let oracle = OracleSpj::new(Grammar::standard());
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let mut db = fig1();
        let o = p.ingest(&mut db, "Teuvo was born in 1912 in Ruskala.", 20, SsgMode::TfidfTopK(5), &oracle).unwrap();
        assert_eq!(o, IngestOutcome::Stored(FactId(4)));
        let o = p
            .ingest(&mut db, "Who is the oldest person in the database?", 21, SsgMode::TfidfTopK(5), &oracle)
            .unwrap();
        assert!(matches!(o, IngestOutcome::Answered(_)));
        let e = p.ingest(&mut db, "  ", 22, SsgMode::TfidfTopK(5), &oracle).unwrap_err();
        assert!(matches!(e, PipelineError::Store(FactStoreError::EmptyText)));
    }
}
