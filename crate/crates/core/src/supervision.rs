//! Distant supervision of support sets by fact erasure.
//!
//! Facts are removed one at a time in a seeded random order. A fact whose
//! removal changes the whole-database answer is kept and reported; a fact
//! whose removal leaves the answer intact stays removed for the rest of the
//! search.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AnswerSet;
use crate::dataset_gen::GeneratedDataset;
use crate::fact_store::{Fact, FactId};
use crate::spj::{OracleSpj, SpjError};

/// Largest database a whole-database reader is asked about.
pub const DEFAULT_MAX_FACTS: usize = 50;

/// Answers a query from a complete set of facts.
pub trait WholeDbOracle: Sync {
    fn answer(&self, query: &str, facts: &[&Fact]) -> Result<AnswerSet, SpjError>;
}

impl WholeDbOracle for OracleSpj {
    fn answer(&self, query: &str, facts: &[&Fact]) -> Result<AnswerSet, SpjError> {
        self.whole_db_answer(query, facts)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SupervisionError {
    #[error("oracle failed on {query:?}: {source}")]
    OracleFailure { query: String, source: SpjError },
    #[error("database has {got} facts, more than the bound of {max}")]
    DatabaseTooLarge { got: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasureTrace {
    pub query: String,
    pub reference: AnswerSet,
    /// In discovery order.
    pub discovered: Vec<FactId>,
    pub iterations: usize,
    pub oracle_calls: usize,
}

impl ErasureTrace {
    pub fn discovered_set(&self) -> BTreeSet<FactId> {
        self.discovered.iter().copied().collect()
    }
}

fn ask(oracle: &dyn WholeDbOracle, query: &str, facts: &[&Fact]) -> Result<AnswerSet, SupervisionError> {
    oracle.answer(query, facts).map_err(|source| SupervisionError::OracleFailure {
        query: query.to_string(),
        source,
    })
}

/// Erasure search over `facts` with at most `max_iters` discoveries.
pub fn predict_support_facts(
    facts: &[Fact],
    query: &str,
    oracle: &dyn WholeDbOracle,
    seed: u64,
    max_iters: usize,
) -> Result<ErasureTrace, SupervisionError> {
    predict_support_facts_bounded(facts, query, oracle, seed, max_iters, DEFAULT_MAX_FACTS)
}

pub fn predict_support_facts_bounded(
    facts: &[Fact],
    query: &str,
    oracle: &dyn WholeDbOracle,
    seed: u64,
    max_iters: usize,
    max_facts: usize,
) -> Result<ErasureTrace, SupervisionError> {
    if facts.len() > max_facts {
        return Err(SupervisionError::DatabaseTooLarge {
            got: facts.len(),
            max: max_facts,
        });
    }
    let all: Vec<&Fact> = facts.iter().collect();
    let reference = ask(oracle, query, &all)?;
    let mut trace = ErasureTrace {
        query: query.to_string(),
        reference: reference.clone(),
        discovered: Vec::new(),
        iterations: 0,
        oracle_calls: 1,
    };
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut removed = vec![false; facts.len()];
    for i in order {
        if trace.iterations >= max_iters {
            break;
        }
        let rest: Vec<&Fact> = facts
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i && !removed[*j])
            .map(|(_, f)| f)
            .collect();
        let predicted = ask(oracle, query, &rest)?;
        trace.oracle_calls += 1;
        if predicted != reference {
            trace.discovered.push(facts[i].id);
            trace.iterations += 1;
        } else {
            removed[i] = true;
        }
    }
    Ok(trace)
}

fn case_seed(seed: u64, db: usize, case: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((db as u64) << 32) | case as u64);
    rand::Rng::gen(&mut rng)
}

/// Attaches erasure-found support sets to every case, leaving reference
/// labels untouched. A case gets one set (everything discovered) or none.
pub fn label_dataset(
    dataset: &GeneratedDataset,
    oracle: &dyn WholeDbOracle,
    seed: u64,
    max_iters: usize,
) -> Result<GeneratedDataset, SupervisionError> {
    let mut out = dataset.clone();
    for (d, db) in out.databases.iter_mut().enumerate() {
        let database = &db.database;
        let labels: Vec<Vec<Vec<FactId>>> = db
            .cases
            .par_iter()
            .enumerate()
            .map(|(c, case)| {
                let visible = database.visible_facts(case.timestamp);
                let trace = predict_support_facts(&visible, &case.text, oracle, case_seed(seed, d, c), max_iters)?;
                let mut set = trace.discovered;
                set.sort();
                Ok(if set.is_empty() { Vec::new() } else { vec![set] })
            })
            .collect::<Result<_, SupervisionError>>()?;
        for (case, sets) in db.cases.iter_mut().zip(labels) {
            case.distant_support_sets = Some(sets);
        }
    }
    Ok(out)
}
