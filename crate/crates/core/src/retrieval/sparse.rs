//! TF·IDF cosine and Okapi BM25 ranking over a fact corpus.

use std::collections::{BTreeMap, HashMap};

use crate::fact_store::{Fact, FactId};

use super::text::tokenize;
use super::{sort_hits, RetrievalError, ScoredHit};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut tf = BTreeMap::new();
    for t in tokenize(text) {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    tf
}

fn document_frequencies(docs: &[BTreeMap<String, f64>]) -> HashMap<String, usize> {
    let mut df = HashMap::new();
    for d in docs {
        for t in d.keys() {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
    }
    df
}

fn top_k(mut hits: Vec<ScoredHit>, k: usize) -> Vec<ScoredHit> {
    sort_hits(&mut hits);
    hits.truncate(k);
    hits
}

/// Prebuilt TF·IDF vectors for a corpus.
#[derive(Debug, Clone)]
pub struct TfidfIndex {
    ids: Vec<FactId>,
    /// L2-normalized document vectors.
    docs: Vec<BTreeMap<String, f64>>,
    idf: HashMap<String, f64>,
}

impl TfidfIndex {
    /// idf(t) = ln((N+1)/(df+1)) + 1, raw term frequency.
    pub fn build(corpus: &[Fact]) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let counts: Vec<_> = corpus.iter().map(|f| term_counts(&f.text)).collect();
        let n = corpus.len() as f64;
        let idf: HashMap<String, f64> = document_frequencies(&counts)
            .into_iter()
            .map(|(t, df)| (t, ((n + 1.0) / (df as f64 + 1.0)).ln() + 1.0))
            .collect();
        let docs = counts
            .into_iter()
            .map(|tf| normalize(weigh(tf, &idf)))
            .collect();
        Ok(Self {
            ids: corpus.iter().map(|f| f.id).collect(),
            docs,
            idf,
        })
    }

    /// The query's normalized TF·IDF vector. Out-of-vocabulary terms are dropped.
    pub fn query_vector(&self, query: &str) -> BTreeMap<String, f64> {
        let tf = term_counts(query)
            .into_iter()
            .filter(|(t, _)| self.idf.contains_key(t))
            .collect();
        normalize(weigh(tf, &self.idf))
    }

    pub fn rank(&self, query: &str, k: usize) -> Vec<ScoredHit> {
        let q = self.query_vector(query);
        let hits = self
            .ids
            .iter()
            .zip(&self.docs)
            .map(|(id, d)| {
                let score: f64 = q.iter().map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0)).sum();
                ScoredHit::fact(*id, score)
            })
            .collect();
        top_k(hits, k)
    }
}

fn weigh(tf: BTreeMap<String, f64>, idf: &HashMap<String, f64>) -> BTreeMap<String, f64> {
    tf.into_iter()
        .map(|(t, c)| {
            let w = c * idf.get(&t).copied().unwrap_or(0.0);
            (t, w)
        })
        .collect()
}

fn normalize(mut v: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.values_mut().for_each(|w| *w /= norm);
    }
    v
}

/// Top-k facts by TF·IDF cosine similarity.
pub fn tfidf_rank(query: &str, corpus: &[Fact], k: usize) -> Result<Vec<ScoredHit>, RetrievalError> {
    Ok(TfidfIndex::build(corpus)?.rank(query, k))
}

/// Prebuilt BM25 statistics for a corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<FactId>,
    docs: Vec<BTreeMap<String, f64>>,
    lengths: Vec<f64>,
    avgdl: f64,
    idf: HashMap<String, f64>,
}

impl Bm25Index {
    /// idf(t) = ln((N − df + 0.5)/(df + 0.5) + 1), always positive.
    pub fn build(corpus: &[Fact]) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let docs: Vec<_> = corpus.iter().map(|f| term_counts(&f.text)).collect();
        let lengths: Vec<f64> = docs.iter().map(|d| d.values().sum()).collect();
        let n = corpus.len() as f64;
        let avgdl = lengths.iter().sum::<f64>() / n;
        let idf = document_frequencies(&docs)
            .into_iter()
            .map(|(t, df)| {
                let df = df as f64;
                (t, ((n - df + 0.5) / (df + 0.5) + 1.0).ln())
            })
            .collect();
        Ok(Self {
            ids: corpus.iter().map(|f| f.id).collect(),
            docs,
            lengths,
            avgdl,
            idf,
        })
    }

    /// Sums over distinct query terms.
    pub fn rank(&self, query: &str, k: usize) -> Vec<ScoredHit> {
        let terms = term_counts(query);
        let hits = (0..self.ids.len())
            .map(|i| {
                let norm = if self.avgdl > 0.0 {
                    1.0 - BM25_B + BM25_B * self.lengths[i] / self.avgdl
                } else {
                    1.0
                };
                let score: f64 = terms
                    .keys()
                    .filter_map(|t| {
                        let tf = *self.docs[i].get(t)?;
                        let idf = self.idf.get(t)?;
                        Some(idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm))
                    })
                    .sum();
                ScoredHit::fact(self.ids[i], score)
            })
            .collect();
        top_k(hits, k)
    }
}

/// Top-k facts by Okapi BM25 (k1 = 1.2, b = 0.75).
pub fn bm25_rank(query: &str, corpus: &[Fact], k: usize) -> Result<Vec<ScoredHit>, RetrievalError> {
    Ok(Bm25Index::build(corpus)?.rank(query, k))
}
