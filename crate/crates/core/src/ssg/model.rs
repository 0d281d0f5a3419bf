//! Linear action classifier over hashed interaction features.
//!
//! A state is summarized by a bag of hashed keys (query n-grams, depth
//! conjunctions, n-grams of the facts already chosen, all with proper names
//! replaced by a placeholder) plus copy channels for its surface unigrams. Each key owns a row over fact-space buckets, so the score of a
//! fact is `probe · y + offset` where `y` is the fact's feature-hashed vector,
//! and the STOP action is one more column.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::retrieval::dense::{bucket, ngram_features, splitmix64};
use crate::retrieval::{tokenize, DenseVector, EncoderRole};

use super::SsgError;

const MAGIC: &[u8; 7] = b"NDBSSG1";
pub const DEFAULT_TABLE_BITS: u32 = 21;

/// Sparse fact-space encoding: (bucket, value) pairs sorted by bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFact(pub Vec<(u32, f32)>);

impl SparseFact {
    pub fn encode(text: &str, dim: usize) -> Self {
        Self::from_dense(&encode_fact(text, dim))
    }

    pub fn from_dense(v: &DenseVector) -> Self {
        Self(
            v.as_slice()
                .iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(i, x)| (i as u32, *x))
                .collect(),
        )
    }

    fn get(&self, b: u32) -> f32 {
        match self.0.binary_search_by_key(&b, |(i, _)| *i) {
            Ok(i) => self.0[i].1,
            Err(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct CopyChannel {
    bucket: u32,
    sign: f32,
    keys: Vec<u64>,
}

/// Hashed features of one (query, partial support set) state.
#[derive(Debug, Clone)]
pub struct StateFeatures {
    keys: Vec<u64>,
    copies: Vec<CopyChannel>,
}

fn key(s: &str) -> u64 {
    crate::retrieval::dense::feature_hash(EncoderRole::State.salt(), s)
}

/// Sentence-initial words that are capitalized only by position.
const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "are", "at", "did", "do", "does", "for", "has", "have", "how", "in", "is", "of", "on", "the",
    "to", "was", "were", "what", "when", "where", "which", "who", "whom", "whose", "why",
];

const ENTITY: &str = "\u{2}ent";
const NUMBER: &str = "\u{2}num";

/// Lowercased tokens, each flagged when it looks like a proper name or number.
fn flagged_tokens(text: &str) -> impl Iterator<Item = (String, bool)> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .enumerate()
        .map(|(i, w)| {
            let lower = w.to_lowercase();
            let first = w.chars().next().expect("non-empty");
            let named = first.is_uppercase() || first.is_numeric();
            let named = named && !(i == 0 && FUNCTION_WORDS.contains(&lower.as_str()));
            (lower, named)
        })
}

/// Lowercased tokens with proper names and numbers replaced by placeholders.
pub fn delexicalize(text: &str) -> Vec<String> {
    flagged_tokens(text)
        .map(|(t, named)| match named {
            false => t,
            true if t.chars().all(|c| c.is_ascii_digit()) => NUMBER.to_string(),
            true => ENTITY.to_string(),
        })
        .collect()
}

/// The lowercased proper names and numbers of a sentence.
pub fn entity_tokens(text: &str) -> BTreeSet<String> {
    flagged_tokens(text).filter(|(_, named)| *named).map(|(t, _)| t).collect()
}

/// Fact-side encoder: surface unigrams plus delexicalized bigrams, unit norm.
pub fn encode_fact(text: &str, dim: usize) -> DenseVector {
    let mut feats = tokenize(text);
    let shape = delexicalize(text);
    feats.extend(shape.windows(2).map(|w| format!("{}\u{1}{}", w[0], w[1])));
    crate::retrieval::dense::hash_features(feats.iter().map(String::as_str), EncoderRole::Fact, dim).normalized()
}

impl StateFeatures {
    /// `facts` are the texts already in the partial set; their order is irrelevant.
    pub fn new(query: &str, facts: &[&str], dim: usize) -> Self {
        let depth = facts.len();
        let q_grams: BTreeSet<String> = ngram_features(&delexicalize(query)).into_iter().collect();
        let mut names: BTreeSet<String> = BTreeSet::new();
        names.insert("bias".into());
        names.insert(format!("d{depth}"));
        for g in &q_grams {
            names.insert(format!("q{depth}|{g}"));
            names.insert(format!("q|{g}"));
        }
        let mut f_tokens: BTreeSet<String> = BTreeSet::new();
        for f in facts {
            for g in ngram_features(&delexicalize(f)) {
                names.insert(format!("f|{g}"));
            }
            f_tokens.extend(tokenize(f));
        }
        let q_set: BTreeSet<String> = tokenize(query).into_iter().collect();
        let q_names = entity_tokens(query);
        let mut copies = Vec::new();
        for t in q_set.union(&f_tokens) {
            let ch = match (q_set.contains(t), f_tokens.contains(t)) {
                (true, true) => "qf",
                (true, false) => "q",
                _ => "f",
            };
            let (b, sign) = bucket(EncoderRole::Fact.salt(), t, dim);
            // Whether copying helps depends on the question being asked.
            let mut keys = vec![key(&format!("c{ch}{depth}"))];
            // Names in the query are copied by channel only, so unseen names behave like seen ones.
            if !q_names.contains(t) {
                keys.push(key(&format!("c{ch}{depth}|{t}")));
            }
            keys.extend(q_grams.iter().map(|g| key(&format!("c{ch}{depth}&{g}"))));
            copies.push(CopyChannel {
                bucket: b as u32,
                sign,
                keys,
            });
        }
        Self {
            keys: names.iter().map(|n| key(n)).collect(),
            copies,
        }
    }
}

/// Weights of the action classifier. Columns `dim` and `dim + 1` hold the
/// STOP action and the per-state fact offset; `dim + 2` holds copy weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionClassifier {
    dim: usize,
    table_bits: u32,
    weights: Vec<f32>,
    stop_bias: f32,
}

/// Probe of one state: fact scores are `probe · y + offset`.
#[derive(Debug, Clone)]
pub struct StateProbe {
    pub probe: DenseVector,
    pub offset: f64,
    pub stop: f64,
}

pub(crate) enum Target<'a> {
    Fact(&'a SparseFact),
    Stop,
}

impl ActionClassifier {
    pub fn zeros(dim: usize, table_bits: u32) -> Self {
        assert!(dim > 0 && (8..=30).contains(&table_bits));
        Self {
            dim,
            table_bits,
            weights: vec![0.0; 1 << table_bits],
            stop_bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table_bits(&self) -> u32 {
        self.table_bits
    }

    pub fn stop_bias(&self) -> f32 {
        self.stop_bias
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn is_zero(&self) -> bool {
        self.stop_bias == 0.0 && self.weights.iter().all(|w| *w == 0.0)
    }

    fn stop_col(&self) -> u64 {
        self.dim as u64
    }

    fn offset_col(&self) -> u64 {
        self.dim as u64 + 1
    }

    fn copy_col(&self) -> u64 {
        self.dim as u64 + 2
    }

    #[inline]
    fn slot(&self, key: u64, col: u64) -> usize {
        let h = splitmix64(key ^ (col + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (h >> (64 - self.table_bits)) as usize
    }

    fn row_sum(&self, f: &StateFeatures, col: u64) -> f64 {
        f.keys.iter().map(|k| self.weights[self.slot(*k, col)] as f64).sum()
    }

    fn copy_weight(&self, c: &CopyChannel) -> f64 {
        c.keys.iter().map(|k| self.weights[self.slot(*k, self.copy_col())] as f64).sum()
    }

    /// Probe restricted to `buckets` (every bucket when `None`).
    pub fn probe(&self, f: &StateFeatures, buckets: Option<&[u32]>) -> StateProbe {
        let mut p = vec![0.0f32; self.dim];
        let mut fill = |b: usize| {
            p[b] = self.row_sum(f, b as u64) as f32;
        };
        match buckets {
            Some(bs) => bs.iter().for_each(|b| fill(*b as usize)),
            None => (0..self.dim).for_each(fill),
        }
        for c in &f.copies {
            p[c.bucket as usize] += (c.sign as f64 * self.copy_weight(c)) as f32;
        }
        StateProbe {
            probe: DenseVector(p),
            offset: self.row_sum(f, self.offset_col()),
            stop: self.row_sum(f, self.stop_col()) + self.stop_bias as f64,
        }
    }

    /// Sparse feature vector of (state, action); `usize::MAX` is the STOP bias.
    pub(crate) fn phi(&self, f: &StateFeatures, target: Target<'_>, out: &mut Vec<(usize, f32)>) {
        out.clear();
        match target {
            Target::Stop => {
                for k in &f.keys {
                    out.push((self.slot(*k, self.stop_col()), 1.0));
                }
                out.push((usize::MAX, 1.0));
            }
            Target::Fact(y) => {
                for k in &f.keys {
                    for (b, v) in &y.0 {
                        out.push((self.slot(*k, *b as u64), *v));
                    }
                    out.push((self.slot(*k, self.offset_col()), 1.0));
                }
                for c in &f.copies {
                    let yv = y.get(c.bucket);
                    if yv != 0.0 {
                        for k in &c.keys {
                            out.push((self.slot(*k, self.copy_col()), c.sign * yv));
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn dot_phi(&self, phi: &[(usize, f32)]) -> f64 {
        phi.iter()
            .map(|(i, v)| {
                let w = if *i == usize::MAX { self.stop_bias } else { self.weights[*i] };
                w as f64 * *v as f64
            })
            .sum()
    }

    pub(crate) fn weights_mut(&mut self) -> (&mut [f32], &mut f32) {
        (&mut self.weights, &mut self.stop_bias)
    }

    #[cfg(test)]
    pub(crate) fn add_phi(&mut self, phi: &[(usize, f32)], scale: f32) {
        for (i, v) in phi {
            if *i == usize::MAX {
                self.stop_bias += scale * v;
            } else {
                self.weights[*i] += scale * v;
            }
        }
    }

    pub fn score_fact(&self, f: &StateFeatures, y: &SparseFact) -> f64 {
        let mut phi = Vec::new();
        self.phi(f, Target::Fact(y), &mut phi);
        self.dot_phi(&phi)
    }

    pub fn score_stop(&self, f: &StateFeatures) -> f64 {
        self.row_sum(f, self.stop_col()) + self.stop_bias as f64
    }

    /// Layout: magic, u32 dim, u32 table bits, 2^bits f32 weights, f32 STOP bias. Little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SsgError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.table_bits.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.weights.len() * 4);
        for x in &self.weights {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.write_all(&self.stop_bias.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SsgError> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SsgError::Malformed("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let dim = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let table_bits = u32::from_le_bytes(word);
        if dim == 0 || !(8..=30).contains(&table_bits) {
            return Err(SsgError::Malformed(format!("dim {dim}, table bits {table_bits}")));
        }
        let mut buf = vec![0u8; (1usize << table_bits) * 4];
        r.read_exact(&mut buf)?;
        let weights: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r.read_exact(&mut word)?;
        let stop_bias = f32::from_le_bytes(word);
        if !stop_bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(SsgError::Malformed("non-finite weight".into()));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(SsgError::Malformed(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            dim,
            table_bits,
            weights,
            stop_bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SsgError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SsgError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
