//! Feature-hashed dense encoder.
//!
//! Unigrams and bigrams are hashed into `dim` buckets with a sign bit, then
//! L2-normalized. The encoder role is mixed into the hash salt, so fact-space
//! and state-space encodings are independent feature maps.

use serde::{Deserialize, Serialize};

use super::text::tokenize;

pub const DEFAULT_DIM: usize = 4096;

/// Token reserved for the STOP action. The tokenizer never emits a NUL byte.
pub const STOP_TOKEN: &str = "\u{0}stop";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderRole {
    Fact,
    State,
}

impl EncoderRole {
    pub fn salt(self) -> u64 {
        match self {
            EncoderRole::Fact => 0x9e37_79b9_7f4a_7c15,
            EncoderRole::State => 0xc2b2_ae3d_27d4_eb4f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector(pub Vec<f32>);

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Scales to unit norm; the zero vector is left alone.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for x in &mut self.0 {
                *x = (*x as f64 / n) as f32;
            }
        }
        self
    }
}

/// Inner product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Salted FNV-1a followed by a splitmix finalizer.
pub fn feature_hash(salt: u64, feature: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ salt;
    for b in feature.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// Bucket and sign for a hashed feature.
pub fn bucket(salt: u64, feature: &str, dim: usize) -> (usize, f32) {
    let h = feature_hash(salt, feature);
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    ((h % dim as u64) as usize, sign)
}

/// Unigram and bigram features of a token sequence.
pub fn ngram_features(tokens: &[String]) -> Vec<String> {
    let mut out: Vec<String> = tokens.to_vec();
    out.extend(tokens.windows(2).map(|w| format!("{}\u{1}{}", w[0], w[1])));
    out
}

/// Accumulates signed, hashed features into an unnormalized vector.
pub fn hash_features<'a>(features: impl IntoIterator<Item = &'a str>, role: EncoderRole, dim: usize) -> DenseVector {
    let mut v = vec![0.0f32; dim];
    for f in features {
        let (i, s) = bucket(role.salt(), f, dim);
        v[i] += s;
    }
    DenseVector(v)
}

/// Deterministic unit-norm encoding of a sentence (zero for no tokens).
pub fn hash_encode(text: &str, role: EncoderRole, dim: usize) -> DenseVector {
    let feats = ngram_features(&tokenize(text));
    hash_features(feats.iter().map(String::as_str), role, dim).normalized()
}

/// Fact-space vector of the STOP action.
pub fn stop_vector(dim: usize) -> DenseVector {
    hash_features([STOP_TOKEN], EncoderRole::Fact, dim).normalized()
}
