//! Maximum inner product search: flat exact scan or an IVF-style index.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fact_store::FactId;

use super::dense::{dot, DenseVector};
use super::{sort_hits, Action, RetrievalError, ScoredHit};

const MAGIC: &[u8; 7] = b"NDBIDX1";
pub const KMEANS_ITERS: usize = 20;
pub const PROBES: usize = 4;
pub const DEFAULT_SEED: u64 = 0x01dc_5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Exact,
    Approx,
}

#[derive(Debug, Clone, PartialEq)]
struct Quantizer {
    centroids: Vec<f32>,
    buckets: Vec<Vec<u32>>,
}

/// Immutable set of (FactId, vector) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MipsIndex {
    dim: usize,
    ids: Vec<FactId>,
    data: Vec<f32>,
    quantizer: Option<Quantizer>,
}

impl MipsIndex {
    /// Builds with the default clustering seed.
    pub fn build(
        dim: usize,
        vectors: Vec<(FactId, DenseVector)>,
        mode: IndexMode,
    ) -> Result<Self, RetrievalError> {
        Self::build_seeded(dim, vectors, mode, DEFAULT_SEED)
    }

    /// Approx mode clusters into ⌈√n⌉ cells by spherical k-means.
    pub fn build_seeded(
        dim: usize,
        vectors: Vec<(FactId, DenseVector)>,
        mode: IndexMode,
        seed: u64,
    ) -> Result<Self, RetrievalError> {
        let mut ids = Vec::with_capacity(vectors.len());
        let mut data = Vec::with_capacity(vectors.len() * dim);
        for (id, v) in vectors {
            if v.dim() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            ids.push(id);
            data.extend_from_slice(v.as_slice());
        }
        let mut index = Self {
            dim,
            ids,
            data,
            quantizer: None,
        };
        if mode == IndexMode::Approx && !index.ids.is_empty() {
            let centroids = index.kmeans(seed);
            index.quantizer = Some(index.assign(centroids));
        }
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mode(&self) -> IndexMode {
        if self.quantizer.is_some() {
            IndexMode::Approx
        } else {
            IndexMode::Exact
        }
    }

    pub fn ids(&self) -> &[FactId] {
        &self.ids
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        self.row(i)
    }

    fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> usize {
        let k = centroids.len() / dim;
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..k {
            let s = dot(&centroids[c * dim..(c + 1) * dim], v);
            if s > best.1 {
                best = (c, s);
            }
        }
        best.0
    }

    fn kmeans(&self, seed: u64) -> Vec<f32> {
        let n = self.ids.len();
        let dim = self.dim;
        let k = (n as f64).sqrt().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, n, k).into_vec();
        picks.sort_unstable();
        let mut centroids: Vec<f32> = picks.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        for _ in 0..KMEANS_ITERS {
            let mut sums = vec![0.0f64; k * dim];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                let c = Self::nearest(&centroids, dim, self.row(i));
                counts[c] += 1;
                for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(self.row(i)) {
                    *s += *x as f64;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    continue;
                }
                let s = &sums[c * dim..(c + 1) * dim];
                let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for (dst, x) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(s) {
                        *dst = (x / norm) as f32;
                    }
                }
            }
        }
        centroids
    }

    fn assign(&self, centroids: Vec<f32>) -> Quantizer {
        let k = centroids.len() / self.dim;
        let mut buckets = vec![Vec::new(); k];
        for i in 0..self.ids.len() {
            buckets[Self::nearest(&centroids, self.dim, self.row(i))].push(i as u32);
        }
        Quantizer { centroids, buckets }
    }

    /// Hits with inner product ≥ `tau`, best first, at most `cap`.
    pub fn search(&self, probe: &DenseVector, tau: f64, cap: usize) -> Result<Vec<ScoredHit>, RetrievalError> {
        if probe.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: probe.dim(),
            });
        }
        let p = probe.as_slice();
        let mut hits = Vec::new();
        let mut consider = |i: usize| {
            let s = dot(self.row(i), p);
            if s >= tau {
                hits.push(ScoredHit {
                    action: Action::Fact(self.ids[i]),
                    score: s,
                });
            }
        };
        match &self.quantizer {
            None => (0..self.ids.len()).for_each(&mut consider),
            Some(q) => {
                let k = q.buckets.len();
                let mut cells: Vec<(usize, f64)> = (0..k)
                    .map(|c| (c, dot(&q.centroids[c * self.dim..(c + 1) * self.dim], p)))
                    .collect();
                cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for (c, _) in cells.into_iter().take(PROBES) {
                    q.buckets[c].iter().for_each(|&i| consider(i as usize));
                }
            }
        }
        sort_hits(&mut hits);
        hits.truncate(cap);
        Ok(hits)
    }

    /// Layout: magic, u32 dim, u32 count, then (u64 id, dim × f32) entries;
    /// approx indices append u32 k and k × dim centroid floats. Little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_all(&id.0.to_le_bytes())?;
            for x in self.row(i) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        if let Some(q) = &self.quantizer {
            w.write_all(&(q.buckets.len() as u32).to_le_bytes())?;
            for x in &q.centroids {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(RetrievalError::Malformed("bad magic".into()));
        }
        let dim = cur.u32()? as usize;
        let n = cur.u32()? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            ids.push(FactId(cur.u64()?));
            for _ in 0..dim {
                data.push(cur.f32()?);
            }
        }
        let mut index = Self {
            dim,
            ids,
            data,
            quantizer: None,
        };
        if cur.pos < bytes.len() {
            let k = cur.u32()? as usize;
            let mut centroids = Vec::with_capacity(k * dim);
            for _ in 0..k * dim {
                centroids.push(cur.f32()?);
            }
            index.quantizer = Some(index.assign(centroids));
        }
        if cur.pos != bytes.len() {
            return Err(RetrievalError::Malformed("trailing bytes".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| RetrievalError::Malformed("truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, RetrievalError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> DenseVector {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        DenseVector(v).normalized()
    }

    fn entries(n: usize, dim: usize, seed: u64) -> Vec<(FactId, DenseVector)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| (FactId(i as u64), random_unit(&mut rng, dim))).collect()
    }

    #[test]
    fn empty_index_and_bounds() {
        let idx = MipsIndex::build(8, vec![], IndexMode::Approx).unwrap();
        assert!(idx.search(&DenseVector::zeros(8), f64::NEG_INFINITY, 10).unwrap().is_empty());
        let idx = MipsIndex::build(8, entries(20, 8, 1), IndexMode::Exact).unwrap();
        let probe = entries(1, 8, 2).remove(0).1;
        assert!(idx.search(&probe, f64::INFINITY, 100).unwrap().is_empty());
        let all = idx.search(&probe, f64::NEG_INFINITY, 20).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(
            MipsIndex::build(8, vec![(FactId(0), DenseVector::zeros(4))], IndexMode::Exact),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            idx.search(&DenseVector::zeros(3), 0.0, 1),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let v = DenseVector(vec![1.0, 0.0]);
        let idx = MipsIndex::build(
            2,
            vec![(FactId(5), v.clone()), (FactId(2), v.clone()), (FactId(9), v.clone())],
            IndexMode::Exact,
        )
        .unwrap();
        let ids: Vec<_> = idx.search(&v, 0.0, 3).unwrap().iter().map(|h| h.action).collect();
        assert_eq!(ids, [Action::Fact(FactId(2)), Action::Fact(FactId(5)), Action::Fact(FactId(9))]);
    }

    #[test]
    fn persistence_round_trip() {
        for mode in [IndexMode::Exact, IndexMode::Approx] {
            let idx = MipsIndex::build(16, entries(50, 16, 3), mode).unwrap();
            let mut buf = Vec::new();
            idx.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..7], b"NDBIDX1");
            let back = MipsIndex::read_from(buf.as_slice()).unwrap();
            assert_eq!(back, idx);
            assert!(MipsIndex::read_from(&buf[..buf.len() - 1]).is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn exact_equals_brute_force(n in 1usize..300, dim in 1usize..24, seed in any::<u64>(), tau in -1.0f64..1.0) {
            let es = entries(n, dim, seed);
            let idx = MipsIndex::build(dim, es.clone(), IndexMode::Exact).unwrap();
            let probe = entries(1, dim, seed ^ 0xabc).remove(0).1;
            let got = idx.search(&probe, tau, n).unwrap();
            let mut want: Vec<(f64, u64)> = es
                .iter()
                .map(|(id, v)| (v.0.iter().zip(&probe.0).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>(), id.0))
                .filter(|(s, _)| *s >= tau)
                .collect();
            want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            prop_assert_eq!(got.len(), want.len());
            for (h, (s, id)) in got.iter().zip(&want) {
                prop_assert_eq!(h.action, Action::Fact(FactId(*id)));
                prop_assert_eq!(h.score, *s);
            }
        }
    }
}
