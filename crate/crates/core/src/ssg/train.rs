//! Averaged-perceptron training from labeled support sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_gen::QueryCase;
use crate::fact_store::{Database, Fact, FactId};
use crate::retrieval::dense::DEFAULT_DIM;
use crate::retrieval::tokenize;

use super::model::{entity_tokens, ActionClassifier, SparseFact, StateFeatures, Target, DEFAULT_TABLE_BITS};
use super::SsgError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Reference,
    /// Sets found by fact erasure; cases without them are skipped.
    Distant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub dim: usize,
    pub table_bits: u32,
    pub negatives: usize,
    /// Highest scoring non-members added per step on top of the sampled ones.
    #[serde(default)]
    pub hard_negatives: usize,
    /// Threshold the decisions are trained against.
    pub tau: f64,
    pub margin: f64,
    pub labels: LabelSource,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 0,
            dim: DEFAULT_DIM,
            table_bits: DEFAULT_TABLE_BITS,
            negatives: 8,
            hard_negatives: 0,
            tau: 0.0,
            margin: 1.0,
            labels: LabelSource::Reference,
        }
    }
}

/// Members of `set` worth adding after `chosen`: those sharing a proper name
/// with the query or a chosen fact. Without any such link, the members with
/// the largest token overlap.
pub fn linked_successors(
    query: &str,
    chosen: &[FactId],
    set: &[FactId],
    facts: &HashMap<FactId, &Fact>,
) -> Vec<FactId> {
    let mut names = entity_tokens(query);
    let mut words: BTreeSet<String> = tokenize(query).into_iter().collect();
    for id in chosen {
        if let Some(f) = facts.get(id) {
            names.extend(entity_tokens(&f.text));
            words.extend(tokenize(&f.text));
        }
    }
    let rest: Vec<FactId> = set.iter().copied().filter(|id| !chosen.contains(id) && facts.contains_key(id)).collect();
    let linked: Vec<FactId> = rest
        .iter()
        .copied()
        .filter(|id| !entity_tokens(&facts[id].text).is_disjoint(&names))
        .collect();
    if !linked.is_empty() {
        return linked;
    }
    let overlap = |id: &FactId| tokenize(&facts[id].text).iter().filter(|t| words.contains(*t)).count();
    let best = rest.iter().map(overlap).max().unwrap_or(0);
    rest.into_iter().filter(|id| overlap(id) == best).collect()
}

struct Step {
    db: usize,
    features: StateFeatures,
    partial: BTreeSet<FactId>,
    positives: Vec<FactId>,
    stop: bool,
    /// Facts visible to the query, as indices into the db's fact list.
    pool: Vec<usize>,
}

struct EncodedDb<'a> {
    facts: &'a [Fact],
    sparse: Vec<SparseFact>,
    pos: HashMap<FactId, usize>,
}

fn steps_for_case(
    db: usize,
    enc: &EncodedDb<'_>,
    case: &QueryCase,
    sets: &[Vec<FactId>],
    dim: usize,
) -> Vec<Step> {
    let visible: HashMap<FactId, &Fact> = enc
        .facts
        .iter()
        .filter(|f| !f.invalidated && f.timestamp <= case.timestamp)
        .map(|f| (f.id, f))
        .collect();
    // Every linked ordering of every set, keyed by the prefix as a set.
    let mut nodes: BTreeMap<Vec<FactId>, (BTreeSet<FactId>, bool)> = BTreeMap::new();
    for set in sets {
        if set.is_empty() || set.iter().any(|id| !visible.contains_key(id)) {
            continue;
        }
        let mut stack: Vec<Vec<FactId>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            let mut key = prefix.clone();
            key.sort();
            let next = if prefix.len() == set.len() {
                Vec::new()
            } else {
                linked_successors(&case.text, &prefix, set, &visible)
            };
            let seen = nodes.contains_key(&key);
            let node = nodes.entry(key).or_default();
            if next.is_empty() {
                node.1 = true;
            }
            node.0.extend(next.iter().copied());
            if !seen {
                for n in next {
                    let mut p = prefix.clone();
                    p.push(n);
                    stack.push(p);
                }
            }
        }
    }
    let pool: Vec<usize> = enc
        .facts
        .iter()
        .enumerate()
        .filter(|(_, f)| visible.contains_key(&f.id))
        .map(|(i, _)| i)
        .collect();
    nodes
        .into_iter()
        .map(|(prefix, (positives, stop))| {
            let mut chosen: Vec<&Fact> = prefix.iter().map(|id| visible[id]).collect();
            chosen.sort_by(|a, b| (a.timestamp, &a.text).cmp(&(b.timestamp, &b.text)));
            let texts: Vec<&str> = chosen.iter().map(|f| f.text.as_str()).collect();
            Step {
                db,
                features: StateFeatures::new(&case.text, &texts, dim),
                partial: prefix.into_iter().collect(),
                positives: positives.into_iter().collect(),
                stop,
                pool: pool.clone(),
            }
        })
        .collect()
}

/// Trains on every decision step unrolled from the labeled support sets of
/// `data`. Each step scores its positive facts, STOP, `negatives` sampled
/// non-members and the `hard_negatives` best scoring remaining ones; a mistake within `margin` of `tau` triggers an update.
pub fn train_action_classifier(
    data: &[(&Database, &[QueryCase])],
    opts: &TrainOptions,
) -> Result<ActionClassifier, SsgError> {
    if opts.dim == 0 || !(8..=30).contains(&opts.table_bits) {
        return Err(SsgError::InvalidConfig(format!(
            "dim {} / table bits {}",
            opts.dim, opts.table_bits
        )));
    }
    let encoded: Vec<EncodedDb<'_>> = data
        .iter()
        .map(|(db, _)| EncodedDb {
            facts: db.facts(),
            sparse: db.facts().iter().map(|f| SparseFact::encode(&f.text, opts.dim)).collect(),
            pos: db.facts().iter().enumerate().map(|(i, f)| (f.id, i)).collect(),
        })
        .collect();
    let mut steps = Vec::new();
    for (d, (_, cases)) in data.iter().enumerate() {
        for case in cases.iter() {
            let sets = match opts.labels {
                LabelSource::Reference => &case.support_sets,
                LabelSource::Distant => match &case.distant_support_sets {
                    Some(s) => s,
                    None => continue,
                },
            };
            steps.extend(steps_for_case(d, &encoded[d], case, sets, opts.dim));
        }
    }
    if steps.is_empty() {
        return Err(SsgError::EmptyTrainingSet);
    }

    let mut model = ActionClassifier::zeros(opts.dim, opts.table_bits);
    let mut acc = vec![0.0f64; model.weights().len()];
    let mut acc_stop = 0.0f64;
    let mut count = 1.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut phi = Vec::new();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &si in &order {
            let step = &steps[si];
            let enc = &encoded[step.db];
            let candidates: Vec<usize> = step
                .pool
                .iter()
                .copied()
                .filter(|i| {
                    let id = enc.facts[*i].id;
                    !step.partial.contains(&id) && !step.positives.contains(&id)
                })
                .collect();
            let k = opts.negatives.min(candidates.len());
            let mut actions: Vec<(Option<usize>, f64)> =
                step.positives.iter().map(|id| (Some(enc.pos[id]), 1.0)).collect();
            actions.push((None, if step.stop { 1.0 } else { -1.0 }));
            let mut picked = sample(&mut rng, candidates.len(), k).into_vec();
            if opts.hard_negatives > 0 && candidates.len() > k {
                let mut scored: Vec<(f64, usize)> = (0..candidates.len())
                    .filter(|j| !picked.contains(j))
                    .map(|j| {
                        model.phi(&step.features, Target::Fact(&enc.sparse[candidates[j]]), &mut phi);
                        (model.dot_phi(&phi), j)
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                picked.extend(scored.into_iter().take(opts.hard_negatives).map(|(_, j)| j));
            }
            actions.extend(picked.into_iter().map(|j| (Some(candidates[j]), -1.0)));
            for (target, y) in actions {
                let t = match target {
                    Some(i) => Target::Fact(&enc.sparse[i]),
                    None => Target::Stop,
                };
                model.phi(&step.features, t, &mut phi);
                let score = model.dot_phi(&phi);
                if y * (score - opts.tau) <= opts.margin {
                    let (w, stop_bias) = model.weights_mut();
                    for (i, v) in &phi {
                        let delta = y as f32 * v;
                        if *i == usize::MAX {
                            *stop_bias += delta;
                            acc_stop += count * delta as f64;
                        } else {
                            w[*i] += delta;
                            acc[*i] += count * delta as f64;
                        }
                    }
                }
                count += 1.0;
            }
        }
    }
    let (w, stop_bias) = model.weights_mut();
    for (x, a) in w.iter_mut().zip(&acc) {
        *x -= (a / count) as f32;
    }
    *stop_bias -= (acc_stop / count) as f32;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn successors_follow_shared_names() {
        let db = fig1();
        let facts: HashMap<FactId, &Fact> = db.facts().iter().map(|f| (f.id, f)).collect();
        let q = "Who is Teuvo's spouse?";
        let set = [FactId(1), FactId(2)];
        assert_eq!(linked_successors(q, &[], &set, &facts), vec![FactId(2)]);
        assert_eq!(linked_successors(q, &[FactId(2)], &set, &facts), vec![FactId(1)]);
        // No names in common: fall back to plain overlap.
        let set = [FactId(0), FactId(2)];
        assert_eq!(linked_successors("Who was born in a year?", &[], &set, &facts), vec![FactId(2)]);
    }

    #[test]
    fn empty_training_set() {
        let db = fig1();
        let r = train_action_classifier(&[(&db, &[])], &TrainOptions::default());
        assert!(matches!(r, Err(SsgError::EmptyTrainingSet)));
    }
}
