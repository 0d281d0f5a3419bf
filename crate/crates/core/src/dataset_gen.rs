//! Deterministic templated generator of databases and query cases.
//!
//! Each database is a random world of triples over a sample of gazetteer
//! entities, rendered into sentences (optionally composite ones). Query cases
//! carry their reference answer, one reference support set per answer element,
//! and the intermediate results an SPJ should produce for each set.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationFunction, AnswerSet};
use crate::fact_store::{Database, Fact, FactId, FactStoreError, Timestamp};
use crate::grammar::{
    fill, form_kind, Direction, EntityClass, Gender, Grammar, JoinShape, QueryForm, QueryKind,
    QueryShape, RelationSpec, Triple, BORN_IN_PLACE, DEFAULT_RELATIONS,
};
use crate::spj::{derivations, IntermediateResult, ProvenanceMap, TupleValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_dbs: usize,
    pub facts_per_db: usize,
    pub relations: Vec<String>,
    pub queries_per_db: usize,
    /// Probability that an eligible fact is rendered as a two-relation sentence.
    pub composite_ratio: f64,
    /// Early-timestamp lookups per database whose answer is NULL.
    pub null_probes_per_db: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_dbs: 25,
            facts_per_db: 50,
            relations: DEFAULT_RELATIONS.iter().map(|s| s.to_string()).collect(),
            queries_per_db: 150,
            composite_ratio: 0.15,
            null_probes_per_db: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCase {
    pub text: String,
    pub timestamp: Timestamp,
    pub kind: QueryKind,
    pub answer: AnswerSet,
    pub support_sets: Vec<Vec<FactId>>,
    pub intermediates: Vec<IntermediateResult>,
    pub agg: AggregationFunction,
    pub form: QueryForm,
    /// Asked before its relevant facts exist; the answer is NULL.
    #[serde(default)]
    pub null_probe: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distant_support_sets: Option<Vec<Vec<FactId>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDb {
    pub database: Database,
    /// Sidecar: the triples each fact states. The engine under test never reads it.
    pub provenance: BTreeMap<FactId, Vec<Triple>>,
    pub cases: Vec<QueryCase>,
}

impl GeneratedDb {
    pub fn provenance_map(&self) -> Arc<ProvenanceMap> {
        Arc::new(self.provenance.iter().map(|(k, v)| (*k, v.clone())).collect())
    }

    fn provenance_view(&self, ids: &[FactId]) -> Vec<(FactId, &[Triple])> {
        ids.iter()
            .filter_map(|id| self.provenance.get(id).map(|t| (*id, t.as_slice())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub seed: u64,
    pub config: GenConfig,
    pub databases: Vec<GeneratedDb>,
}

impl GeneratedDataset {
    pub fn num_cases(&self) -> usize {
        self.databases.iter().map(|d| d.cases.len()).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("not enough entities to produce {wanted} distinct facts (got {got})")]
    InsufficientEntities { wanted: usize, got: usize },
    #[error("facts_per_db must be at least 1")]
    NoFacts,
    #[error("no join path from {0} to {1}")]
    NoJoinPath(String, String),
    #[error("place {0:?} is not in the gazetteer")]
    UnknownPlace(String),
    #[error("inconsistent case {text:?}: answer {answer} but intermediates give {derived}")]
    InconsistentCase {
        text: String,
        answer: String,
        derived: String,
    },
    #[error("dataset line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Store(#[from] FactStoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A planned fact: its sentence and the triples it states.
#[derive(Debug, Clone)]
struct PlannedFact {
    text: String,
    triples: Vec<Triple>,
}

/// Random world of triples under the relations' functionality constraints.
struct World<'g> {
    g: &'g Grammar,
    people: Vec<(String, Gender)>,
    characters: Vec<String>,
    triples: BTreeSet<Triple>,
    /// (relation, subject) pairs already used by functional relations.
    used: BTreeSet<(String, String)>,
}

impl<'g> World<'g> {
    fn has(&self, relation: &str, subject: &str) -> bool {
        self.used.contains(&(relation.to_string(), subject.to_string()))
    }

    fn add(&mut self, r: &RelationSpec, s: &str, o: &str) -> Triple {
        let t = Triple::new(&r.name, s, o);
        self.used.insert((r.name.clone(), s.to_string()));
        if r.symmetric && r.functional {
            self.used.insert((r.name.clone(), o.to_string()));
        }
        self.triples.insert(t.clone());
        t
    }

    fn random_object(&self, r: &RelationSpec, rng: &mut ChaCha8Rng) -> String {
        let gz = &self.g.gazetteer;
        match r.object_class {
            EntityClass::Year => rng.gen_range(gz.years.0..=gz.years.1).to_string(),
            EntityClass::City => gz.places.keys().nth(rng.gen_range(0..gz.places.len())).unwrap().clone(),
            EntityClass::Job => gz.jobs.choose(rng).unwrap().clone(),
            EntityClass::Thing => gz.things.choose(rng).unwrap().clone(),
            EntityClass::Currency => {
                let c: Vec<_> = gz.currencies().into_iter().collect();
                c.choose(rng).unwrap().to_string()
            }
            EntityClass::Country => {
                let c: Vec<_> = gz.countries().into_iter().collect();
                c.choose(rng).unwrap().to_string()
            }
            EntityClass::Continent => {
                let c: Vec<_> = gz.continents().into_iter().collect();
                c.choose(rng).unwrap().to_string()
            }
            EntityClass::Person => self.people.choose(rng).unwrap().0.clone(),
            EntityClass::Character => self.characters.choose(rng).unwrap().clone(),
        }
    }

    /// Tries to add one new triple of `r`; `None` when no attempt succeeds.
    fn propose(&self, r: &RelationSpec, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
        let gz = &self.g.gazetteer;
        for _ in 0..64 {
            let (s, o) = match r.name.as_str() {
                crate::grammar::SPOUSE_OF => {
                    let (a, ga) = self.people.choose(rng)?;
                    let (b, gb) = self.people.choose(rng)?;
                    if ga == gb || self.has(&r.name, a) || self.has(&r.name, b) {
                        continue;
                    }
                    (a.clone(), b.clone())
                }
                crate::grammar::FATHER_OF | crate::grammar::MOTHER_OF => {
                    let parent_gender = if r.name == crate::grammar::FATHER_OF {
                        Gender::Male
                    } else {
                        Gender::Female
                    };
                    let (child, _) = self.people.choose(rng)?;
                    let (parent, gp) = self.people.choose(rng)?;
                    if *gp != parent_gender
                        || child == parent
                        || self.has(&r.name, child)
                        || self.triples.contains(&Triple::new(&r.name, parent, child))
                    {
                        continue;
                    }
                    (child.clone(), parent.clone())
                }
                crate::grammar::BORDERS_COUNTRY => {
                    let (a, b) = gz.borders.choose(rng)?;
                    let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
                    if self.triples.contains(&Triple::new(&r.name, a, b))
                        || self.triples.contains(&Triple::new(&r.name, b, a))
                    {
                        continue;
                    }
                    (a.clone(), b.clone())
                }
                crate::grammar::USES_CURRENCY => {
                    let countries: Vec<_> = gz.currency_of.keys().collect();
                    let c = countries.choose(rng)?;
                    if self.has(&r.name, c) {
                        continue;
                    }
                    (c.to_string(), gz.currency_of[*c].clone())
                }
                _ => {
                    let s = match r.subject_class {
                        EntityClass::Person => self.people.choose(rng)?.0.clone(),
                        EntityClass::Character => self.characters.choose(rng)?.clone(),
                        _ => self.random_object_of_class(r.subject_class, rng),
                    };
                    if r.functional && self.has(&r.name, &s) {
                        continue;
                    }
                    let o = self.random_object(r, rng);
                    if self.triples.contains(&Triple::new(&r.name, &s, &o)) {
                        continue;
                    }
                    (s, o)
                }
            };
            return Some((s, o));
        }
        None
    }

    fn random_object_of_class(&self, class: EntityClass, rng: &mut ChaCha8Rng) -> String {
        let probe = RelationSpec {
            name: String::new(),
            subject_class: class,
            object_class: class,
            functional: false,
            symmetric: false,
            fact_templates: vec![],
            query_templates: vec![],
        };
        self.random_object(&probe, rng)
    }
}

fn per_db_seed(seed: u64, db: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(db as u64 + 1);
    rng.gen()
}

/// Builds a full dataset. Databases are generated in parallel, each from its
/// own seed stream, so output is independent of thread scheduling.
pub fn generate_dataset(config: &GenConfig, seed: u64) -> Result<GeneratedDataset, GenError> {
    generate_dataset_with(Grammar::standard(), config, seed)
}

pub fn generate_dataset_with(
    g: &Grammar,
    config: &GenConfig,
    seed: u64,
) -> Result<GeneratedDataset, GenError> {
    if config.facts_per_db == 0 {
        return Err(GenError::NoFacts);
    }
    for r in &config.relations {
        if g.relation(r).is_none() {
            return Err(GenError::UnknownRelation(r.clone()));
        }
    }
    let databases = (0..config.num_dbs)
        .into_par_iter()
        .map(|i| generate_db(g, config, per_db_seed(seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GeneratedDataset {
        seed,
        config: config.clone(),
        databases,
    })
}

fn plan_facts(g: &Grammar, config: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PlannedFact>, GenError> {
    let gz = &g.gazetteer;
    let n = config.facts_per_db;
    let n_people = (n * 2 / 5).clamp(6, gz.people.len());
    let mut people = gz.people.clone();
    people.shuffle(rng);
    people.truncate(n_people);
    people.sort();
    let n_chars = (n / 10 + 2).min(gz.characters.len());
    let mut characters = gz.characters.clone();
    characters.shuffle(rng);
    characters.truncate(n_chars);
    characters.sort();
    let mut world = World {
        g,
        people,
        characters,
        triples: BTreeSet::new(),
        used: BTreeSet::new(),
    };
    let rels: Vec<&RelationSpec> = config
        .relations
        .iter()
        .map(|r| g.relation(r).expect("checked"))
        .collect();
    let composites: Vec<_> = g
        .composites
        .iter()
        .filter(|c| c.generate && c.parts.iter().all(|p| config.relations.contains(&p.0)))
        .collect();
    let mut planned = Vec::with_capacity(n);
    let mut exhausted = BTreeSet::new();
    while planned.len() < n {
        if exhausted.len() == rels.len() {
            return Err(GenError::InsufficientEntities {
                wanted: n,
                got: planned.len(),
            });
        }
        let r = rels[rng.gen_range(0..rels.len())];
        let Some((s, o)) = world.propose(r, rng) else {
            exhausted.insert(r.name.clone());
            continue;
        };
        // Composite: attach a second relation over the same subject.
        let partner = composites
            .iter()
            .filter(|c| c.parts[0].0 == r.name)
            .collect::<Vec<_>>();
        if !partner.is_empty() && rng.gen_bool(config.composite_ratio.clamp(0.0, 1.0)) {
            let c = partner[rng.gen_range(0..partner.len())];
            let r2 = g.relation(&c.parts[1].0).expect("registered");
            if !world.has(&r2.name, &s) {
                let o2 = world.random_object(r2, rng);
                let t1 = world.add(r, &s, &o);
                let t2 = world.add(r2, &s, &o2);
                let values = [("A", s.as_str()), ("B", o.as_str()), ("C", o2.as_str())]
                    .into_iter()
                    .collect();
                planned.push(PlannedFact {
                    text: fill(&c.text, &values, gz.gender(&s)),
                    triples: vec![t1, t2],
                });
                continue;
            }
        }
        let t = world.add(r, &s, &o);
        let idx = rng.gen_range(0..r.fact_templates.len());
        planned.push(PlannedFact {
            text: g.render_fact(r, &s, &o, idx).expect("index in range"),
            triples: vec![t],
        });
    }
    Ok(planned)
}

fn generate_db(g: &Grammar, config: &GenConfig, seed: u64) -> Result<GeneratedDb, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planned = plan_facts(g, config, &mut rng)?;
    planned.shuffle(&mut rng);
    let mut database = Database::new();
    let mut provenance = BTreeMap::new();
    for (i, p) in planned.into_iter().enumerate() {
        let id = database.append_fact(&p.text, i as Timestamp + 1)?;
        provenance.insert(id, p.triples);
    }
    let mut db = GeneratedDb {
        database,
        provenance,
        cases: Vec::new(),
    };
    let candidates = enumerate_candidates(g, &db, &mut rng);
    let t_max = last_timestamp(&db);
    let mut cases = pick_cases(g, candidates, config.queries_per_db, t_max, &mut rng);
    cases.extend(null_probes(g, &db, config.null_probes_per_db, &mut rng));
    for c in &cases {
        verify_case(g, &db, c)?;
    }
    db.cases = cases;
    Ok(db)
}

/// Index of triples by relation, with the fact that states each.
struct TripleIndex<'a> {
    by_relation: BTreeMap<&'a str, Vec<(FactId, &'a Triple)>>,
}

impl<'a> TripleIndex<'a> {
    fn new(db: &'a GeneratedDb) -> Self {
        let mut by_relation: BTreeMap<&str, Vec<(FactId, &Triple)>> = BTreeMap::new();
        for (id, ts) in &db.provenance {
            for t in ts {
                by_relation.entry(t.relation.as_str()).or_default().push((*id, t));
            }
        }
        Self { by_relation }
    }

    fn of(&self, relation: &str) -> &[(FactId, &'a Triple)] {
        self.by_relation.get(relation).map(Vec::as_slice).unwrap_or(&[])
    }

    /// (fact, object) pairs for `subject`, following symmetric relations both ways.
    fn forward(&self, r: &RelationSpec, subject: &str) -> Vec<(FactId, &'a str)> {
        self.of(&r.name)
            .iter()
            .filter_map(|(id, t)| {
                if t.subject == subject {
                    Some((*id, t.object.as_str()))
                } else if r.symmetric && t.object == subject {
                    Some((*id, t.subject.as_str()))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Subjects of `r` in a stable order (both ends for symmetric relations).
    fn subjects(&self, r: &RelationSpec) -> BTreeSet<&'a str> {
        let mut out = BTreeSet::new();
        for (_, t) in self.of(&r.name) {
            out.insert(t.subject.as_str());
            if r.symmetric {
                out.insert(t.object.as_str());
            }
        }
        out
    }
}

fn render_query(text: &str, s: Option<&str>, o: Option<&str>) -> String {
    let mut values = std::collections::HashMap::new();
    if let Some(s) = s {
        values.insert("S", s);
    }
    if let Some(o) = o {
        values.insert("O", o);
    }
    fill(text, &values, None)
}

/// A candidate query before selection: everything but the timestamp.
struct Candidate {
    text: String,
    form: QueryForm,
    answer: AnswerSet,
    support_sets: Vec<Vec<FactId>>,
    intermediates: Vec<IntermediateResult>,
}

fn templates_of(r: &RelationSpec, shape: impl Fn(QueryShape) -> bool) -> Vec<&crate::grammar::QueryTemplate> {
    r.query_templates
        .iter()
        .filter(|t| t.generate && shape(t.shape))
        .collect()
}

fn pick_template<'t, T>(ts: &'t [T], rng: &mut ChaCha8Rng) -> Option<&'t T> {
    ts.choose(rng)
}

/// A value of the same class as `avoid` that differs from it.
fn other_object(g: &Grammar, r: &RelationSpec, avoid: &str, rng: &mut ChaCha8Rng) -> String {
    let gz = &g.gazetteer;
    let pool: Vec<String> = match r.object_class {
        EntityClass::Year => {
            let y: i64 = avoid.parse().unwrap_or(gz.years.0);
            let mut d = rng.gen_range(1..=30);
            if y - d < gz.years.0 || (y + d <= gz.years.1 && rng.gen_bool(0.5)) {
                d = -d;
            }
            return (y - d).to_string();
        }
        EntityClass::City => gz.places.keys().cloned().collect(),
        EntityClass::Job => gz.jobs.clone(),
        EntityClass::Thing => gz.things.clone(),
        EntityClass::Person => gz.people.iter().map(|p| p.0.clone()).collect(),
        EntityClass::Character => gz.characters.clone(),
        EntityClass::Country => gz.countries().into_iter().map(String::from).collect(),
        EntityClass::Continent => gz.continents().into_iter().map(String::from).collect(),
        EntityClass::Currency => gz.currencies().into_iter().map(String::from).collect(),
    };
    loop {
        let c = pool.choose(rng).expect("non-empty pool");
        if c != avoid {
            return c.clone();
        }
    }
}

fn enumerate_candidates(g: &Grammar, db: &GeneratedDb, rng: &mut ChaCha8Rng) -> BTreeMap<QueryKind, Vec<Candidate>> {
    let idx = TripleIndex::new(db);
    let mut out: BTreeMap<QueryKind, Vec<Candidate>> = BTreeMap::new();
    let mut push = |g: &Grammar, c: Candidate| {
        let (kind, _) = form_kind(&c.form, g);
        out.entry(kind).or_default().push(c);
    };
    let present: BTreeSet<&str> = idx.by_relation.keys().copied().collect();
    for r in g.relations.iter().filter(|r| present.contains(r.name.as_str())) {
        let extract = templates_of(r, |s| s == QueryShape::Extract);
        let check = templates_of(r, |s| s == QueryShape::Check);
        let inverse = templates_of(r, |s| s == QueryShape::Inverse);
        let count_inv = templates_of(r, |s| s == QueryShape::CountInverse);
        let count_ext = templates_of(r, |s| s == QueryShape::CountExtract);
        for s in idx.subjects(r) {
            let objs = idx.forward(r, s);
            let gender = g.gazetteer.gender(s);
            let usable: Vec<_> = extract
                .iter()
                .filter(|t| t.subject_gender.is_none() || t.subject_gender == gender)
                .copied()
                .collect();
            if let Some(t) = pick_template(&usable, rng) {
                push(
                    g,
                    Candidate {
                        text: render_query(&t.text, Some(s), None),
                        form: QueryForm::Extract {
                            relation: r.name.clone(),
                            subject: s.to_string(),
                        },
                        answer: AnswerSet::new(objs.iter().map(|(_, o)| o.to_string())),
                        support_sets: objs.iter().map(|(id, _)| vec![*id]).collect(),
                        intermediates: objs
                            .iter()
                            .map(|(_, o)| IntermediateResult::Answer(o.to_string()))
                            .collect(),
                    },
                );
            }
            if let Some(t) = pick_template(&count_ext, rng) {
                push(
                    g,
                    Candidate {
                        text: render_query(&t.text, Some(s), None),
                        form: QueryForm::CountExtract {
                            relation: r.name.clone(),
                            subject: s.to_string(),
                        },
                        answer: AnswerSet::single(
                            objs.iter().map(|(_, o)| *o).collect::<BTreeSet<_>>().len().to_string(),
                        ),
                        support_sets: objs.iter().map(|(id, _)| vec![*id]).collect(),
                        intermediates: objs
                            .iter()
                            .map(|(_, o)| IntermediateResult::Answer(o.to_string()))
                            .collect(),
                    },
                );
            }
            if let Some(t) = pick_template(&check, rng) {
                let (id, o) = objs[rng.gen_range(0..objs.len())];
                let mut variants = vec![(o.to_string(), true)];
                if r.functional {
                    variants.push((other_object(g, r, o, rng), false));
                }
                for (target, truth) in variants {
                    push(
                        g,
                        Candidate {
                            text: render_query(&t.text, Some(s), Some(&target)),
                            form: QueryForm::Check {
                                relation: r.name.clone(),
                                subject: s.to_string(),
                                object: target.clone(),
                            },
                            answer: AnswerSet::single(crate::aggregation::render_bool(truth)),
                            support_sets: vec![vec![id]],
                            intermediates: vec![IntermediateResult::Bool(truth)],
                        },
                    );
                }
                if r.name == BORN_IN_PLACE {
                    if let Ok((pos, neg)) = implicit_pair(g, id, &Triple::new(&r.name, s, o), rng) {
                        push(g, pos);
                        push(g, neg);
                    }
                }
            }
        }
        // Group subjects by object for inverse and count queries.
        let mut by_object: BTreeMap<&str, Vec<(FactId, &str)>> = BTreeMap::new();
        for (id, t) in idx.of(&r.name) {
            by_object.entry(t.object.as_str()).or_default().push((*id, t.subject.as_str()));
            if r.symmetric {
                by_object.entry(t.subject.as_str()).or_default().push((*id, t.object.as_str()));
            }
        }
        for (o, subs) in &by_object {
            let sets: Vec<Vec<FactId>> = subs.iter().map(|(id, _)| vec![*id]).collect();
            let inter: Vec<IntermediateResult> = subs
                .iter()
                .map(|(_, s)| IntermediateResult::Answer(s.to_string()))
                .collect();
            let distinct: BTreeSet<&str> = subs.iter().map(|(_, s)| *s).collect();
            if let Some(t) = pick_template(&inverse, rng) {
                push(
                    g,
                    Candidate {
                        text: render_query(&t.text, None, Some(o)),
                        form: QueryForm::Inverse {
                            relation: r.name.clone(),
                            object: o.to_string(),
                        },
                        answer: AnswerSet::new(distinct.iter().copied()),
                        support_sets: sets.clone(),
                        intermediates: inter.clone(),
                    },
                );
            }
            if let Some(t) = pick_template(&count_inv, rng) {
                push(
                    g,
                    Candidate {
                        text: render_query(&t.text, None, Some(o)),
                        form: QueryForm::CountInverse {
                            relation: r.name.clone(),
                            object: o.to_string(),
                        },
                        answer: AnswerSet::single(distinct.len().to_string()),
                        support_sets: sets,
                        intermediates: inter,
                    },
                );
            }
        }
        extreme_candidates(r, &idx, rng, &mut |c| push(g, c));
    }
    for j in &g.joins {
        let (Some(r1), Some(r2)) = (g.relation(&j.first), g.relation(&j.second)) else {
            continue;
        };
        if !present.contains(r1.name.as_str()) || !present.contains(r2.name.as_str()) {
            continue;
        }
        for s in idx.subjects(r1) {
            for (ida, mid) in idx.forward(r1, s) {
                for (idb, y) in idx.forward(r2, mid) {
                    for c in join_cases(g, j, r2, s, (ida, idb), y, rng) {
                        push(g, c);
                    }
                }
            }
        }
    }
    out
}

fn join_cases(
    g: &Grammar,
    j: &crate::grammar::JoinTemplate,
    r2: &RelationSpec,
    subject: &str,
    (ida, idb): (FactId, FactId),
    y: &str,
    rng: &mut ChaCha8Rng,
) -> Vec<Candidate> {
    let mut support = vec![ida, idb];
    support.sort();
    support.dedup();
    match j.shape {
        JoinShape::Extract => vec![Candidate {
            text: render_query(&j.text, Some(subject), None),
            form: QueryForm::JoinExtract {
                first: j.first.clone(),
                second: j.second.clone(),
                subject: subject.to_string(),
            },
            answer: AnswerSet::single(y),
            support_sets: vec![support],
            intermediates: vec![IntermediateResult::Answer(y.to_string())],
        }],
        JoinShape::Check => {
            let mut variants = vec![(y.to_string(), true)];
            if r2.functional {
                variants.push((other_object(g, r2, y, rng), false));
            }
            variants
                .into_iter()
                .map(|(target, truth)| Candidate {
                    text: render_query(&j.text, Some(subject), Some(&target)),
                    form: QueryForm::JoinCheck {
                        first: j.first.clone(),
                        second: j.second.clone(),
                        subject: subject.to_string(),
                        object: target,
                    },
                    answer: AnswerSet::single(crate::aggregation::render_bool(truth)),
                    support_sets: vec![support.clone()],
                    intermediates: vec![IntermediateResult::Bool(truth)],
                })
                .collect()
        }
    }
}

fn extreme_candidates(
    r: &RelationSpec,
    idx: &TripleIndex<'_>,
    rng: &mut ChaCha8Rng,
    push: &mut dyn FnMut(Candidate),
) {
    let triples = idx.of(&r.name);
    if triples.is_empty() {
        return;
    }
    let sets: Vec<Vec<FactId>> = triples.iter().map(|(id, _)| vec![*id]).collect();
    let numeric = r.object_class == EntityClass::Year;
    let shapes: Vec<_> = r
        .query_templates
        .iter()
        .filter(|t| {
            t.generate
                && matches!(
                    t.shape,
                    QueryShape::ArgExtreme(_) | QueryShape::ValueExtreme(_) | QueryShape::GroupExtreme(_)
                )
        })
        .map(|t| t.shape)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for shape in shapes {
        let options: Vec<_> = templates_of(r, |s| s == shape);
        let Some(t) = pick_template(&options, rng) else {
            continue;
        };
        let (form, answer, intermediates) = match shape {
            QueryShape::ArgExtreme(d) | QueryShape::ValueExtreme(d) if numeric => {
                let years: Vec<(&str, i64)> = triples
                    .iter()
                    .map(|(_, t)| (t.subject.as_str(), t.object.parse::<i64>().expect("year")))
                    .collect();
                let best = match d {
                    Direction::Min => years.iter().map(|y| y.1).min(),
                    Direction::Max => years.iter().map(|y| y.1).max(),
                }
                .expect("non-empty");
                let inter = years
                    .iter()
                    .map(|(s, y)| IntermediateResult::Tuple {
                        key: s.to_string(),
                        value: TupleValue::from(*y),
                    })
                    .collect();
                if let QueryShape::ArgExtreme(_) = shape {
                    (
                        QueryForm::ArgExtreme {
                            relation: r.name.clone(),
                            direction: d,
                        },
                        AnswerSet::new(years.iter().filter(|y| y.1 == best).map(|y| y.0)),
                        inter,
                    )
                } else {
                    (
                        QueryForm::ValueExtreme {
                            relation: r.name.clone(),
                            direction: d,
                        },
                        AnswerSet::single(best.to_string()),
                        inter,
                    )
                }
            }
            QueryShape::GroupExtreme(d) => {
                let mut groups: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
                for (_, t) in triples {
                    groups.entry(&t.object).or_default().insert(&t.subject);
                }
                let sizes = groups.values().map(BTreeSet::len);
                let best = match d {
                    Direction::Min => sizes.min(),
                    Direction::Max => sizes.max(),
                }
                .expect("non-empty");
                (
                    QueryForm::GroupExtreme {
                        relation: r.name.clone(),
                        direction: d,
                    },
                    AnswerSet::new(groups.iter().filter(|(_, v)| v.len() == best).map(|(k, _)| *k)),
                    triples
                        .iter()
                        .map(|(_, t)| IntermediateResult::Tuple {
                            key: t.object.clone(),
                            value: TupleValue::Text(t.subject.clone()),
                        })
                        .collect(),
                )
            }
            _ => continue,
        };
        push(Candidate {
            text: t.text.clone(),
            form,
            answer,
            support_sets: sets.clone(),
            intermediates,
        });
    }
}

/// Joins `first(S, X)` with `second(X, Y)` for a subject of the database.
pub fn derive_join_query(
    g: &Grammar,
    db: &GeneratedDb,
    first: &str,
    second: &str,
    subject: &str,
    shape: JoinShape,
    seed: u64,
) -> Result<QueryCase, GenError> {
    let no_path = || GenError::NoJoinPath(first.to_string(), second.to_string());
    let r1 = g.relation(first).ok_or_else(|| GenError::UnknownRelation(first.into()))?;
    let r2 = g.relation(second).ok_or_else(|| GenError::UnknownRelation(second.into()))?;
    if r1.object_class != r2.subject_class {
        return Err(no_path());
    }
    let j = g
        .joins
        .iter()
        .find(|j| j.first == first && j.second == second && j.shape == shape)
        .ok_or_else(no_path)?;
    let idx = TripleIndex::new(db);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (ida, mid) in idx.forward(r1, subject) {
        if let Some((idb, y)) = idx.forward(r2, mid).into_iter().next() {
            let c = join_cases(g, j, r2, subject, (ida, idb), y, &mut rng).remove(0);
            return Ok(into_case(g, c, last_timestamp(db)));
        }
    }
    Err(no_path())
}

fn implicit_pair(
    g: &Grammar,
    fact: FactId,
    triple: &Triple,
    rng: &mut ChaCha8Rng,
) -> Result<(Candidate, Candidate), GenError> {
    let place = g
        .gazetteer
        .places
        .get(&triple.object)
        .ok_or_else(|| GenError::UnknownPlace(triple.object.clone()))?;
    let use_country = rng.gen_bool(0.5);
    let positive = if use_country {
        place.country.clone()
    } else {
        place.continent.clone()
    };
    let pool: Vec<&str> = if use_country {
        g.gazetteer.countries().into_iter().filter(|c| *c != place.country).collect()
    } else {
        g.gazetteer.continents().into_iter().filter(|c| *c != place.continent).collect()
    };
    let negative = pool.choose(rng).expect("several regions").to_string();
    let r = g.relation(&triple.relation).expect("registered");
    let t = templates_of(r, |s| s == QueryShape::Check)[0];
    let make = |region: String, truth: bool| Candidate {
        text: render_query(&t.text, Some(&triple.subject), Some(&region)),
        form: QueryForm::Check {
            relation: triple.relation.clone(),
            subject: triple.subject.clone(),
            object: region,
        },
        answer: AnswerSet::single(crate::aggregation::render_bool(truth)),
        support_sets: vec![vec![fact]],
        intermediates: vec![IntermediateResult::Bool(truth)],
    };
    Ok((make(positive, true), make(negative, false)))
}

/// A positive (containing region) and a negative (other region) Boolean case
/// for a birthplace fact.
pub fn derive_implicit_location_query(
    g: &Grammar,
    db: &GeneratedDb,
    fact: FactId,
    seed: u64,
) -> Result<(QueryCase, QueryCase), GenError> {
    let triple = db
        .provenance
        .get(&fact)
        .and_then(|ts| ts.iter().find(|t| t.relation == BORN_IN_PLACE))
        .ok_or_else(|| GenError::UnknownPlace(format!("fact {}", fact.0)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, n) = implicit_pair(g, fact, triple, &mut rng)?;
    let ts = last_timestamp(db);
    Ok((into_case(g, p, ts), into_case(g, n, ts)))
}

fn last_timestamp(db: &GeneratedDb) -> Timestamp {
    db.database.last_timestamp().unwrap_or(0)
}

fn into_case(g: &Grammar, c: Candidate, timestamp: Timestamp) -> QueryCase {
    let (kind, agg) = form_kind(&c.form, g);
    QueryCase {
        text: c.text,
        timestamp,
        kind,
        answer: c.answer,
        support_sets: c.support_sets,
        intermediates: c.intermediates,
        agg,
        form: c.form,
        null_probe: false,
        distant_support_sets: None,
    }
}

/// Round-robin over kinds so every kind present is represented.
fn pick_cases(
    g: &Grammar,
    mut candidates: BTreeMap<QueryKind, Vec<Candidate>>,
    limit: usize,
    timestamp: Timestamp,
    rng: &mut ChaCha8Rng,
) -> Vec<QueryCase> {
    for v in candidates.values_mut() {
        v.shuffle(rng);
    }
    let mut out = Vec::new();
    let mut seen_text = BTreeSet::new();
    while out.len() < limit && candidates.values().any(|v| !v.is_empty()) {
        for v in candidates.values_mut() {
            if out.len() >= limit {
                break;
            }
            while let Some(c) = v.pop() {
                if seen_text.insert(c.text.clone()) {
                    out.push(into_case(g, c, timestamp));
                    break;
                }
            }
        }
    }
    out
}

/// Functional lookups asked one tick before their only supporting fact.
fn null_probes(g: &Grammar, db: &GeneratedDb, n: usize, rng: &mut ChaCha8Rng) -> Vec<QueryCase> {
    let mut pool: Vec<(FactId, &Triple)> = db
        .provenance
        .iter()
        .flat_map(|(id, ts)| ts.iter().map(move |t| (*id, t)))
        .filter(|(_, t)| {
            g.relation(&t.relation)
                .is_some_and(|r| r.functional && !r.symmetric && templates_of(r, |s| s == QueryShape::Extract).iter().any(|q| q.subject_gender.is_none()))
        })
        .collect();
    pool.shuffle(rng);
    pool.into_iter()
        .take(n)
        .map(|(id, t)| {
            let r = g.relation(&t.relation).expect("registered");
            let tmpl = templates_of(r, |s| s == QueryShape::Extract)
                .into_iter()
                .find(|q| q.subject_gender.is_none())
                .expect("filtered");
            let ts = db.database.get(id).expect("generated id").timestamp;
            QueryCase {
                text: render_query(&tmpl.text, Some(&t.subject), None),
                timestamp: ts - 1,
                kind: QueryKind::LookupExtract,
                answer: AnswerSet::null(),
                support_sets: Vec::new(),
                intermediates: Vec::new(),
                agg: AggregationFunction::NoAggregation,
                form: QueryForm::Extract {
                    relation: r.name.clone(),
                    subject: t.subject.clone(),
                },
                null_probe: true,
                distant_support_sets: None,
            }
        })
        .collect()
}

/// Recomputes intermediates from the sidecar triples of each support set and
/// checks that aggregating them reproduces the case's answer.
pub fn annotate_intermediates(g: &Grammar, case: &QueryCase, db: &GeneratedDb) -> Result<QueryCase, GenError> {
    let mut intermediates = Vec::with_capacity(case.support_sets.len());
    for set in &case.support_sets {
        let view = db.provenance_view(set);
        let r = derivations(g, &case.form, &view)
            .into_iter()
            .find(|d| d.support == *set)
            .map(|d| d.result)
            .unwrap_or(IntermediateResult::Null);
        intermediates.push(r);
    }
    let derived = aggregate(case.agg, &intermediates).map_err(|e| GenError::InconsistentCase {
        text: case.text.clone(),
        answer: case.answer.to_string(),
        derived: e.to_string(),
    })?;
    if derived != case.answer {
        return Err(GenError::InconsistentCase {
            text: case.text.clone(),
            answer: case.answer.to_string(),
            derived: derived.to_string(),
        });
    }
    Ok(QueryCase {
        intermediates,
        ..case.clone()
    })
}

fn verify_case(g: &Grammar, db: &GeneratedDb, c: &QueryCase) -> Result<(), GenError> {
    let inconsistent = |derived: String| GenError::InconsistentCase {
        text: c.text.clone(),
        answer: c.answer.to_string(),
        derived,
    };
    let direct = aggregate(c.agg, &c.intermediates).map_err(|e| inconsistent(e.to_string()))?;
    if direct != c.answer {
        return Err(inconsistent(direct.to_string()));
    }
    let annotated = annotate_intermediates(g, c, db)?;
    if annotated.intermediates != c.intermediates {
        return Err(inconsistent(format!("{:?}", annotated.intermediates)));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        seed: u64,
        config: GenConfig,
    },
    DbFact {
        db: usize,
        id: FactId,
        text: String,
        timestamp: Timestamp,
        invalidated: bool,
        provenance: Vec<Triple>,
    },
    QueryCase {
        db: usize,
        #[serde(flatten)]
        case: QueryCase,
    },
}

impl GeneratedDataset {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), GenError> {
        let mut line = |r: &Record| -> Result<(), GenError> {
            serde_json::to_writer(&mut out, r).map_err(|e| GenError::Malformed {
                line: 0,
                message: e.to_string(),
            })?;
            out.write_all(b"\n")?;
            Ok(())
        };
        line(&Record::Header {
            seed: self.seed,
            config: self.config.clone(),
        })?;
        for (i, db) in self.databases.iter().enumerate() {
            for f in db.database.facts() {
                line(&Record::DbFact {
                    db: i,
                    id: f.id,
                    text: f.text.clone(),
                    timestamp: f.timestamp,
                    invalidated: f.invalidated,
                    provenance: db.provenance.get(&f.id).cloned().unwrap_or_default(),
                })?;
            }
            for c in &db.cases {
                line(&Record::QueryCase { db: i, case: c.clone() })?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, GenError> {
        let mut header = None;
        let mut facts: Vec<Vec<Fact>> = Vec::new();
        let mut prov: Vec<BTreeMap<FactId, Vec<Triple>>> = Vec::new();
        let mut cases: Vec<Vec<QueryCase>> = Vec::new();
        let grow = |n: usize, facts: &mut Vec<Vec<Fact>>, prov: &mut Vec<BTreeMap<_, _>>, cases: &mut Vec<Vec<QueryCase>>| {
            while facts.len() <= n {
                facts.push(Vec::new());
                prov.push(BTreeMap::new());
                cases.push(Vec::new());
            }
        };
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| GenError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            match rec {
                Record::Header { seed, config } => header = Some((seed, config)),
                Record::DbFact {
                    db,
                    id,
                    text,
                    timestamp,
                    invalidated,
                    provenance,
                } => {
                    grow(db, &mut facts, &mut prov, &mut cases);
                    let fact = Fact {
                        id,
                        text,
                        timestamp,
                        invalidated,
                    };
                    if !provenance.is_empty() {
                        prov[db].insert(fact.id, provenance);
                    }
                    facts[db].push(fact);
                }
                Record::QueryCase { db, case } => {
                    grow(db, &mut facts, &mut prov, &mut cases);
                    cases[db].push(case);
                }
            }
        }
        let (seed, config) = header.ok_or(GenError::Malformed {
            line: 1,
            message: "missing header record".into(),
        })?;
        let databases = facts
            .into_iter()
            .zip(prov)
            .zip(cases)
            .map(|((f, provenance), cases)| {
                Ok(GeneratedDb {
                    database: Database::from_facts(f)?,
                    provenance,
                    cases,
                })
            })
            .collect::<Result<Vec<_>, GenError>>()?;
        Ok(Self {
            seed,
            config,
            databases,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), GenError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
