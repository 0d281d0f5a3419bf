//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use num_bigint::BigInt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ndb_core::aggregation::{aggregate, AggregationFunction, AnswerSet};
use ndb_core::dataset_gen::{generate_dataset, GenConfig, GeneratedDataset, GeneratedDb};
use ndb_core::eval::{evaluate_dataset, exact_match, f1_set, support_metrics, EvalMode, KindGroup, MetricReport};
use ndb_core::fact_store::{Database, Fact, FactId};
use ndb_core::grammar::{Grammar, QueryKind};
use ndb_core::pipeline::{Pipeline, PipelineConfig, SsgMode};
use ndb_core::retrieval::{Action, DenseVector, IndexMode, MipsIndex};
use ndb_core::spj::{IntermediateResult, OracleSpj, SpjOperator, TupleValue};
use ndb_core::ssg::{train_action_classifier, ActionClassifier, LabelSource, TrainOptions};
use ndb_core::supervision::{label_dataset, predict_support_facts};

const TRAIN_DBS: usize = 20;
const TRIALS: usize = 1000;

struct Outcome {
    failed: Vec<String>,
}

impl Outcome {
    fn record(&mut self, id: &str, title: &str, ok: bool, detail: String) {
        println!("{} [{id}] {title}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id.to_string());
        }
    }
}

fn oracle_for(db: &GeneratedDb) -> Arc<dyn SpjOperator> {
    Arc::new(OracleSpj::with_sidecar(Grammar::standard(), db.provenance_map()))
}

fn split(data: &GeneratedDataset, range: std::ops::Range<usize>) -> GeneratedDataset {
    GeneratedDataset {
        seed: data.seed,
        config: data.config.clone(),
        databases: data.databases[range].to_vec(),
    }
}

fn train(data: &GeneratedDataset, seed: u64, labels: LabelSource) -> ActionClassifier {
    let pairs: Vec<_> = data.databases[..TRAIN_DBS]
        .iter()
        .map(|d| (&d.database, d.cases.as_slice()))
        .collect();
    train_action_classifier(&pairs, &TrainOptions { seed, labels, ..TrainOptions::default() }).unwrap()
}

fn held_out_report(data: &GeneratedDataset, p: &Pipeline, model: &ActionClassifier) -> MetricReport {
    let held = split(data, TRAIN_DBS..data.databases.len());
    evaluate_dataset(&held, p, EvalMode::Trained(model), &oracle_for).unwrap()
}

fn criterion_1(out: &mut Outcome, p: &Pipeline) -> GeneratedDataset {
    let t = Instant::now();
    let data = generate_dataset(&GenConfig::default(), 42).unwrap();
    let report = evaluate_dataset(&data, p, EvalMode::Perfect, &oracle_for).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mut per_kind: BTreeMap<QueryKind, (usize, f64)> = BTreeMap::new();
    for s in &report.instances {
        let e = per_kind.entry(s.kind).or_default();
        e.0 += 1;
        e.1 += s.em;
    }
    let perfect = per_kind.values().filter(|(n, em)| *n > 0 && *em == *n as f64).count();
    let ok = report.cases >= 2000 && perfect == QueryKind::ALL.len() && report.errors == 0 && secs < 60.0;
    let detail = per_kind
        .iter()
        .map(|(k, (n, em))| format!("{k} {:.3} ({n})", em / *n as f64))
        .collect::<Vec<_>>()
        .join(", ");
    out.record(
        "1",
        "oracle identity, perfect SSG + oracle SPJ",
        ok,
        format!("{} cases, {} errors, {secs:.1} s; EM by kind: {detail}", report.cases, report.errors),
    );
    data
}

fn criterion_2(out: &mut Outcome, p: &Pipeline, seed42: &GeneratedDataset) -> ActionClassifier {
    let mut all_ok = true;
    let mut lines = Vec::new();
    let mut first = None;
    for seed in [42u64, 7, 3] {
        let data = if seed == 42 {
            seed42.clone()
        } else {
            generate_dataset(&GenConfig::default(), seed).unwrap()
        };
        let model = train(&data, seed, LabelSource::Reference);
        let r = held_out_report(&data, p, &model);
        let atomic = r.group(KindGroup::Atomic).support;
        let joins = r.group(KindGroup::Joins).support;
        let sets = r.group(KindGroup::Sets).support;
        let floors = atomic.exact_recall >= 0.9 && joins.soft_recall >= 0.8;
        let ordered = atomic.exact_precision > joins.exact_precision && joins.exact_precision > sets.exact_precision;
        all_ok &= floors && ordered;
        lines.push(format!(
            "seed {seed}: atomic exact R {:.3}, joins soft R {:.3}, exact P atomic/joins/sets {:.3}/{:.3}/{:.3} (soft {:.3}/{:.3}/{:.3}){}",
            atomic.exact_recall,
            joins.soft_recall,
            atomic.exact_precision,
            joins.exact_precision,
            sets.exact_precision,
            atomic.soft_precision,
            joins.soft_precision,
            sets.soft_precision,
            if ordered { "" } else { " [precision order violated]" },
        ));
        if seed == 42 {
            first = Some(model);
        }
    }
    out.record(
        "2",
        "SSG efficacy on held-out dbs, 3 seeds",
        all_ok,
        lines.join("; "),
    );
    first.unwrap()
}

fn criterion_3(out: &mut Outcome, p: &Pipeline, data: &GeneratedDataset, model: &ActionClassifier) {
    let held = split(data, TRAIN_DBS..data.databases.len());
    let tfidf = evaluate_dataset(&held, p, EvalMode::TfidfTopK(5), &oracle_for).unwrap();
    let trained = held_out_report(data, p, model);
    let em = tfidf.group(KindGroup::MinMax).em;
    let recall = trained.group(KindGroup::MinMax).support.soft_recall;
    out.record(
        "3",
        "TF-IDF top-5 fails on min/max while the trained SSG recovers the supports",
        em <= 0.05 && recall >= 0.8,
        format!(
            "tfidf min/max EM {em:.3} over {} cases; trained min/max soft recall {recall:.3} (trained EM {:.3})",
            tfidf.group(KindGroup::MinMax).count,
            trained.group(KindGroup::MinMax).em
        ),
    );
}

/// Minimal fact subsets (up to three facts) on which the whole-db oracle
/// reproduces `reference`.
fn minimal_supports(oracle: &OracleSpj, query: &str, facts: &[Fact], reference: &AnswerSet) -> Vec<BTreeSet<FactId>> {
    let answers = |ids: &[usize]| {
        let sub: Vec<&Fact> = ids.iter().map(|i| &facts[*i]).collect();
        oracle.whole_db_answer(query, &sub).unwrap() == *reference
    };
    let n = facts.len();
    let mut found: Vec<Vec<usize>> = Vec::new();
    let mut subsets: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for size in 1..=3 {
        if size == 2 {
            subsets = (0..n).flat_map(|i| (i + 1..n).map(move |j| vec![i, j])).collect();
        } else if size == 3 {
            subsets = (0..n)
                .flat_map(|i| (i + 1..n).flat_map(move |j| (j + 1..n).map(move |k| vec![i, j, k])))
                .collect();
        }
        for s in &subsets {
            let contains_smaller = found.iter().any(|f| f.iter().all(|x| s.contains(x)));
            if !contains_smaller && answers(s) {
                found.push(s.clone());
            }
        }
    }
    found
        .into_iter()
        .map(|s| s.into_iter().map(|i| facts[i].id).collect())
        .collect()
}

fn criterion_4(out: &mut Outcome, p: &Pipeline, data: &GeneratedDataset, reference_model: &ActionClassifier) {
    let small = generate_dataset(
        &GenConfig {
            num_dbs: 10,
            facts_per_db: 20,
            queries_per_db: 60,
            ..GenConfig::default()
        },
        42,
    )
    .unwrap();
    let oracle = OracleSpj::new(Grammar::standard());
    let (mut checked, mut matched, mut equal_to_reference, mut lookups) = (0usize, 0usize, 0usize, 0usize);
    for (d, gdb) in small.databases.iter().enumerate() {
        for (c, case) in gdb.cases.iter().enumerate() {
            let eligible = case.kind.is_lookup() || case.kind == QueryKind::JoinBool;
            if !eligible || case.answer.is_null() {
                continue;
            }
            let facts = gdb.database.visible_facts(case.timestamp);
            let minimal = minimal_supports(&oracle, &case.text, &facts, &case.answer);
            let trace = predict_support_facts(&facts, &case.text, &oracle, ((d as u64) << 32) | c as u64, 10).unwrap();
            let found = trace.discovered_set();
            checked += 1;
            if minimal.iter().any(|m| found.is_superset(m)) {
                matched += 1;
            }
            if case.kind.is_lookup() {
                lookups += 1;
                let refs: BTreeSet<BTreeSet<FactId>> =
                    case.support_sets.iter().map(|s| s.iter().copied().collect()).collect();
                if refs.contains(&found) {
                    equal_to_reference += 1;
                }
            }
        }
    }
    let recall = matched as f64 / checked.max(1) as f64;

    let labeled = label_dataset(data, &oracle, 0, 10).unwrap();
    let distant_model = train(&labeled, 42, LabelSource::Distant);
    let ref_em = held_out_report(data, p, reference_model).group(KindGroup::Atomic).em;
    let ds_em = held_out_report(data, p, &distant_model).group(KindGroup::Atomic).em;
    let gap = 100.0 * (ref_em - ds_em);
    let ok = checked > 0 && matched == checked && (0.0..=15.0).contains(&gap);
    out.record(
        "4",
        "distant supervision",
        ok,
        format!(
            "soft recall vs brute-force minimal supports {recall:.3} ({matched}/{checked} lookup + boolean-join cases, 20-fact dbs); \
             lookup distant set equals a reference set {equal_to_reference}/{lookups}; \
             held-out lookup EM reference-trained {:.2} vs distant-trained {:.2}, gap {gap:.2} points",
            100.0 * ref_em,
            100.0 * ds_em
        ),
    );
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> DenseVector {
    DenseVector((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).normalized()
}

fn brute_top(vectors: &[(FactId, DenseVector)], probe: &DenseVector, k: usize) -> Vec<FactId> {
    let mut scored: Vec<(f64, FactId)> = vectors.iter().map(|(id, v)| (v.dot(probe), *id)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

fn hit_ids(index: &MipsIndex, probe: &DenseVector, k: usize) -> Vec<FactId> {
    index
        .search(probe, f64::NEG_INFINITY, k)
        .unwrap()
        .into_iter()
        .filter_map(|h| match h.action {
            Action::Fact(id) => Some(id),
            Action::Stop => None,
        })
        .collect()
}

fn recall_at_10(dim: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<(FactId, DenseVector)> = (0..10_000).map(|i| (FactId(i), random_unit(&mut rng, dim))).collect();
    let probes: Vec<DenseVector> = (0..100).map(|_| random_unit(&mut rng, dim)).collect();
    let exact = MipsIndex::build(dim, vectors.clone(), IndexMode::Exact).unwrap();
    let approx = MipsIndex::build(dim, vectors.clone(), IndexMode::Approx).unwrap();
    let mut mismatches = 0;
    let mut hits = 0usize;
    for probe in &probes {
        let truth = brute_top(&vectors, probe, 10);
        if hit_ids(&exact, probe, 10) != truth {
            mismatches += 1;
        }
        let got: BTreeSet<FactId> = hit_ids(&approx, probe, 10).into_iter().collect();
        hits += truth.iter().filter(|id| got.contains(id)).count();
    }
    (mismatches, hits as f64 / (10.0 * probes.len() as f64))
}

fn criterion_5(out: &mut Outcome) {
    let (mismatches_64, recall_64) = recall_at_10(64, 5);
    let (mismatches_5, recall_5) = recall_at_10(5, 5);
    let sweep: Vec<String> = [4usize, 8, 16]
        .iter()
        .map(|d| format!("d={d} {:.2}", recall_at_10(*d, 5).1))
        .collect();
    out.record(
        "5",
        "MIPS over 10000 random unit vectors, 100 probes",
        mismatches_64 == 0 && mismatches_5 == 0 && recall_5 >= 0.9,
        format!(
            "exact top-10 mismatches d=64 {mismatches_64}, d=5 {mismatches_5}; approx recall@10 d=5 {recall_5:.3} \
             (sweep: {}, d=64 {recall_64:.2})",
            sweep.join(", ")
        ),
    );
}

fn criterion_6(out: &mut Outcome) {
    let set = |xs: &[&str]| AnswerSet::new(xs.iter().copied());
    let ids = |xs: &[&[u64]]| -> Vec<Vec<FactId>> { xs.iter().map(|s| s.iter().map(|i| FactId(*i)).collect()).collect() };
    let mut checks = vec![
        ("EM identity", exact_match(&set(&["Nicholas"]), &set(&["Nicholas"])) == 1.0),
        ("EM case-sensitive", exact_match(&set(&["nicholas"]), &set(&["Nicholas"])) == 0.0),
        ("EM numeric", exact_match(&set(&["3"]), &set(&["3"])) == 1.0),
        ("EM whitespace", exact_match(&set(&["Washington  D.C. "]), &set(&["Washington D.C."])) == 1.0),
        ("F1 {A,B}/{A,C}", f1_set(&set(&["A", "B"]), &set(&["A", "C"])) == 0.5),
        ("F1 equal", f1_set(&set(&["A", "B"]), &set(&["B", "A"])) == 1.0),
        ("F1 disjoint", f1_set(&set(&["A"]), &set(&["B"])) == 0.0),
        ("F1 both empty", f1_set(&set(&[]), &set(&[])) == 1.0),
        ("F1 one empty", f1_set(&set(&[]), &set(&["A"])) == 0.0),
    ];
    let s = support_metrics(&ids(&[&[1], &[2]]), &ids(&[&[1]]));
    checks.push(("support exact P/R", s.exact_precision == 0.5 && s.exact_recall == 1.0));
    let s = support_metrics(&ids(&[&[1, 7]]), &ids(&[&[1]]));
    checks.push(("support soft superset", s.soft_precision == 1.0 && s.exact_precision == 0.0));
    let s = support_metrics(&[], &ids(&[&[1]]));
    checks.push(("support empty prediction", s.exact_precision == 1.0 && s.exact_recall == 0.0));
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    out.record(
        "6",
        "metric conventions",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    );
}

fn criterion_7(out: &mut Outcome, p: &Pipeline, data: &GeneratedDataset, model: &ActionClassifier) {
    let mut probes = 0;
    let mut violations = Vec::new();
    for gdb in &data.databases {
        let spj = oracle_for(gdb);
        for case in gdb.cases.iter().filter(|c| c.null_probe) {
            probes += 1;
            let modes = [
                SsgMode::Trained(model),
                SsgMode::TfidfTopK(5),
                SsgMode::Perfect(&case.support_sets),
            ];
            for mode in modes {
                let r = p.answer_query(&gdb.database, &case.text, case.timestamp, mode, spj.as_ref()).unwrap();
                if !r.answers.is_null() || !case.answer.is_null() {
                    violations.push(format!("{} ({}): {}", case.text, mode.name(), r.answers));
                }
            }
        }
    }
    out.record(
        "7",
        "early-timestamp queries answer NULL",
        probes > 0 && violations.is_empty(),
        format!(
            "{probes} probes x 3 SSG modes, {} violations{}",
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    );
}

fn permutation_trials(p: &Pipeline, data: &GeneratedDataset, model: &ActionClassifier) -> usize {
    let oracle = OracleSpj::new(Grammar::standard());
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut violations = 0;
    for _ in 0..TRIALS {
        let gdb = data.databases.choose(&mut rng).unwrap();
        let case = gdb.cases.choose(&mut rng).unwrap();
        let mut texts: Vec<&str> = gdb.database.facts().iter().map(|f| f.text.as_str()).collect();
        let build = |order: &[&str]| {
            let mut db = Database::new();
            let ids: HashMap<String, FactId> = order.iter().map(|t| (t.to_string(), db.append_fact(t, 1).unwrap())).collect();
            (db, ids)
        };
        let (a, a_ids) = build(&texts);
        texts.shuffle(&mut rng);
        let (b, b_ids) = build(&texts);
        let remap = |ids: &HashMap<String, FactId>| -> Vec<Vec<FactId>> {
            case.support_sets
                .iter()
                .map(|s| s.iter().map(|id| ids[&gdb.database.get(*id).unwrap().text]).collect())
                .collect()
        };
        let (sa, sb) = (remap(&a_ids), remap(&b_ids));
        let pairs = [
            (SsgMode::Perfect(&sa), SsgMode::Perfect(&sb)),
            (SsgMode::Trained(model), SsgMode::Trained(model)),
        ];
        for (ma, mb) in pairs {
            let ra = p.answer_query(&a, &case.text, 1, ma, &oracle).unwrap();
            let rb = p.answer_query(&b, &case.text, 1, mb, &oracle).unwrap();
            if ra.answers != rb.answers {
                violations += 1;
            }
        }
    }
    violations
}

fn monotonicity_trials(data: &GeneratedDataset) -> (usize, usize) {
    let oracle = OracleSpj::new(Grammar::standard());
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let words = |t: &str| -> Vec<String> { t.split(|c: char| !c.is_alphanumeric()).map(str::to_string).collect() };
    let (mut violations, mut added) = (0, 0);
    for _ in 0..TRIALS {
        let pair: Vec<&GeneratedDb> = data.databases.choose_multiple(&mut rng, 2).collect();
        let (a, b) = (pair[0], pair[1]);
        let case = a.cases.choose(&mut rng).unwrap();
        let visible = a.database.visible_facts(case.timestamp);
        let base: Vec<&Fact> = visible.iter().collect();
        let before = oracle.whole_db_answer(&case.text, &base).unwrap();
        let support: Vec<&Fact> = case.support_sets.iter().flatten().filter_map(|id| a.database.get(*id)).collect();
        let names: BTreeSet<String> = support
            .iter()
            .flat_map(|f| words(&f.text))
            .chain(words(&case.text))
            .filter(|w| w.chars().next().is_some_and(char::is_uppercase))
            .collect();
        let relations: BTreeSet<&str> = case
            .support_sets
            .iter()
            .flatten()
            .flat_map(|id| a.provenance[id].iter().map(|t| t.relation.as_str()))
            .collect();
        let extra: Vec<Fact> = b
            .database
            .facts()
            .iter()
            .filter(|f| !words(&f.text).iter().any(|w| names.contains(w)))
            .filter(|f| b.provenance[&f.id].iter().all(|t| !relations.contains(t.relation.as_str())))
            .filter(|_| rng.gen_bool(0.5))
            .map(|f| Fact { id: FactId(f.id.0 + 1_000_000), ..f.clone() })
            .collect();
        added += extra.len();
        let mut all = base.clone();
        all.extend(extra.iter());
        if oracle.whole_db_answer(&case.text, &all).unwrap() != before {
            violations += 1;
        }
    }
    (violations, added)
}

fn random_tuples(rng: &mut ChaCha8Rng) -> Vec<(String, i64)> {
    let n = rng.gen_range(1..12);
    (0..n)
        .map(|_| (format!("k{}", rng.gen_range(0..6)), rng.gen_range(-1000..1000)))
        .collect()
}

fn tuple(key: &str, value: TupleValue) -> IntermediateResult {
    IntermediateResult::Tuple { key: key.to_string(), value }
}

fn argmax_transform_trials() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let transforms: [fn(i64) -> TupleValue; 3] = [
        |x| TupleValue::Int(BigInt::from(3 * x + 7)),
        |x| TupleValue::Int(BigInt::from(x).pow(3)),
        |x| TupleValue::Float((x as f64 / 250.0).exp()),
    ];
    let mut violations = 0;
    for i in 0..TRIALS {
        let tuples = random_tuples(&mut rng);
        let f = transforms[i % transforms.len()];
        for agg in [AggregationFunction::Argmax, AggregationFunction::Argmin] {
            let plain: Vec<_> = tuples.iter().map(|(k, v)| tuple(k, TupleValue::Int(BigInt::from(*v)))).collect();
            let moved: Vec<_> = tuples.iter().map(|(k, v)| tuple(k, f(*v))).collect();
            if aggregate(agg, &plain).unwrap() != aggregate(agg, &moved).unwrap() {
                violations += 1;
            }
        }
    }
    violations
}

fn aggregation_permutation_trials() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let mut violations = 0;
    for i in 0..TRIALS {
        let agg = AggregationFunction::ALL[i % AggregationFunction::ALL.len()];
        let mut items: Vec<IntermediateResult> = match agg {
            AggregationFunction::NoAggregation | AggregationFunction::Count => (0..rng.gen_range(0..10))
                .map(|_| match rng.gen_range(0..3) {
                    0 => IntermediateResult::Null,
                    _ => IntermediateResult::Answer(format!("a{}", rng.gen_range(0..5))),
                })
                .collect(),
            _ => random_tuples(&mut rng)
                .into_iter()
                .map(|(k, v)| {
                    if rng.gen_bool(0.2) {
                        IntermediateResult::Null
                    } else {
                        tuple(&k, TupleValue::Int(BigInt::from(v)))
                    }
                })
                .collect(),
        };
        let before = aggregate(agg, &items).map_err(|e| e.to_string());
        items.shuffle(&mut rng);
        if aggregate(agg, &items).map_err(|e| e.to_string()) != before {
            violations += 1;
        }
    }
    violations
}

fn criterion_8(out: &mut Outcome, p: &Pipeline, model: &ActionClassifier) {
    let data = generate_dataset(&GenConfig { num_dbs: 10, ..GenConfig::default() }, 8).unwrap();
    let perm = permutation_trials(p, &data, model);
    let (mono, added) = monotonicity_trials(&data);
    let argmax = argmax_transform_trials();
    let agg = aggregation_permutation_trials();
    out.record(
        "8",
        "invariance suite",
        perm + mono + argmax + agg == 0,
        format!(
            "{TRIALS} trials each; violations: fact-order {perm} (perfect and trained SSG), \
             irrelevant facts {mono} ({added} facts added), argmax/argmin under increasing maps {argmax}, \
             aggregation order {agg}"
        ),
    );
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes us means skip.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let t = Instant::now();
    let p = Pipeline::new(PipelineConfig::default()).unwrap();
    let mut out = Outcome { failed: Vec::new() };
    let data = criterion_1(&mut out, &p);
    let model = criterion_2(&mut out, &p, &data);
    criterion_3(&mut out, &p, &data, &model);
    criterion_4(&mut out, &p, &data, &model);
    criterion_5(&mut out);
    criterion_6(&mut out);
    criterion_7(&mut out, &p, &data, &model);
    criterion_8(&mut out, &p, &model);
    println!(
        "acceptance: {} of 8 criteria pass ({:.1} s)",
        8 - out.failed.len(),
        t.elapsed().as_secs_f64()
    );
    if !out.failed.is_empty() {
        println!("acceptance: failing criteria {}", out.failed.join(", "));
        std::process::exit(1);
    }
}
