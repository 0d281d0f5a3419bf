use std::collections::BTreeSet;
use std::sync::OnceLock;

use ndb_core::dataset_gen::{generate_dataset, GenConfig, GeneratedDataset};
use ndb_core::fact_store::{Database, Fact, FactId};
use ndb_core::retrieval::IndexMode;
use ndb_core::ssg::{
    expand, generate_support_sets, train_action_classifier, ActionClassifier, FactSpace, SsgConfig, SsgState,
    TrainOptions,
};
use proptest::prelude::*;

fn data() -> &'static GeneratedDataset {
    static DATA: OnceLock<GeneratedDataset> = OnceLock::new();
    DATA.get_or_init(|| generate_dataset(&GenConfig { num_dbs: 12, ..GenConfig::default() }, 42).unwrap())
}

/// Trained on the first ten databases; the last two are held out.
fn model() -> &'static ActionClassifier {
    static MODEL: OnceLock<ActionClassifier> = OnceLock::new();
    MODEL.get_or_init(|| {
        let train: Vec<_> = data().databases[..10].iter().map(|d| (&d.database, d.cases.as_slice())).collect();
        train_action_classifier(&train, &TrainOptions { seed: 1, ..TrainOptions::default() }).unwrap()
    })
}

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

fn space(facts: &[Fact], mode: IndexMode) -> FactSpace {
    FactSpace::new(facts, model().dim(), mode).unwrap()
}

#[test]
fn figure_one_lookup_and_join() {
    let facts = fig1().visible_facts(10);
    let s = space(&facts, IndexMode::Exact);
    let cfg = SsgConfig::default();
    let root = expand(&SsgState::root("Who is Sheryl's husband?"), &s, model(), &cfg).unwrap();
    let picked: BTreeSet<FactId> = root.children.iter().flat_map(|(c, _)| c.partial.clone()).collect();
    assert!(picked.contains(&FactId(1)), "{picked:?}");
    let next = expand(&SsgState { query: "Who is Sheryl's husband?".into(), partial: vec![FactId(1)] }, &s, model(), &cfg).unwrap();
    assert!(next.close);

    let sets = generate_support_sets("Does Nicholas's spouse live in Washington D.C.?", &s, model(), &cfg).unwrap();
    assert_eq!(sets.sets, vec![vec![FactId(0), FactId(1)]]);
}

#[test]
fn oldest_person_gets_one_set_per_birth_fact() {
    let mut db = Database::new();
    for (i, (name, year, place)) in [
        ("Teuvo", 1912, "Ruskala"),
        ("Mahesh", 1950, "Mumbai"),
        ("Sheryl", 1969, "Chicago"),
        ("Mary", 1931, "Boston"),
        ("Nicholas", 1988, "Paris"),
    ]
    .iter()
    .enumerate()
    {
        db.append_fact(&format!("{name} was born in {year} in {place}."), i as u64).unwrap();
    }
    for (i, t) in ["Sheryl is Nicholas's spouse.", "Mahesh works as a chef."].iter().enumerate() {
        db.append_fact(t, 10 + i as u64).unwrap();
    }
    let facts = db.visible_facts(100);
    let sets = generate_support_sets("Who is the oldest person in the database?", &space(&facts, IndexMode::Exact), model(), &SsgConfig::default()).unwrap();
    let expected: Vec<Vec<FactId>> = (0..5).map(|i| vec![FactId(i)]).collect();
    assert_eq!(sets.sets, expected);
}

#[test]
fn zero_epochs_means_zero_weights() {
    let d = &data().databases[0];
    let m = train_action_classifier(&[(&d.database, &d.cases)], &TrainOptions { epochs: 0, ..TrainOptions::default() }).unwrap();
    assert!(m.is_zero());
    let facts = d.database.visible_facts(u64::MAX);
    let s = FactSpace::new(&facts, m.dim(), IndexMode::Exact).unwrap();
    for case in d.cases.iter().take(20) {
        let e = expand(&SsgState::root(&case.text), &s, &m, &SsgConfig { tau: 0.5, ..SsgConfig::default() }).unwrap();
        assert!(e.is_dead_end());
        let out = generate_support_sets(&case.text, &s, &m, &SsgConfig { tau: 0.5, ..SsgConfig::default() }).unwrap();
        assert!(out.sets.is_empty());
    }
}

#[test]
fn training_is_deterministic() {
    let d = &data().databases[0..2];
    let pairs: Vec<_> = d.iter().map(|d| (&d.database, d.cases.as_slice())).collect();
    let opts = TrainOptions { epochs: 2, seed: 9, ..TrainOptions::default() };
    let a = train_action_classifier(&pairs, &opts).unwrap();
    let b = train_action_classifier(&pairs, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn held_out_sets_respect_shape_bounds() {
    let cfg = SsgConfig::default();
    for d in &data().databases[10..] {
        for case in &d.cases {
            let facts = d.database.visible_facts(case.timestamp);
            let s = space(&facts, IndexMode::Exact);
            let out = generate_support_sets(&case.text, &s, model(), &cfg).unwrap();
            assert!(out.expansions <= cfg.max_open * cfg.max_depth);
            assert!(out.sets.len() <= cfg.max_open);
            let distinct: BTreeSet<&Vec<FactId>> = out.sets.iter().collect();
            assert_eq!(distinct.len(), out.sets.len());
            for set in &out.sets {
                assert!(!set.is_empty() && set.len() <= cfg.max_depth);
                assert!(set.iter().all(|id| facts.iter().any(|f| f.id == *id)));
            }
        }
    }
}

#[test]
fn exact_candidates_match_a_threshold_scan() {
    let d = &data().databases[11];
    let facts = d.database.visible_facts(u64::MAX);
    let s = space(&facts, IndexMode::Exact);
    let cfg = SsgConfig { cap: facts.len(), tau: 0.0, ..SsgConfig::default() };
    for case in d.cases.iter().take(40) {
        let mut state = SsgState::root(&case.text);
        if let Some(first) = case.support_sets.first().and_then(|s| s.first()) {
            state.partial.push(*first);
        }
        let e = expand(&state, &s, model(), &cfg).unwrap();
        let got: BTreeSet<FactId> = e
            .children
            .iter()
            .flat_map(|(c, _)| c.partial.iter().copied().filter(|id| !state.partial.contains(id)))
            .collect();
        let features = s.features(&state);
        let scored: Vec<(FactId, f64)> = facts
            .iter()
            .filter(|f| !state.partial.contains(&f.id))
            .map(|f| (f.id, model().score_fact(&features, s.sparse(f.id).unwrap())))
            .collect();
        // Float summation order differs between the index and the scan.
        let borderline = |id: &FactId| scored.iter().any(|(i, x)| i == id && (x - cfg.tau).abs() < 1e-4);
        let want: BTreeSet<FactId> = scored.iter().filter(|(_, x)| *x >= cfg.tau).map(|(id, _)| *id).collect();
        let diff: Vec<&FactId> = got.symmetric_difference(&want).filter(|id| !borderline(id)).collect();
        assert!(diff.is_empty(), "{}: {diff:?}", case.text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// With caps that never bind, lowering the threshold only adds sets.
    #[test]
    fn lowering_tau_keeps_closed_sets(case_ix in 0usize..150, hi in -1.0f64..3.0, drop in 0.0f64..2.0) {
        let d = &data().databases[10];
        let case = &d.cases[case_ix % d.cases.len()];
        let facts = d.database.visible_facts(case.timestamp);
        let s = space(&facts, IndexMode::Exact);
        let wide = |tau| SsgConfig { tau, max_depth: 3, max_open: 1 << 20, cap: facts.len() };
        let high = generate_support_sets(&case.text, &s, model(), &wide(hi)).unwrap();
        let low = generate_support_sets(&case.text, &s, model(), &wide(hi - drop)).unwrap();
        let low: BTreeSet<_> = low.sets.into_iter().collect();
        for set in high.sets {
            prop_assert!(low.contains(&set), "{:?} lost at tau {}", set, hi - drop);
        }
    }
}
