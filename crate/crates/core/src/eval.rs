//! Answer metrics (exact match, set F1) and support-set precision/recall.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AnswerSet;
use crate::dataset_gen::{GeneratedDataset, GeneratedDb, QueryCase};
use crate::fact_store::FactId;
use crate::grammar::QueryKind;
use crate::pipeline::{Pipeline, PipelineError, SsgMode};
use crate::spj::SpjOperator;
use crate::ssg::ActionClassifier;

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalized(a: &AnswerSet) -> BTreeSet<String> {
    a.iter().map(normalize).collect()
}

/// 1.0 when both sets agree element for element after whitespace
/// normalization. Case matters.
pub fn exact_match(predicted: &AnswerSet, reference: &AnswerSet) -> f64 {
    if normalized(predicted) == normalized(reference) {
        1.0
    } else {
        0.0
    }
}

/// Set F1. Two empty sets score 1.
pub fn f1_set(predicted: &AnswerSet, reference: &AnswerSet) -> f64 {
    let p = normalized(predicted);
    let r = normalized(reference);
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    let tp = p.intersection(&r).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / p.len() as f64;
    let recall = tp / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Raw match counts; add them up across instances for micro averages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportCounts {
    pub predicted: usize,
    pub reference: usize,
    pub exact_predicted: usize,
    pub soft_predicted: usize,
    pub exact_reference: usize,
    pub soft_reference: usize,
}

impl SupportCounts {
    pub fn of(predicted: &[Vec<FactId>], reference: &[Vec<FactId>]) -> Self {
        let pred: Vec<BTreeSet<FactId>> = predicted.iter().map(|s| s.iter().copied().collect()).collect();
        let refs: Vec<BTreeSet<FactId>> = reference.iter().map(|s| s.iter().copied().collect()).collect();
        let exact = |p: &BTreeSet<FactId>, r: &BTreeSet<FactId>| p == r;
        let soft = |p: &BTreeSet<FactId>, r: &BTreeSet<FactId>| p.is_superset(r);
        Self {
            predicted: pred.len(),
            reference: refs.len(),
            exact_predicted: pred.iter().filter(|p| refs.iter().any(|r| exact(p, r))).count(),
            soft_predicted: pred.iter().filter(|p| refs.iter().any(|r| soft(p, r))).count(),
            exact_reference: refs.iter().filter(|r| pred.iter().any(|p| exact(p, r))).count(),
            soft_reference: refs.iter().filter(|r| pred.iter().any(|p| soft(p, r))).count(),
        }
    }

    pub fn scores(&self) -> SupportScores {
        let ratio = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
        SupportScores {
            exact_precision: ratio(self.exact_predicted, self.predicted, 1.0),
            exact_recall: ratio(self.exact_reference, self.reference, 1.0),
            soft_precision: ratio(self.soft_predicted, self.predicted, 1.0),
            soft_recall: ratio(self.soft_reference, self.reference, 1.0),
        }
    }
}

impl std::ops::AddAssign for SupportCounts {
    fn add_assign(&mut self, o: Self) {
        self.predicted += o.predicted;
        self.reference += o.reference;
        self.exact_predicted += o.exact_predicted;
        self.soft_predicted += o.soft_predicted;
        self.exact_reference += o.exact_reference;
        self.soft_reference += o.soft_reference;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportScores {
    pub exact_precision: f64,
    pub exact_recall: f64,
    pub soft_precision: f64,
    pub soft_recall: f64,
}

/// A predicted set matches exactly when it equals a reference set and softly
/// when it contains one. With nothing predicted, precision is 1; with no
/// reference sets, recall is 1.
pub fn support_metrics(predicted: &[Vec<FactId>], reference: &[Vec<FactId>]) -> SupportScores {
    SupportCounts::of(predicted, reference).scores()
}

/// Report columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindGroup {
    Count,
    MinMax,
    Sets,
    Atomic,
    Joins,
}

impl KindGroup {
    pub const ALL: [KindGroup; 5] = [Self::Count, Self::MinMax, Self::Sets, Self::Atomic, Self::Joins];

    pub fn of(kind: QueryKind) -> Self {
        match kind {
            QueryKind::Count => Self::Count,
            QueryKind::Minmax => Self::MinMax,
            QueryKind::Set => Self::Sets,
            QueryKind::LookupBool | QueryKind::LookupExtract => Self::Atomic,
            QueryKind::JoinBool | QueryKind::JoinExtract => Self::Joins,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Count => "Count",
            Self::MinMax => "Min/Max",
            Self::Sets => "Sets",
            Self::Atomic => "Atomic",
            Self::Joins => "Joins",
        }
    }
}

/// Scores of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub db: usize,
    pub case: usize,
    pub kind: QueryKind,
    pub em: f64,
    pub f1: f64,
    pub support: SupportCounts,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub count: usize,
    pub errors: usize,
    pub em: f64,
    pub f1: f64,
    /// Micro-averaged over the group's sets.
    pub support: SupportScores,
    pub support_counts: SupportCounts,
}

impl GroupMetrics {
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a CaseScore>) -> Self {
        let mut count = 0;
        let mut errors = 0;
        let (mut em, mut f1) = (0.0, 0.0);
        let mut counts = SupportCounts::default();
        for s in scores {
            count += 1;
            errors += usize::from(s.error.is_some());
            em += s.em;
            f1 += s.f1;
            counts += s.support;
        }
        let mean = |x: f64| if count == 0 { 0.0 } else { x / count as f64 };
        Self {
            count,
            errors,
            em: mean(em),
            f1: mean(f1),
            support: counts.scores(),
            support_counts: counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: String,
    pub cases: usize,
    pub errors: usize,
    pub groups: Vec<(KindGroup, GroupMetrics)>,
    pub overall: GroupMetrics,
    pub instances: Vec<CaseScore>,
}

impl MetricReport {
    pub fn from_scores(mode: &str, instances: Vec<CaseScore>) -> Self {
        let groups = KindGroup::ALL
            .iter()
            .map(|g| (*g, GroupMetrics::from_scores(instances.iter().filter(|s| KindGroup::of(s.kind) == *g))))
            .collect();
        let overall = GroupMetrics::from_scores(&instances);
        Self {
            mode: mode.to_string(),
            cases: instances.len(),
            errors: overall.errors,
            groups,
            overall,
            instances,
        }
    }

    pub fn group(&self, g: KindGroup) -> &GroupMetrics {
        &self.groups.iter().find(|(k, _)| *k == g).expect("every group is reported").1
    }

    /// Plain-text table, one metric per row, one kind group per column.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(&str, &GroupMetrics)> = self.groups.iter().map(|(g, m)| (g.label(), m)).collect();
        cols.push(("All", &self.overall));
        let mut out = String::new();
        let _ = write!(out, "{:<22}", format!("mode: {}", self.mode));
        for (name, _) in &cols {
            let _ = write!(out, "{name:>9}");
        }
        out.push('\n');
        type Row = (&'static str, fn(&GroupMetrics) -> f64);
        let rows: [Row; 6] = [
            ("EM", |m| m.em),
            ("F1", |m| m.f1),
            ("support P (exact)", |m| m.support.exact_precision),
            ("support R (exact)", |m| m.support.exact_recall),
            ("support P (soft)", |m| m.support.soft_precision),
            ("support R (soft)", |m| m.support.soft_recall),
        ];
        for (label, get) in rows {
            let _ = write!(out, "{label:<22}");
            for (_, m) in &cols {
                let _ = write!(out, "{:>9.3}", get(m));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<22}", "count");
        for (_, m) in &cols {
            let _ = write!(out, "{:>9}", m.count);
        }
        out.push('\n');
        let _ = writeln!(out, "errors: {}", self.errors);
        out
    }
}

/// Support-set source for an evaluation run.
#[derive(Debug, Clone, Copy)]
pub enum EvalMode<'a> {
    Trained(&'a ActionClassifier),
    Perfect,
    TfidfTopK(usize),
}

impl EvalMode<'_> {
    pub fn name(&self) -> String {
        match self {
            EvalMode::Trained(_) => "trained".into(),
            EvalMode::Perfect => "perfect".into(),
            EvalMode::TfidfTopK(k) => format!("tfidf(k={k})"),
        }
    }
}

/// Scores one case. Pipeline failures are recorded, not raised, and score 0.
pub fn score_case(
    pipeline: &Pipeline,
    gdb: &GeneratedDb,
    case: &QueryCase,
    mode: EvalMode<'_>,
    spj: &dyn SpjOperator,
) -> (f64, f64, SupportCounts, Option<String>) {
    let ssg = match mode {
        EvalMode::Trained(m) => SsgMode::Trained(m),
        EvalMode::Perfect => SsgMode::Perfect(&case.support_sets),
        EvalMode::TfidfTopK(k) => SsgMode::TfidfTopK(k),
    };
    match pipeline.answer_query(&gdb.database, &case.text, case.timestamp, ssg, spj) {
        Ok(r) => (
            exact_match(&r.answers, &case.answer),
            f1_set(&r.answers, &case.answer),
            SupportCounts::of(&r.support_sets, &case.support_sets),
            None,
        ),
        Err(e) => (
            0.0,
            0.0,
            SupportCounts::of(&[], &case.support_sets),
            Some(e.to_string()),
        ),
    }
}

/// Runs every case of `dataset` in parallel. `spj_for` supplies the operator
/// for each database.
pub fn evaluate_dataset(
    dataset: &GeneratedDataset,
    pipeline: &Pipeline,
    mode: EvalMode<'_>,
    spj_for: &(dyn Fn(&GeneratedDb) -> Arc<dyn SpjOperator> + Sync),
) -> Result<MetricReport, PipelineError> {
    let ops: Vec<Arc<dyn SpjOperator>> = dataset.databases.iter().map(spj_for).collect();
    let jobs: Vec<(usize, usize)> = dataset
        .databases
        .iter()
        .enumerate()
        .flat_map(|(d, db)| (0..db.cases.len()).map(move |c| (d, c)))
        .collect();
    let instances: Vec<CaseScore> = pipeline.install(|| {
        jobs.par_iter()
            .map(|&(d, c)| {
                let gdb = &dataset.databases[d];
                let case = &gdb.cases[c];
                let (em, f1, support, error) = score_case(pipeline, gdb, case, mode, ops[d].as_ref());
                CaseScore {
                    db: d,
                    case: c,
                    kind: case.kind,
                    em,
                    f1,
                    support,
                    error,
                }
            })
            .collect()
    });
    Ok(MetricReport::from_scores(&mode.name(), instances))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> AnswerSet {
        AnswerSet::new(xs.iter().copied())
    }

    fn ids(sets: &[&[u64]]) -> Vec<Vec<FactId>> {
        sets.iter().map(|s| s.iter().map(|i| FactId(*i)).collect()).collect()
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match(&set(&["Nicholas"]), &set(&["Nicholas"])), 1.0);
        assert_eq!(exact_match(&set(&["nicholas"]), &set(&["Nicholas"])), 0.0);
        assert_eq!(exact_match(&set(&["3"]), &set(&["3"])), 1.0);
        assert_eq!(exact_match(&set(&[" Washington  D.C. "]), &set(&["Washington D.C."])), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_set(&set(&["A", "B"]), &set(&["A", "C"])), 0.5);
        assert_eq!(f1_set(&set(&["A", "B"]), &set(&["A", "B"])), 1.0);
        assert_eq!(f1_set(&set(&["A"]), &set(&["B"])), 0.0);
        assert_eq!(f1_set(&set(&[]), &set(&[])), 1.0);
        assert_eq!(f1_set(&set(&[]), &set(&["A"])), 0.0);
    }

    #[test]
    fn support_examples() {
        let s = support_metrics(&ids(&[&[1], &[2]]), &ids(&[&[1]]));
        assert_eq!((s.exact_precision, s.exact_recall), (0.5, 1.0));
        let s = support_metrics(&ids(&[&[1, 7]]), &ids(&[&[1]]));
        assert_eq!((s.soft_precision, s.exact_precision), (1.0, 0.0));
        assert_eq!(s.soft_recall, 1.0);
        let s = support_metrics(&[], &ids(&[&[1]]));
        assert_eq!((s.exact_precision, s.exact_recall, s.soft_recall), (1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_report() {
        let r = MetricReport::from_scores("perfect", Vec::new());
        assert_eq!(r.cases, 0);
        assert!(r.groups.iter().all(|(_, g)| g.count == 0 && g.em == 0.0));
        assert!(r.to_table().contains("Min/Max"));
    }
}
