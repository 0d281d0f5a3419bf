//! Exact rule-based SPJ over provenance triples.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use crate::aggregation::{aggregate, AnswerSet};
use crate::fact_store::{Fact, FactId};
use crate::grammar::{Grammar, ParsedQuery, QueryForm, RelationSpec, Triple};

use super::{IntermediateResult, SpjError, SpjOperator, SpjOutput, TupleValue};

/// Triples stated by each generated fact.
pub type ProvenanceMap = HashMap<FactId, Vec<Triple>>;

/// One way of deriving an answer element: the facts used and the result.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Derivation {
    /// Sorted, duplicate-free.
    pub support: Vec<FactId>,
    pub result: IntermediateResult,
}

fn forward<'a>(r: &RelationSpec, t: &'a Triple, subject: &str) -> Option<&'a str> {
    if t.relation != r.name {
        return None;
    }
    if t.subject == subject {
        Some(&t.object)
    } else if r.symmetric && t.object == subject {
        Some(&t.subject)
    } else {
        None
    }
}

fn backward<'a>(g: &Grammar, r: &RelationSpec, t: &'a Triple, target: &str) -> Option<&'a str> {
    if t.relation != r.name {
        return None;
    }
    if g.object_matches(&t.object, target) {
        Some(&t.subject)
    } else if r.symmetric && g.object_matches(&t.subject, target) {
        Some(&t.object)
    } else {
        None
    }
}

fn check_result(g: &Grammar, r: &RelationSpec, value: &str, target: &str) -> Option<IntermediateResult> {
    let hit = g.object_matches(value, target);
    // Without functionality a non-matching object says nothing about the target.
    (hit || r.functional).then_some(IntermediateResult::Bool(hit))
}

/// Every derivation of `form` over the given (fact, triples) pairs, sorted.
pub fn derivations(g: &Grammar, form: &QueryForm, facts: &[(FactId, &[Triple])]) -> Vec<Derivation> {
    let flat: Vec<(FactId, &Triple)> = facts
        .iter()
        .flat_map(|(id, ts)| ts.iter().map(move |t| (*id, t)))
        .collect();
    let single = |id: FactId, result: IntermediateResult| Derivation {
        support: vec![id],
        result,
    };
    let mut out: Vec<Derivation> = Vec::new();
    let Some(rel) = form.relations().first().and_then(|r| g.relation(r)) else {
        return out;
    };
    match form {
        QueryForm::Extract { subject, .. } | QueryForm::CountExtract { subject, .. } => {
            for (id, t) in &flat {
                if let Some(o) = forward(rel, t, subject) {
                    out.push(single(*id, IntermediateResult::Answer(o.to_string())));
                }
            }
        }
        QueryForm::Check {
            subject, object, ..
        } => {
            for (id, t) in &flat {
                if let Some(o) = forward(rel, t, subject) {
                    out.extend(check_result(g, rel, o, object).map(|r| single(*id, r)));
                }
            }
        }
        QueryForm::Inverse { object, .. } | QueryForm::CountInverse { object, .. } => {
            for (id, t) in &flat {
                if let Some(s) = backward(g, rel, t, object) {
                    out.push(single(*id, IntermediateResult::Answer(s.to_string())));
                }
            }
        }
        QueryForm::ArgExtreme { .. } | QueryForm::ValueExtreme { .. } => {
            for (id, t) in &flat {
                if t.relation == rel.name {
                    out.push(single(
                        *id,
                        IntermediateResult::Tuple {
                            key: t.subject.clone(),
                            value: TupleValue::parse(&t.object),
                        },
                    ));
                }
            }
        }
        QueryForm::GroupExtreme { .. } => {
            for (id, t) in &flat {
                if t.relation == rel.name {
                    out.push(single(
                        *id,
                        IntermediateResult::Tuple {
                            key: t.object.clone(),
                            value: TupleValue::Text(t.subject.clone()),
                        },
                    ));
                }
            }
        }
        QueryForm::JoinExtract {
            second, subject, ..
        }
        | QueryForm::JoinCheck {
            second, subject, ..
        } => {
            let Some(rel2) = g.relation(second) else {
                return out;
            };
            for (ida, a) in &flat {
                let Some(mid) = forward(rel, a, subject) else {
                    continue;
                };
                for (idb, b) in &flat {
                    let Some(y) = forward(rel2, b, mid) else {
                        continue;
                    };
                    let result = match form {
                        QueryForm::JoinCheck { object, .. } => check_result(g, rel2, y, object),
                        _ => Some(IntermediateResult::Answer(y.to_string())),
                    };
                    if let Some(result) = result {
                        let support: BTreeSet<FactId> = [*ida, *idb].into();
                        out.push(Derivation {
                            support: support.into_iter().collect(),
                            result,
                        });
                    }
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Deterministic SPJ that parses queries against the grammar and reads fact
/// provenance from a sidecar, falling back to template matching of the text.
pub struct OracleSpj {
    grammar: &'static Grammar,
    sidecar: Arc<ProvenanceMap>,
    fact_cache: RwLock<HashMap<String, Option<Arc<Vec<Triple>>>>>,
    query_cache: RwLock<HashMap<String, Option<ParsedQuery>>>,
}

impl OracleSpj {
    pub fn new(grammar: &'static Grammar) -> Self {
        Self::with_sidecar(grammar, Arc::new(ProvenanceMap::new()))
    }

    pub fn with_sidecar(grammar: &'static Grammar, sidecar: Arc<ProvenanceMap>) -> Self {
        Self {
            grammar,
            sidecar,
            fact_cache: RwLock::new(HashMap::new()),
            query_cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn grammar(&self) -> &'static Grammar {
        self.grammar
    }

    pub fn parse_query(&self, query: &str) -> Result<ParsedQuery, SpjError> {
        if let Some(hit) = self.query_cache.read().expect("lock").get(query) {
            return hit.clone().ok_or_else(|| SpjError::UnparsedQuery(query.to_string()));
        }
        let parsed = self.grammar.parse_query(query);
        self.query_cache
            .write()
            .expect("lock")
            .insert(query.to_string(), parsed.clone());
        parsed.ok_or_else(|| SpjError::UnparsedQuery(query.to_string()))
    }

    /// Provenance of a fact: sidecar entry by id, else parsed from its text.
    pub fn provenance(&self, fact: &Fact) -> Result<Arc<Vec<Triple>>, SpjError> {
        if let Some(t) = self.sidecar.get(&fact.id) {
            return Ok(Arc::new(t.clone()));
        }
        if let Some(hit) = self.fact_cache.read().expect("lock").get(&fact.text) {
            return hit.clone().ok_or(SpjError::MissingProvenance(fact.id));
        }
        let parsed = self.grammar.parse_fact(&fact.text).map(Arc::new);
        self.fact_cache
            .write()
            .expect("lock")
            .insert(fact.text.clone(), parsed.clone());
        parsed.ok_or(SpjError::MissingProvenance(fact.id))
    }

    fn derive(&self, parsed: &ParsedQuery, facts: &[&Fact], strict: bool) -> Result<Vec<Derivation>, SpjError> {
        let mut prov = Vec::with_capacity(facts.len());
        for f in facts {
            match self.provenance(f) {
                Ok(p) => prov.push((f.id, p)),
                Err(e) if strict => return Err(e),
                // Sentences outside the grammar cannot contribute to any derivation.
                Err(_) => {}
            }
        }
        let view: Vec<(FactId, &[Triple])> = prov.iter().map(|(id, p)| (*id, p.as_slice())).collect();
        Ok(derivations(self.grammar, &parsed.form, &view))
    }

    /// All derivations available in `facts`.
    pub fn all_derivations(&self, query: &str, facts: &[&Fact]) -> Result<Vec<Derivation>, SpjError> {
        let parsed = self.parse_query(query)?;
        self.derive(&parsed, facts, false)
    }

    /// The answer a whole-database reader would give over `facts`.
    pub fn whole_db_answer(&self, query: &str, facts: &[&Fact]) -> Result<AnswerSet, SpjError> {
        let parsed = self.parse_query(query)?;
        let results: Vec<IntermediateResult> = self
            .derive(&parsed, facts, false)?
            .into_iter()
            .map(|d| d.result)
            .collect();
        aggregate(parsed.agg, &results).map_err(|e| SpjError::ProtocolError(e.to_string()))
    }
}

impl SpjOperator for OracleSpj {
    fn apply(&self, query: &str, support: &[Fact]) -> Result<SpjOutput, SpjError> {
        let parsed = self.parse_query(query)?;
        let refs: Vec<&Fact> = support.iter().collect();
        let result = self
            .derive(&parsed, &refs, true)?
            .into_iter()
            .next()
            .map(|d| d.result)
            .unwrap_or(IntermediateResult::Null);
        Ok(SpjOutput {
            result,
            predicted_agg: parsed.agg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregationFunction;

    fn fact(id: u64, text: &str) -> Fact {
        Fact {
            id: FactId(id),
            text: text.into(),
            timestamp: id,
            invalidated: false,
        }
    }

    fn oracle() -> OracleSpj {
        OracleSpj::new(Grammar::standard())
    }

    #[test]
    fn figure_one_derivations() {
        let o = oracle();
        let spouse = fact(1, "Sheryl is Nicholas's spouse.");
        let home = fact(2, "Nicholas lives in Washington D.C. with Sheryl.");
        let teuvo = fact(3, "Teuvo was born in 1912.");
        let q = "Does Nicholas's spouse live in Washington D.C.?";
        let out = o.apply(q, &[spouse.clone(), home.clone()]).unwrap();
        assert_eq!(out.result, IntermediateResult::Bool(true));
        assert_eq!(out.predicted_agg, AggregationFunction::NoAggregation);
        let swapped = o.apply(q, &[home, spouse]).unwrap();
        assert_eq!(swapped, out);
        let out = o
            .apply("Who is the oldest person in the database?", std::slice::from_ref(&teuvo))
            .unwrap();
        assert_eq!(
            out.result,
            IntermediateResult::Tuple {
                key: "Teuvo".into(),
                value: 1912.into()
            }
        );
        assert_eq!(out.predicted_agg, AggregationFunction::Argmin);
        assert_eq!(o.apply(q, &[teuvo]).unwrap().result, IntermediateResult::Null);
    }

    #[test]
    fn implicit_location_uses_the_gazetteer() {
        let o = oracle();
        let f = fact(1, "Mahesh's mum gave birth to him in Mumbai");
        let yes = o.apply("Was Mahesh born in India?", std::slice::from_ref(&f)).unwrap();
        assert_eq!(yes.result, IntermediateResult::Bool(true));
        let no = o.apply("Was Mahesh born in Europe?", &[f]).unwrap();
        assert_eq!(no.result, IntermediateResult::Bool(false));
    }

    #[test]
    fn errors() {
        let o = oracle();
        assert!(matches!(
            o.apply("Tell me a joke", &[]),
            Err(SpjError::UnparsedQuery(_))
        ));
        assert!(matches!(
            o.apply("Who is Sheryl's husband?", &[fact(9, "Gibberish words here.")]),
            Err(SpjError::MissingProvenance(FactId(9)))
        ));
    }

    #[test]
    fn smallest_derivation_wins() {
        let o = oracle();
        let facts = [
            fact(5, "Pat is Sue's father."),
            fact(2, "Pat is Mary's father."),
        ];
        let out = o.apply("Who are Pat's children?", &facts).unwrap();
        assert_eq!(out.result, IntermediateResult::Answer("Mary".into()));
        let refs: Vec<&Fact> = facts.iter().collect();
        assert_eq!(
            o.whole_db_answer("How many kids does Pat have?", &refs).unwrap(),
            AnswerSet::single("2")
        );
    }
}
