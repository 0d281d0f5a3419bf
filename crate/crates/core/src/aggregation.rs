//! Query classification into aggregation labels and classical aggregation over
//! SPJ intermediate results.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::spj::{IntermediateResult, TupleValue};

/// Rendering of the NULL answer.
pub const NULL: &str = "NULL";
pub const TRUE: &str = "TRUE";
pub const FALSE: &str = "FALSE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationFunction {
    NoAggregation,
    Count,
    Min,
    Max,
    Argmin,
    Argmax,
}

impl AggregationFunction {
    pub const ALL: [AggregationFunction; 6] = [
        Self::NoAggregation,
        Self::Count,
        Self::Min,
        Self::Max,
        Self::Argmin,
        Self::Argmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoAggregation => "no_aggregation",
            Self::Count => "count",
            Self::Min => "min",
            Self::Max => "max",
            Self::Argmin => "argmin",
            Self::Argmax => "argmax",
        }
    }

    fn is_numeric(self) -> bool {
        matches!(self, Self::Min | Self::Max | Self::Argmin | Self::Argmax)
    }
}

impl fmt::Display for AggregationFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationFunction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown aggregation label {s:?}"))
    }
}

/// Unordered, duplicate-free set of answer strings.
///
/// `NULL` only ever appears alone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerSet(BTreeSet<String>);

impl AnswerSet {
    pub fn null() -> Self {
        Self(BTreeSet::from([NULL.to_string()]))
    }

    pub fn single(s: impl Into<String>) -> Self {
        Self::new([s.into()])
    }

    /// Builds a set, dropping a `NULL` element when real answers are present.
    pub fn new<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: BTreeSet<String> = items.into_iter().map(Into::into).collect();
        if set.len() > 1 {
            set.remove(NULL);
        }
        Self(set)
    }

    pub fn is_null(&self) -> bool {
        self.0.len() == 1 && self.0.contains(NULL)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn contains(&self, s: &str) -> bool {
        self.0.contains(s)
    }

    pub fn as_set(&self) -> &BTreeSet<String> {
        &self.0
    }
}

impl TryFrom<Vec<String>> for AnswerSet {
    type Error = String;

    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        let set: BTreeSet<String> = v.into_iter().collect();
        if set.len() > 1 && set.contains(NULL) {
            return Err("NULL cannot co-occur with other answers".into());
        }
        Ok(Self(set))
    }
}

impl From<AnswerSet> for Vec<String> {
    fn from(a: AnswerSet) -> Self {
        a.0.into_iter().collect()
    }
}

impl fmt::Display for AnswerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s:?}")?;
        }
        f.write_str("}")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregationError {
    #[error("{function} cannot aggregate {found}")]
    TypeMismatch {
        function: AggregationFunction,
        found: String,
    },
}

const MIN_WORDS: &[&str] = &[
    "oldest", "eldest", "earliest", "smallest", "least", "fewest", "lowest", "shortest",
];
const MAX_WORDS: &[&str] = &[
    "youngest", "latest", "largest", "most", "highest", "biggest", "newest", "greatest",
    "longest",
];
const VALUE_WORDS: &[&str] = &["year", "number", "value", "amount", "date"];

fn words(query: &str) -> Vec<String> {
    query
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Keyword classifier mapping a query onto one of the six aggregation labels.
///
/// A superlative picks the direction; the question asks for a value (min/max)
/// when it mentions a year or number, otherwise for the entity attaining it
/// (argmin/argmax). Birth-year superlatives are oriented on the year, so
/// "oldest" is a minimum.
pub fn classify_query(query: &str) -> AggregationFunction {
    let w = words(query);
    let has = |list: &[&str]| w.iter().any(|t| list.contains(&t.as_str()));
    if w.windows(2).any(|p| p[0] == "how" && p[1] == "many") {
        return AggregationFunction::Count;
    }
    let dir_min = has(MIN_WORDS);
    let dir_max = has(MAX_WORDS);
    if !dir_min && !dir_max {
        return AggregationFunction::NoAggregation;
    }
    let value = has(VALUE_WORDS);
    match (dir_min, value) {
        (true, true) => AggregationFunction::Min,
        (true, false) => AggregationFunction::Argmin,
        (false, true) => AggregationFunction::Max,
        (false, false) => AggregationFunction::Argmax,
    }
}

fn mismatch(function: AggregationFunction, found: &IntermediateResult) -> AggregationError {
    AggregationError::TypeMismatch {
        function,
        found: format!("{found:?}"),
    }
}

/// Combines SPJ outputs into the final answer.
///
/// `Null` intermediates are ignored. Empty input yields `{"0"}` for count and
/// `{NULL}` otherwise. Counting is over distinct answers. argmin/argmax keep
/// every tied key. When every tuple value is non-numeric, argmin/argmax group by
/// key and rank keys by their number of distinct values (the
/// "most widely used currency" flow).
pub fn aggregate(
    function: AggregationFunction,
    intermediates: &[IntermediateResult],
) -> Result<AnswerSet, AggregationError> {
    let items: Vec<&IntermediateResult> = intermediates
        .iter()
        .filter(|r| !matches!(r, IntermediateResult::Null))
        .collect();
    if items.is_empty() {
        return Ok(match function {
            AggregationFunction::Count => AnswerSet::single("0"),
            _ => AnswerSet::null(),
        });
    }
    match function {
        AggregationFunction::NoAggregation => {
            let mut out = BTreeSet::new();
            for r in items {
                match r {
                    IntermediateResult::Answer(s) => out.insert(s.clone()),
                    IntermediateResult::Bool(b) => out.insert(render_bool(*b).to_string()),
                    other => return Err(mismatch(function, other)),
                };
            }
            Ok(AnswerSet::new(out))
        }
        AggregationFunction::Count => {
            let mut distinct = BTreeSet::new();
            for r in items {
                match r {
                    IntermediateResult::Answer(s) => distinct.insert(s.as_str()),
                    other => return Err(mismatch(function, other)),
                };
            }
            Ok(AnswerSet::single(distinct.len().to_string()))
        }
        f if f.is_numeric() => extreme(f, &items),
        _ => unreachable!(),
    }
}

fn extreme(
    function: AggregationFunction,
    items: &[&IntermediateResult],
) -> Result<AnswerSet, AggregationError> {
    let mut tuples = Vec::with_capacity(items.len());
    for r in items {
        match r {
            IntermediateResult::Tuple { key, value } => tuples.push((key.as_str(), value)),
            other => return Err(mismatch(function, other)),
        }
    }
    let want = match function {
        AggregationFunction::Min | AggregationFunction::Argmin => Ordering::Less,
        _ => Ordering::Greater,
    };
    let all_text = tuples.iter().all(|(_, v)| matches!(v, TupleValue::Text(_)));
    if all_text {
        if matches!(function, AggregationFunction::Min | AggregationFunction::Max) {
            return Err(mismatch(function, items[0]));
        }
        let mut groups: BTreeMap<&str, BTreeSet<&TupleValue>> = BTreeMap::new();
        for (k, v) in &tuples {
            groups.entry(k).or_default().insert(v);
        }
        let best = groups
            .values()
            .map(BTreeSet::len)
            .reduce(|a, b| if b.cmp(&a) == want { b } else { a })
            .expect("non-empty");
        return Ok(AnswerSet::new(
            groups
                .into_iter()
                .filter(|(_, vs)| vs.len() == best)
                .map(|(k, _)| k.to_string()),
        ));
    }
    if let Some((_, v)) = tuples.iter().find(|(_, v)| !v.is_numeric()) {
        return Err(AggregationError::TypeMismatch {
            function,
            found: format!("non-numeric value {v}"),
        });
    }
    let mut best = tuples[0].1;
    for (_, v) in &tuples[1..] {
        if v.numeric_cmp(best) == Some(want) {
            best = v;
        }
    }
    match function {
        AggregationFunction::Min | AggregationFunction::Max => {
            Ok(AnswerSet::single(best.to_string()))
        }
        _ => Ok(AnswerSet::new(
            tuples
                .iter()
                .filter(|(_, v)| v.numeric_cmp(best) == Some(Ordering::Equal))
                .map(|(k, _)| k.to_string()),
        )),
    }
}

pub fn render_bool(b: bool) -> &'static str {
    if b {
        TRUE
    } else {
        FALSE
    }
}
