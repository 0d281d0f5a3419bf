//! Select-project-join operators: (query, support set) → intermediate result.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationFunction;
use crate::fact_store::{Fact, FactId};

pub mod oracle;
pub mod remote;
pub mod server;

pub use oracle::{derivations, Derivation, OracleSpj, ProvenanceMap};
pub use remote::RemoteSpj;

/// Value slot of a `(key, value)` tuple.
#[derive(Debug, Clone)]
pub enum TupleValue {
    Int(BigInt),
    Float(f64),
    Text(String),
}

impl TupleValue {
    /// Parses a decimal string: integer if possible, else float, else text.
    pub fn parse(s: &str) -> Self {
        if let Ok(i) = s.parse::<BigInt>() {
            return TupleValue::Int(i);
        }
        match s.parse::<f64>() {
            Ok(f) if f.is_finite() => TupleValue::Float(f),
            _ => TupleValue::Text(s.to_string()),
        }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self, TupleValue::Text(_))
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            TupleValue::Int(i) => i.to_f64(),
            TupleValue::Float(f) => Some(*f),
            TupleValue::Text(_) => None,
        }
    }

    /// Numeric comparison across Int and Float; `None` for text.
    pub fn numeric_cmp(&self, other: &TupleValue) -> Option<Ordering> {
        match (self, other) {
            (TupleValue::Int(a), TupleValue::Int(b)) => Some(a.cmp(b)),
            _ => self.as_f64()?.partial_cmp(&other.as_f64()?),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            TupleValue::Int(_) => 0,
            TupleValue::Float(_) => 1,
            TupleValue::Text(_) => 2,
        }
    }

    fn type_tag(&self) -> &'static str {
        match self {
            TupleValue::Int(_) => "int",
            TupleValue::Float(_) => "float",
            TupleValue::Text(_) => "text",
        }
    }
}

impl From<i64> for TupleValue {
    fn from(v: i64) -> Self {
        TupleValue::Int(v.into())
    }
}

impl fmt::Display for TupleValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TupleValue::Int(i) => write!(f, "{i}"),
            TupleValue::Float(x) => write!(f, "{x}"),
            TupleValue::Text(s) => f.write_str(s),
        }
    }
}

impl Ord for TupleValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (TupleValue::Int(a), TupleValue::Int(b)) => a.cmp(b),
            (TupleValue::Float(a), TupleValue::Float(b)) => a.total_cmp(b),
            (TupleValue::Text(a), TupleValue::Text(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl PartialOrd for TupleValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for TupleValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for TupleValue {}

impl std::hash::Hash for TupleValue {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            TupleValue::Int(i) => i.hash(state),
            TupleValue::Float(x) => x.to_bits().hash(state),
            TupleValue::Text(s) => s.hash(state),
        }
    }
}

/// Output of one SPJ call before aggregation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IntermediateResult {
    Null,
    Bool(bool),
    Answer(String),
    Tuple { key: String, value: TupleValue },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum WireResult {
    Null,
    Bool {
        value: bool,
    },
    Answer {
        value: String,
    },
    Tuple {
        key: String,
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value_type: Option<String>,
    },
}

impl Serialize for IntermediateResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let w = match self {
            IntermediateResult::Null => WireResult::Null,
            IntermediateResult::Bool(b) => WireResult::Bool { value: *b },
            IntermediateResult::Answer(a) => WireResult::Answer { value: a.clone() },
            IntermediateResult::Tuple { key, value } => WireResult::Tuple {
                key: key.clone(),
                value: value.to_string(),
                value_type: Some(value.type_tag().to_string()),
            },
        };
        w.serialize(s)
    }
}

impl<'de> Deserialize<'de> for IntermediateResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        Ok(match WireResult::deserialize(d)? {
            WireResult::Null => IntermediateResult::Null,
            WireResult::Bool { value } => IntermediateResult::Bool(value),
            WireResult::Answer { value } => IntermediateResult::Answer(value),
            WireResult::Tuple {
                key,
                value,
                value_type,
            } => {
                let value = match value_type.as_deref() {
                    None => TupleValue::parse(&value),
                    Some("int") => TupleValue::Int(
                        value
                            .parse()
                            .map_err(|_| D::Error::custom(format!("bad int {value:?}")))?,
                    ),
                    Some("float") => TupleValue::Float(
                        value
                            .parse()
                            .map_err(|_| D::Error::custom(format!("bad float {value:?}")))?,
                    ),
                    Some("text") => TupleValue::Text(value),
                    Some(other) => {
                        return Err(D::Error::custom(format!("unknown value_type {other:?}")))
                    }
                };
                IntermediateResult::Tuple { key, value }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpjOutput {
    pub result: IntermediateResult,
    #[serde(rename = "agg")]
    pub predicted_agg: AggregationFunction,
}

#[derive(Debug, thiserror::Error)]
pub enum SpjError {
    #[error("query matches no registered template: {0:?}")]
    UnparsedQuery(String),
    #[error("no provenance for fact {0:?}")]
    MissingProvenance(FactId),
    #[error("support set has {got} facts, limit is {limit}")]
    SupportTooLarge { got: usize, limit: usize },
    #[error("SPJ operator unavailable: {0}")]
    OperatorUnavailable(String),
    #[error("SPJ protocol error: {0}")]
    ProtocolError(String),
}

/// A select-project-join operator.
pub trait SpjOperator: Send + Sync {
    fn apply(&self, query: &str, support: &[Fact]) -> Result<SpjOutput, SpjError>;
}

impl<T: SpjOperator + ?Sized> SpjOperator for std::sync::Arc<T> {
    fn apply(&self, query: &str, support: &[Fact]) -> Result<SpjOutput, SpjError> {
        (**self).apply(query, support)
    }
}

impl<T: SpjOperator + ?Sized> SpjOperator for &T {
    fn apply(&self, query: &str, support: &[Fact]) -> Result<SpjOutput, SpjError> {
        (**self).apply(query, support)
    }
}

/// Request body of the wire protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub query: String,
    pub facts: Vec<String>,
}
