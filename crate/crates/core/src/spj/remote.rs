//! HTTP client for an external SPJ model.
//!
//! `POST {endpoint}` with `{"query": .., "facts": [..]}`; the response is
//! `{"result": {"kind": ..}, "agg": ..}` with status 200. A 422 tagged
//! `"code": "unparsed_query"` maps back to [`SpjError::UnparsedQuery`].

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::fact_store::Fact;

use super::server::UNPARSED_CODE;
use super::{SpjError, SpjOperator, SpjOutput, WireRequest};

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.free.lock().expect("lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("lock");
        }
        *n -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteSpj {
    endpoint: String,
    agent: ureq::Agent,
    gate: Gate,
}

impl RemoteSpj {
    /// `endpoint` is the full URL, e.g. `http://127.0.0.1:8080/spj`.
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            gate: Gate {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl SpjOperator for RemoteSpj {
    fn apply(&self, query: &str, support: &[Fact]) -> Result<SpjOutput, SpjError> {
        let body = WireRequest {
            query: query.to_string(),
            facts: support.iter().map(|f| f.text.clone()).collect(),
        };
        let _permit = self.gate.acquire();
        let resp = match self.agent.post(&self.endpoint).send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let msg = r.into_string().unwrap_or_default();
                let tagged = serde_json::from_str::<serde_json::Value>(&msg)
                    .is_ok_and(|v| v["code"] == UNPARSED_CODE);
                if code == 422 && tagged {
                    return Err(SpjError::UnparsedQuery(query.to_string()));
                }
                return Err(SpjError::ProtocolError(format!("status {code}: {msg}")));
            }
            Err(e) => return Err(SpjError::OperatorUnavailable(e.to_string())),
        };
        if resp.status() != 200 {
            return Err(SpjError::ProtocolError(format!("status {}", resp.status())));
        }
        let text = resp
            .into_string()
            .map_err(|e| SpjError::OperatorUnavailable(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| SpjError::ProtocolError(format!("{e}: {text}")))
    }
}
