//! Loopback server speaking the SPJ wire protocol, backed by any operator.

use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Response, Server};

use crate::fact_store::{Fact, FactId};

use super::{SpjError, SpjOperator, WireRequest};

/// Error code the server attaches to a 422 for an unparseable query.
pub const UNPARSED_CODE: &str = "unparsed_query";

pub struct SpjServer {
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    port: u16,
}

fn respond(req: tiny_http::Request, status: u16, body: String) {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(Response::from_string(body).with_status_code(status).with_header(header));
}

fn handle(op: &dyn SpjOperator, mut req: tiny_http::Request) {
    if req.method() != &Method::Post || req.url() != "/spj" {
        respond(req, 404, r#"{"error":"not found"}"#.into());
        return;
    }
    let mut body = String::new();
    if let Err(e) = req.as_reader().read_to_string(&mut body) {
        respond(req, 400, serde_json::json!({ "error": e.to_string() }).to_string());
        return;
    }
    let wire: WireRequest = match serde_json::from_str(&body) {
        Ok(w) => w,
        Err(e) => {
            respond(req, 400, serde_json::json!({ "error": e.to_string() }).to_string());
            return;
        }
    };
    let facts: Vec<Fact> = wire
        .facts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Fact {
            id: FactId(i as u64),
            text,
            timestamp: i as u64,
            invalidated: false,
        })
        .collect();
    match op.apply(&wire.query, &facts) {
        Ok(out) => respond(req, 200, serde_json::to_string(&out).expect("serializable")),
        Err(e) => {
            let status = match e {
                SpjError::UnparsedQuery(_) | SpjError::MissingProvenance(_) => 422,
                _ => 500,
            };
            let mut body = serde_json::json!({ "error": e.to_string() });
            if matches!(e, SpjError::UnparsedQuery(_)) {
                body["code"] = UNPARSED_CODE.into();
            }
            respond(req, status, body.to_string());
        }
    }
}

impl SpjServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on
    /// `threads` worker threads until [`SpjServer::shutdown`].
    pub fn start(addr: &str, op: Arc<dyn SpjOperator>, threads: usize) -> io::Result<Self> {
        let server = Server::http(addr).map_err(|e| io::Error::other(e.to_string()))?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let stop = Arc::clone(&stop);
                let op = Arc::clone(&op);
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv() {
                            Ok(req) => handle(op.as_ref(), req),
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            stop,
            workers,
            port,
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}/spj", self.port)
    }

    /// Blocks until every worker exits (never, unless shut down elsewhere).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for SpjServer {
    fn drop(&mut self) {
        if !self.workers.is_empty() {
            self.stop_workers();
        }
    }
}
