//! Newline-delimited request/response protocol for external policies and
//! retrievers, over a local TCP socket or a subprocess's standard streams.
//!
//! Requests: `{"kind":"generate"|"retrieve", stage?, context?, query?, k?,
//! attempt, episode_nonce}`. Responses: `{"text"?}` or `{"documents"?}`.
//! One JSON object per line in each direction. Timeouts retry the request
//! as a fresh sample up to the configured limit.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::Document;
use crate::rollout::policy::{GenerateRequest, Policy, PolicyError, Stage};
use crate::rollout::{DocRetriever, RetrieveError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad endpoint {0:?}: expected tcp:<addr> or cmd:<command>")]
    BadEndpoint(String),
}

#[derive(Serialize)]
struct WireRequest<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    context: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    attempt: u32,
    episode_nonce: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    documents: Option<Vec<Document>>,
}

trait Transport: Send {
    fn round_trip(&mut self, line: &str, timeout: Duration) -> Result<String, TransportError>;
}

struct TcpTransport {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl TcpTransport {
    fn connect(addr: &str) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            writer: stream,
            reader,
        })
    }
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, line: &str, timeout: Duration) -> Result<String, TransportError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.reader.get_ref().set_read_timeout(Some(timeout))?;
        let mut response = String::new();
        match self.reader.read_line(&mut response) {
            Ok(0) => Err(TransportError::Closed),
            Ok(_) => Ok(response),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                Err(TransportError::Timeout(timeout))
            }
            Err(e) => Err(e.into()),
        }
    }
}

struct CmdTransport {
    child: Child,
    stdin: std::process::ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl CmdTransport {
    fn spawn(command: &str) -> Result<Self, TransportError> {
        let parts: Vec<&str> = command.split_whitespace().collect();
        if parts.is_empty() {
            return Err(TransportError::BadEndpoint(command.to_string()));
        }
        let mut child = Command::new(parts[0])
            .args(&parts[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        // bounded so a chatty child blocks instead of filling memory
        let (tx, rx) = std::sync::mpsc::sync_channel(4);
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Transport for CmdTransport {
    fn round_trip(&mut self, line: &str, timeout: Duration) -> Result<String, TransportError> {
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

impl Drop for CmdTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Shared client for one endpoint. Request/response pairs are serialized
/// under a mutex, so concurrent episodes may share a client.
pub struct ExternalClient {
    transport: Mutex<Box<dyn Transport>>,
    timeout: Duration,
    max_transport_retries: u32,
    retries_observed: AtomicU32,
}

impl ExternalClient {
    /// Connect an endpoint descriptor: `tcp:<host:port>` or `cmd:<command>`.
    pub fn connect(
        endpoint: &str,
        timeout: Duration,
        max_transport_retries: u32,
    ) -> Result<Self, TransportError> {
        let transport: Box<dyn Transport> = if let Some(addr) = endpoint.strip_prefix("tcp:") {
            Box::new(TcpTransport::connect(addr)?)
        } else if let Some(cmd) = endpoint.strip_prefix("cmd:") {
            Box::new(CmdTransport::spawn(cmd)?)
        } else {
            return Err(TransportError::BadEndpoint(endpoint.to_string()));
        };
        Ok(Self {
            transport: Mutex::new(transport),
            timeout,
            max_transport_retries,
            retries_observed: AtomicU32::new(0),
        })
    }

    /// Total timeout retries taken over the client's lifetime.
    pub fn transport_retries(&self) -> u32 {
        self.retries_observed.load(Ordering::Relaxed)
    }

    fn round_trip(&self, request: &WireRequest<'_>) -> Result<WireResponse, TransportError> {
        let line = serde_json::to_string(request).expect("request serializes");
        let mut transport = self.transport.lock().expect("transport lock");
        let mut tries = 0;
        loop {
            match transport.round_trip(&line, self.timeout) {
                Ok(response) => {
                    return serde_json::from_str(response.trim())
                        .map_err(|e| TransportError::Io(std::io::Error::other(e)))
                }
                Err(TransportError::Timeout(t)) if tries < self.max_transport_retries => {
                    tries += 1;
                    self.retries_observed.fetch_add(1, Ordering::Relaxed);
                    let _ = t;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Policy backed by an external endpoint.
pub struct ExternalPolicy {
    client: std::sync::Arc<ExternalClient>,
}

impl ExternalPolicy {
    pub fn new(client: std::sync::Arc<ExternalClient>) -> Self {
        Self { client }
    }
}

impl Policy for ExternalPolicy {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, PolicyError> {
        let wire = WireRequest {
            kind: "generate",
            stage: Some(request.stage),
            context: Some(request.context),
            query: None,
            k: None,
            attempt: request.attempt,
            episode_nonce: request.episode_nonce,
        };
        let response = self
            .client
            .round_trip(&wire)
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        response
            .text
            .ok_or_else(|| PolicyError::Malformed("response has no text field".to_string()))
    }
}

/// Retriever backed by an external endpoint.
pub struct ExternalRetriever {
    client: std::sync::Arc<ExternalClient>,
}

impl ExternalRetriever {
    pub fn new(client: std::sync::Arc<ExternalClient>) -> Self {
        Self { client }
    }
}

impl DocRetriever for ExternalRetriever {
    fn retrieve(
        &self,
        query: &str,
        k: usize,
        attempt: u32,
        nonce: &str,
    ) -> Result<Vec<Document>, RetrieveError> {
        let wire = WireRequest {
            kind: "retrieve",
            stage: None,
            context: None,
            query: Some(query),
            k: Some(k),
            attempt,
            episode_nonce: nonce,
        };
        let response = self
            .client
            .round_trip(&wire)
            .map_err(|e| RetrieveError(e.to_string()))?;
        response
            .documents
            .ok_or_else(|| RetrieveError("response has no documents field".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    /// Minimal protocol stub: answers every request from a closure.
    fn spawn_stub(
        respond: impl Fn(&serde_json::Value, usize) -> Option<String> + Send + 'static,
    ) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut writer = stream;
            let mut n = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let value: serde_json::Value = serde_json::from_str(&line).unwrap();
                if let Some(reply) = respond(&value, n) {
                    writer.write_all(reply.as_bytes()).unwrap();
                    writer.write_all(b"\n").unwrap();
                }
                n += 1;
            }
        });
        format!("tcp:{addr}")
    }

    #[test]
    fn canned_text_round_trip() {
        let endpoint = spawn_stub(|req, _| {
            assert_eq!(req["kind"], "generate");
            assert_eq!(req["stage"], "search");
            Some(r#"{"text":"<search>echo</search>"}"#.to_string())
        });
        let client = std::sync::Arc::new(
            ExternalClient::connect(&endpoint, Duration::from_secs(2), 0).unwrap(),
        );
        let policy = ExternalPolicy::new(client);
        let text = policy
            .generate(&GenerateRequest {
                stage: Stage::Search,
                round: 1,
                context: "ctx",
                attempt: 0,
                episode_nonce: "n1",
            })
            .unwrap();
        assert_eq!(text, "<search>echo</search>");
    }

    #[test]
    fn timeout_once_then_answer_records_one_retry() {
        // the stub swallows the first request entirely
        let endpoint = spawn_stub(|_, n| {
            if n == 0 {
                None
            } else {
                Some(r#"{"text":"ok"}"#.to_string())
            }
        });
        let client = std::sync::Arc::new(
            ExternalClient::connect(&endpoint, Duration::from_millis(150), 2).unwrap(),
        );
        let policy = ExternalPolicy::new(std::sync::Arc::clone(&client));
        let text = policy
            .generate(&GenerateRequest {
                stage: Stage::Search,
                round: 1,
                context: "",
                attempt: 0,
                episode_nonce: "n",
            })
            .unwrap();
        assert_eq!(text, "ok");
        assert_eq!(client.transport_retries(), 1);
    }

    #[test]
    fn exhausted_timeouts_become_transport_failures() {
        let endpoint = spawn_stub(|_, _| None);
        let client = std::sync::Arc::new(
            ExternalClient::connect(&endpoint, Duration::from_millis(50), 1).unwrap(),
        );
        let policy = ExternalPolicy::new(client);
        let err = policy
            .generate(&GenerateRequest {
                stage: Stage::Search,
                round: 1,
                context: "",
                attempt: 0,
                episode_nonce: "n",
            })
            .unwrap_err();
        assert!(matches!(err, PolicyError::Transport(_)));
    }

    #[test]
    fn missing_text_field_is_malformed_not_fatal() {
        let endpoint = spawn_stub(|_, _| Some(r#"{"documents":[]}"#.to_string()));
        let client = std::sync::Arc::new(
            ExternalClient::connect(&endpoint, Duration::from_secs(1), 0).unwrap(),
        );
        let policy = ExternalPolicy::new(client);
        let err = policy
            .generate(&GenerateRequest {
                stage: Stage::Search,
                round: 1,
                context: "",
                attempt: 0,
                episode_nonce: "n",
            })
            .unwrap_err();
        assert!(matches!(err, PolicyError::Malformed(_)));
    }

    #[test]
    fn external_retriever_parses_documents() {
        let endpoint = spawn_stub(|req, _| {
            assert_eq!(req["kind"], "retrieve");
            assert_eq!(req["k"], 2);
            Some(r#"{"documents":[{"id":"a","title":"T","text":"body"}]}"#.to_string())
        });
        let client = std::sync::Arc::new(
            ExternalClient::connect(&endpoint, Duration::from_secs(1), 0).unwrap(),
        );
        let retriever = ExternalRetriever::new(client);
        let docs = retriever.retrieve("q", 2, 0, "n").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].doc_id, "a");
    }

    #[test]
    fn subprocess_transport_round_trips() {
        // yes(1) answers every request with the same canned response line
        let client = std::sync::Arc::new(
            ExternalClient::connect("cmd:yes {\"text\":\"hi\"}", Duration::from_secs(2), 0)
                .unwrap(),
        );
        let policy = ExternalPolicy::new(client);
        let text = policy
            .generate(&GenerateRequest {
                stage: Stage::Observation,
                round: 2,
                context: "",
                attempt: 0,
                episode_nonce: "n",
            })
            .unwrap();
        assert_eq!(text, "hi");
    }

    #[test]
    fn bad_endpoint_is_rejected() {
        match ExternalClient::connect("smoke:signals", Duration::from_secs(1), 0) {
            Err(TransportError::BadEndpoint(_)) => {}
            other => panic!("expected BadEndpoint, got {:?}", other.err()),
        }
    }
}
