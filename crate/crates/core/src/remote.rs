//! HTTP scoring client and a local stub server speaking the same protocol.
//!
//! Wire format: `POST {endpoint}/score` with body
//! `{"attribute": str, "texts": [str]}`; a 200 response carries
//! `{"scores": [number]}` aligned with `texts`.

use std::net::SocketAddr;
use std::ops::Range;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores this far outside [0, 1] are clamped; anything further is a protocol error.
pub const SCORE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteScorerConfig {
    pub endpoint_url: String,
    pub attribute_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
}

fn default_timeout_ms() -> u64 {
    5_000
}

fn default_max_batch() -> usize {
    32
}

impl RemoteScorerConfig {
    pub fn new(endpoint_url: impl Into<String>, attribute_name: impl Into<String>) -> Self {
        RemoteScorerConfig {
            endpoint_url: endpoint_url.into(),
            attribute_name: attribute_name.into(),
            timeout_ms: default_timeout_ms(),
            max_batch: default_max_batch(),
        }
    }
}

impl RemoteScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::config("reward.timeout_ms", "must be > 0"));
        }
        if self.max_batch == 0 {
            return Err(Error::config("reward.max_batch", "must be at least 1"));
        }
        if !self.endpoint_url.starts_with("http://") {
            return Err(Error::config("reward.endpoint_url", "only plain http:// endpoints are supported"));
        }
        Ok(())
    }

    fn score_url(&self) -> String {
        format!("{}/score", self.endpoint_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub attribute: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
}

/// Scores `texts` in chunks of at most `max_batch`, preserving order.
pub fn remote_scores(cfg: &RemoteScorerConfig, texts: &[String]) -> Result<Vec<f64>> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::InvalidInput("nothing to score".into()));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .proxy(None)
        .build()
        .into();
    let url = cfg.score_url();

    let mut scores = Vec::with_capacity(texts.len());
    for (batch, chunk) in texts.chunks(cfg.max_batch).enumerate() {
        let items = scores.len()..scores.len() + chunk.len();
        let request = ScoreRequest {
            attribute: cfg.attribute_name.clone(),
            texts: chunk.to_vec(),
        };
        scores.extend(score_batch(&agent, &url, &request, batch, items)?);
    }
    Ok(scores)
}

fn score_batch(
    agent: &ureq::Agent,
    url: &str,
    request: &ScoreRequest,
    batch: usize,
    items: Range<usize>,
) -> Result<Vec<f64>> {
    let transport = |message: String| Error::Transport {
        batch,
        items: items.clone(),
        message,
    };
    let protocol = |message: String| Error::Protocol {
        batch,
        items: items.clone(),
        message,
    };

    let mut response = agent.post(url).send_json(request).map_err(|e| transport(e.to_string()))?;
    let status = response.status().as_u16();
    if status >= 500 {
        return Err(transport(format!("server returned status {status}")));
    }
    if status != 200 {
        return Err(protocol(format!("unexpected status {status}")));
    }
    let body: ScoreResponse = response
        .body_mut()
        .read_json()
        .map_err(|e| protocol(format!("malformed response: {e}")))?;
    if body.scores.len() != request.texts.len() {
        return Err(protocol(format!(
            "{} scores for {} texts",
            body.scores.len(),
            request.texts.len()
        )));
    }
    body.scores
        .into_iter()
        .map(|s| {
            if s.is_finite() && (-SCORE_SLACK..=1.0 + SCORE_SLACK).contains(&s) {
                Ok(s.clamp(0.0, 1.0))
            } else {
                Err(protocol(format!("score {s} outside [0, 1]")))
            }
        })
        .collect()
}

/// What the stub sends back for one request.
#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    Scores(Vec<f64>),
    Status(u16),
    Raw(String),
}

type Handler = dyn Fn(&ScoreRequest) -> StubReply + Send + Sync;

/// Single-threaded scoring server bound to an ephemeral localhost port.
/// Shuts down when dropped.
pub struct StubServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    log: Arc<Mutex<Vec<ScoreRequest>>>,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Result<Self>
    where
        F: Fn(&ScoreRequest) -> StubReply + Send + Sync + 'static,
    {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| Error::io("stub server", std::io::Error::other(e.to_string())))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::io("stub server", std::io::Error::other("not bound to an IP address")))?;
        let server = Arc::new(server);
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Box<Handler> = Box::new(handler);
        let worker = {
            let server = Arc::clone(&server);
            let log = Arc::clone(&log);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let mut body = String::new();
                    let parsed = req
                        .as_reader()
                        .read_to_string(&mut body)
                        .ok()
                        .and_then(|_| serde_json::from_str::<ScoreRequest>(&body).ok());
                    let reply = match parsed {
                        Some(parsed) if req.url() == "/score" => {
                            let reply = handler(&parsed);
                            log.lock().unwrap().push(parsed);
                            reply
                        }
                        Some(_) => StubReply::Status(404),
                        None => StubReply::Status(400),
                    };
                    let response = match reply {
                        StubReply::Scores(scores) => {
                            let text = serde_json::to_string(&ScoreResponse { scores }).unwrap();
                            tiny_http::Response::from_string(text)
                        }
                        StubReply::Status(code) => tiny_http::Response::from_string("").with_status_code(code),
                        StubReply::Raw(text) => tiny_http::Response::from_string(text),
                    };
                    let _ = req.respond(response);
                }
            })
        };
        Ok(StubServer {
            addr,
            server,
            log,
            worker: Some(worker),
        })
    }

    /// Stub answering every text with the same score.
    pub fn constant(score: f64) -> Result<Self> {
        Self::start(move |req| StubReply::Scores(vec![score; req.texts.len()]))
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Every well-formed request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ScoreRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(url: String, max_batch: usize) -> RemoteScorerConfig {
        RemoteScorerConfig {
            endpoint_url: url,
            attribute_name: "topic".into(),
            timeout_ms: 2_000,
            max_batch,
        }
    }

    fn texts(n: usize) -> Vec<String> {
        (0..n).map(|i| "x".repeat(i * 9)).collect()
    }

    #[test]
    fn constant_stub() {
        let stub = StubServer::constant(0.5).unwrap();
        let out = remote_scores(&cfg(stub.url(), 4), &texts(6)).unwrap();
        assert_eq!(out, vec![0.5; 6]);
        assert!(stub.requests().iter().all(|r| r.attribute == "topic"));
    }

    #[test]
    fn chunking_preserves_order() {
        let stub = StubServer::start(|r| {
            StubReply::Scores(r.texts.iter().map(|t| (t.len() as f64 / 100.0).min(1.0)).collect())
        })
        .unwrap();
        let input = texts(7);
        let out = remote_scores(&cfg(stub.url(), 3), &input).unwrap();
        let sizes: Vec<usize> = stub.requests().iter().map(|r| r.texts.len()).collect();
        assert_eq!(sizes, vec![3, 3, 1]);
        let expected: Vec<f64> = input.iter().map(|t| (t.len() as f64 / 100.0).min(1.0)).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn near_range_scores_clamped_far_ones_rejected() {
        let stub = StubServer::start(|r| StubReply::Scores(vec![1.0 + 1e-9; r.texts.len()])).unwrap();
        assert_eq!(remote_scores(&cfg(stub.url(), 8), &texts(2)).unwrap(), vec![1.0, 1.0]);

        let stub = StubServer::start(|r| StubReply::Scores(vec![1.5; r.texts.len()])).unwrap();
        let err = remote_scores(&cfg(stub.url(), 8), &texts(2)).unwrap_err();
        assert!(matches!(err, Error::Protocol { batch: 0, .. }));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn protocol_errors_name_the_batch() {
        let stub = StubServer::start(|r| {
            if r.texts.len() == 2 {
                StubReply::Scores(vec![0.1])
            } else {
                StubReply::Scores(vec![0.2; r.texts.len()])
            }
        })
        .unwrap();
        let err = remote_scores(&cfg(stub.url(), 3), &texts(5)).unwrap_err();
        match err {
            Error::Protocol { batch, items, .. } => {
                assert_eq!(batch, 1);
                assert_eq!(items, 3..5);
            }
            other => panic!("unexpected {other:?}"),
        }

        let stub = StubServer::start(|_| StubReply::Raw("not json".into())).unwrap();
        assert!(matches!(
            remote_scores(&cfg(stub.url(), 3), &texts(1)),
            Err(Error::Protocol { .. })
        ));
        let stub = StubServer::start(|_| StubReply::Status(404)).unwrap();
        assert!(matches!(
            remote_scores(&cfg(stub.url(), 3), &texts(1)),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn transport_failures_are_retriable() {
        let stub = StubServer::start(|_| StubReply::Status(503)).unwrap();
        let err = remote_scores(&cfg(stub.url(), 3), &texts(1)).unwrap_err();
        assert!(err.is_retriable());

        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = remote_scores(&cfg(format!("http://127.0.0.1:{port}"), 3), &texts(4)).unwrap_err();
        assert!(matches!(err, Error::Transport { batch: 0, .. }));
        assert!(err.is_retriable());
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn timeout_is_transport_error() {
        let stub = StubServer::start(|r| {
            std::thread::sleep(Duration::from_millis(400));
            StubReply::Scores(vec![0.5; r.texts.len()])
        })
        .unwrap();
        let mut c = cfg(stub.url(), 3);
        c.timeout_ms = 50;
        assert!(matches!(remote_scores(&c, &texts(1)), Err(Error::Transport { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(cfg("http://x".into(), 0).validate().is_err());
        let mut c = cfg("http://x".into(), 1);
        c.timeout_ms = 0;
        assert!(c.validate().is_err());
    }
}
