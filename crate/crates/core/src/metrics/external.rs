//! Client for out-of-process text scorers speaking newline-delimited JSON over TCP.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORER_ENDPOINT_ENV: &str = "PPST_SCORER_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerItem {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerRequest {
    pub metric: String,
    pub items: Vec<ScorerItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerResponse {
    pub metric: String,
    pub scores: Vec<ItemScore>,
}

#[derive(Debug, Clone)]
pub struct ScorerClient {
    pub endpoint: String,
    pub timeout: Duration,
    pub attempts: usize,
    pub backoff: Duration,
}

impl ScorerClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(60),
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(SCORER_ENDPOINT_ENV).ok().filter(|s| !s.is_empty()).map(Self::new)
    }

    fn exchange(&self, line: &str) -> std::io::Result<String> {
        let addr = self
            .endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "endpoint resolved to nothing"))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.write_all(line.as_bytes())?;
        stream.write_all(b"\n")?;
        stream.flush()?;
        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply)?;
        if reply.is_empty() {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "scorer closed the connection"));
        }
        Ok(reply)
    }

    /// Sends one request. Transport failures are retried with doubling delays; after the
    /// last attempt the metric is reported as unavailable. Malformed replies are protocol
    /// errors and are not retried.
    pub fn score(&self, request: &ScorerRequest) -> Result<ScorerResponse> {
        if request.items.is_empty() {
            return Ok(ScorerResponse {
                metric: request.metric.clone(),
                scores: Vec::new(),
            });
        }
        let line = serde_json::to_string(request)?;
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts.max(1) {
            match self.exchange(&line) {
                Ok(reply) => return parse_response(request, &reply),
                Err(e) => {
                    tracing::warn!(attempt, metric = %request.metric, endpoint = %self.endpoint, "scorer call failed: {e}");
                    last = e.to_string();
                    if attempt < self.attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(Error::Unavailable(format!(
            "{} scorer at {} failed after {} attempts: {last}",
            request.metric, self.endpoint, self.attempts
        )))
    }
}

/// Parses and checks a reply: same metric, and item ids a permutation of the request's.
pub fn parse_response(request: &ScorerRequest, reply: &str) -> Result<ScorerResponse> {
    let resp: ScorerResponse =
        serde_json::from_str(reply.trim()).map_err(|e| Error::protocol(format!("unparseable scorer reply: {e}"), reply))?;
    if resp.metric != request.metric {
        return Err(Error::protocol(
            format!("reply is for metric `{}`, expected `{}`", resp.metric, request.metric),
            reply,
        ));
    }
    let want: BTreeSet<&str> = request.items.iter().map(|i| i.id.as_str()).collect();
    let mut got = BTreeSet::new();
    for s in &resp.scores {
        if !want.contains(s.id.as_str()) {
            return Err(Error::protocol(format!("reply has unknown item `{}`", s.id), reply));
        }
        if !got.insert(s.id.as_str()) {
            return Err(Error::protocol(format!("reply repeats item `{}`", s.id), reply));
        }
        if !s.score.is_finite() {
            return Err(Error::protocol(format!("non-finite score for item `{}`", s.id), reply));
        }
    }
    if let Some(missing) = want.difference(&got).next() {
        return Err(Error::protocol(format!("reply is missing item `{missing}`"), reply));
    }
    Ok(resp)
}
