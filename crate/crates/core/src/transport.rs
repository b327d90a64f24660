//! Line-delimited JSON request/response over a child process or HTTP.
//!
//! Endpoint descriptors are strings: `process:<program> [args...]` keeps one
//! child alive and exchanges one JSON object per line on stdin/stdout;
//! `http://...` / `https://...` POSTs the JSON body and reads a JSON reply.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT_SECS: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Process { program: String, args: Vec<String> },
    Http { url: String },
}

impl Endpoint {
    pub fn parse(descriptor: &str) -> Result<Self> {
        let d = descriptor.trim();
        if let Some(rest) = d.strip_prefix("process:") {
            let mut parts = rest.split_whitespace().map(str::to_owned);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config(format!("endpoint `{descriptor}` names no program")))?;
            Ok(Endpoint::Process { program, args: parts.collect() })
        } else if d.starts_with("http://") || d.starts_with("https://") {
            Ok(Endpoint::Http { url: d.to_owned() })
        } else {
            Err(Error::Config(format!("unrecognized endpoint `{descriptor}` (expected process:... or http(s)://...)")))
        }
    }
}

struct ChildIo {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for ChildIo {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A connection to an external model service.
pub struct Transport {
    endpoint: Endpoint,
    timeout: Duration,
    child: Mutex<Option<ChildIo>>,
}

impl std::fmt::Debug for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transport").field("endpoint", &self.endpoint).field("timeout", &self.timeout).finish()
    }
}

impl Transport {
    pub fn new(endpoint: Endpoint, timeout: Duration) -> Self {
        Self { endpoint, timeout, child: Mutex::new(None) }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Sends one request; a reply later than the timeout is a hard error.
    pub fn request(&self, body: &Value) -> Result<Value> {
        match &self.endpoint {
            Endpoint::Process { program, args } => self.request_process(program, args, body),
            Endpoint::Http { url } => self.request_http(url, body),
        }
    }

    fn request_process(&self, program: &str, args: &[String], body: &Value) -> Result<Value> {
        let mut guard = self.child.lock().expect("transport lock poisoned");
        if guard.is_none() {
            *guard = Some(spawn(program, args)?);
        }
        let io = guard.as_mut().expect("child present");
        let mut line = serde_json::to_string(body)?;
        line.push('\n');
        if let Err(e) = io.stdin.write_all(line.as_bytes()).and_then(|_| io.stdin.flush()) {
            *guard = None;
            return Err(Error::Transport(format!("writing to `{program}`: {e}")));
        }
        match io.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => serde_json::from_str(&reply)
                .map_err(|e| Error::Transport(format!("`{program}` replied with invalid JSON ({e}): {reply:?}"))),
            Ok(Err(e)) => {
                *guard = None;
                Err(Error::Transport(format!("reading from `{program}`: {e}")))
            }
            Err(RecvTimeoutError::Timeout) => {
                // the child may still answer later; start fresh next time
                *guard = None;
                Err(Error::Timeout(self.timeout.as_secs()))
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                Err(Error::Transport(format!("`{program}` closed its output")))
            }
        }
    }

    fn request_http(&self, url: &str, body: &Value) -> Result<Value> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        match agent.post(url).send_json(body.clone()) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| Error::Transport(format!("{url} replied with invalid JSON: {e}"))),
            Err(ureq::Error::Transport(t)) if t.kind() == ureq::ErrorKind::Io => {
                Err(Error::Transport(format!("{url}: {t}")))
            }
            Err(e) => Err(Error::Transport(format!("{url}: {e}"))),
        }
    }
}

fn spawn(program: &str, args: &[String]) -> Result<ChildIo> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Transport(format!("cannot start `{program}`: {e}")))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    Ok(ChildIo { child, stdin, lines: rx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_endpoint_descriptors() {
        assert_eq!(
            Endpoint::parse("process:python3 -u serve.py").unwrap(),
            Endpoint::Process { program: "python3".into(), args: vec!["-u".into(), "serve.py".into()] }
        );
        assert_eq!(Endpoint::parse("http://localhost:8080/v1").unwrap(), Endpoint::Http { url: "http://localhost:8080/v1".into() });
        assert!(matches!(Endpoint::parse("ftp://x"), Err(Error::Config(_))));
    }

    #[test]
    fn process_round_trip_reuses_the_child() {
        let t = Transport::new(Endpoint::parse("process:cat").unwrap(), Duration::from_secs(5));
        assert_eq!(t.request(&json!({"a": 1})).unwrap(), json!({"a": 1}));
        assert_eq!(t.request(&json!({"b": [1, 2]})).unwrap(), json!({"b": [1, 2]}));
    }

    #[test]
    fn silent_process_times_out() {
        let t = Transport::new(Endpoint::parse("process:sleep 5").unwrap(), Duration::from_millis(200));
        assert!(matches!(t.request(&json!({})), Err(Error::Timeout(_))));
    }

    #[test]
    fn missing_program_is_a_transport_error() {
        let t = Transport::new(Endpoint::parse("process:/nonexistent/binary").unwrap(), Duration::from_secs(1));
        assert!(matches!(t.request(&json!({})), Err(Error::Transport(_))));
    }

    #[test]
    fn unreachable_http_is_a_transport_error() {
        let t = Transport::new(Endpoint::parse("http://127.0.0.1:9/").unwrap(), Duration::from_secs(1));
        assert!(matches!(t.request(&json!({})), Err(Error::Transport(_))));
    }
}
