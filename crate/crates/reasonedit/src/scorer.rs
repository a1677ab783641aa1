//! Client for an optional external quality scorer.
//!
//! A request is one dataset record (JSON) describing the edited grid; the
//! response is a single real number. Any failure leaves the score absent.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use crate::config::ScorerConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("scorer timed out")]
    Timeout,
    #[error("scorer failed: {0}")]
    Failed(String),
}

pub trait Transport: Send + Sync {
    fn request(&self, body: &str, timeout: Duration) -> Result<String, TransportError>;
}

/// Runs a program per request, writing the body to its stdin and reading
/// the score from its stdout.
#[derive(Debug, Clone)]
pub struct SubprocessTransport {
    pub program: String,
    pub args: Vec<String>,
}

impl Transport for SubprocessTransport {
    fn request(&self, body: &str, timeout: Duration) -> Result<String, TransportError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| TransportError::Failed(e.to_string()))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let body = body.to_string();
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(body.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut s = String::new();
            let r = stdout.read_to_string(&mut s).map(|_| s);
            let _ = tx.send(r);
        });
        let out = match rx.recv_timeout(timeout) {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(TransportError::Failed(e.to_string()));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(TransportError::Timeout);
            }
        };
        let _ = writer.join();
        let status = child.wait().map_err(|e| TransportError::Failed(e.to_string()))?;
        if !status.success() {
            return Err(TransportError::Failed(format!("exit status {status}")));
        }
        Ok(out)
    }
}

/// Answers from a closure; used for tests and embedding.
pub struct InMemoryTransport<F>(pub F);

impl<F> Transport for InMemoryTransport<F>
where
    F: Fn(&str) -> Result<String, TransportError> + Send + Sync,
{
    fn request(&self, body: &str, _timeout: Duration) -> Result<String, TransportError> {
        (self.0)(body)
    }
}

pub struct ScorerClient {
    transport: Option<Box<dyn Transport>>,
    pub timeout: Duration,
    pub retries: u32,
}

impl ScorerClient {
    /// A client with no scorer; every score is absent.
    pub fn absent() -> Self {
        Self {
            transport: None,
            timeout: Duration::from_secs(1),
            retries: 0,
        }
    }

    pub fn new(transport: Box<dyn Transport>, timeout: Duration, retries: u32) -> Self {
        Self {
            transport: Some(transport),
            timeout,
            retries,
        }
    }

    pub fn from_config(cfg: Option<&ScorerConfig>) -> Self {
        match cfg {
            Some(c) => Self::new(
                Box::new(SubprocessTransport {
                    program: c.command[0].clone(),
                    args: c.command[1..].to_vec(),
                }),
                Duration::from_millis(c.timeout_ms),
                c.retries,
            ),
            None => Self::absent(),
        }
    }

    pub fn is_configured(&self) -> bool {
        self.transport.is_some()
    }

    /// Tries once plus `retries` times; `None` if every attempt fails or
    /// the answer is not a finite number.
    pub fn score(&self, record_json: &str) -> Option<f64> {
        let t = self.transport.as_ref()?;
        for _ in 0..=self.retries {
            if let Ok(resp) = t.request(record_json, self.timeout) {
                if let Ok(v) = resp.trim().parse::<f64>() {
                    if v.is_finite() {
                        return Some(v);
                    }
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn absent_scorer_yields_none() {
        assert_eq!(ScorerClient::absent().score("{}"), None);
    }

    #[test]
    fn retries_until_success() {
        let calls = std::sync::Arc::new(AtomicU32::new(0));
        let c2 = calls.clone();
        let t = InMemoryTransport(move |_: &str| {
            if c2.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(TransportError::Timeout)
            } else {
                Ok(" 4.5\n".to_string())
            }
        });
        let client = ScorerClient::new(Box::new(t), Duration::from_millis(10), 2);
        assert_eq!(client.score("{}"), Some(4.5));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn garbage_answer_is_absent() {
        let t = InMemoryTransport(|_: &str| Ok("not a number".to_string()));
        assert_eq!(ScorerClient::new(Box::new(t), Duration::from_millis(10), 1).score("{}"), None);
    }

    #[cfg(unix)]
    #[test]
    fn subprocess_transport_reads_stdout_and_times_out() {
        let ok = SubprocessTransport {
            program: "sh".into(),
            args: vec!["-c".into(), "cat >/dev/null; echo 7.25".into()],
        };
        assert_eq!(ok.request("{\"x\":1}", Duration::from_secs(5)).unwrap().trim(), "7.25");
        let slow = SubprocessTransport {
            program: "sh".into(),
            args: vec!["-c".into(), "sleep 5; echo 1".into()],
        };
        assert_eq!(slow.request("{}", Duration::from_millis(100)), Err(TransportError::Timeout));
        let missing = ScorerClient::new(
            Box::new(SubprocessTransport {
                program: "/nonexistent/scorer".into(),
                args: vec![],
            }),
            Duration::from_millis(100),
            1,
        );
        assert_eq!(missing.score("{}"), None);
    }
}
