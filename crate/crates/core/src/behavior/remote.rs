use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};

use super::provider::{DecisionProvider, ProviderError, Query};

#[derive(Serialize)]
struct Request<'a> {
    system: &'a str,
    user: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

/// JSON-over-HTTP provider: POSTs `{"system", "user"}` and reads `{"text"}`.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    endpoint: String,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
    client: reqwest::blocking::Client,
}

impl RemoteProvider {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retries: u32,
        backoff: Duration,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            retries,
            backoff,
            client,
        })
    }

    /// Reads `DECISION_ENDPOINT` and the optional `DECISION_API_KEY`.
    pub fn from_env(timeout: Duration, retries: u32) -> Result<Self, ProviderError> {
        let endpoint = std::env::var("DECISION_ENDPOINT")
            .map_err(|_| ProviderError::Config("DECISION_ENDPOINT is not set".into()))?;
        let key = std::env::var("DECISION_API_KEY")
            .ok()
            .filter(|k| !k.is_empty());
        Self::new(endpoint, key, timeout, retries, Duration::from_millis(200))
    }

    fn attempt(&self, system: &str, user: &str) -> Result<String, (ProviderError, bool)> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&Request { system, user });
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req
            .send()
            .map_err(|e| (ProviderError::Transport(e.to_string()), true))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            let err = ProviderError::Protocol {
                status: status.as_u16(),
                body,
            };
            return Err((err, status.is_server_error()));
        }
        let reply: Reply = resp
            .json()
            .map_err(|e| (ProviderError::Transport(e.to_string()), false))?;
        Ok(reply.text)
    }

    /// Sends one prompt, retrying transport failures and 5xx replies with
    /// exponential backoff.
    pub fn query(&self, system: &str, user: &str) -> Result<String, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.attempt(system, user) {
                Ok(t) => return Ok(t),
                Err((e, retryable)) => {
                    if !retryable || attempt >= self.retries {
                        return Err(e);
                    }
                    let wait = self.backoff * 2u32.saturating_pow(attempt);
                    debug!(
                        "remote attempt {} failed ({e}); retrying in {wait:?}",
                        attempt + 1
                    );
                    std::thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }
}

impl DecisionProvider for RemoteProvider {
    fn complete(&self, q: &Query<'_>) -> Result<String, ProviderError> {
        self.query(q.system, q.user)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Instant;

    fn read_request(stream: &mut TcpStream) -> String {
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        String::from_utf8(body).unwrap()
    }

    /// Serves scripted `(status, body)` replies, one per connection.
    fn serve(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/decide", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let h = Arc::clone(&hits);
        std::thread::spawn(move || {
            for (status, body) in script {
                let (mut s, _) = listener.accept().unwrap();
                let req = read_request(&mut s);
                assert!(req.contains("\"system\"") && req.contains("\"user\""));
                h.fetch_add(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                s.write_all(resp.as_bytes()).unwrap();
            }
        });
        (url, hits)
    }

    fn provider(url: &str, retries: u32, timeout_ms: u64) -> RemoteProvider {
        RemoteProvider::new(
            url,
            None,
            Duration::from_millis(timeout_ms),
            retries,
            Duration::from_millis(10),
        )
        .unwrap()
    }

    #[test]
    fn echoes_reply_text() {
        let (url, _) = serve(vec![(200, r#"{"text":"Yes. ok."}"#.into())]);
        assert_eq!(provider(&url, 0, 2000).query("s", "u").unwrap(), "Yes. ok.");
    }

    #[test]
    fn retries_server_errors() {
        let ok = r#"{"text":"No. fine."}"#.to_string();
        let (url, hits) = serve(vec![(500, "{}".into()), (500, "{}".into()), (200, ok)]);
        assert_eq!(
            provider(&url, 3, 2000).query("s", "u").unwrap(),
            "No. fine."
        );
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_report_status() {
        let (url, _) = serve(vec![(503, "busy".into()), (503, "busy".into())]);
        match provider(&url, 1, 2000).query("s", "u") {
            Err(ProviderError::Protocol { status, .. }) => assert_eq!(status, 503),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, hits) = serve(vec![(400, "bad".into())]);
        assert!(matches!(
            provider(&url, 3, 2000).query("s", "u"),
            Err(ProviderError::Protocol { status: 400, .. })
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn timeout_is_honored() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/decide", listener.local_addr().unwrap());
        std::thread::spawn(move || {
            let (_s, _) = listener.accept().unwrap();
            std::thread::sleep(Duration::from_secs(5));
        });
        let p = provider(&url, 0, 300);
        let start = Instant::now();
        let r = p.query("s", "u");
        let elapsed = start.elapsed();
        assert!(matches!(r, Err(ProviderError::Transport(_))), "{r:?}");
        assert!(elapsed <= Duration::from_millis(330), "{elapsed:?}");
    }
}
