//! JSON-over-HTTP client shared by the translator and transcription adapters.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

/// Endpoint URL plus optional bearer token, usually read from the environment.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Endpoint {
            url: url.into(),
            token: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `<url_var>` (required) and `<token_var>` (optional).
    pub fn from_env(url_var: &str, token_var: &str) -> Option<Self> {
        let url = std::env::var(url_var).ok().filter(|u| !u.is_empty())?;
        let mut ep = Endpoint::new(url);
        ep.token = std::env::var(token_var).ok().filter(|t| !t.is_empty());
        Some(ep)
    }

    /// POSTs `body` and decodes the JSON reply, retrying transport failures
    /// and 5xx/429 responses with exponential backoff.
    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut backoff = self.retry.initial_backoff;
        let mut last_err = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            let mut req = agent.post(&self.url);
            if let Some(tok) = &self.token {
                req = req.header("Authorization", &format!("Bearer {tok}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<Resp>()
                        .map_err(|e| format!("malformed response from {}: {e}", self.url));
                }
                Err(ureq::Error::StatusCode(code)) if code < 500 && code != 429 => {
                    return Err(format!("{} returned HTTP {code}", self.url));
                }
                Err(e) => {
                    last_err = format!("{}: {e}", self.url);
                    log::debug!("attempt {attempt} failed: {last_err}");
                }
            }
            if attempt < self.retry.max_attempts {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(last_err)
    }
}
