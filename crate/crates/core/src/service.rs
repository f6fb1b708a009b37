//! Blocking JSON-over-HTTP calls with exponential backoff.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first one.
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds or the attempts are exhausted.
    pub fn run<T>(&self, what: &str, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.base_delay;
        let attempts = self.attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(err) => {
                    log::warn!("{what}: attempt {attempt}/{attempts} failed: {err}");
                    last = Some(err);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

pub(crate) fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    body: &Req,
) -> Result<Resp> {
    let mut resp = agent
        .post(url)
        .send_json(body)
        .map_err(|e| Error::Service(format!("POST {url}: {e}")))?;
    resp.body_mut()
        .read_json::<Resp>()
        .map_err(|e| Error::Service(format!("POST {url}: bad response body: {e}")))
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}
