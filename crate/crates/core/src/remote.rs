//! Shared blocking JSON-over-HTTP client for the remote backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct JsonClient {
    base: String,
    client: reqwest::blocking::Client,
    retries: usize,
}

impl JsonClient {
    pub(crate) fn new(base: &str, timeout: Duration, retries: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(format!("cannot build HTTP client: {e}")))?;
        Ok(JsonClient {
            base: base.trim_end_matches('/').to_owned(),
            client,
            retries,
        })
    }

    /// POSTs `body` to `route`, retrying transport failures and 5xx responses.
    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, route: &str, body: &B) -> Result<R> {
        let url = format!("{}{}", self.base, route);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            match self.client.post(&url).json(body).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<R>()
                        .map_err(|e| Error::Contract(format!("malformed response from {url}: {e}")));
                }
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("status {}", resp.status());
                }
                Ok(resp) => {
                    return Err(Error::Provider(format!("{url} returned status {}", resp.status())));
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("request to {url} failed (attempt {}): {last}", attempt + 1);
        }
        Err(Error::Provider(format!(
            "{url} failed after {} attempts: {last}",
            self.retries + 1
        )))
    }
}
