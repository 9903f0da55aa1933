//! Client for an external reasoner reachable over HTTP.
//!
//! Each call POSTs the engine's request document to `{base}/decompose`,
//! `{base}/reflect` or `{base}/ask` and validates the reply against the
//! matching schema. The engine falls back to its rule-based path when a call
//! fails, so errors here are never fatal to a session.

use std::time::Duration;

use icr_core::reasoner::{IntentReply, QuestionReply, Reasoner, ReasonerRequest, ReflectionReply};
use icr_core::{Error, Result};
use serde::de::DeserializeOwned;
use tokio::runtime::Handle;

pub struct HttpReasoner {
    base: String,
    client: reqwest::Client,
    handle: Handle,
}

impl HttpReasoner {
    /// Must be called from inside a tokio runtime; calls are later driven on
    /// that runtime from blocking threads.
    pub fn new(base: impl Into<String>, timeout: Duration) -> Result<Self> {
        let handle = Handle::try_current()
            .map_err(|_| Error::Invalid("http reasoner needs a running tokio runtime".into()))?;
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Invalid(format!("http client: {e}")))?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            client,
            handle,
        })
    }

    fn call<T: DeserializeOwned>(&self, route: &str, request: &ReasonerRequest) -> Result<T> {
        let url = format!("{}/{route}", self.base);
        let fut = async {
            let resp = self.client.post(&url).json(request).send().await?.error_for_status()?;
            resp.bytes().await
        };
        let bytes = self
            .handle
            .block_on(fut)
            .map_err(|e| Error::Invalid(format!("reasoner {route}: {e}")))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Invalid(format!("reasoner {route} reply: {e}")))
    }
}

impl Reasoner for HttpReasoner {
    fn decompose(&self, request: &ReasonerRequest) -> Result<IntentReply> {
        self.call("decompose", request)
    }

    fn reflect(&self, request: &ReasonerRequest) -> Result<ReflectionReply> {
        self.call("reflect", request)
    }

    fn ask(&self, request: &ReasonerRequest) -> Result<QuestionReply> {
        self.call("ask", request)
    }
}
