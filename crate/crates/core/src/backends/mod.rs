//! Model-service clients.
//!
//! Every model the pipeline talks to sits behind [`Backend`]. Two
//! implementations ship: [`HttpBackend`] speaks the JSON wire protocol and
//! [`MockWorld`] answers in-process from latent ground truth. [`Resilient`]
//! wraps either with the retry policy and the per-endpoint in-flight bound.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttributeId, ImageRef};

mod http;
mod mock;
pub mod protocol;
mod server;

pub use http::HttpBackend;
pub use mock::{Latent, MockConfig, MockWorld, MOCK_CONCEPTS};
pub use server::{serve, ServerHandle};

/// Environment variable naming the default backend endpoint.
pub const BACKEND_URL_ENV: &str = "CFORGE_BACKEND_URL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend error {status}: {message}")]
    Status { status: u16, message: String },
    #[error("unknown parent image `{0}`")]
    UnknownParent(ImageRef),
    #[error("unknown image `{0}`")]
    UnknownImage(ImageRef),
    #[error("unparseable attribute response: {0}")]
    UnparseableResponse(String),
    #[error("age estimator returned non-positive age {0}")]
    NonPositiveAge(i64),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("embedding has dimension {actual}, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
}

impl BackendError {
    /// Transport failures and server-side errors are retried; semantic
    /// (4xx-class) errors are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Unavailable(_) => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub parent_image_ref: ImageRef,
    pub attribute: AttributeId,
    /// Opaque editor parameters, forwarded verbatim.
    pub hyperparams: BTreeMap<String, f64>,
    pub seed: u64,
}

/// How the pair is shown to the attribute detector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLayout {
    /// `horizontal_concat`: source on the left, transformed on the right.
    pub arrangement: String,
    /// Few-shot example pairs shown before the query pair, in order.
    pub examples: Vec<ExamplePair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub source_ref: ImageRef,
    pub transformed_ref: ImageRef,
    /// Expected answer, rendered in the response format.
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeQuery {
    pub source_ref: ImageRef,
    pub transformed_ref: ImageRef,
    pub attributes: Vec<AttributeId>,
    pub instruction: String,
    pub layout: ImageLayout,
}

/// Raw model-service operations. Implementations answer one request at a
/// time per call and must be safe to call from many threads.
pub trait Backend: Send + Sync {
    fn txt2img(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError>;

    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError>;

    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError>;

    /// Raw detector text for a pair; parsing happens in `attrdetect`.
    fn query_attributes(&self, query: &AttributeQuery) -> Result<String, BackendError>;

    /// Raw age prediction; may be invalid, see [`estimate_age`].
    fn age(&self, image: &ImageRef) -> Result<i64, BackendError>;

    fn concept_scores(&self, image: &ImageRef, concepts: &[String]) -> Result<BTreeMap<String, f64>, BackendError>;

    fn fetch_image(&self, image: &ImageRef) -> Result<Vec<u8>, BackendError>;

    /// Short identifier recorded in detection reports.
    fn version(&self) -> String {
        "unknown".into()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn txt2img(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError> {
        (**self).txt2img(prompt, seed)
    }
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        (**self).edit(request)
    }
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        (**self).embed(image)
    }
    fn query_attributes(&self, query: &AttributeQuery) -> Result<String, BackendError> {
        (**self).query_attributes(query)
    }
    fn age(&self, image: &ImageRef) -> Result<i64, BackendError> {
        (**self).age(image)
    }
    fn concept_scores(&self, image: &ImageRef, concepts: &[String]) -> Result<BTreeMap<String, f64>, BackendError> {
        (**self).concept_scores(image, concepts)
    }
    fn fetch_image(&self, image: &ImageRef) -> Result<Vec<u8>, BackendError> {
        (**self).fetch_image(image)
    }
    fn version(&self) -> String {
        (**self).version()
    }
}

/// Age contract: non-negative integer years.
pub fn estimate_age(backend: &dyn Backend, image: &ImageRef) -> Result<u32, BackendError> {
    let age = backend.age(image)?;
    u32::try_from(age).map_err(|_| BackendError::NonPositiveAge(age))
}

/// Embedding with its dimension checked against the configured `dim`.
pub fn embed_checked(backend: &dyn Backend, image: &ImageRef, dim: usize) -> Result<Vec<f64>, BackendError> {
    let v = backend.embed(image)?;
    if v.len() != dim {
        return Err(BackendError::DimensionMismatch { expected: dim, actual: v.len() });
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before attempt `k + 1`; the last entry repeats.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_ms: vec![200, 1000, 5000] }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, backoff_ms: vec![0] }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.backoff_ms.get(attempt as usize).or(self.backoff_ms.last()).copied().unwrap_or(0);
        Duration::from_millis(ms)
    }

    /// Run `op` until it succeeds, fails non-retryably, or attempts run out.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    log::debug!("retrying after error: {e}");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Embedding dimension advertised by the encoder.
    pub embedding_dim: usize,
}

impl Default for BackendEndpoint {
    fn default() -> Self {
        BackendEndpoint {
            base_url: std::env::var(BACKEND_URL_ENV).unwrap_or_else(|_| "http://127.0.0.1:8700".into()),
            timeout_ms: 120_000,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            embedding_dim: 768,
        }
    }
}

/// Counting semaphore bounding outstanding requests.
#[derive(Debug)]
struct Gate {
    limit: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Gate { limit: limit.max(1), in_use: Mutex::new(0), freed: Condvar::new() }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut n = self.in_use.lock().expect("gate poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("gate poisoned");
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_use.lock().expect("gate poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Applies the retry policy and the `max_in_flight` bound around any backend.
pub struct Resilient<B> {
    inner: B,
    retry: RetryPolicy,
    gate: Gate,
}

impl<B: Backend> Resilient<B> {
    pub fn new(inner: B, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Resilient { inner, retry, gate: Gate::new(max_in_flight) }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn call<T>(&self, mut op: impl FnMut(&B) -> Result<T, BackendError>) -> Result<T, BackendError> {
        self.retry.run(|| {
            let _slot = self.gate.enter();
            op(&self.inner)
        })
    }
}

impl<B: Backend> Backend for Resilient<B> {
    fn txt2img(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError> {
        self.call(|b| b.txt2img(prompt, seed))
    }
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        self.call(|b| b.edit(request))
    }
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        self.call(|b| b.embed(image))
    }
    fn query_attributes(&self, query: &AttributeQuery) -> Result<String, BackendError> {
        self.call(|b| b.query_attributes(query))
    }
    fn age(&self, image: &ImageRef) -> Result<i64, BackendError> {
        self.call(|b| b.age(image))
    }
    fn concept_scores(&self, image: &ImageRef, concepts: &[String]) -> Result<BTreeMap<String, f64>, BackendError> {
        self.call(|b| b.concept_scores(image, concepts))
    }
    fn fetch_image(&self, image: &ImageRef) -> Result<Vec<u8>, BackendError> {
        self.call(|b| b.fetch_image(image))
    }
    fn version(&self) -> String {
        self.inner.version()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn retry_stops_on_semantic_errors() {
        let calls = AtomicU32::new(0);
        let policy = RetryPolicy::no_backoff(5);
        let r: Result<(), _> = policy.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Status { status: 400, message: "bad".into() })
        });
        assert!(r.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retry_exhausts_on_transport_errors() {
        let calls = AtomicU32::new(0);
        let policy = RetryPolicy::no_backoff(4);
        let r: Result<(), _> = policy.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Unavailable("refused".into()))
        });
        assert!(matches!(r, Err(BackendError::Unavailable(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn retry_recovers() {
        let calls = AtomicU32::new(0);
        let r = RetryPolicy::no_backoff(3).run(|| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(BackendError::Status { status: 503, message: "busy".into() })
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
    }

    #[test]
    fn gate_bounds_concurrency() {
        let mock = MockWorld::new(MockConfig { latency_ms: 5, ..MockConfig::default() });
        let client = Resilient::new(mock, RetryPolicy::no_backoff(1), 3);
        std::thread::scope(|s| {
            for i in 0..24 {
                let client = &client;
                s.spawn(move || client.txt2img("A photo of the face of Test Person", i).unwrap());
            }
        });
        let peak = client.inner().peak_in_flight();
        assert!(peak <= 3, "peak {peak}");
        assert!(peak >= 2, "probe never saw overlap");
    }
}
