//! Completion backends: a uniform interface over model services, with a
//! scripted replay implementation for deterministic runs, an HTTP client,
//! a filesystem response cache, and a bounded-parallel bulk executor.
//!
//! The wire protocol is deliberately minimal: POST
//! `{prompt, max_tokens, stop[]}`, receive `{completion}`. Scripted
//! fixtures are keyed by a stable content hash of the prompt, so they
//! survive cosmetic code changes but break loudly when prompt text
//! changes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::sha256_hex;

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("[{tag}] no fixture for prompt hash {hash}: unscripted prompt")]
    UnscriptedPrompt { tag: String, hash: String },
    #[error("[{tag}] transport failure after {attempts} attempts: {message}")]
    Transport {
        tag: String,
        attempts: usize,
        message: String,
    },
    #[error("cache error at {path}: {message}")]
    Cache { path: String, message: String },
    #[error("bad backend spec {spec:?}: {message}")]
    BadSpec { spec: String, message: String },
}

/// One completion call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub stop: Vec<String>,
    /// Pipeline stage label, carried into errors. Not part of cache keys.
    #[serde(default)]
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize, stop: Vec<String>, tag: &str) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            stop,
            tag: tag.to_string(),
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be > 0".into()));
        }
        Ok(())
    }

    /// Cache key over the semantic request fields (prompt and parameters,
    /// not the stage tag).
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            prompt: &'a str,
            max_tokens: usize,
            stop: &'a [String],
        }
        let canonical = serde_json::to_string(&Key {
            prompt: &self.prompt,
            max_tokens: self.max_tokens,
            stop: &self.stop,
        })
        .expect("request serializes");
        sha256_hex(canonical.as_bytes())
    }
}

/// Truncate a completion at the earliest occurrence of any stop string.
pub fn truncate_at_stop(completion: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| completion.find(s.as_str()))
        .min()
        .unwrap_or(completion.len());
    completion[..cut].to_string()
}

/// A completion service. Implementations are shareable across threads.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;
    /// Identity string recorded in run manifests.
    fn descriptor(&self) -> String;
    /// Number of completions served by the underlying service (cache hits
    /// excluded by wrappers).
    fn calls(&self) -> usize {
        0
    }
}

/// Stable content hash used to key scripted fixtures.
pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// One scripted fixture line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fixture {
    pub prompt_hash: String,
    pub completion: String,
}

/// Replays canned completions keyed by prompt hash.
pub struct ScriptedBackend {
    fixtures: HashMap<String, String>,
    label: String,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let fixtures: Vec<Fixture> =
            crate::corpus::read_records(path).map_err(|e| BackendError::BadSpec {
                spec: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(Self {
            fixtures: fixtures
                .into_iter()
                .map(|f| (f.prompt_hash, f.completion))
                .collect(),
            label: format!("scripted:{}", path.display()),
            calls: AtomicUsize::new(0),
        })
    }

    /// Build from (prompt, completion) pairs, hashing the prompts.
    pub fn from_pairs<I, P, C>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (P, C)>,
        P: AsRef<str>,
        C: Into<String>,
    {
        Self {
            fixtures: pairs
                .into_iter()
                .map(|(p, c)| (prompt_hash(p.as_ref()), c.into()))
                .collect(),
            label: "scripted:in-memory".into(),
            calls: AtomicUsize::new(0),
        }
    }

    /// Serialize fixtures for a set of prompts to the JSONL fixture format.
    pub fn write_fixture_file<'a, I>(pairs: I, path: &Path) -> Result<usize, BackendError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let fixtures: Vec<Fixture> = pairs
            .into_iter()
            .map(|(p, c)| Fixture {
                prompt_hash: prompt_hash(p),
                completion: c.to_string(),
            })
            .collect();
        crate::corpus::write_records(&fixtures, path).map_err(|e| BackendError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        req.validate()?;
        let hash = prompt_hash(&req.prompt);
        let completion =
            self.fixtures
                .get(&hash)
                .ok_or_else(|| BackendError::UnscriptedPrompt {
                    tag: req.tag.clone(),
                    hash: hash[..12].to_string(),
                })?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(truncate_at_stop(completion, &req.stop))
    }

    fn descriptor(&self) -> String {
        self.label.clone()
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Retry policy for transport failures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireResponse {
    completion: String,
}

/// JSON-over-HTTP backend speaking the minimal wire protocol.
pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    calls: AtomicUsize,
}

impl HttpBackend {
    pub fn new(endpoint: &str, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            client: reqwest::blocking::Client::new(),
            retry,
            calls: AtomicUsize::new(0),
        }
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        req.validate()?;
        let body = WireRequest {
            prompt: &req.prompt,
            max_tokens: req.max_tokens,
            stop: &req.stop,
        };
        let attempts = self.retry.attempts.max(1);
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.retry.backoff_ms << (attempt - 1),
                ));
            }
            let sent = self.client.post(&self.endpoint).json(&body).send();
            match sent {
                Ok(resp) if resp.status().is_success() => {
                    self.calls.fetch_add(1, Ordering::SeqCst);
                    let parsed: WireResponse = resp.json().map_err(|e| BackendError::Transport {
                        tag: req.tag.clone(),
                        attempts: attempt + 1,
                        message: format!("bad response body: {e}"),
                    })?;
                    return Ok(truncate_at_stop(&parsed.completion, &req.stop));
                }
                Ok(resp) => last_err = format!("status {}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(BackendError::Transport {
            tag: req.tag.clone(),
            attempts,
            message: last_err,
        })
    }

    fn descriptor(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Filesystem cache in front of another backend: one file per request
/// hash, written atomically (temp file then rename).
pub struct CachingBackend {
    inner: Arc<dyn CompletionBackend>,
    dir: PathBuf,
}

impl CachingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>, dir: &Path) -> Result<Self, BackendError> {
        std::fs::create_dir_all(dir).map_err(|e| BackendError::Cache {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self {
            inner,
            dir: dir.to_path_buf(),
        })
    }
}

impl CompletionBackend for CachingBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        req.validate()?;
        let key = req.cache_key();
        let path = self.dir.join(&key);
        if let Ok(cached) = std::fs::read_to_string(&path) {
            return Ok(cached);
        }
        let completion = self.inner.complete(req)?;
        let tmp = self.dir.join(format!("{key}.tmp.{}", std::process::id()));
        std::fs::write(&tmp, &completion)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| BackendError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(completion)
    }

    fn descriptor(&self) -> String {
        format!("cached({})", self.inner.descriptor())
    }

    fn calls(&self) -> usize {
        self.inner.calls()
    }
}

/// Observer hooks for the bulk executor, used to assert concurrency
/// bounds in tests.
pub trait BatchProbe: Send + Sync {
    fn started(&self, index: usize);
    fn finished(&self, index: usize);
}

struct NoProbe;

impl BatchProbe for NoProbe {
    fn started(&self, _: usize) {}
    fn finished(&self, _: usize) {}
}

/// Run `f` over `items` with at most `parallelism` invocations in flight.
/// Results come back in input order.
pub(crate) fn bounded_map<T, R, F>(
    items: &[T],
    parallelism: usize,
    probe: &dyn BatchProbe,
    f: F,
) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    let mut slots: Vec<Mutex<Option<R>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    if workers <= 1 {
        for (i, item) in items.iter().enumerate() {
            probe.started(i);
            let r = f(i, item);
            probe.finished(i);
            *slots[i].lock().unwrap() = Some(r);
        }
    } else {
        let cursor = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    probe.started(i);
                    let r = f(i, &items[i]);
                    probe.finished(i);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
    }
    slots
        .iter_mut()
        .map(|s| s.get_mut().unwrap().take().expect("every slot filled"))
        .collect()
}

/// Complete a batch of requests with bounded concurrency. Output order
/// matches input order; individual failures occupy their slot without
/// aborting the batch.
pub fn complete_batch(
    backend: &dyn CompletionBackend,
    reqs: &[CompletionRequest],
    parallelism: usize,
) -> Vec<Result<String, BackendError>> {
    complete_batch_probed(backend, reqs, parallelism, &NoProbe)
}

pub fn complete_batch_probed(
    backend: &dyn CompletionBackend,
    reqs: &[CompletionRequest],
    parallelism: usize,
    probe: &dyn BatchProbe,
) -> Vec<Result<String, BackendError>> {
    bounded_map(reqs, parallelism, probe, |_, req| backend.complete(req))
}

/// Declarative backend configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Http { endpoint: String },
    Scripted { fixture_path: PathBuf },
}

impl BackendConfig {
    /// Parse the CLI spec syntax: `scripted:<path>`, `http:<url>`, or a
    /// bare `http(s)://` URL.
    pub fn parse_spec(spec: &str) -> Result<Self, BackendError> {
        let kind = if spec.starts_with("http://") || spec.starts_with("https://") {
            BackendKind::Http {
                endpoint: spec.to_string(),
            }
        } else if let Some(path) = spec.strip_prefix("scripted:") {
            BackendKind::Scripted {
                fixture_path: PathBuf::from(path),
            }
        } else if let Some(url) = spec.strip_prefix("http:") {
            BackendKind::Http {
                endpoint: url.to_string(),
            }
        } else {
            return Err(BackendError::BadSpec {
                spec: spec.to_string(),
                message: "expected scripted:<path>, http:<url>, or an http(s) URL".into(),
            });
        };
        Ok(Self {
            kind,
            parallelism: default_parallelism(),
            retry: RetryPolicy::default(),
            cache_dir: None,
        })
    }

    pub fn build(&self) -> Result<Arc<dyn CompletionBackend>, BackendError> {
        if self.parallelism == 0 {
            return Err(BackendError::BadSpec {
                spec: format!("{self:?}"),
                message: "parallelism must be >= 1".into(),
            });
        }
        let base: Arc<dyn CompletionBackend> = match &self.kind {
            BackendKind::Http { endpoint } => {
                Arc::new(HttpBackend::new(endpoint, self.retry.clone()))
            }
            BackendKind::Scripted { fixture_path } => Arc::new(ScriptedBackend::load(fixture_path)?),
        };
        match &self.cache_dir {
            Some(dir) => Ok(Arc::new(CachingBackend::new(base, dir)?)),
            None => Ok(base),
        }
    }
}
