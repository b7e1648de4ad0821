//! Text-completion backends and the retrying, concurrency-bounded generator
//! that drives them.

mod mock;
mod openai;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::corpus::hash_hex;
use crate::error::{Error, Result};

pub use mock::{MockBackend, MockCall, MockEntry};
pub use openai::OpenAiBackend;

pub const DEFAULT_STOP: [&str; 2] = ["\n\nThe following is a conversation", "\n\n\n"];
pub const MAX_STOP_SEQUENCES: usize = 4;

/// 16-hex-digit hash identifying a prompt, shared by the mock script and
/// dataset metadata.
pub fn prompt_hash(prompt: &str) -> String {
    hash_hex(prompt.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub model: String,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            model: "opt-30b".to_string(),
            top_p: 0.92,
            temperature: 1.0,
            max_tokens: 512,
            stop: DEFAULT_STOP.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GenerationParams {
    pub fn check(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if self.stop.len() > MAX_STOP_SEQUENCES {
            return Err(Error::Config(format!(
                "at most {MAX_STOP_SEQUENCES} stop sequences are allowed, got {}",
                self.stop.len()
            )));
        }
        if self.stop.iter().any(String::is_empty) {
            return Err(Error::Config("stop sequences must be nonempty".into()));
        }
        Ok(())
    }
}

/// A string that never prints.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Secret(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret([redacted])")
    }
}

impl<'de> Deserialize<'de> for Secret {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d).map(Secret)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub base_url: String,
    pub api_key: Secret,
    pub max_parallel: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub request_timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: "http://localhost:8000/v1".to_string(),
            api_key: Secret::default(),
            max_parallel: 4,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
            request_timeout_secs: 120,
        }
    }
}

impl BackendConfig {
    /// `PLACES_API_BASE` replaces `base_url`; `PLACES_API_KEY` supplies the key.
    pub fn apply_env(&mut self) {
        if let Ok(base) = std::env::var("PLACES_API_BASE") {
            if !base.is_empty() {
                self.base_url = base;
            }
        }
        if let Ok(key) = std::env::var("PLACES_API_KEY") {
            self.api_key = Secret(key);
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.max_parallel == 0 {
            return Err(Error::Config("max_parallel must be at least 1".into()));
        }
        if self.backoff_cap_ms < self.backoff_base_ms {
            return Err(Error::Config("backoff_cap_ms must not be below backoff_base_ms".into()));
        }
        if self.request_timeout_secs == 0 {
            return Err(Error::Config("request_timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }

    /// Delay before retry number `retry` (0-based): the capped geometric step
    /// scaled into its upper half by `jitter` in [0, 1].
    pub fn backoff_delay(&self, retry: u32, jitter: f64) -> Duration {
        let step = self
            .backoff_base_ms
            .saturating_mul(1u64.checked_shl(retry).unwrap_or(u64::MAX))
            .min(self.backoff_cap_ms);
        let ms = step as f64 * (0.5 + 0.5 * jitter.clamp(0.0, 1.0));
        Duration::from_micros((ms * 1000.0) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<Usage>,
    pub latency: Duration,
    pub attempts: u32,
    /// Set exactly when `finish_reason` is `Error`.
    pub error: Option<String>,
}

/// What a backend returns for one successful request.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    /// Timeouts, 429 and 5xx. `status` is `None` for transport failures.
    Transient { status: Option<u16>, message: String },
    Auth { status: u16 },
    /// Any other non-success status; never retried.
    Rejected { status: u16, message: String },
}

/// One request, no retries. Implementations must be callable from many
/// threads at once.
pub trait Backend: Send + Sync {
    fn attempt(&self, prompt: &str, params: &GenerationParams) -> std::result::Result<RawCompletion, AttemptError>;
}

/// Cuts `text` at the earliest stop sequence. Returns whether one was found.
pub fn strip_stop(text: &str, stop: &[String]) -> (String, bool) {
    let cut = stop.iter().filter_map(|s| text.find(s.as_str())).min();
    match cut {
        Some(i) => (text[..i].to_string(), true),
        None => (text.to_string(), false),
    }
}

pub struct Generator {
    backend: Box<dyn Backend>,
    config: BackendConfig,
}

impl Generator {
    pub fn new(backend: Box<dyn Backend>, config: BackendConfig) -> Result<Self> {
        config.check()?;
        Ok(Generator { backend, config })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn scrub(&self, message: String) -> String {
        let key = self.config.api_key.expose();
        if key.is_empty() {
            message
        } else {
            message.replace(key, "[redacted]")
        }
    }

    pub fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion> {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must be nonempty".into()));
        }
        params.check()?;
        let started = Instant::now();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.backend.attempt(prompt, params) {
                Ok(raw) => {
                    let (text, found) = strip_stop(&raw.text, &params.stop);
                    let finish_reason = if found { FinishReason::Stop } else { raw.finish_reason };
                    return Ok(Completion {
                        text,
                        finish_reason,
                        usage: raw.usage,
                        latency: started.elapsed(),
                        attempts,
                        error: None,
                    });
                }
                Err(AttemptError::Auth { status }) => return Err(Error::Auth(status)),
                Err(AttemptError::Rejected { status, message }) => {
                    return Err(Error::BackendRejected {
                        status,
                        message: self.scrub(message),
                    })
                }
                Err(AttemptError::Transient { status, message }) => {
                    if attempts > self.config.max_retries {
                        return Err(Error::BackendUnavailable {
                            attempts,
                            status,
                            message: self.scrub(message),
                        });
                    }
                    let delay = self.config.backoff_delay(attempts - 1, rand::rng().random());
                    log::warn!(
                        "transient backend failure (status {status:?}), retry {attempts} in {delay:?}"
                    );
                    thread::sleep(delay);
                }
            }
        }
    }

    /// Runs every job with at most `max_parallel` requests in flight.
    /// Results line up with `jobs`.
    pub fn complete_batch_results(&self, jobs: &[(String, GenerationParams)]) -> Vec<Result<Completion>> {
        let slots: Vec<Mutex<Option<Result<Completion>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_parallel.min(jobs.len());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((prompt, params)) = jobs.get(i) else { break };
                    let result = self.complete(prompt, params);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
            .collect()
    }

    /// Like [`Generator::complete_batch_results`], with failures turned into
    /// error completions.
    pub fn complete_batch(&self, jobs: &[(String, GenerationParams)]) -> Vec<Completion> {
        self.complete_batch_results(jobs)
            .into_iter()
            .map(|r| {
                r.unwrap_or_else(|e| Completion {
                    text: String::new(),
                    finish_reason: FinishReason::Error,
                    usage: None,
                    latency: Duration::ZERO,
                    attempts: match &e {
                        Error::BackendUnavailable { attempts, .. } => *attempts,
                        _ => 1,
                    },
                    error: Some(e.to_string()),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> BackendConfig {
        BackendConfig {
            backoff_base_ms: 0,
            backoff_cap_ms: 0,
            max_retries: 3,
            ..BackendConfig::default()
        }
    }

    fn mock(lines: &str) -> MockBackend {
        MockBackend::parse(lines.as_bytes(), std::path::Path::new("script")).unwrap()
    }

    #[test]
    fn scripted_echo() {
        let prompt = "The following is a conversation between Alice and Bob about pets.\nAlice:";
        let line = format!(r#"{{"match": "{}", "text": "Hi!\nBob: Hey"}}"#, prompt_hash(prompt));
        let g = Generator::new(Box::new(mock(&line)), fast()).unwrap();
        let c = g.complete(prompt, &GenerationParams::default()).unwrap();
        assert_eq!(c.text, "Hi!\nBob: Hey");
        assert_eq!(c.finish_reason, FinishReason::Stop);
        assert_eq!(c.attempts, 1);
    }

    #[test]
    fn retries_then_succeeds() {
        let g = Generator::new(Box::new(mock(r#"{"match": "*", "text": "ok", "fail_times": 2}"#)), fast()).unwrap();
        let c = g.complete("p", &GenerationParams::default()).unwrap();
        assert_eq!(c.text, "ok");
        assert_eq!(c.attempts, 3);
    }

    #[test]
    fn retries_exhausted() {
        let config = BackendConfig {
            max_retries: 1,
            ..fast()
        };
        let g = Generator::new(Box::new(mock(r#"{"match": "*", "text": "ok", "fail_times": 5}"#)), config).unwrap();
        match g.complete("p", &GenerationParams::default()) {
            Err(Error::BackendUnavailable { attempts, status, .. }) => {
                assert_eq!(attempts, 2);
                assert_eq!(status, Some(503));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let m = mock(r#"{"match": "*", "text": "ok", "fail_times": 1, "fail_status": 400}"#);
        let g = Generator::new(Box::new(m), fast()).unwrap();
        assert!(matches!(
            g.complete("p", &GenerationParams::default()),
            Err(Error::BackendRejected { status: 400, .. })
        ));
        let m = mock(r#"{"match": "*", "text": "ok", "fail_times": 1, "fail_status": 401}"#);
        let g = Generator::new(Box::new(m), fast()).unwrap();
        assert!(matches!(g.complete("p", &GenerationParams::default()), Err(Error::Auth(401))));
    }

    #[test]
    fn stop_sequences_are_stripped() {
        let m = mock(r#"{"match": "*", "text": "Hi\nBob: yo\n\nThe following is a conversation between"}"#);
        let g = Generator::new(Box::new(m), fast()).unwrap();
        let c = g.complete("p", &GenerationParams::default()).unwrap();
        assert_eq!(c.text, "Hi\nBob: yo");
        assert_eq!(c.finish_reason, FinishReason::Stop);
        let m = mock(r#"{"match": "*", "text": "cut mid", "finish_reason": "length"}"#);
        let g = Generator::new(Box::new(m), fast()).unwrap();
        let c = g.complete("p", &GenerationParams::default()).unwrap();
        assert_eq!(c.finish_reason, FinishReason::Length);
    }

    #[test]
    fn params_are_checked() {
        let p = GenerationParams {
            top_p: 0.0,
            ..GenerationParams::default()
        };
        assert!(p.check().is_err());
        let p = GenerationParams {
            stop: vec!["a".into(), "b".into(), "c".into(), "d".into(), "e".into()],
            ..GenerationParams::default()
        };
        assert!(p.check().is_err());
        assert!(GenerationParams::default().check().is_ok());
    }

    #[test]
    fn backoff_is_geometric_and_capped() {
        let c = BackendConfig {
            backoff_base_ms: 100,
            backoff_cap_ms: 1000,
            ..BackendConfig::default()
        };
        assert_eq!(c.backoff_delay(0, 1.0), Duration::from_millis(100));
        assert_eq!(c.backoff_delay(2, 1.0), Duration::from_millis(400));
        assert_eq!(c.backoff_delay(10, 1.0), Duration::from_millis(1000));
        assert_eq!(c.backoff_delay(60, 0.0), Duration::from_millis(500));
        assert_eq!(c.backoff_delay(2, 0.0), Duration::from_millis(200));
    }

    #[test]
    fn batch_isolates_failures_and_keeps_order() {
        let script = format!(
            "{{\"match\": \"{}\", \"text\": \"x\", \"fail_times\": 1000}}\n{}\n",
            prompt_hash("p1"),
            r#"{"match": "*", "text": "fine"}"#
        );
        let config = BackendConfig {
            max_parallel: 2,
            max_retries: 0,
            ..fast()
        };
        let g = Generator::new(Box::new(mock(&script)), config).unwrap();
        let jobs: Vec<(String, GenerationParams)> = ["p0", "p1", "p2"]
            .iter()
            .map(|p| (p.to_string(), GenerationParams::default()))
            .collect();
        let out = g.complete_batch(&jobs);
        assert_eq!(out[0].text, "fine");
        assert_eq!(out[1].finish_reason, FinishReason::Error);
        assert!(out[1].error.is_some());
        assert_eq!(out[2].text, "fine");
    }

    #[test]
    fn secret_never_prints() {
        let c = BackendConfig {
            api_key: Secret::new("sk-very-secret"),
            ..BackendConfig::default()
        };
        assert!(!format!("{c:?}").contains("sk-very-secret"));
    }
}
