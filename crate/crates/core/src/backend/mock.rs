use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use glob::Pattern;
use serde::Deserialize;

use super::{prompt_hash, AttemptError, Backend, FinishReason, GenerationParams, RawCompletion};
use crate::error::{Error, Result};

fn default_fail_status() -> u16 {
    503
}

fn default_finish() -> FinishReason {
    FinishReason::Stop
}

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    /// A 16-hex-digit prompt hash, a glob over the prompt text, or `*` for
    /// the fallback set.
    #[serde(rename = "match")]
    pub pattern: String,
    pub text: String,
    /// Failures served per prompt before the text is returned.
    #[serde(default)]
    pub fail_times: u32,
    #[serde(default = "default_fail_status")]
    pub fail_status: u16,
    #[serde(default = "default_finish")]
    pub finish_reason: FinishReason,
}

enum Matcher {
    Hash(String),
    Glob(Pattern),
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockCall {
    pub prompt_hash: String,
    pub params: GenerationParams,
}

/// Deterministic scripted backend. Lookup order is exact prompt hash, then
/// the first matching glob, then the fallback set indexed by prompt hash,
/// so the choice never depends on call order.
pub struct MockBackend {
    entries: Vec<MockEntry>,
    matchers: Vec<Matcher>,
    failures: Mutex<HashMap<(usize, String), u32>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: Mutex<Vec<MockCall>>,
    latency: Duration,
}

fn is_hash(s: &str) -> bool {
    s.len() == 16 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

impl MockBackend {
    pub fn new(entries: Vec<MockEntry>) -> Result<Self> {
        let matchers = entries
            .iter()
            .map(|e| {
                if e.pattern == "*" {
                    Ok(Matcher::Fallback)
                } else if is_hash(&e.pattern) {
                    Ok(Matcher::Hash(e.pattern.clone()))
                } else {
                    Pattern::new(&e.pattern)
                        .map(Matcher::Glob)
                        .map_err(|err| Error::Config(format!("mock pattern `{}`: {err}", e.pattern)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MockBackend {
            entries,
            matchers,
            failures: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: Mutex::new(Vec::new()),
            latency: Duration::ZERO,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(file, path)
    }

    pub fn parse<R: Read>(reader: R, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    /// Sleeps this long inside every call, to make overlap observable.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Highest number of calls observed in flight at once.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().expect("call log").clone()
    }

    fn lookup(&self, prompt: &str, hash: &str) -> Option<usize> {
        let by_hash = self
            .matchers
            .iter()
            .position(|m| matches!(m, Matcher::Hash(h) if h == hash));
        let by_glob = || {
            self.matchers
                .iter()
                .position(|m| matches!(m, Matcher::Glob(p) if p.matches(prompt)))
        };
        let fallback = || {
            let pool: Vec<usize> = self
                .matchers
                .iter()
                .enumerate()
                .filter(|(_, m)| matches!(m, Matcher::Fallback))
                .map(|(i, _)| i)
                .collect();
            if pool.is_empty() {
                return None;
            }
            let slot = u64::from_str_radix(hash, 16).expect("hex hash") % pool.len() as u64;
            Some(pool[slot as usize])
        };
        by_hash.or_else(by_glob).or_else(fallback)
    }

    fn serve(&self, prompt: &str, params: &GenerationParams) -> std::result::Result<RawCompletion, AttemptError> {
        let hash = prompt_hash(prompt);
        self.calls.lock().expect("call log").push(MockCall {
            prompt_hash: hash.clone(),
            params: params.clone(),
        });
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let Some(i) = self.lookup(prompt, &hash) else {
            return Err(AttemptError::Rejected {
                status: 404,
                message: format!("no scripted completion for prompt {hash}"),
            });
        };
        let entry = &self.entries[i];
        {
            let mut failures = self.failures.lock().expect("failure counters");
            let served = failures.entry((i, hash)).or_insert(0);
            if *served < entry.fail_times {
                *served += 1;
                let status = entry.fail_status;
                return Err(match status {
                    401 | 403 => AttemptError::Auth { status },
                    429 | 500..=599 => AttemptError::Transient {
                        status: Some(status),
                        message: "scripted failure".into(),
                    },
                    _ => AttemptError::Rejected {
                        status,
                        message: "scripted failure".into(),
                    },
                });
            }
        }
        Ok(RawCompletion {
            text: entry.text.clone(),
            finish_reason: entry.finish_reason,
            usage: None,
        })
    }
}

impl Backend for MockBackend {
    fn attempt(&self, prompt: &str, params: &GenerationParams) -> std::result::Result<RawCompletion, AttemptError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let out = self.serve(prompt, params);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

impl<T: Backend + ?Sized> Backend for std::sync::Arc<T> {
    fn attempt(&self, prompt: &str, params: &GenerationParams) -> std::result::Result<RawCompletion, AttemptError> {
        (**self).attempt(prompt, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(pattern: &str, text: &str) -> MockEntry {
        MockEntry {
            pattern: pattern.into(),
            text: text.into(),
            fail_times: 0,
            fail_status: 503,
            finish_reason: FinishReason::Stop,
        }
    }

    #[test]
    fn lookup_precedence() {
        let p = "about pets\nAlice:";
        let m = MockBackend::new(vec![
            entry("*", "fallback"),
            entry("*pets*", "glob"),
            entry(&prompt_hash(p), "hash"),
        ])
        .unwrap();
        let params = GenerationParams::default();
        assert_eq!(m.attempt(p, &params).unwrap().text, "hash");
        assert_eq!(m.attempt("more pets", &params).unwrap().text, "glob");
        assert_eq!(m.attempt("cars", &params).unwrap().text, "fallback");
        assert_eq!(m.calls().len(), 3);
    }

    #[test]
    fn fallback_choice_depends_only_on_prompt() {
        let m = MockBackend::new(vec![entry("*", "a"), entry("*", "b"), entry("*", "c")]).unwrap();
        let params = GenerationParams::default();
        let first: Vec<String> = (0..20)
            .map(|i| m.attempt(&format!("prompt {i}"), &params).unwrap().text)
            .collect();
        let again: Vec<String> = (0..20)
            .rev()
            .map(|i| m.attempt(&format!("prompt {i}"), &params).unwrap().text)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        assert_eq!(first, again);
        assert!(first.iter().any(|t| t != &first[0]));
    }

    #[test]
    fn unmatched_prompt_is_rejected() {
        let m = MockBackend::new(vec![entry("*cats*", "x")]).unwrap();
        assert!(matches!(
            m.attempt("dogs", &GenerationParams::default()),
            Err(AttemptError::Rejected { status: 404, .. })
        ));
    }

    #[test]
    fn malformed_script_line_is_reported() {
        let err = MockBackend::parse("{\"match\": \"*\", \"text\": \"a\"}\nnot json\n".as_bytes(), Path::new("s.jsonl"))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
