use serde::Deserialize;
use serde_json::json;
use ureq::Agent;

use super::{AttemptError, Backend, BackendConfig, FinishReason, GenerationParams, RawCompletion, Secret, Usage};

/// Client for the plain-text `/completions` endpoint of OpenAI-compatible servers.
pub struct OpenAiBackend {
    agent: Agent,
    url: String,
    key: Secret,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Response {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

const MAX_ERROR_BODY: usize = 300;

impl OpenAiBackend {
    pub fn new(config: &BackendConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.request_timeout()))
            .build()
            .into();
        OpenAiBackend {
            agent,
            url: format!("{}/completions", config.base_url.trim_end_matches('/')),
            key: config.api_key.clone(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn body_excerpt(body: &str) -> String {
    let mut end = body.len().min(MAX_ERROR_BODY);
    while !body.is_char_boundary(end) {
        end -= 1;
    }
    body[..end].to_string()
}

impl Backend for OpenAiBackend {
    fn attempt(&self, prompt: &str, params: &GenerationParams) -> Result<RawCompletion, AttemptError> {
        let body = json!({
            "model": params.model,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "stop": params.stop,
        });
        let mut request = self.agent.post(&self.url);
        if !self.key.is_empty() {
            request = request.header("Authorization", format!("Bearer {}", self.key.expose()));
        }
        let mut response = match request.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => {
                return Err(AttemptError::Transient {
                    status: None,
                    message: format!("timed out ({t})"),
                })
            }
            Err(e) => {
                return Err(AttemptError::Transient {
                    status: None,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => {}
            401 | 403 => return Err(AttemptError::Auth { status }),
            429 | 500..=599 => {
                return Err(AttemptError::Transient {
                    status: Some(status),
                    message: body_excerpt(&text),
                })
            }
            _ => {
                return Err(AttemptError::Rejected {
                    status,
                    message: body_excerpt(&text),
                })
            }
        }
        let parsed: Response = serde_json::from_str(&text).map_err(|e| AttemptError::Transient {
            status: Some(status),
            message: format!("malformed response body: {e}"),
        })?;
        let choice = parsed.choices.into_iter().next().ok_or(AttemptError::Transient {
            status: Some(status),
            message: "response has no choices".into(),
        })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(RawCompletion {
            text: choice.text,
            finish_reason,
            usage: parsed.usage,
        })
    }
}
