use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{GatewayError, TemplateId};

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, template: TemplateId, prompt: &str) -> Result<String, GatewayError>;
}

/// One scripted response. A script is a list of these, consumed in order per
/// template id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub template_id: TemplateId,
    pub response: String,
}

impl ScriptEntry {
    pub fn new(template_id: TemplateId, response: impl Into<String>) -> Self {
        Self {
            template_id,
            response: response.into(),
        }
    }
}

/// Deterministic offline provider. Responses are selected by
/// `(template_id, per-template call counter)`; the prompt text is ignored.
#[derive(Debug)]
pub struct ScriptedMock {
    responses: HashMap<TemplateId, Vec<String>>,
    counters: Mutex<HashMap<TemplateId, usize>>,
}

impl ScriptedMock {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut responses: HashMap<TemplateId, Vec<String>> = HashMap::new();
        for e in entries {
            responses.entry(e.template_id).or_default().push(e.response);
        }
        Self {
            responses,
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, GatewayError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(json).map_err(|e| GatewayError::Script(e.to_string()))?;
        Ok(Self::new(entries))
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Calls consumed so far for `template`.
    pub fn consumed(&self, template: TemplateId) -> usize {
        self.counters.lock().get(&template).copied().unwrap_or(0)
    }

    /// Entries not yet consumed, per template.
    pub fn remaining(&self) -> HashMap<TemplateId, usize> {
        let counters = self.counters.lock();
        self.responses
            .iter()
            .map(|(k, v)| (*k, v.len() - counters.get(k).copied().unwrap_or(0)))
            .filter(|(_, n)| *n > 0)
            .collect()
    }
}

impl LlmProvider for ScriptedMock {
    fn name(&self) -> &str {
        "scripted_mock"
    }

    fn complete(&self, template: TemplateId, _prompt: &str) -> Result<String, GatewayError> {
        let mut counters = self.counters.lock();
        let idx = counters.entry(template).or_insert(0);
        let resp = self
            .responses
            .get(&template)
            .and_then(|v| v.get(*idx))
            .cloned()
            .ok_or(GatewayError::ScriptExhausted {
                template,
                index: *idx,
            })?;
        *idx += 1;
        Ok(resp)
    }
}

/// Minimal chat-completion client: POST `{"messages":[{"role","content"}]}`,
/// expects `{"content": "..."}`.
pub struct HttpChat {
    endpoint: String,
    credential: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    content: String,
}

impl HttpChat {
    pub fn new(
        endpoint: impl Into<String>,
        credential: Option<String>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                message: e.to_string(),
                transient: false,
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            credential,
            client,
        })
    }
}

impl LlmProvider for HttpChat {
    fn name(&self) -> &str {
        "http_chat"
    }

    fn complete(&self, _template: TemplateId, prompt: &str) -> Result<String, GatewayError> {
        let mut req = self.client.post(&self.endpoint).json(&ChatRequest {
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        });
        if let Some(c) = &self.credential {
            req = req.bearer_auth(c);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport {
            transient: e.is_timeout() || e.is_connect(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GatewayError::Transport {
                message: format!("http status {status}"),
                transient: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let body: ChatResponse = resp.json().map_err(|e| GatewayError::Transport {
            message: format!("bad response body: {e}"),
            transient: false,
        })?;
        Ok(body.content)
    }
}
