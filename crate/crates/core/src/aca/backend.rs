// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text-generation backends for the dataset builder.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::steering::SteeringPlan;

/// Environment variable holding the bearer token for [`RemoteBackend`].
pub const API_KEY_ENV: &str = "CONTROLLM_API_KEY";

pub trait LlmBackend: Send + Sync {
    fn generate(&self, prompt: &str, max_tokens: usize, temperature: f32) -> Result<String>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn generate(&self, prompt: &str, max_tokens: usize, temperature: f32) -> Result<String> {
        (**self).generate(prompt, max_tokens, temperature)
    }
}

// ---------------------------------------------------------------------------
// Scripted fixture
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Rule {
    pattern: String,
    responses: Mutex<VecDeque<String>>,
}

/// Canned responses selected by prompt substring.
///
/// The first rule whose pattern occurs in the prompt answers. Each rule hands
/// out its responses in order and then keeps repeating the last one, so the
/// output depends only on the prompt and how often that rule has fired.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    rules: Vec<Rule>,
    fallback: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<ScriptRule>,
    #[serde(default)]
    default: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ScriptRule {
    #[serde(rename = "match")]
    pattern: String,
    responses: Vec<String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule<I, S>(mut self, pattern: impl Into<String>, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.rules.push(Rule {
            pattern: pattern.into(),
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
        });
        self
    }

    pub fn fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    /// Load `{"rules": [{"match": "...", "responses": [...]}], "default": "..."}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| Error::Backend(format!("fixture: {e}")))?;
        let mut b = Self::new();
        for r in file.rules {
            b = b.rule(r.pattern, r.responses);
        }
        b.fallback = file.default;
        Ok(b)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl LlmBackend for ScriptedBackend {
    fn generate(&self, prompt: &str, _max_tokens: usize, _temperature: f32) -> Result<String> {
        for rule in &self.rules {
            if prompt.contains(&rule.pattern) {
                let mut q = rule.responses.lock().expect("fixture lock");
                return match q.len() {
                    0 => Err(Error::Backend(format!(
                        "rule `{}` has no responses",
                        rule.pattern
                    ))),
                    1 => Ok(q[0].clone()),
                    _ => Ok(q.pop_front().expect("non-empty")),
                };
            }
        }
        self.fallback
            .clone()
            .ok_or_else(|| Error::Backend("no fixture rule matches the prompt".into()))
    }
}

// ---------------------------------------------------------------------------
// Local model
// ---------------------------------------------------------------------------

/// Greedy generation with a loaded model. Temperature is ignored.
pub struct LocalBackend {
    handle: Arc<ModelHandle>,
    plan: SteeringPlan,
}

impl LocalBackend {
    pub fn new(handle: Arc<ModelHandle>) -> Self {
        Self {
            handle,
            plan: SteeringPlan::vanilla(),
        }
    }

    pub fn with_plan(mut self, plan: SteeringPlan) -> Self {
        self.plan = plan;
        self
    }
}

impl LlmBackend for LocalBackend {
    fn generate(&self, prompt: &str, max_tokens: usize, _temperature: f32) -> Result<String> {
        crate::chat::generate(&self.handle, &self.plan, prompt, max_tokens)
    }
}

// ---------------------------------------------------------------------------
// Remote HTTP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteShape {
    /// `{"messages": [{"role": "user", "content": ...}]}`
    Chat,
    /// `{"prompt": ...}`
    Completion,
}

/// Minimal JSON-over-HTTP client for chat or completion endpoints.
pub struct RemoteBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    shape: RemoteShape,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    /// API key is read from [`API_KEY_ENV`] when set.
    pub fn new(url: impl Into<String>, model: impl Into<String>, shape: RemoteShape) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            shape,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn request_body(
        &self,
        prompt: &str,
        max_tokens: usize,
        temperature: f32,
    ) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.model,
            "max_tokens": max_tokens,
            "temperature": temperature,
        });
        match self.shape {
            RemoteShape::Chat => {
                body["messages"] = serde_json::json!([{ "role": "user", "content": prompt }]);
            }
            RemoteShape::Completion => body["prompt"] = serde_json::json!(prompt),
        }
        body
    }
}

/// Pull the generated text out of the common chat and completion shapes.
pub fn extract_text(v: &serde_json::Value) -> Option<String> {
    let choice = &v["choices"][0];
    choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .or_else(|| v["content"][0]["text"].as_str())
        .or_else(|| v["content"].as_str())
        .or_else(|| v["response"].as_str())
        .or_else(|| v["text"].as_str())
        .map(str::to_string)
}

impl LlmBackend for RemoteBackend {
    fn generate(&self, prompt: &str, max_tokens: usize, temperature: f32) -> Result<String> {
        let mut req = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(
                self.request_body(prompt, max_tokens, temperature)
                    .to_string(),
            );
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Backend(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("HTTP {status}: {text}")));
        }
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Backend(format!("bad JSON: {e}")))?;
        extract_text(&v).ok_or_else(|| Error::Backend("response carries no text field".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_rules_advance_then_repeat() {
        let b = ScriptedBackend::new()
            .rule("x", ["one", "two"])
            .fallback("dflt");
        assert_eq!(b.generate("ax", 1, 0.0).unwrap(), "one");
        assert_eq!(b.generate("ax", 1, 0.0).unwrap(), "two");
        assert_eq!(b.generate("ax", 1, 0.0).unwrap(), "two");
        assert_eq!(b.generate("zz", 1, 0.0).unwrap(), "dflt");
        assert!(ScriptedBackend::new().generate("q", 1, 0.0).is_err());
    }

    #[test]
    fn fixture_json() {
        let b = ScriptedBackend::from_json(r#"{"rules":[{"match":"w","responses":["a, b"]}]}"#)
            .unwrap();
        assert_eq!(b.generate("words", 1, 0.0).unwrap(), "a, b");
    }

    #[test]
    fn response_shapes() {
        let chat = serde_json::json!({"choices":[{"message":{"content":"hi"}}]});
        let comp = serde_json::json!({"choices":[{"text":"yo"}]});
        let blocks = serde_json::json!({"content":[{"type":"text","text":"hey"}]});
        assert_eq!(extract_text(&chat).as_deref(), Some("hi"));
        assert_eq!(extract_text(&comp).as_deref(), Some("yo"));
        assert_eq!(extract_text(&blocks).as_deref(), Some("hey"));
        assert_eq!(extract_text(&serde_json::json!({"x":1})), None);
    }

    #[test]
    fn request_body_shapes() {
        let r = RemoteBackend::new("http://x", "m", RemoteShape::Chat).with_api_key(None);
        let b = r.request_body("p", 5, 0.5);
        assert_eq!(b["messages"][0]["content"], "p");
        assert_eq!(b["max_tokens"], 5);
        let r = RemoteBackend::new("http://x", "m", RemoteShape::Completion);
        assert_eq!(r.request_body("p", 5, 0.5)["prompt"], "p");
    }
}
