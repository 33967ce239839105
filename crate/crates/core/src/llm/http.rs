//! HTTPS chat-completion adapters.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatMessage, ChatProvider, GatewayError, ProviderProfile, ProviderReply, Role, Usage};

pub const OPENAI_KEY_ENV: &str = "OPENAI_API_KEY";
pub const ANTHROPIC_KEY_ENV: &str = "ANTHROPIC_API_KEY";
const OPENAI_BASE: &str = "https://api.openai.com/v1";
const ANTHROPIC_BASE: &str = "https://api.anthropic.com/v1";
const ANTHROPIC_VERSION: &str = "2023-06-01";

fn env_key(var: &str) -> Result<String, GatewayError> {
    match std::env::var(var) {
        Ok(k) if !k.trim().is_empty() => Ok(k),
        _ => Err(GatewayError::Config(format!("{var} is not set"))),
    }
}

/// Profile setting, then the conventional environment override, then the
/// public endpoint. `suffix` is appended to the override.
fn base_url(profile: &ProviderProfile, env: &str, suffix: &str, default: &str) -> String {
    if let Some(u) = &profile.base_url {
        return u.clone();
    }
    match std::env::var(env) {
        Ok(u) if !u.trim().is_empty() => format!("{}{suffix}", u.trim().trim_end_matches('/')),
        _ => default.to_owned(),
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Maps an HTTP failure onto the gateway's error classes.
fn classify_status(status: u16, body: &str, overflow_markers: &[&str]) -> GatewayError {
    let lower = body.to_ascii_lowercase();
    if overflow_markers.iter().any(|m| lower.contains(m)) {
        return GatewayError::ContextOverflow { estimated: 0, window: 0 };
    }
    let snippet: String = body.chars().take(500).collect();
    match status {
        408 | 409 | 429 | 500..=599 => GatewayError::Transport(format!("HTTP {status}: {snippet}")),
        _ => GatewayError::Config(format!("HTTP {status}: {snippet}")),
    }
}

fn post(
    url: &str,
    headers: &[(&str, String)],
    body: &Value,
    timeout: Duration,
) -> Result<(u16, String), GatewayError> {
    let mut req = agent(timeout).post(url);
    for (k, v) in headers {
        req = req.header(*k, v.as_str());
    }
    let mut resp = req.send_json(body).map_err(|e| GatewayError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| GatewayError::Transport(e.to_string()))?;
    Ok((status, text))
}

#[derive(Clone, Debug)]
pub struct OpenAiProvider {
    pub api_key: String,
    pub base_url: String,
}

impl OpenAiProvider {
    pub fn from_env(profile: &ProviderProfile) -> Result<Self, GatewayError> {
        Ok(Self {
            api_key: env_key(OPENAI_KEY_ENV)?,
            base_url: base_url(profile, "OPENAI_BASE_URL", "", OPENAI_BASE),
        })
    }

    pub fn request_body(history: &[ChatMessage], profile: &ProviderProfile) -> Value {
        let messages: Vec<Value> =
            history.iter().map(|m| json!({"role": m.role.to_string(), "content": m.content})).collect();
        let mut body = json!({
            "model": profile.model,
            "messages": messages,
            "max_tokens": profile.max_output_tokens,
        });
        if let Some(t) = profile.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

#[derive(Deserialize)]
struct OpenAiResponse {
    choices: Vec<OpenAiChoice>,
    usage: Option<OpenAiUsage>,
}

#[derive(Deserialize)]
struct OpenAiChoice {
    message: OpenAiMessage,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct OpenAiMessage {
    content: Option<String>,
    refusal: Option<String>,
}

#[derive(Deserialize)]
struct OpenAiUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub(crate) fn parse_openai(body: &str) -> Result<ProviderReply, GatewayError> {
    let resp: OpenAiResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::Transport(format!("malformed response: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::ProviderRefusal("response has no choices".to_owned()))?;
    if let Some(r) = choice.message.refusal {
        return Err(GatewayError::ProviderRefusal(r));
    }
    if choice.finish_reason.as_deref() == Some("content_filter") {
        return Err(GatewayError::ProviderRefusal("content filtered".to_owned()));
    }
    Ok(ProviderReply {
        content: choice.message.content.unwrap_or_default(),
        usage: resp.usage.map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens }),
    })
}

impl ChatProvider for OpenAiProvider {
    fn complete(
        &self,
        history: &[ChatMessage],
        profile: &ProviderProfile,
        timeout: Duration,
    ) -> Result<ProviderReply, GatewayError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let headers = [("Authorization", format!("Bearer {}", self.api_key))];
        let (status, text) = post(&url, &headers, &Self::request_body(history, profile), timeout)?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text, &["context_length_exceeded", "maximum context length"]));
        }
        parse_openai(&text)
    }
}

#[derive(Clone, Debug)]
pub struct AnthropicProvider {
    pub api_key: String,
    pub base_url: String,
}

impl AnthropicProvider {
    pub fn from_env(profile: &ProviderProfile) -> Result<Self, GatewayError> {
        Ok(Self {
            api_key: env_key(ANTHROPIC_KEY_ENV)?,
            // ANTHROPIC_BASE_URL names the host without the version prefix.
            base_url: base_url(profile, "ANTHROPIC_BASE_URL", "/v1", ANTHROPIC_BASE),
        })
    }

    /// System messages go to the top-level `system` field; consecutive turns
    /// with the same role are joined.
    pub fn request_body(history: &[ChatMessage], profile: &ProviderProfile) -> Value {
        let system: Vec<&str> =
            history.iter().filter(|m| m.role == Role::System).map(|m| m.content.as_str()).collect();
        let mut turns: Vec<(Role, String)> = Vec::new();
        for m in history.iter().filter(|m| m.role != Role::System) {
            match turns.last_mut() {
                Some((role, text)) if *role == m.role => {
                    text.push_str("\n\n");
                    text.push_str(&m.content);
                }
                _ => turns.push((m.role, m.content.clone())),
            }
        }
        let messages: Vec<Value> =
            turns.into_iter().map(|(r, c)| json!({"role": r.to_string(), "content": c})).collect();
        let mut body = json!({
            "model": profile.model,
            "max_tokens": profile.max_output_tokens,
            "messages": messages,
        });
        if !system.is_empty() {
            body["system"] = json!(system.join("\n\n"));
        }
        if let Some(t) = profile.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

#[derive(Deserialize)]
struct AnthropicResponse {
    content: Vec<AnthropicBlock>,
    stop_reason: Option<String>,
    usage: Option<AnthropicUsage>,
}

#[derive(Deserialize)]
struct AnthropicBlock {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    text: String,
}

#[derive(Deserialize)]
struct AnthropicUsage {
    input_tokens: u64,
    output_tokens: u64,
}

pub(crate) fn parse_anthropic(body: &str) -> Result<ProviderReply, GatewayError> {
    let resp: AnthropicResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::Transport(format!("malformed response: {e}")))?;
    if resp.stop_reason.as_deref() == Some("refusal") {
        return Err(GatewayError::ProviderRefusal("model refused".to_owned()));
    }
    let content: String = resp.content.iter().filter(|b| b.kind == "text").map(|b| b.text.as_str()).collect();
    Ok(ProviderReply {
        content,
        usage: resp.usage.map(|u| Usage { prompt_tokens: u.input_tokens, completion_tokens: u.output_tokens }),
    })
}

impl ChatProvider for AnthropicProvider {
    fn complete(
        &self,
        history: &[ChatMessage],
        profile: &ProviderProfile,
        timeout: Duration,
    ) -> Result<ProviderReply, GatewayError> {
        let url = format!("{}/messages", self.base_url.trim_end_matches('/'));
        let headers = [("x-api-key", self.api_key.clone()), ("anthropic-version", ANTHROPIC_VERSION.to_owned())];
        let (status, text) = post(&url, &headers, &Self::request_body(history, profile), timeout)?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text, &["prompt is too long", "context window"]));
        }
        parse_anthropic(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn openai_reply_and_usage() {
        let r = parse_openai(
            r#"{"choices":[{"message":{"role":"assistant","content":"hello"},"finish_reason":"stop"}],"usage":{"prompt_tokens":12,"completion_tokens":3,"total_tokens":15}}"#,
        )
        .unwrap();
        assert_eq!(r.content, "hello");
        assert_eq!(r.usage, Some(Usage { prompt_tokens: 12, completion_tokens: 3 }));
    }

    #[test]
    fn openai_refusal() {
        let r = parse_openai(r#"{"choices":[{"message":{"content":null,"refusal":"no"},"finish_reason":"stop"}]}"#);
        assert!(matches!(r, Err(GatewayError::ProviderRefusal(_))));
    }

    #[test]
    fn anthropic_joins_text_blocks() {
        let r = parse_anthropic(
            r#"{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}],"stop_reason":"end_turn","usage":{"input_tokens":5,"output_tokens":2}}"#,
        )
        .unwrap();
        assert_eq!(r.content, "ab");
        assert_eq!(r.usage, Some(Usage { prompt_tokens: 5, completion_tokens: 2 }));
    }

    #[test]
    fn anthropic_body_moves_system_and_merges_turns() {
        let history = vec![
            ChatMessage::system("sys"),
            ChatMessage::user("u1"),
            ChatMessage::user("u2"),
            ChatMessage::assistant("a1"),
        ];
        let body = AnthropicProvider::request_body(&history, &ProviderProfile::scripted(100));
        assert_eq!(body["system"], "sys");
        assert_eq!(body["messages"].as_array().unwrap().len(), 2);
        assert_eq!(body["messages"][0]["content"], "u1\n\nu2");
    }

    #[test]
    fn status_classes() {
        assert!(matches!(classify_status(429, "slow down", &[]), GatewayError::Transport(_)));
        assert!(matches!(classify_status(503, "", &[]), GatewayError::Transport(_)));
        assert!(matches!(classify_status(401, "bad key", &[]), GatewayError::Config(_)));
        assert!(matches!(
            classify_status(400, r#"{"error":{"code":"context_length_exceeded"}}"#, &["context_length_exceeded"]),
            GatewayError::ContextOverflow { .. }
        ));
    }
}
