//! OpenAI-compatible `/chat/completions` and `/embeddings` over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, BackendReply, EndpointConfig, GatewayError};

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Serialize)]
struct EmbedBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Debug, Deserialize)]
struct EmbedReply {
    data: Vec<EmbedItem>,
}

#[derive(Debug, Deserialize)]
struct EmbedItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }

    fn post(&self, endpoint: &EndpointConfig, route: &str, body: &impl Serialize) -> Result<Value, GatewayError> {
        let url = format!("{}/{route}", endpoint.base_url.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(body);
        if let Some(var) = &endpoint.api_key_env {
            let key = std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.clone()))?;
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Protocol(format!("non-JSON body from {url}: {e}")))
    }
}

impl Backend for HttpBackend {
    fn chat(&self, endpoint: &EndpointConfig, prompt: &str) -> Result<BackendReply, GatewayError> {
        let body = ChatBody {
            model: &endpoint.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: endpoint.temperature,
            max_tokens: endpoint.max_output_tokens,
        };
        let value = self.post(endpoint, "chat/completions", &body)?;
        let reply: ChatReply =
            serde_json::from_value(value).map_err(|e| GatewayError::Protocol(format!("chat reply: {e}")))?;
        let text = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Protocol("chat reply has no message content".into()))?;
        let usage = reply.usage.unwrap_or_default();
        Ok(BackendReply {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }

    fn embed(&self, endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = EmbedBody {
            model: &endpoint.model,
            input: texts,
        };
        let value = self.post(endpoint, "embeddings", &body)?;
        let mut reply: EmbedReply =
            serde_json::from_value(value).map_err(|e| GatewayError::Protocol(format!("embedding reply: {e}")))?;
        if reply.data.len() != texts.len() {
            return Err(GatewayError::Protocol(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                reply.data.len()
            )));
        }
        reply.data.sort_by_key(|d| d.index);
        Ok(reply.data.into_iter().map(|d| d.embedding).collect())
    }
}
