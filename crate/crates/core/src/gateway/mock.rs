//! Scripted endpoints for offline runs and tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::{Backend, BackendReply, EndpointConfig, GatewayError};
use crate::tokenizer::TokenizerHandle;

#[derive(Debug, Clone)]
enum Matcher {
    Contains(String),
    Regex(Regex),
}

/// One rule: if the prompt matches, reply with `response`. For regex rules
/// the response may reference capture groups (`$1`, `${name}`).
#[derive(Debug, Clone)]
pub struct MockRule {
    matcher: Matcher,
    response: String,
}

impl MockRule {
    pub fn contains(needle: &str, response: &str) -> Self {
        Self {
            matcher: Matcher::Contains(needle.to_string()),
            response: response.to_string(),
        }
    }

    pub fn regex(pattern: &str, response: &str) -> Result<Self, GatewayError> {
        let re = Regex::new(pattern).map_err(|e| GatewayError::Config(format!("mock regex {pattern:?}: {e}")))?;
        Ok(Self {
            matcher: Matcher::Regex(re),
            response: response.to_string(),
        })
    }

    fn apply(&self, prompt: &str) -> Option<String> {
        match &self.matcher {
            Matcher::Contains(needle) => prompt.contains(needle.as_str()).then(|| self.response.clone()),
            Matcher::Regex(re) => re.captures(prompt).map(|caps| {
                let mut out = String::new();
                caps.expand(&self.response, &mut out);
                out
            }),
        }
    }
}

/// Ordered rules; the first match wins, otherwise `default_response`.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub default_response: String,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>, default_response: &str) -> Self {
        Self {
            rules,
            default_response: default_response.to_string(),
        }
    }

    pub fn respond(&self, prompt: &str) -> String {
        self.rules
            .iter()
            .find_map(|r| r.apply(prompt))
            .unwrap_or_else(|| self.default_response.clone())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    contains: Option<String>,
    #[serde(default)]
    regex: Option<String>,
    response: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<RuleFile>,
    #[serde(default)]
    default_response: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MockFile {
    PerEndpoint {
        endpoints: BTreeMap<String, ScriptFile>,
        #[serde(default)]
        fallback: Option<ScriptFile>,
    },
    Single(ScriptFile),
}

fn compile(script: ScriptFile) -> Result<MockScript, GatewayError> {
    let mut rules = Vec::with_capacity(script.rules.len());
    for r in script.rules {
        rules.push(match (r.contains, r.regex) {
            (Some(c), None) => MockRule::contains(&c, &r.response),
            (None, Some(re)) => MockRule::regex(&re, &r.response)?,
            _ => {
                return Err(GatewayError::Config(
                    "mock rule needs exactly one of `contains` or `regex`".into(),
                ))
            }
        });
    }
    Ok(MockScript {
        rules,
        default_response: script.default_response,
    })
}

/// Mock backend: chat endpoints answer from per-endpoint scripts, embedding
/// endpoints return 26-dim letter-frequency vectors.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    scripts: BTreeMap<String, MockScript>,
    fallback: Option<MockScript>,
    tokenizer: TokenizerHandle,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(mut self, endpoint: &str, script: MockScript) -> Self {
        self.scripts.insert(endpoint.to_string(), script);
        self
    }

    pub fn with_fallback(mut self, script: MockScript) -> Self {
        self.fallback = Some(script);
        self
    }

    /// Load a mock file: either one script (used for every chat endpoint)
    /// or `{"endpoints": {name: script}, "fallback": script?}`.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let raw = fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw).map_err(|e| match e {
            GatewayError::Config(m) => GatewayError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(raw: &str) -> Result<Self, GatewayError> {
        let file: MockFile =
            serde_json::from_str(raw).map_err(|e| GatewayError::Config(format!("mock script: {e}")))?;
        let mut out = Self::new();
        match file {
            MockFile::PerEndpoint { endpoints, fallback } => {
                for (name, s) in endpoints {
                    out.scripts.insert(name, compile(s)?);
                }
                out.fallback = fallback.map(compile).transpose()?;
            }
            MockFile::Single(s) => out.fallback = Some(compile(s)?),
        }
        Ok(out)
    }

    pub fn endpoint_names(&self) -> impl Iterator<Item = &str> {
        self.scripts.keys().map(String::as_str)
    }
}

/// Counts of `a`..`z` (case-insensitive); other characters are ignored.
pub fn letter_frequency(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 26];
    for c in text.chars() {
        let c = c.to_ascii_lowercase();
        if c.is_ascii_lowercase() {
            v[(c as u8 - b'a') as usize] += 1.0;
        }
    }
    v
}

impl Backend for MockBackend {
    fn chat(&self, endpoint: &EndpointConfig, prompt: &str) -> Result<BackendReply, GatewayError> {
        let script = self
            .scripts
            .get(&endpoint.name)
            .or(self.fallback.as_ref())
            .ok_or_else(|| GatewayError::Config(format!("no mock script for endpoint {:?}", endpoint.name)))?;
        let text = script.respond(prompt);
        Ok(BackendReply {
            prompt_tokens: self.tokenizer.count(prompt) as u64,
            completion_tokens: self.tokenizer.count(&text) as u64,
            text,
        })
    }

    fn embed(&self, _endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| letter_frequency(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_match_wins() {
        let s = MockScript::new(
            vec![
                MockRule::contains("query: when does", "Final Answer: ['882']"),
                MockRule::contains("query", "other"),
            ],
            "none",
        );
        assert_eq!(s.respond("... query: when does x"), "Final Answer: ['882']");
        assert_eq!(s.respond("query: who"), "other");
        assert_eq!(s.respond("nothing"), "none");
    }

    #[test]
    fn regex_captures_expand() {
        let s = MockScript::new(
            vec![MockRule::regex(r"ID: (\d+) \| TITLE: Gold", "Final Answer: ['$1']").unwrap()],
            "",
        );
        assert_eq!(s.respond("ID: 12 | TITLE: Gold | CONTENT: x"), "Final Answer: ['12']");
    }

    #[test]
    fn letter_counts() {
        let v = letter_frequency("aA b!");
        assert_eq!(v[0], 2.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn file_forms() {
        let single =
            MockBackend::from_json(r#"{"rules":[{"contains":"x","response":"y"}],"default_response":"d"}"#).unwrap();
        assert!(single.fallback.is_some());

        let per =
            MockBackend::from_json(r#"{"endpoints":{"gen":{"rules":[{"regex":"^(\\S+)","response":"$1"}]}}}"#).unwrap();
        assert_eq!(per.endpoint_names().collect::<Vec<_>>(), vec!["gen"]);
        assert_eq!(per.scripts["gen"].respond("first second"), "first");

        assert!(MockBackend::from_json(r#"{"rules":[{"response":"y"}]}"#).is_err());
        assert!(MockBackend::from_json(r#"{"rules":[{"regex":"(","response":"y"}]}"#).is_err());
    }
}
