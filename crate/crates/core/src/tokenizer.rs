//! Token counting.
//!
//! The builtin tokenizer splits on Unicode whitespace and then peels leading
//! and trailing punctuation off each chunk, one token per punctuation char.
//! It is not any model's tokenizer; counts are reproducible, nothing more.
//! When counts must match a model tokenizer, an external sidecar of
//! precomputed counts can be loaded instead.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("failed to read token-count sidecar {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed token-count sidecar {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    BuiltinDeterministic,
    External,
}

/// Handle to whichever token counter the run is configured with.
#[derive(Debug, Clone)]
pub struct TokenizerHandle {
    name: String,
    mode: TokenizerMode,
    /// sha256(text) hex -> token count
    sidecar: Option<Arc<HashMap<String, usize>>>,
}

impl Default for TokenizerHandle {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TokenizerHandle {
    pub fn builtin() -> Self {
        Self {
            name: "builtin-whitespace-punct".to_string(),
            mode: TokenizerMode::BuiltinDeterministic,
            sidecar: None,
        }
    }

    /// Load externally computed counts: a JSON object mapping the sha256 hex
    /// digest of a text to its token count. Texts missing from the sidecar
    /// fall back to the builtin count with a warning.
    pub fn from_sidecar(name: &str, path: &Path) -> Result<Self, TokenizerError> {
        let raw = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let counts: HashMap<String, usize> = serde_json::from_str(&raw).map_err(|source| TokenizerError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_counts(name, counts))
    }

    pub fn from_counts(name: &str, counts: HashMap<String, usize>) -> Self {
        Self {
            name: name.to_string(),
            mode: TokenizerMode::External,
            sidecar: Some(Arc::new(counts)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn count(&self, text: &str) -> usize {
        match &self.sidecar {
            Some(counts) => match counts.get(&text_digest(text)) {
                Some(&n) => n,
                None => {
                    log::warn!(
                        "tokenizer {}: no external count for text, using builtin count",
                        self.name
                    );
                    tokenize(text).len()
                }
            },
            None => tokenize(text).len(),
        }
    }
}

/// Hex sha256 of a text; the key used by token-count sidecars.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Split `text` into builtin tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        let mut end = chunk.len();

        let mut leading = Vec::new();
        for (i, c) in chunk.char_indices() {
            if !is_punct(c) {
                break;
            }
            leading.push(&chunk[i..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
        if start == chunk.len() {
            // all punctuation
            out.extend(leading);
            continue;
        }

        let mut trailing = Vec::new();
        for (i, c) in chunk[start..].char_indices().rev() {
            if !is_punct(c) {
                break;
            }
            let abs = start + i;
            trailing.push(&chunk[abs..abs + c.len_utf8()]);
            end = abs;
        }

        out.extend(leading);
        out.push(&chunk[start..end]);
        out.extend(trailing.into_iter().rev());
    }
    out
}
