//! Retrieval strategies over a [`CorpusView`](crate::corpus::CorpusView).
//!
//! All strategies produce a [`RetrievalOutcome`] whose `ranked_ids` are the
//! original document ids, best first, without duplicates.

mod bm25;
mod dense;
mod lclm;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bm25::{bm25_build, bm25_retrieve, Bm25Index, DEFAULT_B, DEFAULT_K1};
pub use dense::{cosine_similarity, dense_retrieve};
pub use lclm::{lclm_retrieve, LclmRetriever};

use crate::gateway::GatewayError;
use crate::prompt::PromptError;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("k must be >= 1")]
    InvalidK,
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Lclm,
    Bm25,
    Dense,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Lclm => "lclm",
            Strategy::Bm25 => "bm25",
            Strategy::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub query_id: String,
    pub strategy: Strategy,
    pub ranked_ids: Vec<String>,
    pub raw_response: Option<String>,
    /// The model reply had no parsable Final Answer list.
    pub parse_error: bool,
    /// A hard error for this query (e.g. the endpoint failed); scored as a
    /// miss.
    pub error: Option<String>,
}

impl RetrievalOutcome {
    pub fn new(query_id: &str, strategy: Strategy, ranked_ids: Vec<String>) -> Self {
        Self {
            query_id: query_id.to_string(),
            strategy,
            ranked_ids,
            raw_response: None,
            parse_error: false,
            error: None,
        }
    }

    pub fn failed(query_id: &str, strategy: Strategy, error: String) -> Self {
        Self {
            error: Some(error),
            ..Self::new(query_id, strategy, Vec::new())
        }
    }

    pub fn top_k(&self, k: usize) -> &[String] {
        &self.ranked_ids[..k.min(self.ranked_ids.len())]
    }

    pub fn to_row(&self) -> OutcomeRow {
        OutcomeRow {
            qid: self.query_id.clone(),
            strategy: self.strategy,
            ranked_ids: self.ranked_ids.clone(),
            parse_error: self.parse_error,
            raw_response_hash: self
                .raw_response
                .as_ref()
                .map(|r| hex::encode(Sha256::digest(r.as_bytes()))),
            error: self.error.clone(),
        }
    }
}

/// Serialized form of an outcome, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub qid: String,
    pub strategy: Strategy,
    pub ranked_ids: Vec<String>,
    pub parse_error: bool,
    pub raw_response_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_outcomes(path: &Path, outcomes: &[RetrievalOutcome]) -> Result<(), RetrievalError> {
    let io = |source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for o in outcomes {
        serde_json::to_writer(&mut w, &o.to_row()).expect("outcome row serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

const MARKER: &[u8] = b"final answer:";

fn rfind_ignore_ascii_case(hay: &str, needle: &[u8]) -> Option<usize> {
    let bytes = hay.as_bytes();
    if bytes.len() < needle.len() {
        return None;
    }
    (0..=bytes.len() - needle.len())
        .rev()
        .find(|&i| bytes[i..i + needle.len()].eq_ignore_ascii_case(needle))
}

/// The list after the last `Final Answer:` marker, or `None` when there is
/// no marker or no bracketed list after it.
pub fn find_final_answer(text: &str) -> Option<Vec<String>> {
    let at = rfind_ignore_ascii_case(text, MARKER)?;
    let tail = &text[at + MARKER.len()..];
    let open = tail.find('[')?;
    let close = open + tail[open..].find(']')?;
    let mut out: Vec<String> = Vec::new();
    for part in tail[open + 1..close].split(',') {
        let tok = part.trim().trim_matches(|c| c == '\'' || c == '"').trim();
        if tok.is_empty() || out.iter().any(|o| o == tok) {
            continue;
        }
        out.push(tok.to_string());
    }
    Some(out)
}

/// Id tokens from the last `Final Answer: [...]` in `text`; empty if none.
pub fn parse_final_answer(text: &str) -> Vec<String> {
    find_final_answer(text).unwrap_or_default()
}
