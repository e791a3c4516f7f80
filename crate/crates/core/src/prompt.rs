//! Corpus-in-context prompt rendering.
//!
//! A retrieval prompt is `instruction ∥ corpus ∥ few-shot blocks ∥ query
//! block`, sections separated by a blank line. Documents are rendered with
//! sequential integer ids; [`PromptLayout`] keeps the mapping back to the
//! original document ids so answers can be scored against gold ids.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusView, QueryRecord};
use crate::tokenizer::TokenizerHandle;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("document {0:?} is not in the corpus view")]
    UnknownDoc(String),
    #[error("placement fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error("passage to compress is empty")]
    EmptyPassage,
    #[error("template {name}: {problem}")]
    InvalidTemplate { name: &'static str, problem: String },
    #[error("template overrides {path}: {message}")]
    Overrides { path: String, message: String },
}

pub const DEFAULT_INSTRUCTION: &str = "You will be given a list of documents. You need to read carefully and understand all of them. Then you will be given a query, and your goal is to find all documents from the list that can help answer the query. Print out the ID and TITLE of each document.

Your final answer should be a list of IDs, in the following format:
Final Answer: [id1, id2, ...]
If there is only one ID, it should be in the format:
Final Answer: [id1]

If there is no perfect answer output the closest one. Do not give an empty final answer.";

pub const DEFAULT_DOC_LINE: &str = "ID: {id} | TITLE: {title} | CONTENT: {content} | END ID: {id}";

pub const DEFAULT_QUERY_BLOCK: &str = "Which document is most relevant to answer the query? Print out the TITLE and ID of the document. Then format the IDs into a list.
If there is no perfect answer output the closest one. Do not give an empty final answer.
query: {query}
The following documents can help answer the query:";

pub const DEFAULT_FEW_SHOT_BLOCK: &str =
    "====== Example {n} ======\n{query_block}\n{answer_lines}\nFinal Answer: {answer_ids}";

pub const DEFAULT_FINAL_BLOCK: &str = "====== Now let's start! ======\n{query_block}";

pub const DEFAULT_ANSWER_LINE: &str = "TITLE: {title} | ID: {id}";

pub const DEFAULT_COMPRESSION_INSTRUCTION: &str = "Summarize the following content: {passage}";

/// Every template used to render prompts. `{name}` placeholders are filled
/// in a single pass, so braces inside substituted values stay literal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplateSet {
    pub instruction: String,
    /// Placeholders: `{id}` (twice, leading and terminal), `{title}`, `{content}`.
    pub doc_line_format: String,
    /// Placeholders: `{n}`, `{query_block}`, `{answer_lines}`, `{answer_ids}`.
    pub few_shot_block_format: String,
    /// Placeholder: `{query}`.
    pub query_block_format: String,
    /// Placeholder: `{query_block}`.
    pub final_block_format: String,
    /// Placeholders: `{title}`, `{id}`.
    pub answer_line_format: String,
    /// Placeholder: `{passage}`.
    pub compression_instruction: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            doc_line_format: DEFAULT_DOC_LINE.to_string(),
            few_shot_block_format: DEFAULT_FEW_SHOT_BLOCK.to_string(),
            query_block_format: DEFAULT_QUERY_BLOCK.to_string(),
            final_block_format: DEFAULT_FINAL_BLOCK.to_string(),
            answer_line_format: DEFAULT_ANSWER_LINE.to_string(),
            compression_instruction: DEFAULT_COMPRESSION_INSTRUCTION.to_string(),
        }
    }
}

impl PromptTemplateSet {
    pub fn validate(&self) -> Result<(), PromptError> {
        let need = |name: &'static str, tpl: &str, ph: &str, times: usize| {
            if tpl.matches(ph).count() < times {
                Err(PromptError::InvalidTemplate {
                    name,
                    problem: format!("needs {ph} at least {times} time(s)"),
                })
            } else {
                Ok(())
            }
        };
        need("doc_line_format", &self.doc_line_format, "{id}", 2)?;
        need("doc_line_format", &self.doc_line_format, "{title}", 1)?;
        need("doc_line_format", &self.doc_line_format, "{content}", 1)?;
        need("query_block_format", &self.query_block_format, "{query}", 1)?;
        need("few_shot_block_format", &self.few_shot_block_format, "{answer_ids}", 1)?;
        need("final_block_format", &self.final_block_format, "{query_block}", 1)?;
        need("compression_instruction", &self.compression_instruction, "{passage}", 1)?;
        Ok(())
    }

    /// Defaults with any keys present in the JSON file replaced.
    pub fn load_overrides(path: &Path) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Overrides {
            path: path.display().to_string(),
            message,
        };
        let raw = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let set: PromptTemplateSet = serde_json::from_str(&raw).map_err(|e| err(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

/// Single-pass `{key}` substitution. Unknown placeholders are left as is.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Replace each line break (`\r\n`, `\n`, `\r`) with one space.
pub fn single_line(text: &str) -> String {
    text.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

pub fn render_doc_line(templates: &PromptTemplateSet, title: &str, content: &str, index: usize) -> String {
    let id = index.to_string();
    fill(
        &templates.doc_line_format,
        &[
            ("id", &id),
            ("title", &single_line(title)),
            ("content", &single_line(content)),
        ],
    )
}

pub fn build_compression_prompt(templates: &PromptTemplateSet, passage: &str) -> Result<String, PromptError> {
    if passage.trim().is_empty() {
        return Err(PromptError::EmptyPassage);
    }
    Ok(fill(&templates.compression_instruction, &[("passage", passage)]))
}

/// An in-context example whose answer documents are part of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub query_text: String,
    pub answer_doc_ids: Vec<String>,
}

impl FewShotExample {
    pub fn from_query(q: &QueryRecord) -> Self {
        Self {
            query_text: q.text.clone(),
            answer_doc_ids: q.gold_doc_ids.clone(),
        }
    }
}

/// Documents to move to a relative position in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub target_ids: Vec<String>,
    /// 0.0 puts the block first, 1.0 last.
    pub fraction: f64,
}

/// Move `target_ids` into one contiguous block starting at
/// `round(fraction * (n - |targets|))`. Relative order within targets and
/// within the remaining documents is preserved.
pub fn place_at_fraction(view: &CorpusView, target_ids: &[String], fraction: f64) -> Result<CorpusView, PromptError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(PromptError::InvalidFraction(fraction));
    }
    let mut targets = HashSet::new();
    for id in target_ids {
        if !view.contains(id) {
            return Err(PromptError::UnknownDoc(id.clone()));
        }
        targets.insert(id.as_str());
    }
    let (block, rest): (Vec<usize>, Vec<usize>) =
        (0..view.len()).partition(|&i| targets.contains(view.documents()[i].doc_id.as_str()));
    let start = (fraction * rest.len() as f64).round() as usize;
    let start = start.min(rest.len());

    let mut order = Vec::with_capacity(view.len());
    order.extend_from_slice(&rest[..start]);
    order.extend_from_slice(&block);
    order.extend_from_slice(&rest[start..]);
    Ok(view.permuted(&order))
}

/// A rendered retrieval prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptLayout {
    pub text: String,
    /// Original doc id -> rendered index.
    pub doc_positions: BTreeMap<String, usize>,
    /// Rendered index -> original doc id.
    pub rendered_ids: Vec<String>,
    pub total_token_estimate: usize,
}

impl PromptLayout {
    pub fn doc_at(&self, rendered_index: usize) -> Option<&str> {
        self.rendered_ids.get(rendered_index).map(String::as_str)
    }
}

fn python_str_list(ids: &[String]) -> String {
    let quoted: Vec<String> = ids.iter().map(|s| format!("'{s}'")).collect();
    format!("[{}]", quoted.join(", "))
}

pub fn build_retrieval_prompt(
    templates: &PromptTemplateSet,
    view: &CorpusView,
    query: &QueryRecord,
    shots: &[FewShotExample],
    placement: Option<&PlacementSpec>,
    tokenizer: &TokenizerHandle,
) -> Result<PromptLayout, PromptError> {
    for shot in shots {
        for id in &shot.answer_doc_ids {
            if !view.contains(id) {
                return Err(PromptError::UnknownDoc(id.clone()));
            }
        }
    }
    let placed;
    let view = match placement {
        Some(p) => {
            placed = place_at_fraction(view, &p.target_ids, p.fraction)?;
            &placed
        }
        None => view,
    };

    let mut doc_positions = BTreeMap::new();
    let mut rendered_ids = Vec::with_capacity(view.len());
    let mut corpus_lines = Vec::with_capacity(view.len());
    for (i, d) in view.documents().iter().enumerate() {
        corpus_lines.push(render_doc_line(templates, &d.title, &d.text, i));
        doc_positions.insert(d.doc_id.clone(), i);
        rendered_ids.push(d.doc_id.clone());
    }

    let mut sections = vec![templates.instruction.clone(), corpus_lines.join("\n")];
    for (n, shot) in shots.iter().enumerate() {
        let mut lines = Vec::new();
        let mut ids = Vec::new();
        for doc_id in &shot.answer_doc_ids {
            let doc = view.get(doc_id).expect("checked above");
            let idx = doc_positions[doc_id].to_string();
            lines.push(fill(
                &templates.answer_line_format,
                &[("title", &single_line(&doc.title)), ("id", &idx)],
            ));
            ids.push(idx);
        }
        let qb = fill(
            &templates.query_block_format,
            &[("query", &single_line(&shot.query_text))],
        );
        sections.push(fill(
            &templates.few_shot_block_format,
            &[
                ("n", &(n + 1).to_string()),
                ("query_block", &qb),
                ("answer_lines", &lines.join("\n")),
                ("answer_ids", &python_str_list(&ids)),
            ],
        ));
    }
    let qb = fill(&templates.query_block_format, &[("query", &single_line(&query.text))]);
    sections.push(fill(&templates.final_block_format, &[("query_block", &qb)]));

    let text = sections.join("\n\n");
    let total_token_estimate = tokenizer.count(&text);
    Ok(PromptLayout {
        text,
        doc_positions,
        rendered_ids,
        total_token_estimate,
    })
}
