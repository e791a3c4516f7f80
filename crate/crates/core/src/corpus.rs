//! Corpus and query-set storage.
//!
//! A [`CorpusView`] is the ordered list of documents a retriever sees. Order
//! is file order unless a caller explicitly permutes it; positional
//! experiments depend on that. Views are immutable: every operation that
//! changes content returns a new view.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tokenizer::TokenizerHandle;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: document {id:?} has empty content")]
    EmptyContent { line: usize, id: String },
    #[error("query {qid:?}: gold set must be non-empty")]
    EmptyGold { qid: String },
    #[error("query {qid:?}: eval k must be >= 1")]
    InvalidK { qid: String },
    #[error("query {qid:?}: gold ids not in corpus: {missing:?}")]
    MissingGold { qid: String, missing: Vec<String> },
    #[error("unknown document id {0:?}")]
    UnknownDoc(String),
    #[error("variant for document {source_id:?} cannot replace document {slot:?}")]
    VariantMismatch { slot: String, source_id: String },
    #[error("duplicate variant id {variant:?} for document {source_id:?}")]
    DuplicateVariant { source_id: String, variant: String },
    #[error("compressed corpus is missing documents: {0:?}")]
    MissingCompression(Vec<String>),
    #[error("compressed corpus has more than one variant for document {0:?}")]
    AmbiguousCompression(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A raw corpus passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub content: String,
    pub token_count: usize,
}

/// One compression of a corpus passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedDocument {
    pub source_doc_id: String,
    /// Generator tag plus index, unique per source document.
    pub variant_id: String,
    pub text: String,
    pub token_count: usize,
    pub generator: String,
}

impl CompressedDocument {
    pub fn new(
        source_doc_id: &str,
        variant_id: &str,
        generator: &str,
        text: &str,
        tokenizer: &TokenizerHandle,
    ) -> Self {
        Self {
            source_doc_id: source_doc_id.to_string(),
            variant_id: variant_id.to_string(),
            text: text.to_string(),
            token_count: tokenizer.count(text),
            generator: generator.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Raw,
    Compressed,
    TitleOnly,
}

/// A document as it appears in a view: the text is whatever the view's
/// mode dictates (raw content, a compression, or the title).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewDocument {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusView {
    documents: Vec<ViewDocument>,
    index: HashMap<String, usize>,
    mode: ViewMode,
    /// doc_id -> variant_id for documents whose text was substituted.
    substitutions: BTreeMap<String, String>,
}

impl CorpusView {
    /// Build a raw view. Fails on duplicate ids.
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let documents = docs
            .into_iter()
            .map(|d| ViewDocument {
                doc_id: d.doc_id,
                title: d.title,
                text: d.content,
                token_count: d.token_count,
            })
            .collect();
        Self::build(documents, ViewMode::Raw, BTreeMap::new())
    }

    fn build(
        documents: Vec<ViewDocument>,
        mode: ViewMode,
        substitutions: BTreeMap<String, String>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if index.insert(d.doc_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(d.doc_id.clone()));
            }
        }
        Ok(Self {
            documents,
            index,
            mode,
            substitutions,
        })
    }

    /// The compressed corpus: every document's text replaced by its single
    /// compression. Extra variants for unknown documents are rejected.
    pub fn compressed(&self, variants: &[CompressedDocument]) -> Result<Self, CorpusError> {
        let mut by_source: HashMap<&str, &CompressedDocument> = HashMap::new();
        for v in variants {
            if !self.index.contains_key(&v.source_doc_id) {
                return Err(CorpusError::UnknownDoc(v.source_doc_id.clone()));
            }
            if by_source.insert(v.source_doc_id.as_str(), v).is_some() {
                return Err(CorpusError::AmbiguousCompression(v.source_doc_id.clone()));
            }
        }
        let missing: Vec<String> = self
            .documents
            .iter()
            .filter(|d| !by_source.contains_key(d.doc_id.as_str()))
            .map(|d| d.doc_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(CorpusError::MissingCompression(missing));
        }
        let mut substitutions = BTreeMap::new();
        let documents = self
            .documents
            .iter()
            .map(|d| {
                let v = by_source[d.doc_id.as_str()];
                substitutions.insert(d.doc_id.clone(), v.variant_id.clone());
                ViewDocument {
                    doc_id: d.doc_id.clone(),
                    title: d.title.clone(),
                    text: v.text.clone(),
                    token_count: v.token_count,
                }
            })
            .collect();
        Self::build(documents, ViewMode::Compressed, substitutions)
    }

    /// Titles presented as content. Documents without a title keep an empty
    /// text.
    pub fn title_only(&self, tokenizer: &TokenizerHandle) -> Self {
        let documents: Vec<ViewDocument> = self
            .documents
            .iter()
            .map(|d| {
                if d.title.is_empty() {
                    log::warn!("document {:?} has no title; title-only text is empty", d.doc_id);
                }
                ViewDocument {
                    doc_id: d.doc_id.clone(),
                    title: d.title.clone(),
                    text: d.title.clone(),
                    token_count: tokenizer.count(&d.title),
                }
            })
            .collect();
        Self {
            documents,
            index: self.index.clone(),
            mode: ViewMode::TitleOnly,
            substitutions: BTreeMap::new(),
        }
    }

    /// A copy of this view with `doc_id`'s text taken from `variant`.
    pub fn substitute(&self, doc_id: &str, variant: &CompressedDocument) -> Result<Self, CorpusError> {
        let &slot = self
            .index
            .get(doc_id)
            .ok_or_else(|| CorpusError::UnknownDoc(doc_id.to_string()))?;
        if variant.source_doc_id != doc_id {
            return Err(CorpusError::VariantMismatch {
                slot: doc_id.to_string(),
                source_id: variant.source_doc_id.clone(),
            });
        }
        let mut out = self.clone();
        let d = &mut out.documents[slot];
        d.text = variant.text.clone();
        d.token_count = variant.token_count;
        out.substitutions.insert(doc_id.to_string(), variant.variant_id.clone());
        Ok(out)
    }

    /// Reorder by a permutation of current positions.
    pub(crate) fn permuted(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.documents.len());
        let documents: Vec<ViewDocument> = order.iter().map(|&i| self.documents[i].clone()).collect();
        let index = documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i))
            .collect();
        Self {
            documents,
            index,
            mode: self.mode,
            substitutions: self.substitutions.clone(),
        }
    }

    /// Append documents not already present (by id). Used to bring few-shot
    /// answer documents into the corpus.
    pub fn with_appended(&self, extra: &[ViewDocument]) -> Self {
        let mut out = self.clone();
        for d in extra {
            if out.index.contains_key(&d.doc_id) {
                continue;
            }
            out.index.insert(d.doc_id.clone(), out.documents.len());
            out.documents.push(d.clone());
        }
        out
    }

    pub fn documents(&self) -> &[ViewDocument] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn mode(&self) -> ViewMode {
        self.mode
    }

    pub fn substitutions(&self) -> &BTreeMap<String, String> {
        &self.substitutions
    }

    pub fn get(&self, doc_id: &str) -> Option<&ViewDocument> {
        self.index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.index.contains_key(doc_id)
    }

    /// Write the view in corpus JSONL form (text written as `content`).
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        for d in &self.documents {
            let row = CorpusRow {
                id: d.doc_id.clone(),
                title: Some(d.title.clone()),
                content: d.text.clone(),
            };
            serde_json::to_writer(&mut w, &row).expect("corpus row serializes");
            w.write_all(b"\n").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRow {
    id: String,
    #[serde(default)]
    title: Option<String>,
    content: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRow {
    qid: String,
    text: String,
    gold_ids: Vec<String>,
    #[serde(default)]
    k: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompressedRow {
    source_id: String,
    variant_id: String,
    generator: String,
    text: String,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

fn parse_row<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T, CorpusError> {
    serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

/// Parse corpus JSONL text into documents. Blank lines are skipped; line
/// numbers in errors are 1-based file lines.
pub fn parse_documents(lines: &[(usize, String)], tokenizer: &TokenizerHandle) -> Result<Vec<Document>, CorpusError> {
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(lines.len());
    for (line_no, line) in lines {
        let row: CorpusRow = parse_row(*line_no, line)?;
        if row.content.is_empty() {
            return Err(CorpusError::EmptyContent {
                line: *line_no,
                id: row.id,
            });
        }
        if !seen.insert(row.id.clone()) {
            return Err(CorpusError::DuplicateId(row.id));
        }
        docs.push(Document {
            token_count: tokenizer.count(&row.content),
            doc_id: row.id,
            title: row.title.unwrap_or_default(),
            content: row.content,
        });
    }
    Ok(docs)
}

pub fn load_documents(path: &Path, tokenizer: &TokenizerHandle) -> Result<Vec<Document>, CorpusError> {
    let lines = read_lines(path)?;
    let docs = parse_documents(&lines, tokenizer)?;
    if docs.is_empty() {
        log::warn!("{}: corpus is empty", path.display());
    }
    Ok(docs)
}

/// Load a corpus JSONL file as a raw view.
pub fn load_corpus(path: &Path, tokenizer: &TokenizerHandle) -> Result<CorpusView, CorpusError> {
    CorpusView::from_documents(load_documents(path, tokenizer)?)
}

/// Load compressed-corpus JSONL. When `raw` is given, every source id must
/// exist in it.
pub fn load_compressed(
    path: &Path,
    tokenizer: &TokenizerHandle,
    raw: Option<&CorpusView>,
) -> Result<Vec<CompressedDocument>, CorpusError> {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let row: CompressedRow = parse_row(line_no, &line)?;
        if let Some(view) = raw {
            if !view.contains(&row.source_id) {
                return Err(CorpusError::UnknownDoc(row.source_id));
            }
        }
        if !seen.insert((row.source_id.clone(), row.variant_id.clone())) {
            return Err(CorpusError::DuplicateVariant {
                source_id: row.source_id,
                variant: row.variant_id,
            });
        }
        out.push(CompressedDocument::new(
            &row.source_id,
            &row.variant_id,
            &row.generator,
            &row.text,
            tokenizer,
        ));
    }
    Ok(out)
}

pub fn write_compressed(path: &Path, variants: &[CompressedDocument]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for v in variants {
        let row = CompressedRow {
            source_id: v.source_doc_id.clone(),
            variant_id: v.variant_id.clone(),
            generator: v.generator.clone(),
            text: v.text.clone(),
        };
        serde_json::to_writer(&mut w, &row).expect("compressed row serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// A query with its relevant documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    /// Distinct gold ids in file order.
    pub gold_doc_ids: Vec<String>,
    pub eval_k: usize,
}

impl QueryRecord {
    pub fn is_gold(&self, doc_id: &str) -> bool {
        self.gold_doc_ids.iter().any(|g| g == doc_id)
    }
}

/// Parse query JSONL lines, validating gold ids against `corpus`.
pub fn parse_queries(lines: &[(usize, String)], corpus: &CorpusView) -> Result<Vec<QueryRecord>, CorpusError> {
    let mut out = Vec::with_capacity(lines.len());
    for (line_no, line) in lines {
        let row: QueryRow = parse_row(*line_no, line)?;
        if row.gold_ids.is_empty() {
            return Err(CorpusError::EmptyGold { qid: row.qid });
        }
        let eval_k = match row.k {
            None => 1,
            Some(k) if k >= 1 => k as usize,
            Some(_) => return Err(CorpusError::InvalidK { qid: row.qid }),
        };
        let mut gold = Vec::new();
        for g in row.gold_ids {
            if !gold.contains(&g) {
                gold.push(g);
            }
        }
        let missing: Vec<String> = gold.iter().filter(|g| !corpus.contains(g)).cloned().collect();
        if !missing.is_empty() {
            return Err(CorpusError::MissingGold { qid: row.qid, missing });
        }
        out.push(QueryRecord {
            query_id: row.qid,
            text: row.text,
            gold_doc_ids: gold,
            eval_k,
        });
    }
    Ok(out)
}

pub fn load_queries(path: &Path, corpus: &CorpusView) -> Result<Vec<QueryRecord>, CorpusError> {
    parse_queries(&read_lines(path)?, corpus)
}

pub fn write_queries(path: &Path, queries: &[QueryRecord]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for q in queries {
        let row = QueryRow {
            qid: q.query_id.clone(),
            text: q.text.clone(),
            gold_ids: q.gold_doc_ids.clone(),
            k: Some(q.eval_k as i64),
        };
        serde_json::to_writer(&mut buf, &row).expect("query row serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub avg_token_count: f64,
}

pub fn corpus_stats(view: &CorpusView) -> CorpusStats {
    let n = view.len();
    let total: usize = view.documents().iter().map(|d| d.token_count).sum();
    CorpusStats {
        n_docs: n,
        avg_token_count: if n == 0 { 0.0 } else { total as f64 / n as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(src: &[&str]) -> Vec<(usize, String)> {
        src.iter().enumerate().map(|(i, s)| (i + 1, s.to_string())).collect()
    }

    fn view(src: &[&str]) -> CorpusView {
        let docs = parse_documents(&lines(src), &TokenizerHandle::builtin()).unwrap();
        CorpusView::from_documents(docs).unwrap()
    }

    fn toy(n: usize) -> CorpusView {
        let rows: Vec<String> = (0..n)
            .map(|i| format!(r#"{{"id":"{i}","title":"T{i}","content":"doc {i} body"}}"#))
            .collect();
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        view(&refs)
    }

    #[test]
    fn one_line_corpus() {
        let v = view(&[r#"{"id":"0","title":"T","content":"a b c"}"#]);
        assert_eq!(v.len(), 1);
        assert_eq!(v.documents()[0].token_count, 3);
        assert_eq!(v.mode(), ViewMode::Raw);
    }

    #[test]
    fn missing_title_defaults_empty() {
        let v = view(&[r#"{"id":"0","content":"x"}"#]);
        assert_eq!(v.documents()[0].title, "");
    }

    #[test]
    fn duplicate_id_is_named() {
        let err = parse_documents(
            &lines(&[r#"{"id":"7","content":"a"}"#, r#"{"id":"7","content":"b"}"#]),
            &TokenizerHandle::builtin(),
        )
        .unwrap_err();
        assert!(matches!(&err, CorpusError::DuplicateId(id) if id == "7"));
        assert!(err.to_string().contains("\"7\""));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_documents(
            &lines(&[r#"{"id":"1","content":"a"}"#, "{not json"]),
            &TokenizerHandle::builtin(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_content_rejected() {
        let err = parse_documents(&lines(&[r#"{"id":"1","content":""}"#]), &TokenizerHandle::builtin()).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyContent { line: 1, .. }));
    }

    #[test]
    fn empty_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "").unwrap();
        let v = load_corpus(&p, &TokenizerHandle::builtin()).unwrap();
        assert!(v.is_empty());
        assert_eq!(
            corpus_stats(&v),
            CorpusStats {
                n_docs: 0,
                avg_token_count: 0.0
            }
        );
    }

    #[test]
    fn queries_default_k_and_validate_gold() {
        let v = toy(3);
        let q = parse_queries(&lines(&[r#"{"qid":"q1","text":"x","gold_ids":["0"]}"#]), &v).unwrap();
        assert_eq!(q[0].eval_k, 1);
        assert_eq!(q[0].gold_doc_ids, vec!["0"]);

        let err = parse_queries(&lines(&[r#"{"qid":"q1","text":"x","gold_ids":[]}"#]), &v).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyGold { .. }));

        let err = parse_queries(&lines(&[r#"{"qid":"q1","text":"x","gold_ids":["0","99"]}"#]), &v).unwrap_err();
        match err {
            CorpusError::MissingGold { missing, .. } => assert_eq!(missing, vec!["99"]),
            other => panic!("unexpected {other:?}"),
        }

        let err = parse_queries(&lines(&[r#"{"qid":"q1","text":"x","gold_ids":["0"],"k":0}"#]), &v).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidK { .. }));
    }

    #[test]
    fn stats_average() {
        let docs = vec![
            Document {
                doc_id: "a".into(),
                title: String::new(),
                content: "x".into(),
                token_count: 10,
            },
            Document {
                doc_id: "b".into(),
                title: String::new(),
                content: "y".into(),
                token_count: 20,
            },
        ];
        let v = CorpusView::from_documents(docs).unwrap();
        assert_eq!(corpus_stats(&v).avg_token_count, 15.0);
    }

    #[test]
    fn substitute_is_pure_and_checked() {
        let tok = TokenizerHandle::builtin();
        let v = toy(6);
        let variant = CompressedDocument::new("3", "g#0", "g", "short", &tok);
        let s = v.substitute("3", &variant).unwrap();
        assert_eq!(s.get("3").unwrap().text, "short");
        assert_eq!(s.get("3").unwrap().token_count, 1);
        assert_eq!(s.get("5").unwrap(), v.get("5").unwrap());
        assert_eq!(v.get("3").unwrap().text, "doc 3 body");
        assert_eq!(s.substitutions().get("3").map(String::as_str), Some("g#0"));

        let wrong = CompressedDocument::new("4", "g#0", "g", "short", &tok);
        assert!(matches!(
            v.substitute("3", &wrong),
            Err(CorpusError::VariantMismatch { .. })
        ));
        assert!(matches!(v.substitute("nope", &wrong), Err(CorpusError::UnknownDoc(_))));
    }

    #[test]
    fn compressed_view_requires_one_variant_per_doc() {
        let tok = TokenizerHandle::builtin();
        let v = toy(2);
        let a = CompressedDocument::new("0", "g#0", "g", "zero", &tok);
        let b = CompressedDocument::new("1", "g#0", "g", "one", &tok);
        let c = v.compressed(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.mode(), ViewMode::Compressed);
        assert_eq!(c.get("1").unwrap().text, "one");

        assert!(matches!(
            v.compressed(std::slice::from_ref(&a)),
            Err(CorpusError::MissingCompression(m)) if m == vec!["1".to_string()]
        ));
        assert!(matches!(
            v.compressed(&[a.clone(), a, b]),
            Err(CorpusError::AmbiguousCompression(_))
        ));
    }

    #[test]
    fn title_only_uses_titles() {
        let v = view(&[
            r#"{"id":"0","title":"Alpha beta","content":"long body text"}"#,
            r#"{"id":"1","title":"","content":"untitled"}"#,
        ]);
        let t = v.title_only(&TokenizerHandle::builtin());
        assert_eq!(t.documents()[0].text, "Alpha beta");
        assert_eq!(t.documents()[0].token_count, 2);
        assert_eq!(t.documents()[1].text, "");
        assert_eq!(t.documents()[1].token_count, 0);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let v = view(&[
            r#"{"id":"b","title":"B","content":"second, doc"}"#,
            r#"{"id":"a","title":"","content":"first\ndoc"}"#,
        ]);
        v.write_jsonl(&p).unwrap();
        let back = load_corpus(&p, &TokenizerHandle::builtin()).unwrap();
        assert_eq!(back, v);
    }
}
