//! Okapi BM25.
//!
//! score(q, d) = Σ_t idf(t) · tf · (k1 + 1) / (tf + k1 · (1 − b + b · dl / avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//!
//! Terms are lowercased builtin tokens. Query terms are summed once per
//! occurrence in the query.

use std::collections::HashMap;

use super::{RetrievalError, RetrievalOutcome, Strategy};
use crate::corpus::CorpusView;
use crate::tokenizer::tokenize;

pub const DEFAULT_K1: f64 = 1.5;
pub const DEFAULT_B: f64 = 0.75;

pub(crate) fn terms(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_len: Vec<usize>,
    avgdl: f64,
    /// term -> (doc index, tf), sorted by doc index
    postings: HashMap<String, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id).map(|i| self.doc_len[i])
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, doc_id: &str, term: &str) -> u32 {
        let Some(i) = self.doc_ids.iter().position(|d| d == doc_id) else {
            return 0;
        };
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&i, |&(d, _)| d).ok().map(|j| p[j].1))
            .unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of every document, in view order.
    pub fn score_all(&self, query_text: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.n_docs()];
        for term in terms(query_text) {
            let Some(postings) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(d, tf) in postings {
                let tf = tf as f64;
                let norm = 1.0 - self.b + self.b * self.doc_len[d] as f64 / self.avgdl;
                scores[d] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        scores
    }
}

pub fn bm25_build(view: &CorpusView, k1: f64, b: f64) -> Result<Bm25Index, RetrievalError> {
    if view.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
    let mut doc_len = Vec::with_capacity(view.len());
    let mut doc_ids = Vec::with_capacity(view.len());
    for (i, d) in view.documents().iter().enumerate() {
        let ts = terms(&d.text);
        doc_len.push(ts.len());
        doc_ids.push(d.doc_id.clone());
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in ts {
            *tf.entry(t).or_default() += 1;
        }
        for (t, n) in tf {
            postings.entry(t).or_default().push((i, n));
        }
    }
    let avgdl = doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64;
    Ok(Bm25Index {
        k1,
        b,
        doc_ids,
        doc_len,
        avgdl,
        postings,
    })
}

/// Rank by BM25, best first, ties by ascending doc id. A query without any
/// indexed term retrieves nothing.
pub fn bm25_retrieve(
    index: &Bm25Index,
    query_id: &str,
    query_text: &str,
    k: usize,
) -> Result<RetrievalOutcome, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if !terms(query_text).iter().any(|t| index.postings.contains_key(t)) {
        return Ok(RetrievalOutcome::new(query_id, Strategy::Bm25, Vec::new()));
    }
    let scores = index.score_all(query_text);
    let mut order: Vec<usize> = (0..index.n_docs()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| index.doc_ids[a].cmp(&index.doc_ids[b]))
    });
    let ranked = order.into_iter().take(k).map(|i| index.doc_ids[i].clone()).collect();
    Ok(RetrievalOutcome::new(query_id, Strategy::Bm25, ranked))
}
