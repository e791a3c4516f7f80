//! Embedding retrieval: cosine similarity between the query vector and each
//! document vector, computed exhaustively.

use super::{RetrievalError, RetrievalOutcome, Strategy};
use crate::corpus::CorpusView;
use crate::gateway::Gateway;

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

pub fn dense_retrieve(
    gateway: &Gateway,
    embed_endpoint: &str,
    view: &CorpusView,
    query_id: &str,
    query_text: &str,
    k: usize,
) -> Result<RetrievalOutcome, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if view.is_empty() {
        return Ok(RetrievalOutcome::new(query_id, Strategy::Dense, Vec::new()));
    }
    let texts: Vec<String> = view.documents().iter().map(|d| d.text.clone()).collect();
    let doc_vecs = gateway.embed(embed_endpoint, &texts)?;
    let query_vec = gateway
        .embed(embed_endpoint, &[query_text.to_string()])?
        .pop()
        .expect("one vector per text");
    if query_vec.len() != doc_vecs[0].len() {
        return Err(
            crate::gateway::GatewayError::Protocol("query and document embeddings differ in dimension".into()).into(),
        );
    }

    let docs = view.documents();
    let scores: Vec<f64> = doc_vecs
        .iter()
        .zip(docs)
        .map(|(v, d)| {
            cosine_similarity(&query_vec, v).unwrap_or_else(|| {
                log::warn!("zero-norm embedding for query {query_id:?} or document {:?}", d.doc_id);
                f64::NEG_INFINITY
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| docs[a].doc_id.cmp(&docs[b].doc_id))
    });
    let ranked = order.into_iter().take(k).map(|i| docs[i].doc_id.clone()).collect();
    Ok(RetrievalOutcome::new(query_id, Strategy::Dense, ranked))
}
