//! Corpus-in-context retrieval with a long-context chat model.

use super::{find_final_answer, RetrievalError, RetrievalOutcome, Strategy};
use crate::corpus::{CorpusView, QueryRecord};
use crate::gateway::Gateway;
use crate::prompt::{build_retrieval_prompt, FewShotExample, PlacementSpec, PromptLayout, PromptTemplateSet};
use crate::tokenizer::TokenizerHandle;

/// Everything fixed across the queries of one LCLM run.
#[derive(Clone, Copy)]
pub struct LclmRetriever<'a> {
    pub gateway: &'a Gateway,
    pub endpoint: &'a str,
    pub templates: &'a PromptTemplateSet,
    pub tokenizer: &'a TokenizerHandle,
}

impl<'a> LclmRetriever<'a> {
    pub fn new(
        gateway: &'a Gateway,
        endpoint: &'a str,
        templates: &'a PromptTemplateSet,
        tokenizer: &'a TokenizerHandle,
    ) -> Self {
        Self {
            gateway,
            endpoint,
            templates,
            tokenizer,
        }
    }

    pub fn retrieve(
        &self,
        view: &CorpusView,
        query: &QueryRecord,
        shots: &[FewShotExample],
        placement: Option<&PlacementSpec>,
    ) -> Result<RetrievalOutcome, RetrievalError> {
        let layout = build_retrieval_prompt(self.templates, view, query, shots, placement, self.tokenizer)?;
        let response = self.gateway.complete(self.endpoint, &layout.text)?;
        Ok(outcome_from_response(&query.query_id, &layout, &response.text))
    }
}

/// Map a model reply onto original doc ids. Tokens that are not a rendered
/// index are dropped with a warning.
pub(crate) fn outcome_from_response(query_id: &str, layout: &PromptLayout, text: &str) -> RetrievalOutcome {
    let mut outcome = RetrievalOutcome::new(query_id, Strategy::Lclm, Vec::new());
    outcome.raw_response = Some(text.to_string());
    let Some(tokens) = find_final_answer(text) else {
        log::warn!("query {query_id:?}: no Final Answer list in response");
        outcome.parse_error = true;
        return outcome;
    };
    for tok in tokens {
        let doc = tok.parse::<usize>().ok().and_then(|i| layout.doc_at(i));
        match doc {
            Some(id) => {
                if !outcome.ranked_ids.iter().any(|r| r == id) {
                    outcome.ranked_ids.push(id.to_string());
                }
            }
            None => log::warn!("query {query_id:?}: dropping answer token {tok:?}"),
        }
    }
    outcome
}

#[allow(clippy::too_many_arguments)]
pub fn lclm_retrieve(
    gateway: &Gateway,
    endpoint: &str,
    templates: &PromptTemplateSet,
    tokenizer: &TokenizerHandle,
    view: &CorpusView,
    query: &QueryRecord,
    shots: &[FewShotExample],
    placement: Option<&PlacementSpec>,
) -> Result<RetrievalOutcome, RetrievalError> {
    LclmRetriever::new(gateway, endpoint, templates, tokenizer).retrieve(view, query, shots, placement)
}
