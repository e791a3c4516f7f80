//! Preference data from retrieval outcomes.
//!
//! Each gold (document, query) pair forms a group. Several generator
//! endpoints compress the document; each variant is swapped into the
//! otherwise-raw corpus and retrieved with the LCLM. The shortest variant
//! that is still retrieved is chosen, the rest are rejected, and chosen is
//! paired with every strictly longer rejected variant.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CompressedDocument, CorpusError, CorpusView, QueryRecord};
use crate::gateway::Gateway;
use crate::prompt::{build_compression_prompt, FewShotExample, PromptError, PromptTemplateSet};
use crate::retrieval::lclm_retrieve;
use crate::seed::rng_for;
use crate::tokenizer::TokenizerHandle;

pub const DEFAULT_SPLIT: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("at least 2 generators are required, got {0}")]
    TooFewGenerators(usize),
    #[error("document {doc_id:?}: every generator failed ({detail})")]
    AllGeneratorsFailed { doc_id: String, detail: String },
    #[error("document {doc_id:?} is not gold for query {query_id:?}")]
    NotGold { doc_id: String, query_id: String },
    #[error("split fraction must be in [0, 1], got {0}")]
    InvalidSplit(f64),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ForgeError + '_ {
    move |source| ForgeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Compress one passage with every generator. Empty replies are dropped;
/// a failing generator is skipped unless all of them fail.
pub fn generate_variants(
    gateway: &Gateway,
    generators: &[String],
    doc_id: &str,
    passage: &str,
    templates: &PromptTemplateSet,
    tokenizer: &TokenizerHandle,
    allow_single_generator: bool,
) -> Result<Vec<CompressedDocument>, ForgeError> {
    if generators.len() < 2 {
        if !allow_single_generator || generators.is_empty() {
            return Err(ForgeError::TooFewGenerators(generators.len()));
        }
        log::warn!(
            "only {} generator configured; variants will lack diversity",
            generators.len()
        );
    }
    let prompt = build_compression_prompt(templates, passage)?;
    let mut out = Vec::new();
    let mut failures = Vec::new();
    for (idx, g) in generators.iter().enumerate() {
        match gateway.complete(g, &prompt) {
            Ok(r) if r.text.trim().is_empty() => {
                log::warn!("document {doc_id:?}: generator {g:?} returned an empty compression");
                failures.push(format!("{g}: empty"));
            }
            Ok(r) => {
                let text = r.text.trim();
                out.push(CompressedDocument::new(
                    doc_id,
                    &format!("{g}#{idx}"),
                    g,
                    text,
                    tokenizer,
                ));
            }
            Err(e) => {
                log::warn!("document {doc_id:?}: generator {g:?} failed: {e}");
                failures.push(format!("{g}: {e}"));
            }
        }
    }
    if out.is_empty() {
        return Err(ForgeError::AllGeneratorsFailed {
            doc_id: doc_id.to_string(),
            detail: failures.join("; "),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Chosen,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelReason {
    RetrievalFailed,
    LongerThanChosen,
    IsChosen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantLabel {
    pub variant_id: String,
    pub retrieval_success: bool,
    pub token_count: usize,
    pub label: Label,
    pub reason: LabelReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Label variants given their retrieval outcomes. Among successes the one
/// with the fewest tokens is chosen; ties go to the smaller text, then the
/// smaller variant id.
pub fn assign_labels(variants: &[CompressedDocument], success: &[bool]) -> Vec<VariantLabel> {
    assert_eq!(variants.len(), success.len(), "one success flag per variant");
    let chosen = variants
        .iter()
        .zip(success)
        .enumerate()
        .filter(|(_, (_, &ok))| ok)
        .min_by(|(_, (a, _)), (_, (b, _))| {
            (a.token_count, &a.text, &a.variant_id).cmp(&(b.token_count, &b.text, &b.variant_id))
        })
        .map(|(i, _)| i);
    variants
        .iter()
        .zip(success)
        .enumerate()
        .map(|(i, (v, &ok))| {
            let (label, reason) = if Some(i) == chosen {
                (Label::Chosen, LabelReason::IsChosen)
            } else if ok {
                (Label::Rejected, LabelReason::LongerThanChosen)
            } else {
                (Label::Rejected, LabelReason::RetrievalFailed)
            };
            VariantLabel {
                variant_id: v.variant_id.clone(),
                retrieval_success: ok,
                token_count: v.token_count,
                label,
                reason,
                error: None,
            }
        })
        .collect()
}

/// Retrieval context for labeling.
#[derive(Clone, Copy)]
pub struct LabelContext<'a> {
    pub gateway: &'a Gateway,
    pub lclm_endpoint: &'a str,
    pub templates: &'a PromptTemplateSet,
    pub tokenizer: &'a TokenizerHandle,
    pub shots: &'a [FewShotExample],
}

/// Swap each variant into `raw_view` in turn and check whether `doc_id`
/// is still retrieved within the query's top `eval_k`.
pub fn label_variants(
    ctx: &LabelContext<'_>,
    raw_view: &CorpusView,
    query: &QueryRecord,
    doc_id: &str,
    variants: &[CompressedDocument],
) -> Result<Vec<VariantLabel>, ForgeError> {
    if !query.is_gold(doc_id) {
        return Err(ForgeError::NotGold {
            doc_id: doc_id.to_string(),
            query_id: query.query_id.clone(),
        });
    }
    let mut success = Vec::with_capacity(variants.len());
    let mut errors = Vec::with_capacity(variants.len());
    for v in variants {
        let view = raw_view.substitute(doc_id, v)?;
        match lclm_retrieve(
            ctx.gateway,
            ctx.lclm_endpoint,
            ctx.templates,
            ctx.tokenizer,
            &view,
            query,
            ctx.shots,
            None,
        ) {
            Ok(o) => {
                success.push(o.top_k(query.eval_k).iter().any(|r| r == doc_id));
                errors.push(None);
            }
            Err(e) => {
                log::warn!("query {:?}, variant {:?}: {e}", query.query_id, v.variant_id);
                success.push(false);
                errors.push(Some(e.to_string()));
            }
        }
    }
    let mut labels = assign_labels(variants, &success);
    for (l, e) in labels.iter_mut().zip(errors) {
        l.error = e;
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Chosen against every strictly longer rejected variant.
    #[default]
    AllCombinations,
    /// Only the rejected variant with the largest gap.
    OnePerGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSource {
    pub doc_id: String,
    pub query_id: String,
    /// Generators of the chosen and rejected variants.
    pub generators: [String; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub prompt: String,
    pub chosen_text: String,
    pub rejected_text: String,
    pub chosen_tokens: usize,
    pub rejected_tokens: usize,
    pub length_gap: usize,
    pub source: PairSource,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupPairs {
    pub pairs: Vec<PreferencePair>,
    /// Candidate pairings examined (chosen × each rejected).
    pub examined: usize,
    pub skipped_length: usize,
    /// Positive-gap pairings dropped by [`PairMode::OnePerGroup`].
    pub skipped_mode: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn form_pairs(
    labels: &[VariantLabel],
    variants: &[CompressedDocument],
    raw_passage: &str,
    doc_id: &str,
    query_id: &str,
    templates: &PromptTemplateSet,
    mode: PairMode,
) -> Result<GroupPairs, ForgeError> {
    let by_id: HashMap<&str, &CompressedDocument> = variants.iter().map(|v| (v.variant_id.as_str(), v)).collect();
    let Some(chosen) = labels.iter().find(|l| l.label == Label::Chosen) else {
        return Ok(GroupPairs::default());
    };
    let cv = by_id[chosen.variant_id.as_str()];
    let prompt = build_compression_prompt(templates, raw_passage)?;
    let mut out = GroupPairs::default();
    let mut candidates = Vec::new();
    for l in labels.iter().filter(|l| l.label == Label::Rejected) {
        out.examined += 1;
        let rv = by_id[l.variant_id.as_str()];
        if rv.token_count <= cv.token_count || rv.text == cv.text {
            out.skipped_length += 1;
        } else {
            candidates.push(rv);
        }
    }
    if mode == PairMode::OnePerGroup && candidates.len() > 1 {
        let best = candidates
            .iter()
            .copied()
            .max_by(|a, b| {
                a.token_count
                    .cmp(&b.token_count)
                    .then_with(|| b.variant_id.cmp(&a.variant_id))
            })
            .expect("non-empty");
        out.skipped_mode = candidates.len() - 1;
        candidates = vec![best];
    }
    for rv in candidates {
        out.pairs.push(PreferencePair {
            pair_id: format!("{query_id}:{doc_id}:{}>{}", cv.variant_id, rv.variant_id),
            prompt: prompt.clone(),
            chosen_text: cv.text.clone(),
            rejected_text: rv.text.clone(),
            chosen_tokens: cv.token_count,
            rejected_tokens: rv.token_count,
            length_gap: rv.token_count - cv.token_count,
            source: PairSource {
                doc_id: doc_id.to_string(),
                query_id: query_id.to_string(),
                generators: [cv.generator.clone(), rv.generator.clone()],
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeCounts {
    pub groups: usize,
    pub groups_without_chosen: usize,
    pub documents_failed: usize,
    pub variants_generated: usize,
    pub successes: usize,
    pub failures: usize,
    pub candidates_examined: usize,
    pub pairs_emitted: usize,
    pub pairs_skipped_length: usize,
    pub pairs_skipped_mode: usize,
}

impl ForgeCounts {
    /// Every examined candidate is either emitted or skipped for a reason.
    pub fn balanced(&self) -> bool {
        self.pairs_emitted + self.pairs_skipped_length + self.pairs_skipped_mode == self.candidates_examined
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeManifest {
    pub counts: ForgeCounts,
    pub avg_chosen_tokens: f64,
    pub avg_rejected_tokens: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub split: f64,
    pub seed: u64,
}

#[derive(Serialize)]
struct PairMeta<'a> {
    doc_id: &'a str,
    qid: &'a str,
    chosen_tokens: usize,
    rejected_tokens: usize,
    length_gap: usize,
}

#[derive(Serialize)]
struct PairRow<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
    meta: PairMeta<'a>,
}

fn write_pairs(path: &Path, pairs: &[&PreferencePair]) -> Result<(), ForgeError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for p in pairs {
        let row = PairRow {
            prompt: &p.prompt,
            chosen: &p.chosen_text,
            rejected: &p.rejected_text,
            meta: PairMeta {
                doc_id: &p.source.doc_id,
                qid: &p.source.query_id,
                chosen_tokens: p.chosen_tokens,
                rejected_tokens: p.rejected_tokens,
                length_gap: p.length_gap,
            },
        };
        serde_json::to_writer(&mut w, &row).expect("pair row serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Shuffle with the `forge.split` stream of `seed`, split, and write
/// `train.jsonl`, `validation.jsonl` and `manifest.json` into `dir`.
pub fn export_pairs(
    pairs: &[PreferencePair],
    dir: &Path,
    split: f64,
    seed: u64,
    counts: ForgeCounts,
) -> Result<ForgeManifest, ForgeError> {
    if !(0.0..=1.0).contains(&split) {
        return Err(ForgeError::InvalidSplit(split));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut order: Vec<&PreferencePair> = pairs.iter().collect();
    order.shuffle(&mut rng_for(seed, "forge.split"));
    let n_train = (split * order.len() as f64).round() as usize;
    write_pairs(&dir.join("train.jsonl"), &order[..n_train])?;
    write_pairs(&dir.join("validation.jsonl"), &order[n_train..])?;

    let mean = |f: fn(&PreferencePair) -> usize| {
        if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().map(|p| f(p) as f64).sum::<f64>() / pairs.len() as f64
        }
    };
    let manifest = ForgeManifest {
        counts: ForgeCounts {
            pairs_emitted: pairs.len(),
            ..counts
        },
        avg_chosen_tokens: mean(|p| p.chosen_tokens),
        avg_rejected_tokens: mean(|p| p.rejected_tokens),
        n_train,
        n_validation: order.len() - n_train,
        split,
        seed,
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, body + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerProfile {
    Default,
    Mistral,
    SftOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub objective: String,
    pub lambda: Option<f64>,
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: u32,
}

impl TrainerConfig {
    pub fn for_profile(profile: TrainerProfile) -> Self {
        let base = TrainerConfig {
            objective: "orpo_length_regularized".into(),
            lambda: Some(2.5),
            learning_rate: 1e-6,
            epochs: 10,
            batch_size: 8,
        };
        match profile {
            TrainerProfile::Default => base,
            TrainerProfile::Mistral => TrainerConfig {
                learning_rate: 5e-6,
                ..base
            },
            TrainerProfile::SftOnly => TrainerConfig {
                objective: "sft".into(),
                lambda: None,
                learning_rate: 5e-6,
                ..base
            },
        }
    }
}

pub fn emit_trainer_config(path: &Path, profile: TrainerProfile) -> Result<TrainerConfig, ForgeError> {
    let cfg = TrainerConfig::for_profile(profile);
    let body = serde_json::to_string_pretty(&cfg).expect("trainer config serializes");
    std::fs::write(path, body + "\n").map_err(io_err(path))?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct ForgeOptions {
    pub generators: Vec<String>,
    pub lclm_endpoint: String,
    pub allow_single_generator: bool,
    pub pair_mode: PairMode,
    pub split: f64,
    pub seed: u64,
    /// In-context examples used while labeling.
    pub shots: Vec<FewShotExample>,
    pub trainer_profile: TrainerProfile,
}

impl ForgeOptions {
    pub fn new(generators: Vec<String>, lclm_endpoint: &str) -> Self {
        Self {
            generators,
            lclm_endpoint: lclm_endpoint.to_string(),
            allow_single_generator: false,
            pair_mode: PairMode::default(),
            split: DEFAULT_SPLIT,
            seed: crate::seed::DEFAULT_SEED,
            shots: Vec::new(),
            trainer_profile: TrainerProfile::Default,
        }
    }
}

/// One labeled group, as written to `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub qid: String,
    pub doc_id: String,
    pub labels: Vec<VariantLabel>,
}

#[derive(Debug, Clone)]
pub struct ForgeOutput {
    pub manifest: ForgeManifest,
    pub pairs: Vec<PreferencePair>,
    pub groups: Vec<GroupRecord>,
    /// Documents whose generation failed, with the error text.
    pub failed_documents: BTreeMap<String, String>,
}

/// Generate, label, pair and export. Network-bound stages fan out over
/// documents and groups; results are collected in input order so reruns
/// produce identical files.
pub fn run_forge(
    gateway: &Gateway,
    templates: &PromptTemplateSet,
    tokenizer: &TokenizerHandle,
    raw_view: &CorpusView,
    queries: &[QueryRecord],
    opts: &ForgeOptions,
    out_dir: &Path,
) -> Result<ForgeOutput, ForgeError> {
    if opts.generators.len() < 2 && !opts.allow_single_generator {
        return Err(ForgeError::TooFewGenerators(opts.generators.len()));
    }
    let mut group_keys: Vec<(&QueryRecord, &str)> = Vec::new();
    let mut doc_order: Vec<&str> = Vec::new();
    for q in queries {
        for d in &q.gold_doc_ids {
            if !raw_view.contains(d) {
                return Err(CorpusError::UnknownDoc(d.clone()).into());
            }
            group_keys.push((q, d.as_str()));
            if !doc_order.contains(&d.as_str()) {
                doc_order.push(d);
            }
        }
    }

    let generated: Vec<(&str, Result<Vec<CompressedDocument>, ForgeError>)> = doc_order
        .par_iter()
        .map(|&d| {
            let passage = &raw_view.get(d).expect("checked above").text;
            (
                d,
                generate_variants(
                    gateway,
                    &opts.generators,
                    d,
                    passage,
                    templates,
                    tokenizer,
                    opts.allow_single_generator,
                ),
            )
        })
        .collect();
    let mut variants: HashMap<&str, Vec<CompressedDocument>> = HashMap::new();
    let mut failed_documents = BTreeMap::new();
    for (d, r) in generated {
        match r {
            Ok(v) => {
                variants.insert(d, v);
            }
            Err(e @ ForgeError::AllGeneratorsFailed { .. }) => {
                log::warn!("{e}");
                failed_documents.insert(d.to_string(), e.to_string());
            }
            Err(e) => return Err(e),
        }
    }

    let labeled: Vec<Result<Option<GroupRecord>, ForgeError>> = group_keys
        .par_iter()
        .map(|&(q, d)| {
            let Some(vs) = variants.get(d) else {
                return Ok(None);
            };
            let ctx = LabelContext {
                gateway,
                lclm_endpoint: &opts.lclm_endpoint,
                templates,
                tokenizer,
                shots: &opts.shots,
            };
            let labels = label_variants(&ctx, raw_view, q, d, vs)?;
            Ok(Some(GroupRecord {
                qid: q.query_id.clone(),
                doc_id: d.to_string(),
                labels,
            }))
        })
        .collect();

    let mut counts = ForgeCounts {
        documents_failed: failed_documents.len(),
        variants_generated: variants.values().map(Vec::len).sum(),
        ..ForgeCounts::default()
    };
    let mut pairs = Vec::new();
    let mut groups = Vec::new();
    for g in labeled {
        let Some(g) = g? else { continue };
        counts.groups += 1;
        counts.successes += g.labels.iter().filter(|l| l.retrieval_success).count();
        counts.failures += g.labels.iter().filter(|l| !l.retrieval_success).count();
        if !g.labels.iter().any(|l| l.label == Label::Chosen) {
            counts.groups_without_chosen += 1;
        }
        let passage = &raw_view.get(&g.doc_id).expect("gold doc").text;
        let gp = form_pairs(
            &g.labels,
            &variants[g.doc_id.as_str()],
            passage,
            &g.doc_id,
            &g.qid,
            templates,
            opts.pair_mode,
        )?;
        counts.candidates_examined += gp.examined;
        counts.pairs_skipped_length += gp.skipped_length;
        counts.pairs_skipped_mode += gp.skipped_mode;
        pairs.extend(gp.pairs);
        groups.push(g);
    }

    let manifest = export_pairs(&pairs, out_dir, opts.split, opts.seed, counts)?;
    let labels_path = out_dir.join("labels.jsonl");
    let mut w = BufWriter::new(File::create(&labels_path).map_err(io_err(&labels_path))?);
    for g in &groups {
        serde_json::to_writer(&mut w, g).expect("group serializes");
        w.write_all(b"\n").map_err(io_err(&labels_path))?;
    }
    w.flush().map_err(io_err(&labels_path))?;
    emit_trainer_config(&out_dir.join("trainer_config.json"), opts.trainer_profile)?;
    Ok(ForgeOutput {
        manifest,
        pairs,
        groups,
        failed_documents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_documents;
    use crate::gateway::{EndpointConfig, FnBackend, GatewayError, MockBackend, MockRule, MockScript};
    use std::sync::Arc;

    fn v(id: &str, text: &str, tokens: usize) -> CompressedDocument {
        CompressedDocument {
            source_doc_id: "d".into(),
            variant_id: id.into(),
            text: text.into(),
            token_count: tokens,
            generator: id.split('#').next().unwrap().into(),
        }
    }

    fn tpl() -> PromptTemplateSet {
        PromptTemplateSet::default()
    }

    #[test]
    fn forced_labeling_example() {
        let vs = [v("a#0", "x", 100), v("b#1", "y", 80), v("c#2", "z", 60)];
        let l = assign_labels(&vs, &[true, true, false]);
        assert_eq!(l[1].label, Label::Chosen);
        assert_eq!(l[0].reason, LabelReason::LongerThanChosen);
        assert_eq!(l[2].reason, LabelReason::RetrievalFailed);

        let gp = form_pairs(&l, &vs, "raw", "d", "q", &tpl(), PairMode::AllCombinations).unwrap();
        assert_eq!(gp.pairs.len(), 1);
        assert_eq!(gp.pairs[0].length_gap, 20);
        assert_eq!(gp.skipped_length, 1);
        assert_eq!(gp.examined, 2);
        assert_eq!(gp.pairs[0].prompt, "Summarize the following content: raw");
    }

    #[test]
    fn no_success_and_single_success() {
        let vs = [v("a#0", "x", 10), v("b#1", "y", 5)];
        let l = assign_labels(&vs, &[false, false]);
        assert!(l.iter().all(|l| l.label == Label::Rejected));
        let gp = form_pairs(&l, &vs, "raw", "d", "q", &tpl(), PairMode::AllCombinations).unwrap();
        assert!(gp.pairs.is_empty());
        assert_eq!(gp.examined, 0);

        let l = assign_labels(&vs, &[true, false]);
        assert_eq!(l[0].label, Label::Chosen);
    }

    #[test]
    fn ties_prefer_smaller_text_then_id() {
        let vs = [v("b#1", "same", 5), v("a#0", "same", 5), v("c#2", "aaa", 5)];
        let l = assign_labels(&vs, &[true, true, true]);
        assert_eq!(l[2].label, Label::Chosen);
        let l = assign_labels(&vs[..2], &[true, true]);
        assert_eq!(l[1].label, Label::Chosen);
    }

    #[test]
    fn pair_modes() {
        let vs = [v("a#0", "c", 80), v("b#1", "r1", 100), v("c#2", "r2", 95)];
        let l = assign_labels(&vs, &[true, false, false]);
        let all = form_pairs(&l, &vs, "raw", "d", "q", &tpl(), PairMode::AllCombinations).unwrap();
        let gaps: Vec<usize> = all.pairs.iter().map(|p| p.length_gap).collect();
        assert_eq!(gaps, vec![20, 15]);
        let one = form_pairs(&l, &vs, "raw", "d", "q", &tpl(), PairMode::OnePerGroup).unwrap();
        assert_eq!(one.pairs.len(), 1);
        assert_eq!(one.pairs[0].length_gap, 20);
        assert_eq!(one.skipped_mode, 1);
    }

    fn gateway_with(scripts: Vec<(&str, MockScript)>) -> Gateway {
        let mut b = MockBackend::new();
        let mut eps = Vec::new();
        for (name, s) in scripts {
            b = b.with_script(name, s);
            eps.push(EndpointConfig::chat(name, name));
        }
        Gateway::new(eps, Arc::new(b))
    }

    #[test]
    fn generation_drops_empty_and_requires_two() {
        let gw = gateway_with(vec![
            ("g1", MockScript::new(vec![], "short")),
            ("g2", MockScript::new(vec![], "a longer compression here")),
            ("g3", MockScript::new(vec![], "  ")),
        ]);
        let tok = TokenizerHandle::builtin();
        let gens: Vec<String> = ["g1", "g2", "g3"].map(String::from).to_vec();
        let out = generate_variants(&gw, &gens, "d", "passage", &tpl(), &tok, false).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].variant_id, "g2#1");
        assert_eq!(out[1].token_count, 4);

        let one = vec!["g1".to_string()];
        assert!(matches!(
            generate_variants(&gw, &one, "d", "p", &tpl(), &tok, false),
            Err(ForgeError::TooFewGenerators(1))
        ));
        assert_eq!(
            generate_variants(&gw, &one, "d", "p", &tpl(), &tok, true)
                .unwrap()
                .len(),
            1
        );

        let dup = vec!["g1".to_string(), "g1".to_string()];
        let out = generate_variants(&gw, &dup, "d", "p", &tpl(), &tok, false).unwrap();
        assert_eq!(out[0].text, out[1].text);
        assert_ne!(out[0].variant_id, out[1].variant_id);

        let empty = vec!["g3".to_string(), "g3".to_string()];
        assert!(matches!(
            generate_variants(&gw, &empty, "d", "p", &tpl(), &tok, false),
            Err(ForgeError::AllGeneratorsFailed { .. })
        ));
    }

    fn corpus() -> CorpusView {
        let lines: Vec<(usize, String)> = (0..3)
            .map(|i| (i + 1, serde_json::json!({"id": format!("d{i}"), "title": format!("T{i}"), "content": format!("content of doc {i}")}).to_string()))
            .collect();
        CorpusView::from_documents(parse_documents(&lines, &TokenizerHandle::builtin()).unwrap()).unwrap()
    }

    #[test]
    fn label_variants_end_to_end() {
        // The LCLM finds d1 only if its content has at most two words.
        let lclm = MockScript::new(
            vec![MockRule::regex(
                r"ID: (\d+) \| TITLE: T1 \| CONTENT: \w+( \w+)? \| END",
                "Final Answer: ['$1']",
            )
            .unwrap()],
            "Final Answer: ['0']",
        );
        let gw = gateway_with(vec![("lclm", lclm)]);
        let tok = TokenizerHandle::builtin();
        let raw = corpus();
        let q = QueryRecord {
            query_id: "q".into(),
            text: "?".into(),
            gold_doc_ids: vec!["d1".into()],
            eval_k: 1,
        };
        let mk = |id: &str, t: &str| CompressedDocument::new("d1", id, "g", t, &tok);
        let vs = vec![
            mk("g#0", "two words"),
            mk("g#1", "one"),
            mk("g#2", "far too many words"),
        ];
        let t = tpl();
        let ctx = LabelContext {
            gateway: &gw,
            lclm_endpoint: "lclm",
            templates: &t,
            tokenizer: &tok,
            shots: &[],
        };
        let l = label_variants(&ctx, &raw, &q, "d1", &vs).unwrap();
        let success: Vec<bool> = l.iter().map(|l| l.retrieval_success).collect();
        assert_eq!(success, vec![true, true, false]);
        assert_eq!(l[1].label, Label::Chosen);
        assert!(matches!(
            label_variants(&ctx, &raw, &q, "d0", &vs),
            Err(ForgeError::NotGold { .. })
        ));
    }

    #[test]
    fn gateway_failure_is_annotated() {
        let gw = Gateway::new(
            vec![EndpointConfig::chat("lclm", "m")],
            Arc::new(FnBackend::new(|_, _| Err(GatewayError::Protocol("down".into())))),
        )
        .with_retry(crate::gateway::RetryPolicy::none());
        let tok = TokenizerHandle::builtin();
        let t = tpl();
        let ctx = LabelContext {
            gateway: &gw,
            lclm_endpoint: "lclm",
            templates: &t,
            tokenizer: &tok,
            shots: &[],
        };
        let q = QueryRecord {
            query_id: "q".into(),
            text: "?".into(),
            gold_doc_ids: vec!["d1".into()],
            eval_k: 1,
        };
        let vs = vec![CompressedDocument::new("d1", "g#0", "g", "x", &tok)];
        let l = label_variants(&ctx, &corpus(), &q, "d1", &vs).unwrap();
        assert_eq!(l[0].reason, LabelReason::RetrievalFailed);
        assert!(l[0].error.as_deref().unwrap().contains("down"));
    }

    fn pair(i: usize) -> PreferencePair {
        PreferencePair {
            pair_id: format!("p{i}"),
            prompt: "p".into(),
            chosen_text: "c".into(),
            rejected_text: "r r".into(),
            chosen_tokens: 1,
            rejected_tokens: 2 + i,
            length_gap: 1 + i,
            source: PairSource {
                doc_id: format!("d{i}"),
                query_id: "q".into(),
                generators: ["a".into(), "b".into()],
            },
        }
    }

    #[test]
    fn export_split_is_seeded() {
        let pairs: Vec<PreferencePair> = (0..10).map(pair).collect();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = export_pairs(&pairs, a.path(), 0.9, 7, ForgeCounts::default()).unwrap();
        export_pairs(&pairs, b.path(), 0.9, 7, ForgeCounts::default()).unwrap();
        assert_eq!((m.n_train, m.n_validation), (9, 1));
        assert_eq!(m.avg_chosen_tokens, 1.0);
        assert_eq!(m.avg_rejected_tokens, 6.5);
        for f in ["train.jsonl", "validation.jsonl", "manifest.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let row: serde_json::Value = serde_json::from_str(
            std::fs::read_to_string(a.path().join("validation.jsonl"))
                .unwrap()
                .trim(),
        )
        .unwrap();
        assert_eq!(row["meta"]["qid"], "q");
        assert!(row["meta"]["length_gap"].as_u64().unwrap() >= 1);
    }

    #[test]
    fn export_empty() {
        let d = tempfile::tempdir().unwrap();
        let m = export_pairs(&[], d.path(), 0.9, 7, ForgeCounts::default()).unwrap();
        assert_eq!((m.n_train, m.n_validation, m.avg_chosen_tokens), (0, 0, 0.0));
        assert_eq!(std::fs::read(d.path().join("train.jsonl")).unwrap().len(), 0);
    }

    #[test]
    fn trainer_profiles() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("t.json");
        emit_trainer_config(&p, TrainerProfile::Default).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["lambda"], 2.5);
        assert_eq!(v["learning_rate"], 1e-6);
        assert_eq!(v["epochs"], 10);
        assert_eq!(v["batch_size"], 8);
        assert_eq!(v["objective"], "orpo_length_regularized");
        assert_eq!(TrainerConfig::for_profile(TrainerProfile::Mistral).learning_rate, 5e-6);
        let sft = TrainerConfig::for_profile(TrainerProfile::SftOnly);
        assert_eq!((sft.learning_rate, sft.lambda), (5e-6, None));
    }
}
