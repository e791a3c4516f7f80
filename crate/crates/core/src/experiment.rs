//! End-to-end runs driven by one JSON config file.
//!
//! Relative paths in a config are resolved against the config's directory.
//! Every artifact written here is a pure function of the inputs, the mock
//! scripts and the seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    corpus_stats, load_compressed, load_corpus, load_queries, write_compressed, CompressedDocument, CorpusError,
    CorpusView, QueryRecord,
};
use crate::forge::{self, ForgeError, ForgeManifest, ForgeOptions, PairMode, TrainerProfile, DEFAULT_SPLIT};
use crate::gateway::{
    load_endpoints, Backend, EndpointConfig, Gateway, GatewayError, HttpBackend, MockBackend, ResponseCache,
};
use crate::metrics::{evaluate_run, render_table, MetricsError, MetricsReport, PrimaryMetric};
use crate::orpo::{self, OrpoError};
use crate::prompt::{build_compression_prompt, FewShotExample, PlacementSpec, PromptError, PromptTemplateSet};
use crate::retrieval::{
    bm25_build, bm25_retrieve, dense_retrieve, write_outcomes, LclmRetriever, RetrievalError, RetrievalOutcome,
    Strategy, DEFAULT_B, DEFAULT_K1,
};
use crate::seed::{rng_for, DEFAULT_SEED};
use crate::tokenizer::{TokenizerError, TokenizerHandle};

/// Ranking depth kept for non-LCLM strategies when a query asks for fewer.
pub const MIN_RANK_DEPTH: usize = 10;

pub const SWEEP_FRACTIONS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Orpo(#[from] OrpoError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, body + "\n").map_err(io_err(path))
}

fn default_strategy() -> Strategy {
    Strategy::Lclm
}
fn default_lclm() -> String {
    "lclm".into()
}
fn default_embed() -> String {
    "embed".into()
}
fn default_fractions() -> Vec<f64> {
    SWEEP_FRACTIONS.to_vec()
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_parallel() -> usize {
    4
}
fn default_k1() -> f64 {
    DEFAULT_K1
}
fn default_b() -> f64 {
    DEFAULT_B
}
fn default_split() -> f64 {
    DEFAULT_SPLIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeSettings {
    #[serde(default)]
    pub pair_mode: PairMode,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub allow_single_generator: bool,
    #[serde(default = "default_profile")]
    pub trainer_profile: TrainerProfile,
}

fn default_profile() -> TrainerProfile {
    TrainerProfile::Default
}

impl Default for ForgeSettings {
    fn default() -> Self {
        Self {
            pair_mode: PairMode::default(),
            split: DEFAULT_SPLIT,
            allow_single_generator: false,
            trainer_profile: TrainerProfile::Default,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus_path: PathBuf,
    #[serde(default)]
    pub queries_path: Option<PathBuf>,
    /// JSON array of endpoint objects.
    #[serde(default)]
    pub endpoints_path: Option<PathBuf>,
    /// Compressed corpus; when set, retrieval runs over it.
    #[serde(default)]
    pub compressed_path: Option<PathBuf>,
    /// Queries whose answers serve as in-context examples.
    #[serde(default)]
    pub few_shot_path: Option<PathBuf>,
    #[serde(default)]
    pub templates_path: Option<PathBuf>,
    /// JSON map from text digest to token count for an external tokenizer.
    #[serde(default)]
    pub tokenizer_sidecar: Option<PathBuf>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_lclm")]
    pub lclm_endpoint: String,
    #[serde(default = "default_embed")]
    pub embed_endpoint: String,
    #[serde(default)]
    pub generators: Vec<String>,
    /// Replaces every query's k.
    #[serde(default)]
    pub eval_k: Option<usize>,
    #[serde(default)]
    pub primary_metric: Option<PrimaryMetric>,
    #[serde(default = "default_fractions")]
    pub placement_fractions: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_k1")]
    pub bm25_k1: f64,
    #[serde(default = "default_b")]
    pub bm25_b: f64,
    #[serde(default)]
    pub forge: ForgeSettings,
}

impl ExperimentConfig {
    pub fn new(corpus_path: impl Into<PathBuf>) -> Self {
        serde_json::from_value(serde_json::json!({ "corpus_path": corpus_path.into() })).expect("defaults")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self =
            serde_json::from_str(&raw).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_path);
        fix(&mut self.output_dir);
        for p in [
            &mut self.queries_path,
            &mut self.endpoints_path,
            &mut self.compressed_path,
            &mut self.few_shot_path,
            &mut self.templates_path,
            &mut self.tokenizer_sidecar,
            &mut self.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if let Some(f) = self.placement_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(ExperimentError::Config(format!(
                "placement fraction {f} outside [0, 1]"
            )));
        }
        if self.max_parallel == 0 {
            return Err(ExperimentError::Config("max_parallel must be >= 1".into()));
        }
        if self.eval_k == Some(0) {
            return Err(ExperimentError::Config("eval_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.forge.split) {
            return Err(ExperimentError::Config(format!(
                "split {} outside [0, 1]",
                self.forge.split
            )));
        }
        let inputs = [
            Some(&self.corpus_path),
            self.queries_path.as_ref(),
            self.endpoints_path.as_ref(),
            self.compressed_path.as_ref(),
            self.few_shot_path.as_ref(),
            self.templates_path.as_ref(),
            self.tokenizer_sidecar.as_ref(),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return Err(ExperimentError::Config(format!("{}: no such file", p.display())));
            }
        }
        Ok(())
    }

    fn queries_path(&self) -> Result<&Path, ExperimentError> {
        self.queries_path
            .as_deref()
            .ok_or_else(|| ExperimentError::Config("queries_path is required for this command".into()))
    }
}

/// Loaded shared state for one command.
pub struct Runtime {
    pub config: ExperimentConfig,
    pub tokenizer: TokenizerHandle,
    pub templates: PromptTemplateSet,
    pub gateway: Gateway,
}

impl Runtime {
    /// Validate the config and assemble the gateway. With `mock`, replies
    /// come from the script file and endpoints missing from the endpoints
    /// file are created on demand.
    pub fn new(config: ExperimentConfig, mock: Option<&Path>) -> Result<Self, ExperimentError> {
        config.validate()?;
        let tokenizer = match &config.tokenizer_sidecar {
            Some(p) => TokenizerHandle::from_sidecar("sidecar", p)?,
            None => TokenizerHandle::builtin(),
        };
        let templates = match &config.templates_path {
            Some(p) => PromptTemplateSet::load_overrides(p)?,
            None => PromptTemplateSet::default(),
        };
        let mut endpoints = match &config.endpoints_path {
            Some(p) => load_endpoints(p)?,
            None => Vec::new(),
        };
        let backend: Arc<dyn Backend> = match mock {
            Some(path) => {
                let m = MockBackend::from_file(path)?;
                let mut chat: Vec<String> = m.endpoint_names().map(String::from).collect();
                chat.push(config.lclm_endpoint.clone());
                chat.extend(config.generators.iter().cloned());
                for name in chat {
                    if name != config.embed_endpoint && !endpoints.iter().any(|e| e.name == name) {
                        endpoints.push(EndpointConfig::chat(&name, &name));
                    }
                }
                if !endpoints.iter().any(|e| e.name == config.embed_endpoint) {
                    endpoints.push(EndpointConfig::embedding(
                        &config.embed_endpoint,
                        &config.embed_endpoint,
                    ));
                }
                Arc::new(m)
            }
            None => Arc::new(HttpBackend::new(Duration::from_secs(300))?),
        };
        let cache = match &config.cache_dir {
            Some(d) => ResponseCache::open(d)?,
            None => ResponseCache::in_memory(),
        };
        let gateway = Gateway::new(endpoints, backend)
            .with_cache(cache)
            .with_max_parallel(config.max_parallel)
            .with_tokenizer(tokenizer.clone());
        Ok(Self {
            config,
            tokenizer,
            templates,
            gateway,
        })
    }

    fn require_endpoint(&self, name: &str) -> Result<(), ExperimentError> {
        self.gateway
            .endpoint(name)
            .map(|_| ())
            .map_err(|_| ExperimentError::Config(format!("endpoint {name:?} is not configured")))
    }

    fn out_dir(&self, sub: Option<&str>) -> Result<PathBuf, ExperimentError> {
        let d = match sub {
            Some(s) => self.config.output_dir.join(s),
            None => self.config.output_dir.clone(),
        };
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    fn raw_view(&self) -> Result<CorpusView, ExperimentError> {
        Ok(load_corpus(&self.config.corpus_path, &self.tokenizer)?)
    }

    /// The view retrieval runs over, and whether it is compressed.
    fn eval_view(&self, raw: &CorpusView) -> Result<Option<CorpusView>, ExperimentError> {
        match &self.config.compressed_path {
            Some(p) => {
                let variants = load_compressed(p, &self.tokenizer, Some(raw))?;
                Ok(Some(raw.compressed(&variants)?))
            }
            None => Ok(None),
        }
    }

    fn queries(&self, raw: &CorpusView) -> Result<Vec<QueryRecord>, ExperimentError> {
        let mut qs = load_queries(self.config.queries_path()?, raw)?;
        if let Some(k) = self.config.eval_k {
            for q in &mut qs {
                q.eval_k = k;
            }
        }
        Ok(qs)
    }

    fn shots(&self, raw: &CorpusView) -> Result<Vec<FewShotExample>, ExperimentError> {
        match &self.config.few_shot_path {
            Some(p) => Ok(load_queries(p, raw)?.iter().map(FewShotExample::from_query).collect()),
            None => Ok(Vec::new()),
        }
    }
}

fn hard_failure(q: &QueryRecord, strategy: Strategy, e: RetrievalError) -> RetrievalOutcome {
    log::warn!("query {:?}: {e}", q.query_id);
    RetrievalOutcome::failed(&q.query_id, strategy, e.to_string())
}

fn run_strategy(
    rt: &Runtime,
    view: &CorpusView,
    queries: &[QueryRecord],
    shots: &[FewShotExample],
    placement: impl Fn(&QueryRecord) -> Option<PlacementSpec> + Sync,
) -> Result<Vec<RetrievalOutcome>, ExperimentError> {
    let cfg = &rt.config;
    let strategy = cfg.strategy;
    Ok(match strategy {
        Strategy::Bm25 => {
            let index = bm25_build(view, cfg.bm25_k1, cfg.bm25_b)?;
            queries
                .iter()
                .map(|q| {
                    bm25_retrieve(&index, &q.query_id, &q.text, q.eval_k.max(MIN_RANK_DEPTH))
                        .unwrap_or_else(|e| hard_failure(q, strategy, e))
                })
                .collect()
        }
        Strategy::Dense => {
            rt.require_endpoint(&cfg.embed_endpoint)?;
            queries
                .par_iter()
                .map(|q| {
                    dense_retrieve(
                        &rt.gateway,
                        &cfg.embed_endpoint,
                        view,
                        &q.query_id,
                        &q.text,
                        q.eval_k.max(MIN_RANK_DEPTH),
                    )
                    .unwrap_or_else(|e| hard_failure(q, strategy, e))
                })
                .collect()
        }
        Strategy::Lclm => {
            rt.require_endpoint(&cfg.lclm_endpoint)?;
            let r = LclmRetriever::new(&rt.gateway, &cfg.lclm_endpoint, &rt.templates, &rt.tokenizer);
            queries
                .par_iter()
                .map(|q| {
                    let p = placement(q);
                    r.retrieve(view, q, shots, p.as_ref())
                        .unwrap_or_else(|e| hard_failure(q, strategy, e))
                })
                .collect()
        }
    })
}

fn primary_for(rt: &Runtime, queries: &[QueryRecord]) -> PrimaryMetric {
    rt.config
        .primary_metric
        .unwrap_or_else(|| PrimaryMetric::infer(queries))
}

#[derive(Debug, Clone)]
pub struct RetrieveSummary {
    pub report: MetricsReport,
    pub n_errors: usize,
}

/// Writes `outcomes.jsonl`, `report.json` and `report.txt`.
pub fn run_retrieve(rt: &Runtime) -> Result<RetrieveSummary, ExperimentError> {
    let raw = rt.raw_view()?;
    let comp = rt.eval_view(&raw)?;
    let view = comp.as_ref().unwrap_or(&raw);
    let queries = rt.queries(&raw)?;
    let shots = rt.shots(&raw)?;
    let outcomes = run_strategy(rt, view, &queries, &shots, |_| None)?;
    let report = evaluate_run(&outcomes, &queries, primary_for(rt, &queries), &raw, comp.as_ref())?;

    let out = rt.out_dir(None)?;
    write_outcomes(&out.join("outcomes.jsonl"), &outcomes)?;
    write_json(&out.join("report.json"), &report)?;
    let name = format!(
        "{} ({})",
        rt.config.strategy,
        if comp.is_some() { "compressed" } else { "raw" }
    );
    let table = render_table(&[(&name, &report)]);
    fs::write(out.join("report.txt"), &table).map_err(io_err(&out.join("report.txt")))?;
    Ok(RetrieveSummary {
        n_errors: report.aggregate.n_errors,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSummary {
    pub n_ok: usize,
    pub n_failed: usize,
    pub avg_raw_tokens: f64,
    pub avg_comp_tokens: f64,
    /// Over the documents this generator compressed.
    pub compression_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressFailure {
    pub generator: String,
    pub doc_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct CompressSummary {
    pub generators: BTreeMap<String, GeneratorSummary>,
    pub failures: Vec<CompressFailure>,
    /// Requests that missed the cache during this run.
    pub new_requests: u64,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Compress every document with each generator. Writes
/// `compressed/<generator>.jsonl`, `compressed/failures.jsonl` and
/// `compressed/summary.json`.
pub fn run_compress(rt: &Runtime, generators: &[String]) -> Result<CompressSummary, ExperimentError> {
    let generators: Vec<String> = if generators.is_empty() {
        rt.config.generators.clone()
    } else {
        generators.to_vec()
    };
    if generators.is_empty() {
        return Err(ExperimentError::Config("no generators given".into()));
    }
    for g in &generators {
        rt.require_endpoint(g)?;
    }
    let raw = rt.raw_view()?;
    let out = rt.out_dir(Some("compressed"))?;
    let misses_before = rt.gateway.cache_stats().misses;

    let mut summaries = BTreeMap::new();
    let mut failures = Vec::new();
    for (gi, g) in generators.iter().enumerate() {
        let results: Vec<Result<CompressedDocument, CompressFailure>> = raw
            .documents()
            .par_iter()
            .map(|d| {
                let fail = |error: String| CompressFailure {
                    generator: g.clone(),
                    doc_id: d.doc_id.clone(),
                    error,
                };
                let prompt = build_compression_prompt(&rt.templates, &d.text).map_err(|e| fail(e.to_string()))?;
                let reply = rt.gateway.complete(g, &prompt).map_err(|e| fail(e.to_string()))?;
                let text = reply.text.trim();
                if text.is_empty() {
                    return Err(fail("empty compression".into()));
                }
                Ok(CompressedDocument::new(
                    &d.doc_id,
                    &format!("{g}#{gi}"),
                    g,
                    text,
                    &rt.tokenizer,
                ))
            })
            .collect();
        let mut ok = Vec::new();
        let mut raw_tokens = 0usize;
        let mut n_failed = 0;
        for r in results {
            match r {
                Ok(c) => {
                    raw_tokens += raw.get(&c.source_doc_id).expect("from view").token_count;
                    ok.push(c);
                }
                Err(f) => {
                    log::warn!("generator {:?}, document {:?}: {}", f.generator, f.doc_id, f.error);
                    n_failed += 1;
                    failures.push(f);
                }
            }
        }
        let n = ok.len() as f64;
        let avg_raw = if ok.is_empty() { 0.0 } else { raw_tokens as f64 / n };
        let avg_comp = if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|c| c.token_count as f64).sum::<f64>() / n
        };
        write_compressed(&out.join(format!("{}.jsonl", file_stem(g))), &ok)?;
        summaries.insert(
            g.clone(),
            GeneratorSummary {
                n_ok: ok.len(),
                n_failed,
                avg_raw_tokens: avg_raw,
                avg_comp_tokens: avg_comp,
                compression_rate: (avg_comp > 0.0).then(|| avg_raw / avg_comp),
            },
        );
    }
    let fpath = out.join("failures.jsonl");
    let mut body = String::new();
    for f in &failures {
        body.push_str(&serde_json::to_string(f).expect("failure serializes"));
        body.push('\n');
    }
    fs::write(&fpath, body).map_err(io_err(&fpath))?;
    write_json(&out.join("summary.json"), &summaries)?;
    Ok(CompressSummary {
        generators: summaries,
        failures,
        new_requests: rt.gateway.cache_stats().misses - misses_before,
    })
}

#[derive(Debug, Clone)]
pub struct ForgeSummary {
    pub manifest: ForgeManifest,
    pub failed_documents: BTreeMap<String, String>,
}

/// Writes the pairs, labels, manifest and trainer config under `forge/`.
pub fn run_forge(rt: &Runtime) -> Result<ForgeSummary, ExperimentError> {
    let cfg = &rt.config;
    rt.require_endpoint(&cfg.lclm_endpoint)?;
    for g in &cfg.generators {
        rt.require_endpoint(g)?;
    }
    let raw = rt.raw_view()?;
    let queries = rt.queries(&raw)?;
    let opts = ForgeOptions {
        generators: cfg.generators.clone(),
        lclm_endpoint: cfg.lclm_endpoint.clone(),
        allow_single_generator: cfg.forge.allow_single_generator,
        pair_mode: cfg.forge.pair_mode,
        split: cfg.forge.split,
        seed: cfg.seed,
        shots: rt.shots(&raw)?,
        trainer_profile: cfg.forge.trainer_profile,
    };
    let out = rt.out_dir(Some("forge"))?;
    let f = forge::run_forge(&rt.gateway, &rt.templates, &rt.tokenizer, &raw, &queries, &opts, &out)?;
    Ok(ForgeSummary {
        manifest: f.manifest,
        failed_documents: f.failed_documents,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub report: MetricsReport,
}

/// Targets moved during the sweep: the query's gold documents followed by
/// the answers of the in-context examples.
pub fn sweep_targets(query: &QueryRecord, shots: &[FewShotExample]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for id in query
        .gold_doc_ids
        .iter()
        .chain(shots.iter().flat_map(|s| &s.answer_doc_ids))
    {
        if !out.contains(id) {
            out.push(id.clone());
        }
    }
    out
}

/// LCLM retrieval with the relevant documents moved to each configured
/// fraction. Writes `sweep.csv` and `sweep_report.json`.
pub fn run_position_sweep(rt: &Runtime) -> Result<Vec<SweepRow>, ExperimentError> {
    if rt.config.strategy != Strategy::Lclm {
        return Err(ExperimentError::Config(
            "position-sweep requires the lclm strategy".into(),
        ));
    }
    let raw = rt.raw_view()?;
    let comp = rt.eval_view(&raw)?;
    let view = comp.as_ref().unwrap_or(&raw);
    let queries = rt.queries(&raw)?;
    let shots = rt.shots(&raw)?;
    let primary = primary_for(rt, &queries);
    let mut rows = Vec::new();
    for &fraction in &rt.config.placement_fractions {
        let outcomes = run_strategy(rt, view, &queries, &shots, |q| {
            Some(PlacementSpec {
                target_ids: sweep_targets(q, &shots),
                fraction,
            })
        })?;
        let report = evaluate_run(&outcomes, &queries, primary, &raw, comp.as_ref())?;
        rows.push(SweepRow { fraction, report });
    }
    let out = rt.out_dir(None)?;
    let mut csv = String::from("fraction,metric,value,n_queries,n_errors,n_parse_errors\n");
    for r in &rows {
        let a = &r.report.aggregate;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.fraction, a.metric_label, a.mean_primary_metric, a.n_queries, a.n_errors, a.n_parse_errors
        ));
    }
    fs::write(out.join("sweep.csv"), csv).map_err(io_err(&out.join("sweep.csv")))?;
    write_json(&out.join("sweep_report.json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheckSummary {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Identity, stability and gradient checks of the objective.
/// `flip_or_sign` corrupts the analytic gradient so the harness can be
/// seen to fail.
pub fn run_loss_check(seed: u64, flip_or_sign: bool) -> Result<LossCheckSummary, ExperimentError> {
    use orpo::{log_odds_from_avg, loss_color_from_avgs};
    let mut checks = Vec::new();

    let lo = log_odds_from_avg(-1.0)?;
    checks.push(check(
        "log_odds_at_minus_one",
        (lo - (-0.5413248546129181)).abs() < 1e-9,
        format!("{lo:.12}"),
    ));
    let lo = log_odds_from_avg(-std::f64::consts::LN_2)?;
    checks.push(check("log_odds_zero_at_half", lo.abs() < 1e-12, format!("{lo:e}")));

    let mut rng = rng_for(seed, "loss_check.identity");
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let aw = -rng.gen_range(1e-6..20.0);
        let al = -rng.gen_range(1e-6..20.0);
        let lambda = rng.gen_range(0.0..10.0);
        let gap = rng.gen_range(1..200);
        let b = loss_color_from_avgs(aw, al, lambda, gap)?;
        let lhs = b.l_color - b.l_sft;
        let rhs = b.lambda * b.l_or * b.length_gap as f64;
        worst = worst.max((lhs - rhs).abs() / b.l_color.abs().max(1.0));
    }
    checks.push(check(
        "decomposition_identity",
        worst <= 4.0 * f64::EPSILON,
        format!("max err {worst:e}"),
    ));

    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for i in (1..=2000).rev() {
        let v = log_odds_from_avg(-(i as f64) * 0.025)?;
        monotone &= v > prev;
        prev = v;
    }
    checks.push(check("log_odds_monotone", monotone, String::new()));

    let mut finite = true;
    for a in [-50.0, -10.0, -1.0, -0.1, -1e-3, -1e-6, -1e-9] {
        for b in [-50.0, -1.0, -1e-9] {
            let l = loss_color_from_avgs(a, b, 2.5, 10)?;
            finite &= l.l_color.is_finite() && l.l_or > 0.0;
        }
    }
    checks.push(check("stability_sweep", finite, String::new()));

    let mut rng = rng_for(seed, "loss_check.gradients");
    let mut worst = 0.0f64;
    let mut all = true;
    for _ in 0..20 {
        let (model, pair) = random_model_and_pair(&mut rng);
        let lambda = rng.gen_range(0.5..5.0);
        let r = orpo::check_gradient(&model, &pair, lambda, pair.gap(), flip_or_sign)?;
        worst = worst.max(r.max_rel_err);
        all &= r.passed;
    }
    checks.push(check(
        "gradient_finite_differences",
        all,
        format!("max rel err {worst:e}"),
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(LossCheckSummary { seed, passed, checks })
}

/// A 6-symbol model with weights in U(-1, 1) and a pair whose rejected side
/// is 1 to 5 symbols longer.
pub fn random_model_and_pair(rng: &mut impl Rng) -> (orpo::ToyModel, orpo::ToyPair) {
    let vocab: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
    let model = orpo::ToyModel::random(vocab.clone(), rng, 1.0);
    let chosen_len = rng.gen_range(1..=3);
    let rejected_len = chosen_len + rng.gen_range(1..=5);
    let mut draw = |n: usize| -> Vec<String> { (0..n).map(|_| vocab[rng.gen_range(0..6)].clone()).collect() };
    let prompt = draw(2);
    let chosen = draw(chosen_len);
    let rejected = draw(rejected_len);
    (
        model,
        orpo::ToyPair {
            prompt,
            chosen,
            rejected,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_docs: usize,
    pub avg_token_count: f64,
    #[serde(default)]
    pub n_queries: Option<usize>,
    #[serde(default)]
    pub avg_compressed_tokens: Option<f64>,
    #[serde(default)]
    pub compression_rate: Option<f64>,
}

pub fn run_stats(rt: &Runtime) -> Result<StatsReport, ExperimentError> {
    let raw = rt.raw_view()?;
    let s = corpus_stats(&raw);
    let n_queries = match &rt.config.queries_path {
        Some(_) => Some(rt.queries(&raw)?.len()),
        None => None,
    };
    let comp = rt.eval_view(&raw)?;
    let report = StatsReport {
        n_docs: s.n_docs,
        avg_token_count: s.avg_token_count,
        n_queries,
        avg_compressed_tokens: comp.as_ref().map(|c| corpus_stats(c).avg_token_count),
        compression_rate: match &comp {
            Some(c) => Some(crate::metrics::compression_rate(&raw, c)?),
            None => None,
        },
    };
    write_json(&rt.out_dir(None)?.join("stats.json"), &report)?;
    Ok(report)
}
