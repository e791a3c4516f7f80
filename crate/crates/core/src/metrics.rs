//! Retrieval metrics and run reports.
//!
//! R@k = |top-k ∩ gold| / |gold|, P@k = |top-k ∩ gold| / k, F1@k is their
//! harmonic mean. The compression rate is a ratio of means: average raw
//! passage tokens over average compressed passage tokens.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{corpus_stats, CorpusView, QueryRecord};
use crate::retrieval::RetrievalOutcome;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("gold set is empty")]
    EmptyGold,
    #[error("no outcome for query {0:?}")]
    MissingOutcome(String),
    #[error("more than one outcome for query {0:?}")]
    DuplicateOutcome(String),
    #[error("raw and compressed views cover different documents")]
    ViewMismatch,
    #[error("average compressed token count is zero")]
    ZeroCompressed,
}

fn hits(ranked: &[String], gold: &[String], k: usize) -> usize {
    let gold: HashSet<&str> = gold.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    ranked
        .iter()
        .take(k)
        .filter(|r| gold.contains(r.as_str()) && seen.insert(r.as_str()))
        .count()
}

fn distinct(gold: &[String]) -> usize {
    gold.iter().collect::<HashSet<_>>().len()
}

pub fn recall_at_k(ranked: &[String], gold: &[String], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    Ok(hits(ranked, gold, k) as f64 / distinct(gold) as f64)
}

pub fn precision_at_k(ranked: &[String], gold: &[String], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    Ok(hits(ranked, gold, k) as f64 / k as f64)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1_at_k(ranked: &[String], gold: &[String], k: usize) -> Result<f64, MetricsError> {
    let p = precision_at_k(ranked, gold, k)?;
    let r = recall_at_k(ranked, gold, k)?;
    Ok(f1(p, r))
}

pub fn compression_rate_from_averages(avg_raw: f64, avg_comp: f64) -> Result<f64, MetricsError> {
    if avg_comp == 0.0 {
        return Err(MetricsError::ZeroCompressed);
    }
    Ok(avg_raw / avg_comp)
}

pub fn compression_rate(raw: &CorpusView, comp: &CorpusView) -> Result<f64, MetricsError> {
    let raw_ids: HashSet<&str> = raw.documents().iter().map(|d| d.doc_id.as_str()).collect();
    let comp_ids: HashSet<&str> = comp.documents().iter().map(|d| d.doc_id.as_str()).collect();
    if raw_ids != comp_ids {
        return Err(MetricsError::ViewMismatch);
    }
    compression_rate_from_averages(corpus_stats(raw).avg_token_count, corpus_stats(comp).avg_token_count)
}

/// Which metric a dataset reports as its headline number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryMetric {
    /// R@k at each query's k; R@1 on single-document datasets.
    Recall,
    F1,
}

impl PrimaryMetric {
    /// R@1 when every query wants one document, F1@k otherwise.
    pub fn infer(queries: &[QueryRecord]) -> Self {
        if queries.iter().all(|q| q.eval_k == 1 && q.gold_doc_ids.len() == 1) {
            PrimaryMetric::Recall
        } else {
            PrimaryMetric::F1
        }
    }

    pub fn label(&self, queries: &[QueryRecord]) -> String {
        let ks: HashSet<usize> = queries.iter().map(|q| q.eval_k).collect();
        let k = if ks.len() == 1 {
            ks.into_iter().next().unwrap().to_string()
        } else {
            "k".to_string()
        };
        match self {
            PrimaryMetric::Recall => format!("R@{k}"),
            PrimaryMetric::F1 => format!("F1@{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub k: usize,
    pub r_at_k: f64,
    pub p_at_k: f64,
    pub f1_at_k: f64,
    pub primary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub primary_metric: PrimaryMetric,
    pub metric_label: String,
    pub mean_primary_metric: f64,
    pub n_queries: usize,
    pub n_errors: usize,
    pub n_parse_errors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionBlock {
    pub avg_raw_tokens: f64,
    pub avg_comp_tokens: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Keyed by query id; the aggregate is the mean in this (sorted) order.
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub aggregate: Aggregate,
    #[serde(default)]
    pub compression: Option<CompressionBlock>,
}

/// Score a run: one outcome per query, each at its own eval_k.
pub fn evaluate_run(
    outcomes: &[RetrievalOutcome],
    queries: &[QueryRecord],
    primary: PrimaryMetric,
    raw_view: &CorpusView,
    comp_view: Option<&CorpusView>,
) -> Result<MetricsReport, MetricsError> {
    let mut by_qid: HashMap<&str, &RetrievalOutcome> = HashMap::new();
    for o in outcomes {
        if by_qid.insert(o.query_id.as_str(), o).is_some() {
            return Err(MetricsError::DuplicateOutcome(o.query_id.clone()));
        }
    }
    let mut per_query = BTreeMap::new();
    let mut n_errors = 0;
    let mut n_parse_errors = 0;
    for q in queries {
        let o = by_qid
            .get(q.query_id.as_str())
            .ok_or_else(|| MetricsError::MissingOutcome(q.query_id.clone()))?;
        n_errors += o.error.is_some() as usize;
        n_parse_errors += o.parse_error as usize;
        let k = q.eval_k;
        let r = recall_at_k(&o.ranked_ids, &q.gold_doc_ids, k)?;
        let p = precision_at_k(&o.ranked_ids, &q.gold_doc_ids, k)?;
        let f = f1(p, r);
        let m = QueryMetrics {
            k,
            r_at_k: r,
            p_at_k: p,
            f1_at_k: f,
            primary: match primary {
                PrimaryMetric::Recall => r,
                PrimaryMetric::F1 => f,
            },
        };
        if per_query.insert(q.query_id.clone(), m).is_some() {
            return Err(MetricsError::DuplicateOutcome(q.query_id.clone()));
        }
    }
    let n = per_query.len();
    let mean = if n == 0 {
        0.0
    } else {
        per_query.values().map(|m| m.primary).sum::<f64>() / n as f64
    };
    let compression = match comp_view {
        Some(comp) => {
            let rate = compression_rate(raw_view, comp)?;
            Some(CompressionBlock {
                avg_raw_tokens: corpus_stats(raw_view).avg_token_count,
                avg_comp_tokens: corpus_stats(comp).avg_token_count,
                rate,
            })
        }
        None => None,
    };
    Ok(MetricsReport {
        per_query,
        aggregate: Aggregate {
            primary_metric: primary,
            metric_label: primary.label(queries),
            mean_primary_metric: mean,
            n_queries: n,
            n_errors,
            n_parse_errors,
        },
        compression,
    })
}

/// Averages over several datasets' reports, the way a results table's
/// "Average" row is built: mean of headline metrics and mean of
/// per-dataset compression rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MacroAverage {
    pub mean_performance: f64,
    pub mean_compression_rate: Option<f64>,
    pub n_datasets: usize,
}

pub fn macro_average(reports: &[&MetricsReport]) -> MacroAverage {
    let n = reports.len();
    let mean_performance = if n == 0 {
        0.0
    } else {
        reports.iter().map(|r| r.aggregate.mean_primary_metric).sum::<f64>() / n as f64
    };
    let rates: Vec<f64> = reports.iter().filter_map(|r| r.compression.map(|c| c.rate)).collect();
    let mean_compression_rate = (!rates.is_empty() && rates.len() == n).then(|| rates.iter().sum::<f64>() / n as f64);
    MacroAverage {
        mean_performance,
        mean_compression_rate,
        n_datasets: n,
    }
}

/// Plain-text table: `Methods | <metric> | Comp.`
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut cells: Vec<[String; 3]> = vec![["Methods".into(), String::new(), "Comp.".into()]];
    for (name, r) in rows {
        if cells[0][1].is_empty() {
            cells[0][1] = r.aggregate.metric_label.clone();
        }
        cells.push([
            name.to_string(),
            format!("{:.2}", r.aggregate.mean_primary_metric),
            match r.compression {
                Some(c) => format!("{:.2}x", c.rate),
                None => "1.00x".to_string(),
            },
        ]);
    }
    let widths: Vec<usize> = (0..3)
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<w0$} | {:>w1$} | {:>w2$}",
            row[0],
            row[1],
            row[2],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
        if i == 0 {
            let _ = writeln!(
                out,
                "{}-+-{}-+-{}",
                "-".repeat(widths[0]),
                "-".repeat(widths[1]),
                "-".repeat(widths[2])
            );
        }
    }
    out
}
