//! Acceptance criteria, one line each:
//! `acceptance <n> PASS|FAIL <title> (<seconds>s, budget <seconds>s) <detail>`
//!
//! Runs without the libtest harness so every criterion reports even when
//! an earlier one fails. Exits non-zero if any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ctxpress::corpus::{parse_documents, CompressedDocument, CorpusView, QueryRecord};
use ctxpress::experiment::{self, ExperimentConfig, Runtime};
use ctxpress::forge::{self, ForgeOptions, Label, LabelContext, LabelReason};
use ctxpress::gateway::{EndpointConfig, FnBackend, Gateway, MockBackend, MockRule, MockScript};
use ctxpress::metrics::{compression_rate_from_averages, f1_at_k, precision_at_k, recall_at_k};
use ctxpress::orpo::{self, TrainVariant};
use ctxpress::prompt::{build_retrieval_prompt, FewShotExample, PromptTemplateSet};
use ctxpress::retrieval::{bm25_build, bm25_retrieve, parse_final_answer};
use ctxpress::seed::rng_for;
use ctxpress::tokenizer::TokenizerHandle;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, f64, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn view_from(rows: &[serde_json::Value]) -> CorpusView {
    let lines: Vec<(usize, String)> = rows.iter().enumerate().map(|(i, r)| (i + 1, r.to_string())).collect();
    CorpusView::from_documents(parse_documents(&lines, &TokenizerHandle::builtin()).unwrap()).unwrap()
}

fn query(qid: &str, text: &str, gold: &[&str], k: usize) -> QueryRecord {
    QueryRecord {
        query_id: qid.into(),
        text: text.into(),
        gold_doc_ids: gold.iter().map(|s| s.to_string()).collect(),
        eval_k: k,
    }
}

fn c1_prompt_golden() -> Outcome {
    let view = view_from(&[
        json!({"id": "en", "title": "English compound", "content": "Major style guides advise consulting a dictionary to determine whether a compound modifier should be hyphenated."}),
        json!({"id": "raw", "title": "WWE Raw", "content": "Monday Night Raw airs live on the USA Network and streams on Hulu the following day."}),
        json!({"id": "ddc", "title": "Dewey Decimal Classification", "content": "The Dewey Decimal Classification was conceived by Melvil Dewey in 1873 and first published in 1876."}),
    ]);
    let shots = [FewShotExample {
        query_text: "where did the dewey decimal system come from".into(),
        answer_doc_ids: vec!["ddc".into()],
    }];
    let q = query("q", "when does monday night raw come on hulu", &["raw"], 1);
    let layout = build_retrieval_prompt(
        &PromptTemplateSet::default(),
        &view,
        &q,
        &shots,
        None,
        &TokenizerHandle::builtin(),
    )
    .map_err(|e| e.to_string())?;
    let golden =
        fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/nq_prompt.golden.txt")).unwrap();
    if layout.text != golden {
        let at = layout
            .text
            .chars()
            .zip(golden.chars())
            .position(|(a, b)| a != b)
            .unwrap_or(layout.text.len().min(golden.len()));
        return Err(format!("first difference at char {at}"));
    }
    Ok(format!("{} chars identical", golden.chars().count()))
}

/// Brute force: a success is chosen iff no other success beats it on
/// (tokens, text, id); failures are rejected as failures.
fn labeling_oracle(vs: &[(String, String, usize, bool)]) -> Vec<(Label, LabelReason)> {
    let mut out = Vec::new();
    for (i, (id, text, n, ok)) in vs.iter().enumerate() {
        if !ok {
            out.push((Label::Rejected, LabelReason::RetrievalFailed));
            continue;
        }
        let beaten = vs
            .iter()
            .enumerate()
            .any(|(j, (id2, t2, n2, ok2))| j != i && *ok2 && (n2, t2, id2) < (n, text, id));
        out.push(if beaten {
            (Label::Rejected, LabelReason::LongerThanChosen)
        } else {
            (Label::Chosen, LabelReason::IsChosen)
        });
    }
    out
}

fn c2_labeling_oracle() -> Outcome {
    let view = view_from(&[
        json!({"id": "d0", "title": "A", "content": "first"}),
        json!({"id": "gold", "title": "Gold", "content": "original gold passage"}),
        json!({"id": "d2", "title": "C", "content": "third"}),
    ]);
    // Retrieval succeeds exactly when the substituted gold passage starts with "ok".
    let backend = FnBackend::new(|_, prompt| {
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("ID: ") {
                if line.contains(" | TITLE: Gold | CONTENT: ok ") {
                    let id = rest.split(' ').next().unwrap();
                    return Ok(format!("Final Answer: ['{id}']"));
                }
            }
        }
        Ok("Final Answer: []".into())
    });
    let gw = Gateway::new(vec![EndpointConfig::chat("lclm", "m")], Arc::new(backend)).without_cache();
    let templates = PromptTemplateSet::default();
    let tok = TokenizerHandle::builtin();
    let ctx = LabelContext {
        gateway: &gw,
        lclm_endpoint: "lclm",
        templates: &templates,
        tokenizer: &tok,
        shots: &[],
    };
    let q = query("q", "which?", &["gold"], 1);
    let mut rng = rng_for(2, "acceptance.labeling");
    let mut n_variants = 0;
    for group in 0..1000 {
        let n = rng.gen_range(1..=6);
        let mut variants = Vec::new();
        let mut truth = Vec::new();
        for v in 0..n {
            let ok = rng.gen_bool(0.6);
            let len = rng.gen_range(2..=6);
            let filler: Vec<&str> = (1..len).map(|_| *["x", "y"].choose(&mut rng).unwrap()).collect();
            let text = format!("{} {}", if ok { "ok" } else { "no" }, filler.join(" "));
            let id = format!("g{}#{v}", rng.gen_range(0..3));
            let id = format!("{id}.{v}");
            let cd = CompressedDocument::new("gold", &id, "g", &text, &tok);
            truth.push((id, text, cd.token_count, ok));
            variants.push(cd);
        }
        n_variants += n;
        let got = forge::label_variants(&ctx, &view, &q, "gold", &variants).map_err(|e| e.to_string())?;
        let want = labeling_oracle(&truth);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            ensure!(
                (g.label, g.reason) == *w && g.retrieval_success == truth[i].3,
                "group {group} variant {i}: got {:?}/{:?}, oracle {:?}",
                g.label,
                g.reason,
                w
            );
        }
    }
    Ok(format!("1000 groups, {n_variants} variants agree"))
}

fn c3_metric_oracles() -> Outcome {
    let mut rng = rng_for(3, "acceptance.metrics");
    for t in 0..10_000 {
        let universe: Vec<String> = (0..rng.gen_range(1..30)).map(|i| format!("d{i}")).collect();
        let mut ranked = universe.clone();
        ranked.shuffle(&mut rng);
        ranked.truncate(rng.gen_range(0..=universe.len()));
        let n_gold = rng.gen_range(1..=universe.len());
        let gold: Vec<String> = universe.choose_multiple(&mut rng, n_gold).cloned().collect();
        let k = rng.gen_range(1..=universe.len() + 3);

        let top: HashSet<&String> = ranked.iter().take(k).collect();
        let g: HashSet<&String> = gold.iter().collect();
        let inter = top.intersection(&g).count() as f64;
        let r = inter / g.len() as f64;
        let p = inter / k as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };

        let (r2, p2, f2) = (
            recall_at_k(&ranked, &gold, k).unwrap(),
            precision_at_k(&ranked, &gold, k).unwrap(),
            f1_at_k(&ranked, &gold, k).unwrap(),
        );
        ensure!(
            r == r2 && p == p2 && f == f2,
            "triple {t}: ({r2}, {p2}, {f2}) vs ({r}, {p}, {f})"
        );
    }
    let rate = compression_rate_from_averages(169.0, 78.60).unwrap();
    ensure!((rate - 2.15).abs() <= 0.005, "compression rate {rate}");
    Ok(format!("10000 triples exact; FEVER rate {rate:.4}"))
}

fn c4_bm25_oracle() -> Outcome {
    let (k1, b) = (1.5, 0.75);
    let mut rng = rng_for(4, "acceptance.bm25");
    let words: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
    let mut total_queries = 0;
    let mut worst: f64 = 0.0;
    for corpus in 0..8 {
        let n = rng.gen_range(1..=100);
        let docs: Vec<Vec<String>> = (0..n)
            .map(|_| {
                (0..rng.gen_range(1..40))
                    .map(|_| words.choose(&mut rng).unwrap().to_uppercase())
                    .collect()
            })
            .collect();
        let rows: Vec<serde_json::Value> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| json!({"id": format!("doc{:03}", (i * 37) % 1000), "content": d.join(" ")}))
            .collect();
        let view = view_from(&rows);
        let index = bm25_build(&view, k1, b).map_err(|e| e.to_string())?;

        let lower: Vec<Vec<String>> = docs
            .iter()
            .map(|d| d.iter().map(|w| w.to_lowercase()).collect())
            .collect();
        let avgdl = lower.iter().map(|d| d.len() as f64).sum::<f64>() / n as f64;
        let n_queries = rng.gen_range(1..=500);
        total_queries += n_queries;
        for qi in 0..n_queries {
            let q: Vec<String> = (0..rng.gen_range(1..6))
                .map(|_| words.choose(&mut rng).unwrap().clone())
                .collect();
            let mut oracle: Vec<(f64, String)> = Vec::new();
            for (di, d) in lower.iter().enumerate() {
                let mut s = 0.0;
                for t in &q {
                    let df = lower.iter().filter(|x| x.contains(t)).count() as f64;
                    let tf = d.iter().filter(|w| *w == t).count() as f64;
                    let idf = (1.0 + (n as f64 - df + 0.5) / (df + 0.5)).ln();
                    s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl));
                }
                oracle.push((s, rows[di]["id"].as_str().unwrap().to_string()));
            }
            let scores = index.score_all(&q.join(" "));
            for (i, (s, _)) in oracle.iter().enumerate() {
                worst = worst.max((s - scores[i]).abs());
                ensure!(
                    (s - scores[i]).abs() <= 1e-9,
                    "corpus {corpus} query {qi} doc {i}: {} vs {s}",
                    scores[i]
                );
            }
            let any_term = q.iter().any(|t| lower.iter().any(|d| d.contains(t)));
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            let want: Vec<String> = if any_term {
                oracle.into_iter().map(|(_, id)| id).collect()
            } else {
                vec![]
            };
            let got = bm25_retrieve(&index, "q", &q.join(" "), n)
                .map_err(|e| e.to_string())?
                .ranked_ids;
            ensure!(got == want, "corpus {corpus} query {qi}: ranking differs");
        }
    }
    Ok(format!("{total_queries} queries, max score diff {worst:e}"))
}

fn c5_loss_math() -> Outcome {
    let lo = orpo::log_odds_from_avg(-1.0).map_err(|e| e.to_string())?;
    let b = orpo::loss_color_from_avgs(-1.0, -2.0, 2.5, 3).map_err(|e| e.to_string())?;
    // Independent high-precision evaluation of the same example.
    let oracle_l_color = 2.786372698103712;

    let mut rng = rng_for(5, "acceptance.identity");
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x = orpo::loss_color_from_avgs(
            -rng.gen_range(1e-9..50.0),
            -rng.gen_range(1e-9..50.0),
            rng.gen_range(1e-3..10.0),
            rng.gen_range(1..500),
        )
        .map_err(|e| e.to_string())?;
        let err = ((x.l_color - x.l_sft) - x.lambda * x.l_or * x.length_gap as f64).abs();
        worst = worst.max(err / x.l_color.abs().max(1.0));
    }

    let mut failures = Vec::new();
    if (lo - (-0.541325)).abs() > 1e-5 {
        failures.push(format!("log_odds(-1) = {lo:.6}"));
    }
    if (b.l_color - oracle_l_color).abs() > 1e-9 {
        failures.push(format!(
            "l_color {:.9} disagrees with oracle {oracle_l_color:.9}",
            b.l_color
        ));
    }
    if (b.l_color - 2.807433).abs() > 1e-5 {
        failures.push(format!(
            "l_color = {:.6} (oracle {oracle_l_color:.6}), expected 2.807433 ± 1e-5",
            b.l_color
        ));
    }
    if worst > 4.0 * f64::EPSILON {
        failures.push(format!("identity error {worst:e}"));
    }
    if failures.is_empty() {
        Ok(format!(
            "log_odds(-1) = {lo:.6}, l_color = {:.6}, identity max err {worst:e}",
            b.l_color
        ))
    } else {
        Err(failures.join("; "))
    }
}

fn c6_gradient_check() -> Outcome {
    let mut rng = rng_for(6, "acceptance.gradients");
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (model, pair) = experiment::random_model_and_pair(&mut rng);
        let lambda = rng.gen_range(0.5..5.0);
        let r = orpo::check_gradient(&model, &pair, lambda, pair.gap(), false).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_err);
        ensure!(
            r.passed,
            "model {i}: relative error {:e} at parameter {}",
            r.max_rel_err,
            r.worst_param
        );
    }
    Ok(format!("20 models, max relative error {worst:e}"))
}

fn c7_length_dynamic() -> Outcome {
    let (small, large, per_gap) = (1, 8, 6);
    let mut margins = Vec::new();
    for seed in 1..=5 {
        let pairs = orpo::synthetic_length_pairs(seed, 6, 2, &[small, large], per_gap);
        let large_idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].gap() == large as i64).collect();
        let margin = |v: TrainVariant| -> Result<f64, String> {
            let r = orpo::toy_train(&pairs, v, 60, 0.05, 1.0, seed).map_err(|e| e.to_string())?;
            let d = &r.trace.last().unwrap().deltas;
            Ok(large_idx.iter().map(|&i| d[i]).sum::<f64>() / large_idx.len() as f64)
        };
        let plain = margin(TrainVariant::Orpo)?;
        let reg = margin(TrainVariant::OrpoReg)?;
        ensure!(reg >= plain, "seed {seed}: orpo_reg margin {reg:.4} < orpo {plain:.4}");
        margins.push(format!("{reg:.3}>={plain:.3}"));
    }
    Ok(format!("large-gap margins {}", margins.join(", ")))
}

fn forge_fixture() -> (CorpusView, Vec<QueryRecord>, MockBackend, Vec<EndpointConfig>) {
    let rows: Vec<serde_json::Value> = (0..20)
        .map(|i| {
            let mut w: Vec<String> = (0..12).map(|j| format!("f{j}")).collect();
            w[i % 9] = format!("key{i}");
            json!({"id": format!("doc{i:02}"), "title": format!("Doc{i}"), "content": w.join(" ")})
        })
        .collect();
    let view = view_from(&rows);
    let queries: Vec<QueryRecord> = (0..20)
        .map(|i| {
            query(
                &format!("q{i:02}"),
                &format!("find key{i}"),
                &[&format!("doc{i:02}")],
                1,
            )
        })
        .collect();
    let head = |n: usize| {
        MockScript::new(
            vec![MockRule::regex(
                &format!(r"^Summarize the following content: ((?:\S+ ){{{}}}\S+)", n - 1),
                "$1",
            )
            .unwrap()],
            "",
        )
    };
    let lclm_rules = (0..20)
        .map(|i| {
            MockRule::regex(
                &format!(r"(?s)ID: (\d+) \| TITLE: Doc{i} \| CONTENT: [^|\n]*\bkey{i}\b.*query: find key{i}\n"),
                "Final Answer: ['$1']",
            )
            .unwrap()
        })
        .collect();
    let backend = MockBackend::new()
        .with_script("head3", head(3))
        .with_script("head6", head(6))
        .with_script("head9", head(9))
        .with_script("lclm", MockScript::new(lclm_rules, "Final Answer: []"));
    let eps = ["head3", "head6", "head9", "lclm"]
        .iter()
        .map(|n| EndpointConfig::chat(n, n))
        .collect();
    (view, queries, backend, eps)
}

fn c8_forge_pipeline() -> Outcome {
    let (view, queries, backend, eps) = forge_fixture();
    let gw = Gateway::new(eps, Arc::new(backend)).with_max_parallel(4);
    let templates = PromptTemplateSet::default();
    let tok = TokenizerHandle::builtin();
    let mut opts = ForgeOptions::new(vec!["head3".into(), "head6".into(), "head9".into()], "lclm");
    opts.seed = 11;
    let files = [
        "train.jsonl",
        "validation.jsonl",
        "manifest.json",
        "labels.jsonl",
        "trainer_config.json",
    ];
    let mut runs = Vec::new();
    let mut manifest = None;
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out =
            forge::run_forge(&gw, &templates, &tok, &view, &queries, &opts, dir.path()).map_err(|e| e.to_string())?;
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        let mut rows = 0;
        for f in ["train.jsonl", "validation.jsonl"] {
            for line in fs::read_to_string(dir.path().join(f)).unwrap().lines() {
                let v: serde_json::Value = serde_json::from_str(line).unwrap();
                let gap = v["meta"]["length_gap"].as_u64().unwrap();
                ensure!(gap >= 1, "pair with gap {gap}");
                ensure!(v["chosen"] != v["rejected"], "identical chosen and rejected");
                rows += 1;
            }
        }
        let c = out.manifest.counts;
        ensure!(c.balanced(), "counters do not balance: {c:?}");
        ensure!(rows == c.pairs_emitted, "{rows} rows vs {} emitted", c.pairs_emitted);
        ensure!(
            c.successes + c.failures == c.variants_generated,
            "success/failure counts: {c:?}"
        );
        runs.push(bytes);
        manifest = Some(out.manifest);
    }
    ensure!(runs[0] == runs[1], "rerun differs");
    let m = manifest.unwrap();
    ensure!(m.counts.pairs_emitted > 0, "no pairs emitted");
    Ok(format!(
        "{} pairs, {} skipped, avg chosen {:.2} / rejected {:.2}; rerun identical",
        m.counts.pairs_emitted, m.counts.pairs_skipped_length, m.avg_chosen_tokens, m.avg_rejected_tokens
    ))
}

fn c9_position_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rows: Vec<String> = (0..9)
        .map(|i| json!({"id": format!("n{i}"), "title": format!("Noise {i}"), "content": "filler text"}).to_string())
        .collect();
    rows.push(json!({"id": "gold", "title": "Gold", "content": "the answer"}).to_string());
    fs::write(d.join("corpus.jsonl"), rows.join("\n") + "\n").unwrap();
    fs::write(
        d.join("queries.jsonl"),
        json!({"qid": "q", "text": "where is the answer", "gold_ids": ["gold"]}).to_string() + "\n",
    )
    .unwrap();
    // Correct only while the gold document sits in the first half (index < 5 of 10).
    fs::write(
        d.join("mock.json"),
        json!({"rules": [{"regex": r"ID: ([0-4]) \| TITLE: Gold \|", "response": "Final Answer: ['$1']"}],
               "default_response": "Final Answer: []"})
        .to_string(),
    )
    .unwrap();
    let mut cfg = ExperimentConfig::new(d.join("corpus.jsonl"));
    cfg.queries_path = Some(d.join("queries.jsonl"));
    cfg.output_dir = d.join("out");
    let rt = Runtime::new(cfg, Some(&d.join("mock.json"))).map_err(|e| e.to_string())?;
    let sweep = experiment::run_position_sweep(&rt).map_err(|e| e.to_string())?;
    let got: Vec<(f64, f64)> = sweep
        .iter()
        .map(|r| (r.fraction, r.report.aggregate.mean_primary_metric))
        .collect();
    let want = vec![(0.0, 1.0), (0.2, 1.0), (0.4, 1.0), (0.6, 0.0), (0.8, 0.0), (1.0, 0.0)];
    ensure!(got == want, "sweep {got:?}");
    let csv = fs::read_to_string(d.join("out/sweep.csv")).unwrap();
    ensure!(csv.lines().count() == 7, "csv rows");
    Ok("1,1,1,0,0,0 across 0..1 in steps of 0.2".into())
}

/// Case-insensitive last marker, first bracketed list after it, split on
/// commas, strip whitespace and quotes, drop empties, keep first
/// occurrences.
fn parser_oracle(text: &str) -> Vec<String> {
    let lower = text.to_ascii_lowercase();
    let Some(at) = lower.rfind("final answer:") else {
        return vec![];
    };
    let tail = &text[at + "final answer:".len()..];
    let Some(open) = tail.find('[') else { return vec![] };
    let Some(len) = tail[open..].find(']') else {
        return vec![];
    };
    let mut out: Vec<String> = Vec::new();
    for part in tail[open + 1..open + len].split(',') {
        let t = part.trim().trim_matches(['\'', '"']).trim().to_string();
        if !t.is_empty() && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

fn c10_parser() -> Outcome {
    let hand: [(&str, &[&str]); 50] = [
        ("Final Answer: ['199']", &["199"]),
        ("Final Answer: [1, 2, 3]", &["1", "2", "3"]),
        ("final answer: [4]", &["4"]),
        ("FINAL ANSWER: [\"5\", '6']", &["5", "6"]),
        ("Final Answer: [id1, id2, ...]\nFinal Answer: [7]", &["7"]),
        ("Final Answer: [3, 3, 1]", &["3", "1"]),
        ("no marker [1,2]", &[]),
        ("", &[]),
        ("Final Answer:", &[]),
        ("Final Answer: []", &[]),
        ("Final Answer: [ ]", &[]),
        ("Final Answer: [' 8 ']", &["8"]),
        ("Final Answer: [1,,2]", &["1", "2"]),
        ("Final Answer: [1, 2", &[]),
        ("Final Answer: 1, 2]", &[]),
        ("Final Answer: [9] trailing text [10]", &["9"]),
        ("Final Answer: [a] Final Answer: [b]", &["b"]),
        ("Final Answer: ['x'] final ANSWER: ['y']", &["y"]),
        ("Final Answer:\n\n[12]", &["12"]),
        ("Final Answer: [\"13\",\"13\",\"14\"]", &["13", "14"]),
        ("Final Answer: ['15', \"15\"]", &["15"]),
        ("TITLE: A | ID: 3\nFinal Answer: ['3']", &["3"]),
        ("Final Answer: [0]", &["0"]),
        ("Final Answer: [007]", &["007"]),
        ("Final Answer: [-1]", &["-1"]),
        ("Final Answer: [1.5]", &["1.5"]),
        ("Final  Answer: [1]", &[]),
        ("FinalAnswer: [1]", &[]),
        ("Final Answer : [1]", &[]),
        ("Final Answer: [1]\nFinal Answer: no list", &[]),
        ("prefix Final Answer: ['ü', 'é']", &["ü", "é"]),
        ("Final Answer: ['a b']", &["a b"]),
        ("Final Answer: ['1'] \n", &["1"]),
        ("Final Answer: [ '2' , '3' ]", &["2", "3"]),
        ("Final Answer: [\"'4'\"]", &["4"]),
        ("Final Answer: ['5',]", &["5"]),
        ("Final Answer: [,]", &[]),
        ("Final Answer: ['']", &[]),
        ("final answer: [6] FINAL ANSWER: [7] Final Answer: [8]", &["8"]),
        ("Final Answer: [9, 10, 9, 10, 11]", &["9", "10", "11"]),
        ("Final Answer: [\t12\t]", &["12"]),
        ("Final Answer: [13]]", &["13"]),
        (
            "Some reasoning first. Final Answer: ['16', '17', '18']",
            &["16", "17", "18"],
        ),
        ("Final Answer: ['19'] and Final Answer: []", &[]),
        ("Answer: [20]", &[]),
        ("The Final Answer: [21]", &["21"]),
        ("Final Answer: ['22'\n, '23']", &["22", "23"]),
        ("Final Answer:['24']", &["24"]),
        ("final answer: [\"25\"] extra ] ]", &["25"]),
        ("ÜBER → Final Answer: ['26'] → ende", &["26"]),
    ];
    for (i, (text, want)) in hand.iter().enumerate() {
        let got = parse_final_answer(text);
        ensure!(got == *want, "hand case {i} {text:?}: {got:?}");
    }

    let fragments = [
        "Final Answer:",
        "final answer:",
        "FINAL ANSWER:",
        "Final Answer",
        "[",
        "]",
        "'",
        "\"",
        ",",
        " ",
        "\n",
        "0",
        "17",
        "199",
        "é",
        "→",
        "ID:",
        "abc",
        "[1, 2]",
        "['3']",
        "\t",
        "Ⅻ",
        "🙂",
        ":",
        "answer",
    ];
    let mut rng = rng_for(10, "acceptance.parser");
    let mut with_list = 0;
    for i in 0..10_000 {
        let mut s = String::new();
        for _ in 0..rng.gen_range(0..30) {
            if rng.gen_bool(0.1) {
                s.push(char::from_u32(rng.gen_range(0x20..0x3000)).unwrap_or('?'));
            } else {
                s.push_str(fragments.choose(&mut rng).unwrap());
            }
        }
        let got = catch_unwind(|| parse_final_answer(&s)).map_err(|_| format!("fuzz case {i} panicked: {s:?}"))?;
        ensure!(got == parser_oracle(&s), "fuzz case {i} {s:?}: {got:?}");
        let unique: BTreeSet<&String> = got.iter().collect();
        ensure!(unique.len() == got.len(), "fuzz case {i}: duplicates");
        with_list += (!got.is_empty()) as usize;
    }
    Ok(format!("50 hand cases; 10000 fuzz cases ({with_list} yielding ids)"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "prompt bit-exactness", 1.0, c1_prompt_golden),
        (2, "labeling oracle equivalence", 5.0, c2_labeling_oracle),
        (3, "metric oracles", 5.0, c3_metric_oracles),
        (4, "BM25 oracle equivalence", 10.0, c4_bm25_oracle),
        (5, "loss math", 5.0, c5_loss_math),
        (6, "gradient check", 30.0, c6_gradient_check),
        (7, "length-dynamic property", 120.0, c7_length_dynamic),
        (8, "end-to-end mock forge", 30.0, c8_forge_pipeline),
        (9, "positional sweep plumbing", 10.0, c9_position_sweep),
        (10, "parser robustness", 10.0, c10_parser),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, title, budget, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(d) if secs > budget => Err(format!("over budget: {d}")),
            r => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(e) => ("FAIL", e.as_str()),
        };
        println!("acceptance {n:>2} {status} {title} ({secs:.2}s, budget {budget}s) {detail}");
        failed += result.is_err() as usize;
    }
    println!("acceptance summary: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
