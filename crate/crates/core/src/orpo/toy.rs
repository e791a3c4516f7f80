//! A bigram language model small enough to differentiate by hand.
//!
//! Next-token logits are `W[prev] + b`, where `prev` is the previous symbol
//! or a begin-of-sequence row when there is none. Targets are scored
//! teacher-forced after the prompt.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_lambda, loss_color_from_avgs, sigmoid, LossBreakdown, OrpoError, SequenceLogProbs};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// `(V + 1) × V`, row-major; the last row follows BOS.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyModel {
    pub fn new(vocab: Vec<String>, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        let v = vocab.len();
        assert!(v > 0, "empty vocabulary");
        assert_eq!(weights.len(), (v + 1) * v, "weights must be (V+1)×V");
        assert_eq!(bias.len(), v, "bias must have V entries");
        let index = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            vocab,
            index,
            weights,
            bias,
        }
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn uniform(vocab: Vec<String>) -> Self {
        let v = vocab.len();
        Self::new(vocab, vec![0.0; (v + 1) * v], vec![0.0; v])
    }

    /// Parameters drawn from U(-scale, scale).
    pub fn random(vocab: Vec<String>, rng: &mut impl Rng, scale: f64) -> Self {
        let v = vocab.len();
        let weights = (0..(v + 1) * v).map(|_| rng.gen_range(-scale..=scale)).collect();
        let bias = (0..v).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self::new(vocab, weights, bias)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn bos(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weights followed by bias.
    pub fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let (w, b) = p.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }

    pub fn weight_mut(&mut self, prev: usize, next: usize) -> &mut f64 {
        let v = self.vocab.len();
        &mut self.weights[prev * v + next]
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>, OrpoError> {
        symbols
            .iter()
            .map(|s| {
                self.index
                    .get(s.as_ref())
                    .copied()
                    .ok_or_else(|| OrpoError::UnknownSymbol(s.as_ref().to_string()))
            })
            .collect()
    }

    /// Next-token distribution after `prev`.
    pub fn softmax(&self, prev: usize) -> Vec<f64> {
        let v = self.vocab.len();
        let z: Vec<f64> = (0..v).map(|j| self.weights[prev * v + j] + self.bias[j]).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    fn log_softmax(&self, prev: usize) -> Vec<f64> {
        let v = self.vocab.len();
        let z: Vec<f64> = (0..v).map(|j| self.weights[prev * v + j] + self.bias[j]).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.into_iter().map(|x| (x - lse).min(0.0)).collect()
    }

    /// (context row, target) for each target position.
    fn steps(&self, prompt: &[usize], target: &[usize]) -> Vec<(usize, usize)> {
        let mut prev = prompt.last().copied().unwrap_or(self.bos());
        target
            .iter()
            .map(|&y| {
                let s = (prev, y);
                prev = y;
                s
            })
            .collect()
    }
}

pub fn toy_logprobs<S: AsRef<str>>(
    model: &ToyModel,
    prompt: &[S],
    target: &[S],
) -> Result<SequenceLogProbs, OrpoError> {
    if target.is_empty() {
        return Err(OrpoError::EmptyTarget);
    }
    let p = model.encode(prompt)?;
    let t = model.encode(target)?;
    let logps = model
        .steps(&p, &t)
        .into_iter()
        .map(|(c, y)| model.log_softmax(c)[y])
        .collect();
    SequenceLogProbs::new(logps)
}

/// A preference pair over toy symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyPair {
    pub prompt: Vec<String>,
    pub chosen: Vec<String>,
    pub rejected: Vec<String>,
}

impl ToyPair {
    pub fn gap(&self) -> i64 {
        self.rejected.len() as i64 - self.chosen.len() as i64
    }
}

/// Gradient with respect to the model's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ToyGrad {
    pub fn zeros(model: &ToyModel) -> Self {
        Self {
            w: vec![0.0; model.weights.len()],
            b: vec![0.0; model.bias.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.w.iter().chain(&self.b).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().chain(&self.b).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &ToyGrad, c: f64) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += c * b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += c * b;
        }
    }

    /// Accumulate `coeff · d avg_loglik / dθ` for one sequence.
    fn add_avg_loglik(&mut self, model: &ToyModel, steps: &[(usize, usize)], coeff: f64) {
        let v = model.vocab.len();
        let c = coeff / steps.len() as f64;
        for &(ctx, y) in steps {
            let p = model.softmax(ctx);
            for (j, pj) in p.iter().enumerate() {
                let g = c * ((j == y) as u8 as f64 - pj);
                self.w[ctx * v + j] += g;
                self.b[j] += g;
            }
        }
    }
}

/// Gradient split into the likelihood term and the (λ·gap-weighted)
/// odds-ratio term.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub loss: LossBreakdown,
    pub sft: ToyGrad,
    pub or_term: ToyGrad,
}

impl ObjectiveGrad {
    pub fn total(&self) -> ToyGrad {
        let mut g = self.sft.clone();
        g.add_scaled(&self.or_term, 1.0);
        g
    }
}

fn avg_of(model: &ToyModel, pair_prompt: &[usize], target: &[usize]) -> Result<f64, OrpoError> {
    if target.is_empty() {
        return Err(OrpoError::EmptyTarget);
    }
    let s: f64 = model
        .steps(pair_prompt, target)
        .into_iter()
        .map(|(c, y)| model.log_softmax(c)[y])
        .sum();
    Ok(s / target.len() as f64)
}

/// Loss of `pair` with an explicit gap factor.
pub fn objective(model: &ToyModel, pair: &ToyPair, lambda: f64, gap: i64) -> Result<LossBreakdown, OrpoError> {
    let p = model.encode(&pair.prompt)?;
    let a_w = avg_of(model, &p, &model.encode(&pair.chosen)?)?;
    let a_l = avg_of(model, &p, &model.encode(&pair.rejected)?)?;
    loss_color_from_avgs(a_w, a_l, lambda, gap)
}

/// Analytic gradient of `L_SFT + λ · L_OR · gap`.
pub fn grad_objective(model: &ToyModel, pair: &ToyPair, lambda: f64, gap: i64) -> Result<ObjectiveGrad, OrpoError> {
    check_lambda(lambda)?;
    let p = model.encode(&pair.prompt)?;
    let yw = model.encode(&pair.chosen)?;
    let yl = model.encode(&pair.rejected)?;
    let a_w = avg_of(model, &p, &yw)?;
    let a_l = avg_of(model, &p, &yl)?;
    let loss = loss_color_from_avgs(a_w, a_l, lambda, gap)?;
    let sw = model.steps(&p, &yw);
    let sl = model.steps(&p, &yl);

    let mut sft = ToyGrad::zeros(model);
    sft.add_avg_loglik(model, &sw, -1.0);

    // dΔ/da = 1 / (1 - e^a); dL_OR/dΔ = -σ(-Δ)
    let c = lambda * gap as f64 * sigmoid(-loss.delta);
    let mut or_term = ToyGrad::zeros(model);
    or_term.add_avg_loglik(model, &sw, -c / -a_w.exp_m1());
    or_term.add_avg_loglik(model, &sl, c / -a_l.exp_m1());
    Ok(ObjectiveGrad { loss, sft, or_term })
}

/// Gradient with the pair's own length gap as the factor.
pub fn grad_loss_color(model: &ToyModel, pair: &ToyPair, lambda: f64) -> Result<ObjectiveGrad, OrpoError> {
    grad_objective(model, pair, lambda, pair.gap())
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    /// max |a - n| / max(|a|, |n|, floor / rel_tol)
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: usize,
    pub passed: bool,
}

/// Compare the analytic gradient with central finite differences.
/// `flip_or_sign` negates the odds-ratio term of the analytic side, for
/// exercising the checker itself.
pub fn check_gradient(
    model: &ToyModel,
    pair: &ToyPair,
    lambda: f64,
    gap: i64,
    flip_or_sign: bool,
) -> Result<GradCheckReport, OrpoError> {
    let g = grad_objective(model, pair, lambda, gap)?;
    let mut analytic = g.sft.clone();
    analytic.add_scaled(&g.or_term, if flip_or_sign { -1.0 } else { 1.0 });
    let analytic = analytic.flat();

    let base = model.params();
    let mut m = model.clone();
    let mut report = GradCheckReport {
        n_params: base.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_param: 0,
        passed: true,
    };
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        m.set_params(&p);
        let up = objective(&m, pair, lambda, gap)?.l_color;
        p[i] = base[i] - FD_STEP;
        m.set_params(&p);
        let down = objective(&m, pair, lambda, gap)?.l_color;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(FD_ABS_FLOOR / FD_REL_TOL);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    report.passed = report.max_rel_err < FD_REL_TOL;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    Sft,
    /// Odds-ratio term with a gap factor of 1.
    Orpo,
    /// Odds-ratio term scaled by each pair's length gap.
    OrpoReg,
}

impl TrainVariant {
    fn lambda_and_gap(self, lambda: f64, pair: &ToyPair) -> (f64, i64) {
        match self {
            TrainVariant::Sft => (0.0, 1),
            TrainVariant::Orpo => (lambda, 1),
            TrainVariant::OrpoReg => (lambda, pair.gap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_sft: f64,
    pub l_or: f64,
    /// The trained variant's own objective.
    pub l_color: f64,
    pub mean_delta: f64,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: ToyModel,
    /// Row `s` describes the model after `s` updates.
    pub trace: Vec<TraceRow>,
}

fn evaluate(
    model: &ToyModel,
    pairs: &[ToyPair],
    variant: TrainVariant,
    lambda: f64,
    step: usize,
) -> Result<TraceRow, OrpoError> {
    let n = pairs.len() as f64;
    let mut row = TraceRow {
        step,
        l_sft: 0.0,
        l_or: 0.0,
        l_color: 0.0,
        mean_delta: 0.0,
        deltas: Vec::with_capacity(pairs.len()),
    };
    for p in pairs {
        let (l, g) = variant.lambda_and_gap(lambda, p);
        let b = objective(model, p, l, g).map_err(|e| match e {
            OrpoError::Singularity => OrpoError::Diverged { step },
            e => e,
        })?;
        row.l_sft += b.l_sft / n;
        row.l_or += b.l_or / n;
        row.l_color += b.l_color / n;
        row.deltas.push(b.delta);
    }
    row.mean_delta = row.deltas.iter().sum::<f64>() / n;
    if !(row.l_color.is_finite() && row.mean_delta.is_finite()) {
        return Err(OrpoError::Diverged { step });
    }
    Ok(row)
}

/// Full-batch gradient descent from a given model.
pub fn toy_train_from(
    mut model: ToyModel,
    pairs: &[ToyPair],
    variant: TrainVariant,
    steps: usize,
    lr: f64,
    lambda: f64,
) -> Result<TrainResult, OrpoError> {
    if pairs.is_empty() {
        return Err(OrpoError::NoPairs);
    }
    check_lambda(lambda)?;
    if variant == TrainVariant::OrpoReg {
        if let Some(p) = pairs.iter().find(|p| p.gap() < 1) {
            return Err(OrpoError::InvalidGap(p.gap()));
        }
    }
    let mut trace = vec![evaluate(&model, pairs, variant, lambda, 0)?];
    let n = pairs.len() as f64;
    for step in 1..=steps {
        let mut grad = ToyGrad::zeros(&model);
        for p in pairs {
            let (l, g) = variant.lambda_and_gap(lambda, p);
            let og = grad_objective(&model, p, l, g).map_err(|e| match e {
                OrpoError::Singularity => OrpoError::Diverged { step },
                e => e,
            })?;
            grad.add_scaled(&og.total(), 1.0 / n);
        }
        let mut params = model.params();
        for (x, g) in params.iter_mut().zip(grad.flat()) {
            *x -= lr * g;
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(OrpoError::Diverged { step });
        }
        model.set_params(&params);
        trace.push(evaluate(&model, pairs, variant, lambda, step)?);
    }
    Ok(TrainResult { model, trace })
}

/// Train a fresh model whose vocabulary is every symbol in `pairs`,
/// initialised from the `toy.init` stream of `seed`.
pub fn toy_train(
    pairs: &[ToyPair],
    variant: TrainVariant,
    steps: usize,
    lr: f64,
    lambda: f64,
    seed: u64,
) -> Result<TrainResult, OrpoError> {
    if pairs.is_empty() {
        return Err(OrpoError::NoPairs);
    }
    let vocab: BTreeSet<&String> = pairs
        .iter()
        .flat_map(|p| p.prompt.iter().chain(&p.chosen).chain(&p.rejected))
        .collect();
    let vocab: Vec<String> = vocab.into_iter().cloned().collect();
    let model = ToyModel::random(vocab, &mut rng_for(seed, "toy.init"), 0.1);
    toy_train_from(model, pairs, variant, steps, lr, lambda)
}

/// Pairs whose chosen side is `chosen_len` symbols and whose rejected side
/// is `gap` symbols longer, `per_gap` pairs for each gap.
pub fn synthetic_length_pairs(
    seed: u64,
    vocab_size: usize,
    chosen_len: usize,
    gaps: &[usize],
    per_gap: usize,
) -> Vec<ToyPair> {
    let vocab: Vec<String> = (0..vocab_size).map(|i| format!("s{i}")).collect();
    let mut rng = rng_for(seed, "toy.pairs");
    let mut draw =
        |n: usize| -> Vec<String> { (0..n).map(|_| vocab.choose(&mut rng).expect("vocab").clone()).collect() };
    let mut out = Vec::new();
    for &gap in gaps {
        for _ in 0..per_gap {
            let prompt = draw(2);
            let chosen = draw(chosen_len);
            let rejected = draw(chosen_len + gap);
            out.push(ToyPair {
                prompt,
                chosen,
                rejected,
            });
        }
    }
    out
}

pub fn write_toy_pairs(path: &Path, pairs: &[ToyPair]) -> Result<(), OrpoError> {
    let io = |e: std::io::Error| OrpoError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p).expect("pair serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_toy_pairs(path: &Path) -> Result<Vec<ToyPair>, OrpoError> {
    let io = |e: std::io::Error| OrpoError::Io(format!("{}: {e}", path.display()));
    let r = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| OrpoError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), OrpoError> {
    let io = |e: std::io::Error| OrpoError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "step,l_sft,l_or,l_color,mean_delta").map_err(io)?;
    for r in trace {
        writeln!(w, "{},{},{},{},{}", r.step, r.l_sft, r.l_or, r.l_color, r.mean_delta).map_err(io)?;
    }
    w.flush().map_err(io)
}
