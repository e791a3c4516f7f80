//! Length-regularized odds-ratio preference objective.
//!
//! With `a = mean(log p(y_t | ·))` the length-normalized log-likelihood of a
//! sequence and `P = exp(a)`:
//!
//! ```text
//! log_odds(a) = a - log(1 - exp(a))
//! Δ           = log_odds(a_w) - log_odds(a_l)
//! L_OR        = -log σ(Δ) = softplus(-Δ)
//! L_SFT       = -a_w
//! L           = L_SFT + λ · L_OR · (|y_l| - |y_w|)
//! ```

mod toy;

use serde::{Deserialize, Serialize};

pub use toy::{
    check_gradient, grad_loss_color, grad_objective, objective, read_toy_pairs, synthetic_length_pairs, toy_logprobs,
    toy_train, toy_train_from, write_toy_pairs, write_trace_csv, GradCheckReport, ObjectiveGrad, ToyGrad, ToyModel,
    ToyPair, TraceRow, TrainResult, TrainVariant,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OrpoError {
    #[error("sequence has no tokens")]
    EmptySequence,
    #[error("token log-probability {0} is not a finite value <= 0")]
    InvalidLogProb(f64),
    #[error("average log-likelihood is 0 (P = 1); odds are unbounded")]
    Singularity,
    #[error("length gap must be >= 1, got {0}")]
    InvalidGap(i64),
    #[error("lambda must be finite and >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("no training pairs")]
    NoPairs,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLogProbs {
    token_logps: Vec<f64>,
}

impl SequenceLogProbs {
    pub fn new(token_logps: Vec<f64>) -> Result<Self, OrpoError> {
        if token_logps.is_empty() {
            return Err(OrpoError::EmptySequence);
        }
        if let Some(&bad) = token_logps.iter().find(|x| !(x.is_finite() && **x <= 0.0)) {
            return Err(OrpoError::InvalidLogProb(bad));
        }
        Ok(Self { token_logps })
    }

    pub fn token_logps(&self) -> &[f64] {
        &self.token_logps
    }

    pub fn len(&self) -> usize {
        self.token_logps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn avg_loglik(s: &SequenceLogProbs) -> f64 {
    s.token_logps.iter().sum::<f64>() / s.len() as f64
}

/// `log(1 - exp(x))` for `x < 0`.
pub fn log1mexp(x: f64) -> f64 {
    if x < -std::f64::consts::LN_2 {
        (-x.exp()).ln_1p()
    } else {
        (-x.exp_m1()).ln()
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds of a sequence from its average log-likelihood.
pub fn log_odds_from_avg(avg: f64) -> Result<f64, OrpoError> {
    if avg >= 0.0 {
        return Err(OrpoError::Singularity);
    }
    Ok(avg - log1mexp(avg))
}

pub fn log_odds(s: &SequenceLogProbs) -> Result<f64, OrpoError> {
    log_odds_from_avg(avg_loglik(s))
}

/// `softplus(-(log_odds(a_w) - log_odds(a_l)))` from the two averages.
pub fn loss_or_from_avgs(avg_chosen: f64, avg_rejected: f64) -> Result<f64, OrpoError> {
    let delta = log_odds_from_avg(avg_chosen)? - log_odds_from_avg(avg_rejected)?;
    Ok(softplus(-delta))
}

pub fn loss_or(chosen: &SequenceLogProbs, rejected: &SequenceLogProbs) -> Result<f64, OrpoError> {
    loss_or_from_avgs(avg_loglik(chosen), avg_loglik(rejected))
}

pub fn loss_sft(chosen: &SequenceLogProbs) -> f64 {
    -avg_loglik(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sft: f64,
    pub l_or: f64,
    pub length_gap: i64,
    pub lambda: f64,
    pub l_color: f64,
    /// Chosen-over-rejected log-odds margin.
    pub delta: f64,
}

pub(crate) fn check_lambda(lambda: f64) -> Result<(), OrpoError> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(OrpoError::InvalidLambda(lambda))
    }
}

/// The composite from the two averages.
pub fn loss_color_from_avgs(
    avg_chosen: f64,
    avg_rejected: f64,
    lambda: f64,
    length_gap: i64,
) -> Result<LossBreakdown, OrpoError> {
    check_lambda(lambda)?;
    if length_gap < 1 {
        return Err(OrpoError::InvalidGap(length_gap));
    }
    let delta = log_odds_from_avg(avg_chosen)? - log_odds_from_avg(avg_rejected)?;
    let l_sft = -avg_chosen;
    let l_or = softplus(-delta);
    Ok(LossBreakdown {
        l_sft,
        l_or,
        length_gap,
        lambda,
        l_color: l_sft + lambda * l_or * length_gap as f64,
        delta,
    })
}

pub fn loss_color(
    chosen: &SequenceLogProbs,
    rejected: &SequenceLogProbs,
    lambda: f64,
    length_gap: i64,
) -> Result<LossBreakdown, OrpoError> {
    loss_color_from_avgs(avg_loglik(chosen), avg_loglik(rejected), lambda, length_gap)
}
