//! Training losses. Every function returns a `1 × 1` tape variable.

// Unused whenever std is linked, which then supplies the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const LOG_FLOOR: f64 = 1e-12;

/// Answer distribution over a shared class space (`1 × A` rows).
#[derive(Clone, Copy, Debug)]
pub struct PredictionDistribution {
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

impl PredictionDistribution {
    pub fn from_logits(tape: &mut Tape<'_>, logits: Var) -> Self {
        let log_probs = tape.log_softmax_rows(logits);
        let probs = tape.softmax_rows(logits);
        PredictionDistribution { logits, probs, log_probs }
    }

    /// Wraps an existing probability row; logits become clamped log-probabilities.
    pub fn from_probs(tape: &mut Tape<'_>, probs: Var) -> Self {
        let log_probs = tape.log_clamped(probs, LOG_FLOOR);
        PredictionDistribution { logits: log_probs, probs, log_probs }
    }

    pub fn classes(&self, tape: &Tape<'_>) -> usize {
        tape.shape(self.probs).1
    }

    pub fn argmax(&self, tape: &Tape<'_>) -> usize {
        tape.value(self.probs).row_argmax(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub igv_lambda1: f64,
    pub igv_lambda2: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { igv_lambda1: 1.0, igv_lambda2: 1.0, beta: 0.75 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("igv_lambda1", self.igv_lambda1), ("igv_lambda2", self.igv_lambda2), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a nonnegative real")));
            }
        }
        Ok(())
    }
}

fn dot_row(tape: &mut Tape<'_>, a: Var, b: Var) -> Var {
    let p = tape.mul(a, b);
    tape.sum(p)
}

/// `-log p[answer]`.
pub fn causal_loss(tape: &mut Tape<'_>, pred: &PredictionDistribution, answer: usize) -> Result<Var> {
    let classes = pred.classes(tape);
    if answer >= classes {
        return Err(Error::Shape(format!("answer {answer} outside {classes} classes")));
    }
    let target = tape.constant(Matrix::one_hot(classes, answer));
    soft_cross_entropy(tape, pred, target)
}

/// `-Σ a*[i] log p[i]`.
pub fn soft_cross_entropy(tape: &mut Tape<'_>, pred: &PredictionDistribution, a_star: Var) -> Result<Var> {
    if tape.shape(a_star) != tape.shape(pred.log_probs) {
        return Err(Error::Shape(format!("soft label {:?} for prediction {:?}", tape.shape(a_star), tape.shape(pred.log_probs))));
    }
    let s = dot_row(tape, a_star, pred.log_probs);
    Ok(tape.scale(s, -1.0))
}

/// `KL(p ‖ q) = Σ p (log p - log q)`.
pub fn kl_divergence(tape: &mut Tape<'_>, p: &PredictionDistribution, q: &PredictionDistribution) -> Result<Var> {
    if tape.shape(p.probs) != tape.shape(q.probs) {
        return Err(Error::Shape(format!("KL between {:?} and {:?}", tape.shape(p.probs), tape.shape(q.probs))));
    }
    let diff = tape.sub(p.log_probs, q.log_probs);
    Ok(dot_row(tape, p.probs, diff))
}

/// `KL(p ‖ u)` with `u` uniform over the answer classes.
pub fn environment_loss(tape: &mut Tape<'_>, pred: &PredictionDistribution) -> Result<Var> {
    let classes = pred.classes(tape) as f64;
    let neg_entropy = dot_row(tape, pred.probs, pred.log_probs);
    Ok(tape.add_scalar(neg_entropy, classes.ln()))
}

/// `KL(f(v*) ‖ f(ĉ))`.
pub fn consistency_loss(
    tape: &mut Tape<'_>,
    pred_vstar: &PredictionDistribution,
    pred_causal: &PredictionDistribution,
) -> Result<Var> {
    kl_divergence(tape, pred_vstar, pred_causal)
}

pub fn igv_objective(tape: &mut Tape<'_>, lc: Var, le: Var, lv: Var, weights: &LossWeights) -> Var {
    let le = tape.scale(le, weights.igv_lambda1);
    let lv = tape.scale(lv, weights.igv_lambda2);
    tape.add_all(&[lc, le, lv])
}

/// InfoNCE with raw dot-product similarities; `anchor`, `positive` and each
/// negative are `1 × A` representations.
pub fn info_nce(tape: &mut Tape<'_>, anchor: Var, positive: Var, negatives: &[Var]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Config("InfoNCE needs at least one negative".into()));
    }
    let shape = tape.shape(anchor);
    if tape.shape(positive) != shape || negatives.iter().any(|&n| tape.shape(n) != shape) {
        return Err(Error::Shape("InfoNCE representations differ in shape".into()));
    }
    let mut sims = alloc::vec::Vec::with_capacity(negatives.len() + 1);
    sims.push(dot_row(tape, anchor, positive));
    for &n in negatives {
        sims.push(dot_row(tape, anchor, n));
    }
    let logits = tape.concat_cols(&sims);
    let log_probs = tape.log_softmax_rows(logits);
    let first = tape.slice_cols(log_probs, 0, 1);
    Ok(tape.scale(first, -1.0))
}

pub fn eigv_objective(tape: &mut Tape<'_>, l_erm: Var, l_cl: Var, beta: f64) -> Var {
    let cl = tape.scale(l_cl, beta);
    tape.add(l_erm, cl)
}
