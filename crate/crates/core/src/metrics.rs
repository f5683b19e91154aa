//! Answer accuracy and clip-mask grounding quality.

// Unused whenever std is linked, which then supplies the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

fn counts(pred: &[bool], truth: &[bool]) -> (usize, usize, usize) {
    assert_eq!(pred.len(), truth.len());
    let inter = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count();
    let np = pred.iter().filter(|&&p| p).count();
    let nt = truth.iter().filter(|&&t| t).count();
    (inter, np, nt)
}

/// `|pred ∩ truth| / |pred ∪ truth|`; two empty masks score 1.
pub fn mask_iou(pred: &[bool], truth: &[bool]) -> f64 {
    let (inter, np, nt) = counts(pred, truth);
    let union = np + nt - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mask_metrics(pred: &[bool], truth: &[bool]) -> GroundingMetrics {
    let (inter, np, nt) = counts(pred, truth);
    GroundingMetrics {
        precision: if np == 0 { 0.0 } else { inter as f64 / np as f64 },
        recall: if nt == 0 { 1.0 } else { inter as f64 / nt as f64 },
        iou: mask_iou(pred, truth),
    }
}

/// Per-instance metrics averaged over `pairs` of (predicted, truth) masks.
pub fn mean_mask_metrics<'a>(pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>) -> GroundingMetrics {
    let mut acc = GroundingMetrics::default();
    let mut n = 0usize;
    for (p, t) in pairs {
        let m = mask_metrics(p, t);
        acc.precision += m.precision;
        acc.recall += m.recall;
        acc.iou += m.iou;
        n += 1;
    }
    if n > 0 {
        let s = 1.0 / n as f64;
        acc.precision *= s;
        acc.recall *= s;
        acc.iou *= s;
    }
    acc
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Expected IoU between a truth mask with `n_true` of `clips` positive and an
/// independent mask whose entries are positive with probability `f`:
/// `Σ_a Σ_b C(n,a) C(K-n,b) f^(a+b) (1-f)^(K-a-b) · a / (n + b)`.
pub fn random_mask_iou(clips: usize, n_true: usize, f: f64) -> f64 {
    assert!(n_true <= clips);
    let mut e = 0.0;
    for a in 0..=n_true {
        for b in 0..=clips - n_true {
            let union = n_true + b;
            let iou = if union == 0 { 1.0 } else { a as f64 / union as f64 };
            let p = binomial(n_true, a)
                * binomial(clips - n_true, b)
                * f.powi((a + b) as i32)
                * (1.0 - f).powi((clips - a - b) as i32);
            e += p * iou;
        }
    }
    e
}

/// Random-mask baseline averaged over truth sizes `n_true` drawn uniformly
/// from `span` (inclusive).
pub fn random_iou_baseline(clips: usize, span: (usize, usize), f: f64) -> f64 {
    let sizes: Vec<usize> = (span.0..=span.1).collect();
    sizes.iter().map(|&n| random_mask_iou(clips, n, f)).sum::<f64>() / sizes.len() as f64
}
