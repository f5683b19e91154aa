//! Scene interventions: environment substitution from a memory bank, mixup
//! style equivariant/invariant mixing, and contrastive sample construction.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grounding::{SceneSplit, SplitMode};
use crate::tensor::Matrix;

pub const DEFAULT_BANK_CAPACITY: usize = 4096;

/// Raw environment clips of one training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub clips: Matrix,
    pub positions: Vec<usize>,
    pub source: String,
}

/// FIFO store of environment scenes.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: VecDeque<BankEntry>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be at least 1".into()));
        }
        Ok(MemoryBank { entries: VecDeque::new(), capacity })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    /// Entries with no clips are ignored.
    pub fn insert(&mut self, entry: BankEntry) {
        if entry.clips.rows() == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Stores the raw environment rows selected by `split`.
    pub fn insert_split(&mut self, video: &Matrix, split: &SceneSplit, source: &str) {
        let positions = split.environment_positions.clone();
        self.insert(BankEntry { clips: video.select_rows(&positions), positions, source: source.into() });
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&BankEntry> {
        if self.entries.is_empty() {
            return Err(Error::State("sampling from an empty memory bank".into()));
        }
        Ok(&self.entries[rng.random_range(0..self.entries.len())])
    }
}

/// Cyclic tiling followed by truncation to `n` rows.
pub fn fit_rows(rows: &Matrix, n: usize) -> Matrix {
    assert!(rows.rows() > 0 || n == 0, "cannot tile an empty matrix");
    let idx: Vec<usize> = (0..n).map(|i| i % rows.rows().max(1)).collect();
    rows.select_rows(&idx)
}

/// `v*`: the causal clips of `split` at their original positions with the
/// environment positions filled from `entry`.
pub fn intervene_environment(tape: &mut Tape<'_>, split: &SceneSplit, entry: &BankEntry) -> Result<Var> {
    if split.mode != SplitMode::Select {
        return Err(Error::Config("scene intervention requires a select-mode split".into()));
    }
    let causal = split
        .causal
        .ok_or_else(|| Error::Degenerate("scene intervention without causal clips".into()))?;
    let causal = tape.scatter_rows(causal, &split.causal_positions, split.clips);
    if split.environment_positions.is_empty() {
        return Ok(causal);
    }
    let width = tape.shape(causal).1;
    if entry.clips.cols() != width {
        return Err(Error::Shape(format!("bank clips width {} for videos of width {width}", entry.clips.cols())));
    }
    let fill = fit_rows(&entry.clips, split.environment_positions.len());
    let fill = tape.constant(fill);
    let fill = tape.scatter_rows(fill, &split.environment_positions, split.clips);
    Ok(tape.add(causal, fill))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficients {
    pub lambda0: f64,
    pub lambda1: f64,
    pub alpha: f64,
}

impl MixCoefficients {
    /// `λ0 ~ Beta(α, α)`, `λ1 ~ U(0, 1)`.
    pub fn sample<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<Self> {
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mix alpha {alpha}: {e}")))?;
        let lambda0 = beta.sample(rng);
        let lambda1 = rng.random::<f64>();
        Ok(MixCoefficients { lambda0, lambda1, alpha })
    }
}

/// `λ·x1 + (1-λ)·x2`.
pub fn mix(tape: &mut Tape<'_>, x1: Var, x2: Var, lambda: f64) -> Result<Var> {
    if tape.shape(x1) != tape.shape(x2) {
        return Err(Error::Shape(format!("cannot mix {:?} with {:?}", tape.shape(x1), tape.shape(x2))));
    }
    let a = tape.scale(x1, lambda);
    let b = tape.scale(x2, 1.0 - lambda);
    Ok(tape.add(a, b))
}

#[derive(Clone, Copy, Debug)]
pub struct Mixed {
    pub c_star: Var,
    pub q_star: Var,
    pub a_star: Var,
}

/// One ratio `λ0` mixes the causal scene, the question and the answer.
#[allow(clippy::too_many_arguments)]
pub fn e_intervention(
    tape: &mut Tape<'_>,
    c1: Var,
    q1: Var,
    a1: Var,
    c2: Var,
    q2: Var,
    a2: Var,
    lambda0: f64,
) -> Result<Mixed> {
    Ok(Mixed {
        c_star: mix(tape, c1, c2, lambda0)?,
        q_star: mix(tape, q1, q2, lambda0)?,
        a_star: mix(tape, a1, a2, lambda0)?,
    })
}

pub fn i_intervention(tape: &mut Tape<'_>, e1: Var, e2: Var, lambda1: f64) -> Result<Var> {
    mix(tape, e1, e2, lambda1)
}

/// `v* = c* + e*`.
pub fn compose(tape: &mut Tape<'_>, c_star: Var, e_star: Var) -> Result<Var> {
    if tape.shape(c_star) != tape.shape(e_star) {
        return Err(Error::Shape(format!("cannot compose {:?} with {:?}", tape.shape(c_star), tape.shape(e_star))));
    }
    Ok(tape.add(c_star, e_star))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub first: usize,
    pub second: usize,
}

#[derive(Clone, Debug)]
pub struct InterventionSample {
    pub v_star: Var,
    pub q_star: Var,
    /// `1 × A` soft label.
    pub a_star: Var,
    pub provenance: Provenance,
    pub coefficients: MixCoefficients,
}

#[derive(Clone, Debug)]
pub struct ContrastiveSet {
    /// Anchor video with its environment replaced by a bank sample.
    pub positive: Var,
    /// Anchor videos whose causal part was replaced by a bank sample; paired
    /// with the anchor question.
    pub visual_negatives: Vec<Var>,
    /// Pool questions paired with the anchor video.
    pub textual_negatives: Vec<usize>,
}

impl ContrastiveSet {
    pub fn negatives(&self) -> usize {
        self.visual_negatives.len() + self.textual_negatives.len()
    }
}

/// `ceil(n/2)` visual and `floor(n/2)` textual negatives.
pub fn negative_counts(n: usize) -> (usize, usize) {
    (n.div_ceil(2), n / 2)
}

/// Builds `v+` and `N` negatives around a mask-mode re-grounding of `v*`.
///
/// `embed` maps raw bank clips (`K × d`) into the space of `regrounded`.
/// `question_pool` lists candidate question ids; `anchor_question` is excluded.
#[allow(clippy::too_many_arguments)]
pub fn build_contrastive<R, F>(
    tape: &mut Tape<'_>,
    regrounded: &SceneSplit,
    anchor_question: usize,
    bank: &MemoryBank,
    question_pool: &[usize],
    n: usize,
    rng: &mut R,
    mut embed: F,
) -> Result<ContrastiveSet>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape<'_>, Matrix) -> Result<Var>,
{
    if n < 1 {
        return Err(Error::Config("contrastive learning needs at least one negative".into()));
    }
    if regrounded.mode != SplitMode::Mask {
        return Err(Error::Config("contrastive samples require a mask-mode split".into()));
    }
    let (Some(causal), Some(environment)) = (regrounded.causal, regrounded.environment) else {
        return Err(Error::Degenerate("mask split without both views".into()));
    };
    let k = regrounded.clips;
    let i0 = regrounded.indicator.causal_column(tape);
    let i1 = regrounded.indicator.environment_column(tape);

    let mut substitute = |tape: &mut Tape<'_>, rng: &mut R, column: Var| -> Result<Var> {
        let entry = bank.sample(rng)?;
        let rows = embed(tape, fit_rows(&entry.clips, k))?;
        Ok(tape.mul_col(rows, column))
    };

    let env_sub = substitute(tape, rng, i1)?;
    let positive = tape.add(causal, env_sub);

    let (n_visual, n_textual) = negative_counts(n);
    let mut visual_negatives = Vec::with_capacity(n_visual);
    for _ in 0..n_visual {
        let causal_sub = substitute(tape, rng, i0)?;
        visual_negatives.push(tape.add(causal_sub, environment));
    }

    let candidates: Vec<usize> = question_pool.iter().copied().filter(|&q| q != anchor_question).collect();
    if n_textual > 0 && candidates.is_empty() {
        return Err(Error::Degenerate("question pool has no question other than the anchor".into()));
    }
    let textual_negatives = (0..n_textual).map(|_| candidates[rng.random_range(0..candidates.len())]).collect();
    Ok(ContrastiveSet { positive, visual_negatives, textual_negatives })
}
