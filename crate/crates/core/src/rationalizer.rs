//! Spatio-temporal rationalization: adaptive selection of question-critical
//! frames and objects through a differentiable Top-K, multi-grain reasoning
//! over the selection and query-style answer decoding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, EncoderLayer, FeedForward, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::normal_matrix;
use crate::tensor::Matrix;

/// Indices of the `k` largest entries, ties broken towards the lower index.
pub fn hard_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn hard_topk_mask(scores: &[f64], k: usize) -> Vec<f64> {
    let mut mask = vec![0.0; scores.len()];
    for i in hard_topk(scores, k) {
        mask[i] = 1.0;
    }
    mask
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-{k} selection over {n} entries")));
    }
    Ok(())
}

/// Monte-Carlo mean of hard top-`k` masks of `scores + σZ` (`1 × n`), with
/// the perturbed-optimiser gradient.
pub fn perturbed_topk<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    scores: Var,
    k: usize,
    sigma: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Var> {
    let (rows, n) = tape.shape(scores);
    if rows != 1 {
        return Err(Error::Shape(format!("top-k scores must be a row, got {rows} rows")));
    }
    check_k(k, n)?;
    if !(sigma > 0.0) || samples == 0 {
        return Err(Error::Config(format!("perturbed top-k needs sigma > 0 and samples > 0 (got {sigma}, {samples})")));
    }
    let noise = normal_matrix(samples, n, 1.0, rng);
    let hard = perturbed_hard_samples(tape.value(scores).data(), k, sigma, &noise);
    Ok(tape.perturbed(scores, noise, hard, sigma))
}

/// Row `s` is the hard top-`k` mask of `scores + sigma * noise[s]`.
pub fn perturbed_hard_samples(scores: &[f64], k: usize, sigma: f64, noise: &Matrix) -> Matrix {
    let mut hard = Matrix::zeros(noise.rows(), scores.len());
    let mut perturbed = vec![0.0; scores.len()];
    for s in 0..noise.rows() {
        for (j, p) in perturbed.iter_mut().enumerate() {
            *p = scores[j] + sigma * noise.get(s, j);
        }
        for j in hard_topk(&perturbed, k) {
            hard.set(s, j, 1.0);
        }
    }
    hard
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SelectMode {
    Hard,
    Perturbed { sigma: f64, samples: usize },
}

impl SelectMode {
    pub const TRAIN_DEFAULT: SelectMode = SelectMode::Perturbed { sigma: 0.5, samples: 100 };
}

fn topk_mask<R: Rng + ?Sized>(tape: &mut Tape<'_>, scores: Var, k: usize, mode: SelectMode, rng: &mut R) -> Result<Var> {
    match mode {
        SelectMode::Hard => {
            let n = tape.shape(scores).1;
            check_k(k, n)?;
            let m = hard_topk_mask(tape.value(scores).data(), k);
            Ok(tape.constant(Matrix::row_vector(m)))
        }
        SelectMode::Perturbed { sigma, samples } => perturbed_topk(tape, scores, k, sigma, samples, rng),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionOutput {
    /// `T × d_h`
    pub tokens: Var,
    /// `T × L`, rows summing to one.
    pub attn_map: Var,
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    /// `C × d_h`
    pub selected: Var,
    /// Strictly increasing row positions.
    pub indices: Vec<usize>,
    /// `T × 1` soft membership of every row.
    pub weights: Var,
}

/// Distinct rows touched by the top-`k` interactions of a `rows × cols` map,
/// first occurrence kept, no backfill, returned in increasing order.
pub fn distinct_rows(map: &Matrix, k: usize) -> Vec<usize> {
    let cols = map.cols();
    let mut rows: Vec<usize> = Vec::new();
    for flat in hard_topk(map.data(), k) {
        let r = flat / cols;
        if !rows.contains(&r) {
            rows.push(r);
        }
    }
    rows.sort_unstable();
    rows
}

/// Adaptive selection over the interaction map `z` (`T × L`): rows of `tokens`
/// hit by the top-`k` interactions, weighted by `1 - Π_l (1 - m[t, l])`.
fn adaptive_select<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    tokens: Var,
    z: Var,
    k: usize,
    mode: SelectMode,
    rng: &mut R,
) -> Result<SelectionResult> {
    let (t_len, l_len) = tape.shape(z);
    let k = k.min(t_len * l_len);
    let indices = distinct_rows(tape.value(z), k);
    let rows: Vec<Var> = (0..t_len).map(|t| tape.row(z, t)).collect();
    let flat = tape.concat_cols(&rows);
    let mask = topk_mask(tape, flat, k, mode, rng)?;
    let per_row: Vec<Var> = (0..t_len).map(|t| tape.slice_cols(mask, t * l_len, l_len)).collect();
    let mask = tape.concat_rows(&per_row);
    let keep = tape.scale(mask, -1.0);
    let keep = tape.add_scalar(keep, 1.0);
    let miss = tape.row_product(keep);
    let weights = tape.scale(miss, -1.0);
    let weights = tape.add_scalar(weights, 1.0);
    let weighted = tape.mul_col(tokens, weights);
    let selected = tape.gather_rows(weighted, &indices);
    Ok(SelectionResult { selected, indices, weights })
}

/// Cross-attention layer followed by a position-wise feed-forward block,
/// both residual.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: Attention,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        DecoderLayer {
            cross: Attention::new(store, &format!("{name}.cross"), dim, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, queries: Var, memory: Var) -> Var {
        let (a, _) = self.cross.forward(tape, queries, memory);
        let h = tape.add(a, queries);
        let f = self.ffn.forward(tape, h);
        tape.add(f, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalizerConfig {
    pub input: usize,
    pub hidden: usize,
    pub k_frames: usize,
    pub k_objects: usize,
    pub num_answers: usize,
}

impl RationalizerConfig {
    pub fn new(input: usize, hidden: usize, num_answers: usize) -> Self {
        RationalizerConfig { input, hidden, k_frames: 5, k_objects: 12, num_answers }
    }
}

#[derive(Clone, Debug)]
pub struct Rationalizer {
    pub config: RationalizerConfig,
    pub frame_proj: Linear,
    pub object_proj: Linear,
    pub question_proj: Linear,
    pub answer_proj: Linear,
    pub temporal_self: Attention,
    pub temporal_cross: Attention,
    pub spatial_cross: Attention,
    pub intra_frame: Attention,
    pub reasoning: EncoderLayer,
    pub decoder: DecoderLayer,
    pub mc_head: Linear,
    pub oe_query: ParamId,
    pub oe_head: Linear,
}

/// Frames and per-frame objects picked for one instance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub frame_indices: Vec<usize>,
    pub objects_per_frame_indices: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct RationalizerOutput {
    pub logits: Var,
    pub rationale: Rationale,
    pub frame_weights: Var,
}

impl Rationalizer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: RationalizerConfig, rng: &mut R) -> Self {
        let (i, d) = (config.input, config.hidden);
        let oe_query = store.add(&format!("{name}.oe_query"), normal_matrix(1, d, 0.1, rng));
        Rationalizer {
            config,
            frame_proj: Linear::new(store, &format!("{name}.frame"), i, d, rng),
            object_proj: Linear::new(store, &format!("{name}.object"), i, d, rng),
            question_proj: Linear::new(store, &format!("{name}.question"), i, d, rng),
            answer_proj: Linear::new(store, &format!("{name}.answer"), i, d, rng),
            temporal_self: Attention::new(store, &format!("{name}.tr_self"), d, rng),
            temporal_cross: Attention::new(store, &format!("{name}.tr_cross"), d, rng),
            spatial_cross: Attention::new(store, &format!("{name}.sr_cross"), d, rng),
            intra_frame: Attention::new(store, &format!("{name}.mgr_cross"), d, rng),
            reasoning: EncoderLayer::new(store, &format!("{name}.mgr_enc"), d, rng),
            decoder: DecoderLayer::new(store, &format!("{name}.dec"), d, rng),
            mc_head: Linear::new(store, &format!("{name}.mc_head"), d, 1, rng),
            oe_query,
            oe_head: Linear::new(store, &format!("{name}.oe_head"), d, config.num_answers, rng),
        }
    }

    /// Self-attention then question cross-attention (both residual) over the
    /// frames, then selection of the frames behind the top-`k_f` interactions.
    pub fn temporal_rationalize<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        frames: Var,
        question: Var,
        k_f: usize,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<(SelectionResult, CrossAttentionOutput)> {
        if tape.shape(frames).0 == 0 || tape.shape(question).0 == 0 {
            return Err(Error::Degenerate("temporal rationalization over empty inputs".into()));
        }
        let (a, _) = self.temporal_self.forward(tape, frames, frames);
        let f1 = tape.add(a, frames);
        let (b, map) = self.temporal_cross.forward(tape, f1, question);
        let tokens = tape.add(b, f1);
        let sel = adaptive_select(tape, tokens, map, k_f, mode, rng)?;
        Ok((sel, CrossAttentionOutput { tokens, attn_map: map }))
    }

    /// The same selection over the `S` object tokens of one frame.
    pub fn spatial_rationalize<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        objects: Var,
        question: Var,
        k_o: usize,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<SelectionResult> {
        if tape.shape(objects).0 == 0 {
            return Err(Error::Degenerate("spatial rationalization over no objects".into()));
        }
        let (a, map) = self.spatial_cross.forward(tape, objects, question);
        let tokens = tape.add(a, objects);
        adaptive_select(tape, tokens, map, k_o, mode, rng)
    }

    /// Intra-frame aggregation of each frame's objects, then one encoder layer
    /// over `[frames ; question]` (`(C + L) × d_h`).
    pub fn mgr(&self, tape: &mut Tape<'_>, frames: Var, objects_per_frame: &[Option<Var>], question: Var) -> Result<Var> {
        let c = tape.shape(frames).0;
        if objects_per_frame.len() != c {
            return Err(Error::Shape(format!("{} object sets for {c} frames", objects_per_frame.len())));
        }
        let mut enhanced = Vec::with_capacity(c + 1);
        for (i, objects) in objects_per_frame.iter().enumerate() {
            let frame = tape.row(frames, i);
            enhanced.push(match objects {
                Some(o) if tape.shape(*o).0 > 0 => {
                    let (a, _) = self.intra_frame.forward(tape, frame, *o);
                    tape.add(a, frame)
                }
                _ => frame,
            });
        }
        enhanced.push(question);
        let tokens = tape.concat_rows(&enhanced);
        Ok(self.reasoning.forward(tape, tokens))
    }

    /// One logit per candidate query row (`1 × |A|`); queries carry no positional signal.
    pub fn decode_mc(&self, tape: &mut Tape<'_>, queries: Var, memory: Var) -> Var {
        let h = self.decoder.forward(tape, queries, memory);
        let logits = self.mc_head.forward(tape, h);
        tape.transpose(logits)
    }

    /// Logits over the answer vocabulary from the single learnable query.
    pub fn decode_oe(&self, tape: &mut Tape<'_>, memory: Var) -> Var {
        let q = tape.param(self.oe_query);
        let h = self.decoder.forward(tape, q, memory);
        self.oe_head.forward(tape, h)
    }

    /// Candidate queries: projected answer-phrase tokens, mean-pooled per candidate.
    pub fn candidate_queries(&self, tape: &mut Tape<'_>, phrases: &[Matrix]) -> Result<Var> {
        if phrases.is_empty() {
            return Err(Error::Degenerate("no answer candidates".into()));
        }
        let rows: Vec<Var> = phrases
            .iter()
            .map(|p| {
                let v = tape.constant(p.clone());
                let v = self.answer_proj.forward(tape, v);
                tape.mean_rows(v)
            })
            .collect();
        Ok(tape.concat_rows(&rows))
    }

    /// Full pass: `clips` (`T × d`), `objects[t]` (`S × d`), `tokens` (`L × d`).
    /// With `candidates`, decodes multi-choice logits, otherwise open-ended ones.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        clips: &Matrix,
        objects: &[Matrix],
        tokens: &Matrix,
        candidates: Option<&[Matrix]>,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<RationalizerOutput> {
        if objects.len() != clips.rows() {
            return Err(Error::Shape(format!("{} object sets for {} clips", objects.len(), clips.rows())));
        }
        let f = tape.constant(clips.clone());
        let f = self.frame_proj.forward(tape, f);
        let q = tape.constant(tokens.clone());
        let q = self.question_proj.forward(tape, q);
        let (frames, _) = self.temporal_rationalize(tape, f, q, self.config.k_frames, mode, rng)?;
        let mut object_sets = Vec::with_capacity(frames.indices.len());
        let mut object_indices = Vec::with_capacity(frames.indices.len());
        for &t in &frames.indices {
            let o = tape.constant(objects[t].clone());
            let o = self.object_proj.forward(tape, o);
            let sel = self.spatial_rationalize(tape, o, q, self.config.k_objects, mode, rng)?;
            object_indices.push(sel.indices.clone());
            object_sets.push(Some(sel.selected));
        }
        let memory = self.mgr(tape, frames.selected, &object_sets, q)?;
        let logits = match candidates {
            Some(c) => {
                let queries = self.candidate_queries(tape, c)?;
                self.decode_mc(tape, queries, memory)
            }
            None => self.decode_oe(tape, memory),
        };
        Ok(RationalizerOutput {
            logits,
            rationale: Rationale { frame_indices: frames.indices, objects_per_frame_indices: object_indices },
            frame_weights: frames.weights,
        })
    }
}
