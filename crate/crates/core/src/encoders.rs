//! Local and global representations of clip and token sequences.
//!
//! Sequences go through a bidirectional LSTM: the local representation of
//! step `t` is `[h_fwd(t) ; h_bwd(t)]` and the global representation is the
//! concatenation of the two final states, `[h_fwd(T-1) ; h_bwd(0)]`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// One direction of an LSTM. Gate blocks are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let input_weight = store.add_glorot(&format!("{name}.wx"), input, 4 * hidden, rng);
        let hidden_weight = store.add_glorot(&format!("{name}.wh"), hidden, 4 * hidden, rng);
        let mut b = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        let bias = store.add(&format!("{name}.b"), b);
        LstmCell { input_weight, hidden_weight, bias, hidden }
    }

    /// Hidden states in time order (`reverse` runs the recurrence from the end).
    fn run(&self, tape: &mut Tape<'_>, x: Var, reverse: bool) -> Vec<Var> {
        let steps = tape.shape(x).0;
        let h = self.hidden;
        let wx = tape.param(self.input_weight);
        let wh = tape.param(self.hidden_weight);
        let b = tape.param(self.bias);
        let projected = tape.matmul(x, wx);
        let projected = tape.add_row(projected, b);

        let mut states: Vec<Option<Var>> = alloc::vec![None; steps];
        let mut prev: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let mut gates = tape.row(projected, t);
            if let Some((h_prev, _)) = prev {
                let rec = tape.matmul(h_prev, wh);
                gates = tape.add(gates, rec);
            }
            let i = tape.slice_cols(gates, 0, h);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h, h);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h, h);
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h, h);
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, g);
            let c = match prev {
                Some((_, c_prev)) => {
                    let fc = tape.mul(f, c_prev);
                    tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let h_t = tape.mul(o, tc);
            states[t] = Some(h_t);
            prev = Some((h_t, c));
        }
        states.into_iter().map(|s| s.expect("every step visited")).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `T × width`
    pub local: Var,
    /// `1 × width`
    pub global: Var,
}

/// Video-side encoding (`v_local`, `v_global`).
pub type EncodedVideo = Encoded;
/// Question-side encoding (`q_local`, `q_global`).
pub type EncodedQuestion = Encoded;

#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub input: usize,
}

impl SequenceEncoder {
    /// Output width is `2 * hidden_per_direction`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden_per_direction: usize,
        rng: &mut R,
    ) -> Self {
        SequenceEncoder {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden_per_direction, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden_per_direction, rng),
            input,
        }
    }

    pub fn width(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn encode(&self, tape: &mut Tape<'_>, x: Var) -> Result<Encoded> {
        let (steps, cols) = tape.shape(x);
        if steps == 0 {
            return Err(Error::Degenerate("cannot encode an empty sequence".into()));
        }
        if cols != self.input {
            return Err(Error::Shape(format!("encoder expects width {}, got {cols}", self.input)));
        }
        let fwd = self.forward.run(tape, x, false);
        let bwd = self.backward.run(tape, x, true);
        let fwd_all = tape.concat_rows(&fwd);
        let bwd_all = tape.concat_rows(&bwd);
        let local = tape.concat_cols(&[fwd_all, bwd_all]);
        let global = tape.concat_cols(&[fwd[steps - 1], bwd[0]]);
        Ok(Encoded { local, global })
    }
}

pub fn encode_video(tape: &mut Tape<'_>, encoder: &SequenceEncoder, clips: Var) -> Result<EncodedVideo> {
    encoder.encode(tape, clips)
}

pub fn encode_question(tape: &mut Tape<'_>, encoder: &SequenceEncoder, tokens: Var) -> Result<EncodedQuestion> {
    encoder.encode(tape, tokens)
}

/// Per-row affine embedding of clip features.
pub fn embed_video_linear(tape: &mut Tape<'_>, embedding: &Linear, clips: Var) -> Result<Var> {
    let (rows, cols) = tape.shape(clips);
    if rows == 0 {
        return Err(Error::Degenerate("cannot embed an empty video".into()));
    }
    if cols != embedding.input {
        return Err(Error::Shape(format!("embedding expects width {}, got {cols}", embedding.input)));
    }
    Ok(embedding.forward(tape, clips))
}
