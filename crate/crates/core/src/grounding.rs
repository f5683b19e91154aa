//! Grounding indicator: cross-modal attention followed by a clip-wise
//! Gumbel-Softmax choice between the causal and the environment scene.

// Unused whenever std is linked, which then supplies the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::tensor::{argmax, Matrix};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// MLP1..MLP4: clip and query projections for the causal and the environment
/// attention, kept independent of each other.
#[derive(Clone, Debug)]
pub struct GroundingHeads {
    pub causal_clip: Mlp,
    pub causal_query: Mlp,
    pub env_clip: Mlp,
    pub env_query: Mlp,
}

impl GroundingHeads {
    /// `layer_dims` are the hidden sizes between input and the attention
    /// width `attn_dim`; empty gives single affine maps.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        clip_dim: usize,
        query_dim: usize,
        hidden: &[usize],
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let dims = |input: usize| {
            let mut d = Vec::with_capacity(hidden.len() + 2);
            d.push(input);
            d.extend_from_slice(hidden);
            d.push(attn_dim);
            d
        };
        GroundingHeads {
            causal_clip: Mlp::new(store, &format!("{name}.mlp1"), &dims(clip_dim), rng),
            causal_query: Mlp::new(store, &format!("{name}.mlp2"), &dims(query_dim), rng),
            env_clip: Mlp::new(store, &format!("{name}.mlp3"), &dims(clip_dim), rng),
            env_query: Mlp::new(store, &format!("{name}.mlp4"), &dims(query_dim), rng),
        }
    }
}

/// `p_c`, `p_e`: `1 × K` rows, each a softmax over clips.
#[derive(Clone, Copy, Debug)]
pub struct AttentionScores {
    pub p_c: Var,
    pub p_e: Var,
}

impl AttentionScores {
    pub fn clips(&self, tape: &Tape<'_>) -> usize {
        tape.shape(self.p_c).1
    }
}

fn attend(tape: &mut Tape<'_>, clip_mlp: &Mlp, query_mlp: &Mlp, v_local: Var, q_global: Var) -> Var {
    let keys = clip_mlp.forward(tape, v_local);
    let query = query_mlp.forward(tape, q_global);
    let logits = tape.matmul_nt(query, keys);
    tape.softmax_rows(logits)
}

pub fn attention_scores(tape: &mut Tape<'_>, heads: &GroundingHeads, v_local: Var, q_global: Var) -> Result<AttentionScores> {
    if tape.shape(v_local).0 == 0 {
        return Err(Error::Degenerate("attention over an empty video".into()));
    }
    if !tape.value(v_local).is_finite() || !tape.value(q_global).is_finite() {
        return Err(Error::Numeric("non-finite grounding inputs".into()));
    }
    let p_c = attend(tape, &heads.causal_clip, &heads.causal_query, v_local, q_global);
    let p_e = attend(tape, &heads.env_clip, &heads.env_query, v_local, q_global);
    Ok(AttentionScores { p_c, p_e })
}

/// Standard Gumbel noise, `K × 2`.
pub fn sample_gumbel<R: Rng + ?Sized>(clips: usize, rng: &mut R) -> Matrix {
    let data = (0..clips * 2)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Matrix::from_vec(clips, 2, data)
}

/// `K × 2` indicator; column 0 marks the causal scene, column 1 the environment.
#[derive(Clone, Copy, Debug)]
pub struct Indicator {
    /// Forward value: one-hot rows in hard mode, the soft sample otherwise.
    pub value: Var,
    /// The relaxed sample the straight-through gradient flows into.
    pub soft: Var,
    pub hard: bool,
}

impl Indicator {
    pub fn causal_column(&self, tape: &mut Tape<'_>) -> Var {
        tape.slice_cols(self.value, 0, 1)
    }

    pub fn environment_column(&self, tape: &mut Tape<'_>) -> Var {
        tape.slice_cols(self.value, 1, 1)
    }

    /// Clip-wise causal membership of the forward value (`I_k0 > I_k1`).
    pub fn causal_mask(&self, tape: &Tape<'_>) -> Vec<bool> {
        let v = tape.value(self.value);
        (0..v.rows()).map(|k| v.get(k, 0) > v.get(k, 1)).collect()
    }
}

fn one_hot_rows(soft: &Matrix) -> Matrix {
    let mut hard = Matrix::zeros(soft.rows(), soft.cols());
    for r in 0..soft.rows() {
        hard.set(r, argmax(soft.row(r)), 1.0);
    }
    hard
}

/// Row `k` is `softmax((log p_c[k] + g_k0, log p_e[k] + g_k1) / τ)`; hard
/// mode emits the row's one-hot argmax with a straight-through gradient.
pub fn gumbel_indicator(
    tape: &mut Tape<'_>,
    scores: &AttentionScores,
    temperature: f64,
    hard: bool,
    noise: &Matrix,
) -> Result<Indicator> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let k = scores.clips(tape);
    if noise.shape() != (k, 2) {
        return Err(Error::Shape(format!("gumbel noise {:?} does not match {k} clips", noise.shape())));
    }
    let pc = tape.transpose(scores.p_c);
    let pe = tape.transpose(scores.p_e);
    let pair = tape.concat_cols(&[pc, pe]);
    let logits = tape.log_clamped(pair, PROB_FLOOR);
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(logits, g);
    let perturbed = tape.scale(perturbed, 1.0 / temperature);
    let soft = tape.softmax_rows(perturbed);
    let value = if hard {
        let h = one_hot_rows(tape.value(soft));
        tape.straight_through(soft, h)
    } else {
        soft
    };
    Ok(Indicator { value, soft, hard })
}

/// Noise-free hard indicator used at inference: clip `k` is causal iff
/// `p_c[k] >= p_e[k]`.
pub fn argmax_indicator(tape: &mut Tape<'_>, scores: &AttentionScores) -> Result<Indicator> {
    let k = scores.clips(tape);
    gumbel_indicator(tape, scores, 1.0, true, &Matrix::zeros(k, 2))
}

/// If a hard indicator puts every clip on one side, moves the clip most
/// strongly claimed by the other side across. Returns whether a fix applied.
pub fn rebalance_degenerate(tape: &mut Tape<'_>, indicator: Indicator, scores: &AttentionScores) -> (Indicator, bool) {
    if !indicator.hard {
        return (indicator, false);
    }
    let mask = indicator.causal_mask(tape);
    let n_causal = mask.iter().filter(|&&m| m).count();
    if mask.len() < 2 || (n_causal != 0 && n_causal != mask.len()) {
        return (indicator, false);
    }
    let (column, target) = if n_causal == mask.len() { (scores.p_e, 1) } else { (scores.p_c, 0) };
    let k = argmax(tape.value(column).row(0));
    let mut hard = tape.value(indicator.value).clone();
    hard.set(k, 0, 0.0);
    hard.set(k, 1, 0.0);
    hard.set(k, target, 1.0);
    let value = tape.straight_through(indicator.soft, hard);
    (Indicator { value, ..indicator }, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    Select,
    Mask,
}

#[derive(Clone, Debug)]
pub struct SceneSplit {
    pub mode: SplitMode,
    pub indicator: Indicator,
    /// Select mode: causal clips (`N × d`) in original order. Mask mode: `K × d`.
    pub causal: Option<Var>,
    pub environment: Option<Var>,
    pub causal_positions: Vec<usize>,
    pub environment_positions: Vec<usize>,
    pub clips: usize,
}

/// `ĉ = {I_k0 · v_k | I_k0 = 1}`, `ê` the complement; either side may be
/// empty (see [`rebalance_degenerate`]).
pub fn split_select(tape: &mut Tape<'_>, video: Var, indicator: Indicator) -> Result<SceneSplit> {
    let clips = tape.shape(video).0;
    if !indicator.hard {
        return Err(Error::Config("split_select requires a hard indicator".into()));
    }
    if tape.shape(indicator.value) != (clips, 2) {
        return Err(Error::Shape(format!("indicator {:?} for {clips} clips", tape.shape(indicator.value))));
    }
    let mask = indicator.causal_mask(tape);
    let causal_positions: Vec<usize> = (0..clips).filter(|&k| mask[k]).collect();
    let environment_positions: Vec<usize> = (0..clips).filter(|&k| !mask[k]).collect();
    let i0 = indicator.causal_column(tape);
    let i1 = indicator.environment_column(tape);
    let causal = (!causal_positions.is_empty()).then(|| {
        let weighted = tape.mul_col(video, i0);
        tape.gather_rows(weighted, &causal_positions)
    });
    let environment = (!environment_positions.is_empty()).then(|| {
        let weighted = tape.mul_col(video, i1);
        tape.gather_rows(weighted, &environment_positions)
    });
    Ok(SceneSplit { mode: SplitMode::Select, indicator, causal, environment, causal_positions, environment_positions, clips })
}

/// `ĉ = I_0 · v`, `ê = I_1 · v` (row-wise), so `ĉ + ê = v` whenever rows sum to one.
pub fn split_mask(tape: &mut Tape<'_>, video: Var, indicator: Indicator) -> Result<SceneSplit> {
    let clips = tape.shape(video).0;
    if tape.shape(indicator.value) != (clips, 2) {
        return Err(Error::Shape(format!("indicator {:?} for {clips} clips", tape.shape(indicator.value))));
    }
    let mask = indicator.causal_mask(tape);
    let i0 = indicator.causal_column(tape);
    let i1 = indicator.environment_column(tape);
    let causal = tape.mul_col(video, i0);
    let environment = tape.mul_col(video, i1);
    Ok(SceneSplit {
        mode: SplitMode::Mask,
        indicator,
        causal: Some(causal),
        environment: Some(environment),
        causal_positions: (0..clips).filter(|&k| mask[k]).collect(),
        environment_positions: (0..clips).filter(|&k| !mask[k]).collect(),
        clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::rng;

    fn identity_heads(store: &mut ParamStore) -> GroundingHeads {
        let mut r = rng::stream(0, &[]);
        let heads = GroundingHeads::new(store, "g", 1, 1, &[], 1, &mut r);
        for mlp in [&heads.causal_clip, &heads.causal_query, &heads.env_clip, &heads.env_query] {
            mlp.layers[0].set(store, Matrix::identity(1), Matrix::zeros(1, 1));
        }
        heads
    }

    #[test]
    fn closed_form_softmax_case() {
        let mut store = ParamStore::new();
        let heads = identity_heads(&mut store);
        let mut t = Tape::new(&store);
        let v = t.constant(Matrix::from_rows(&[[1.0], [2.0]]));
        let q = t.constant(Matrix::from_rows(&[[1.0]]));
        let s = attention_scores(&mut t, &heads, v, q).unwrap();
        let p = t.value(s.p_c);
        assert!((p.get(0, 0) - 0.268_941_421).abs() < 1e-8);
        assert!((p.get(0, 1) - 0.731_058_579).abs() < 1e-8);
    }

    #[test]
    fn singleton_and_uniform_cases() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, &[]);
        let heads = GroundingHeads::new(&mut store, "g", 3, 3, &[4], 2, &mut r);
        let mut t = Tape::new(&store);
        let one = t.constant(Matrix::from_rows(&[[0.2, 0.1, -0.4]]));
        let q = t.constant(Matrix::from_rows(&[[1.0, 0.0, 2.0]]));
        let s = attention_scores(&mut t, &heads, one, q).unwrap();
        assert_eq!(t.value(s.p_c).data(), &[1.0]);
        assert_eq!(t.value(s.p_e).data(), &[1.0]);
        let same = t.constant(Matrix::from_rows(&[[0.2, 0.1, -0.4]; 4]));
        let s = attention_scores(&mut t, &heads, same, q).unwrap();
        for &p in t.value(s.p_c).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut store = ParamStore::new();
        let heads = identity_heads(&mut store);
        let mut t = Tape::new(&store);
        let v = t.constant(Matrix::from_rows(&[[f64::NAN]]));
        let q = t.constant(Matrix::from_rows(&[[1.0]]));
        assert!(matches!(attention_scores(&mut t, &heads, v, q), Err(Error::Numeric(_))));
    }

    fn fixed_scores(t: &mut Tape<'_>, pc: &[f64], pe: &[f64]) -> AttentionScores {
        let p_c = t.constant(Matrix::row_vector(pc.to_vec()));
        let p_e = t.constant(Matrix::row_vector(pe.to_vec()));
        AttentionScores { p_c, p_e }
    }

    #[test]
    fn zero_noise_low_temperature_picks_causal() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let s = fixed_scores(&mut t, &[0.9, 0.1], &[0.1, 0.9]);
        let ind = gumbel_indicator(&mut t, &s, 1e-6, false, &Matrix::zeros(2, 2)).unwrap();
        let v = t.value(ind.value);
        assert!((v.get(0, 0) - 1.0).abs() < 1e-9 && v.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn bad_temperature_is_a_config_error() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let s = fixed_scores(&mut t, &[1.0], &[1.0]);
        assert!(matches!(gumbel_indicator(&mut t, &s, 0.0, true, &Matrix::zeros(1, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_probabilities_are_clamped() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let s = fixed_scores(&mut t, &[0.0, 1.0], &[1.0, 0.0]);
        let ind = gumbel_indicator(&mut t, &s, 1.0, false, &Matrix::zeros(2, 2)).unwrap();
        assert!(t.value(ind.value).is_finite());
    }

    #[test]
    fn select_split_partitions_clips() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let video = t.constant(Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]));
        let soft = t.constant(Matrix::from_rows(&[[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]]));
        let value = t.straight_through(soft, Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]));
        let ind = Indicator { value, soft, hard: true };
        let split = split_select(&mut t, video, ind).unwrap();
        assert_eq!(split.causal_positions, [0, 2]);
        assert_eq!(split.environment_positions, [1]);
        assert_eq!(t.value(split.causal.unwrap()), &Matrix::from_rows(&[[1.0, 1.0], [3.0, 3.0]]));
        assert_eq!(t.value(split.environment.unwrap()), &Matrix::from_rows(&[[2.0, 2.0]]));
    }

    #[test]
    fn degenerate_split_is_rebalanced() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let video = t.constant(Matrix::from_rows(&[[1.0], [2.0], [3.0]]));
        let scores = fixed_scores(&mut t, &[0.5, 0.3, 0.2], &[0.2, 0.7, 0.1]);
        let soft = t.constant(Matrix::from_rows(&[[0.9, 0.1]; 3]));
        let value = t.straight_through(soft, Matrix::from_rows(&[[1.0, 0.0]; 3]));
        let ind = Indicator { value, soft, hard: true };
        let split = split_select(&mut t, video, ind).unwrap();
        assert!(split.environment.is_none());
        assert_eq!(split.causal_positions, [0, 1, 2]);
        let (fixed, applied) = rebalance_degenerate(&mut t, ind, &scores);
        assert!(applied);
        let split = split_select(&mut t, video, fixed).unwrap();
        assert_eq!(split.environment_positions, [1]);
    }

    #[test]
    fn mask_split_soft_halves() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let video = t.constant(Matrix::from_rows(&[[2.0, 4.0], [6.0, 8.0]]));
        let soft = t.constant(Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
        let ind = Indicator { value: soft, soft, hard: false };
        let split = split_mask(&mut t, video, ind).unwrap();
        let half = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(t.value(split.causal.unwrap()), &half);
        assert_eq!(t.value(split.environment.unwrap()), &half);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, &[]);
        let heads = GroundingHeads::new(&mut store, "g", 4, 3, &[5], 3, &mut r);
        let v = rng::normal_matrix(5, 4, 1.0, &mut r);
        let q = rng::normal_matrix(1, 3, 1.0, &mut r);
        let w = rng::normal_matrix(1, 5, 1.0, &mut r);
        let report = check_gradients(&store, &[v, q, w], GradCheck::default(), |t, x| {
            let s = attention_scores(t, &heads, x[0], x[1]).unwrap();
            let a = t.mul(s.p_c, x[2]);
            let b = t.mul(s.p_e, s.p_e);
            let a = t.sum(a);
            let b = t.sum(b);
            t.add(a, b)
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn hard_rows_are_one_hot_over_many_draws() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let s = fixed_scores(&mut t, &[0.6, 0.3, 0.1], &[0.2, 0.2, 0.6]);
        let mut r = rng::stream(3, &[]);
        for _ in 0..10_000 / 3 + 1 {
            let noise = sample_gumbel(3, &mut r);
            let ind = gumbel_indicator(&mut t, &s, 1.0, true, &noise).unwrap();
            let v = t.value(ind.value);
            for k in 0..3 {
                let row = v.row(k);
                assert!((row == [1.0, 0.0]) || (row == [0.0, 1.0]));
            }
        }
    }

    #[test]
    fn soft_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let s = fixed_scores(&mut t, &[0.6, 0.4], &[0.5, 0.5]);
        let mut r = rng::stream(4, &[]);
        for tau in [0.1, 1.0, 10.0] {
            let ind = gumbel_indicator(&mut t, &s, tau, false, &sample_gumbel(2, &mut r)).unwrap();
            for k in 0..2 {
                assert!((t.value(ind.value).row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let pc = Matrix::row_vector(alloc::vec![0.5, 0.3, 0.2]);
        let pe = Matrix::row_vector(alloc::vec![0.1, 0.6, 0.3]);
        let w = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [-1.0, 0.25]]);
        let noise = sample_gumbel(3, &mut rng::stream(5, &[]));
        let grads = |hard: bool| {
            let store = ParamStore::new();
            let mut t = Tape::new(&store);
            let p_c = t.constant(pc.clone());
            let p_e = t.constant(pe.clone());
            let s = AttentionScores { p_c, p_e };
            let ind = gumbel_indicator(&mut t, &s, 0.7, hard, &noise).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(ind.value, wv);
            let y = t.sum(y);
            let g = t.backward(y);
            (g.wrt(p_c).unwrap().clone(), g.wrt(p_e).unwrap().clone())
        };
        let (hc, he) = grads(true);
        let (sc, se) = grads(false);
        assert!(hc.max_abs_diff(&sc) < 1e-6 && he.max_abs_diff(&se) < 1e-6);
    }

    #[test]
    fn low_temperature_soft_rows_approach_hard_rows() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let s = fixed_scores(&mut t, &[0.4, 0.35, 0.25], &[0.3, 0.3, 0.4]);
        let noise = sample_gumbel(3, &mut rng::stream(6, &[]));
        let soft = gumbel_indicator(&mut t, &s, 1e-3, false, &noise).unwrap();
        let hard = gumbel_indicator(&mut t, &s, 1e-3, true, &noise).unwrap();
        assert!(t.value(soft.value).max_abs_diff(t.value(hard.value)) < 1e-3);
    }

    proptest::proptest! {
        #[test]
        fn select_split_is_a_partition(bits in proptest::collection::vec(proptest::bool::ANY, 1..12)) {
            let store = ParamStore::new();
            let mut t = Tape::new(&store);
            let k = bits.len();
            let video = t.constant(Matrix::from_vec(k, 1, (0..k).map(|i| i as f64).collect()));
            let hard = Matrix::from_vec(k, 2, bits.iter().flat_map(|&b| if b { [1.0, 0.0] } else { [0.0, 1.0] }).collect());
            let soft = t.constant(Matrix::filled(k, 2, 0.5));
            let value = t.straight_through(soft, hard);
            let split = split_select(&mut t, video, Indicator { value, soft, hard: true }).unwrap();
            let mut all: Vec<usize> = split.causal_positions.iter().chain(&split.environment_positions).copied().collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
            for &p in &split.causal_positions {
                proptest::prop_assert!(bits[p]);
            }
        }

        #[test]
        fn mask_split_reconstructs_video(seed in 0u64..1000, k in 1usize..8) {
            let store = ParamStore::new();
            let mut t = Tape::new(&store);
            let mut r = rng::stream(seed, &[]);
            let v = rng::normal_matrix(k, 3, 2.0, &mut r);
            let video = t.constant(v.clone());
            let s = fixed_scores(&mut t, &alloc::vec![1.0 / k as f64; k], &alloc::vec![1.0 / k as f64; k]);
            let ind = gumbel_indicator(&mut t, &s, 0.5, false, &sample_gumbel(k, &mut r)).unwrap();
            let split = split_mask(&mut t, video, ind).unwrap();
            let total = t.add(split.causal.unwrap(), split.environment.unwrap());
            proptest::prop_assert!(t.value(total).max_abs_diff(&v) < 1e-6);
        }
    }
}
