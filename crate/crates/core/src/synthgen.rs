//! Synthetic causal VideoQA benchmark.
//!
//! Each video mixes a contiguous causal scene with environment clips. The
//! feature space is split into three disjoint blocks:
//!
//! * content: causal clips carry a noisy copy of an answer centroid here;
//! * environment: environment clips carry a noisy environment-cluster centre;
//! * key: causal clips share a per-instance scene key that the question
//!   tokens also carry, environment clips carry unrelated keys.
//!
//! The answer is the nearest centroid to the mean content of the causal
//! clips, so it is a deterministic function of the causal scene alone. The
//! environment cluster is coupled to the answer with probability `bias_rho`
//! in the in-distribution splits and drawn uniformly in the OOD split.

// Unused whenever std is linked, which then supplies the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    Descriptive,
    Temporal,
    Causal,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::Descriptive, QuestionType::Temporal, QuestionType::Causal];

    pub fn index(self) -> usize {
        match self {
            QuestionType::Descriptive => 0,
            QuestionType::Temporal => 1,
            QuestionType::Causal => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Environment-answer coupling used for the OOD split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodCoupling {
    /// Environment cluster independent of the answer.
    Uniform,
    /// Environment cluster is always `(answer + 1) mod num_answers`.
    Inverted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_videos: usize,
    /// Clips per video (`K`).
    pub clips: usize,
    /// Clip and token feature width (`d`).
    pub feature_dim: usize,
    /// Question tokens (`L`).
    pub question_len: usize,
    pub num_answers: usize,
    /// Inclusive range of causal clip counts.
    pub causal_span: (usize, usize),
    pub bias_rho: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Objects per clip (`S`); zero disables object features.
    pub objects_per_clip: usize,
    /// Tokens per answer-candidate phrase.
    pub answer_phrase_len: usize,
    pub centroid_scale: f64,
    pub env_scale: f64,
    /// Extra noise on the causal-content features of environment clips.
    pub distractor_sigma: f64,
    /// Train / val / test-iid fractions; the remainder is the OOD split.
    pub split_fractions: (f64, f64, f64),
    pub ood_coupling: OodCoupling,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_videos: 2858,
            clips: 16,
            feature_dim: 16,
            question_len: 6,
            num_answers: 4,
            causal_span: (3, 6),
            bias_rho: 0.9,
            noise_sigma: 0.5,
            seed: 0,
            objects_per_clip: 0,
            answer_phrase_len: 2,
            centroid_scale: 1.0,
            env_scale: 1.5,
            distractor_sigma: 0.0,
            split_fractions: (0.7, 0.1, 0.1),
            ood_coupling: OodCoupling::Uniform,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.causal_span;
        if !(1 <= lo && lo <= hi && hi < self.clips) {
            return fail(format!("causal_span {:?} must satisfy 1 <= min <= max < clips ({})", self.causal_span, self.clips));
        }
        if !(0.0..=1.0).contains(&self.bias_rho) {
            return fail(format!("bias_rho {} outside [0, 1]", self.bias_rho));
        }
        if self.num_answers < 2 {
            return fail(format!("num_answers {} must be at least 2", self.num_answers));
        }
        if self.feature_dim < 6 {
            return fail(format!("feature_dim {} must be at least 6", self.feature_dim));
        }
        if self.question_len < 2 {
            return fail(format!("question_len {} must be at least 2", self.question_len));
        }
        if self.num_videos == 0 {
            return fail("num_videos must be positive".into());
        }
        if !(self.distractor_sigma >= 0.0 && self.distractor_sigma.is_finite()) {
            return fail(format!("distractor_sigma {} must be finite and nonnegative", self.distractor_sigma));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be finite and nonnegative", self.noise_sigma));
        }
        if self.answer_phrase_len == 0 {
            return fail("answer_phrase_len must be positive".into());
        }
        let (a, b, c) = self.split_fractions;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || a + b + c > 1.0 + 1e-12 {
            return fail(format!("split fractions {:?} must be nonnegative and sum to at most 1", self.split_fractions));
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.feature_dim)
    }

    /// Instance counts for train, val, test-iid and test-ood.
    pub fn split_sizes(&self) -> [usize; 4] {
        let n = self.num_videos;
        let (a, b, c) = self.split_fractions;
        let train = (n as f64 * a + 1e-9).floor() as usize;
        let val = (n as f64 * b + 1e-9).floor() as usize;
        let iid = (n as f64 * c + 1e-9).floor() as usize;
        let iid = iid.min(n - train - val);
        [train, val, iid, n - train - val - iid]
    }

    /// Expected causal fraction of a video, `E[n] / K`.
    pub fn causal_fraction(&self) -> f64 {
        let (lo, hi) = self.causal_span;
        (lo + hi) as f64 / 2.0 / self.clips as f64
    }
}

/// Disjoint column blocks of the feature space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub content: Range<usize>,
    pub environment: Range<usize>,
    pub key: Range<usize>,
}

impl FeatureLayout {
    pub fn new(d: usize) -> Self {
        let key = (d / 4).max(2);
        let content = (d - key) / 2;
        FeatureLayout { content: 0..content, environment: content..d - key, key: d - key..d }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoInstance {
    pub id: String,
    /// `K × d`
    pub clips: Matrix,
    /// Per clip, `S × d` object features.
    pub objects: Option<Vec<Matrix>>,
    pub causal_mask: Vec<bool>,
    /// Generator bookkeeping: the environment cluster the clips were drawn from.
    pub env_cluster: usize,
}

impl VideoInstance {
    pub fn causal_positions(&self) -> Vec<usize> {
        positions(&self.causal_mask, true)
    }

    pub fn environment_positions(&self) -> Vec<usize> {
        positions(&self.causal_mask, false)
    }

    pub fn causal_clips(&self) -> Matrix {
        self.clips.select_rows(&self.causal_positions())
    }
}

fn positions(mask: &[bool], want: bool) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m == want).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    /// `L × d`
    pub tokens: Matrix,
    pub qtype: QuestionType,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub video: VideoInstance,
    pub question: QuestionInstance,
}

/// Fixed parameters of the causal mechanism, shared by every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub layout: FeatureLayout,
    /// `num_answers × |content|`
    pub centroids: Matrix,
    /// `num_answers × |environment|`
    pub env_centers: Matrix,
    /// `3 × d`, one row per question type.
    pub qtype_embeddings: Matrix,
    /// One `answer_phrase_len × d` token matrix per answer class.
    pub answer_phrases: Vec<Matrix>,
}

impl Mechanism {
    pub fn num_answers(&self) -> usize {
        self.centroids.rows()
    }

    /// Nearest-centroid label of the mean causal-clip content. Takes causal
    /// clips only; the question does not alter the label given the scene.
    pub fn oracle_answer(&self, causal_clips: &Matrix, _question: &QuestionInstance) -> Result<usize> {
        if causal_clips.rows() == 0 {
            return Err(Error::Degenerate("oracle_answer needs at least one causal clip".into()));
        }
        let c = &self.layout.content;
        let mut mean = alloc::vec![0.0; c.len()];
        for r in 0..causal_clips.rows() {
            for (m, &x) in mean.iter_mut().zip(&causal_clips.row(r)[c.clone()]) {
                *m += x;
            }
        }
        let inv = 1.0 / causal_clips.rows() as f64;
        let mut best = (0, f64::INFINITY);
        for k in 0..self.centroids.rows() {
            let dist: f64 = mean.iter().zip(self.centroids.row(k)).map(|(&m, &c)| (m * inv - c).powi(2)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        Ok(best.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    TestIid,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestIid, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIid => "test_iid",
            Split::TestOod => "test_ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub config: GenConfig,
    pub mechanism: Mechanism,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_iid: Vec<Sample>,
    pub test_ood: Vec<Sample>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestIid => &self.test_iid,
            Split::TestOod => &self.test_ood,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::TestIid => &mut self.test_iid,
            Split::TestOod => &mut self.test_ood,
        }
    }
}

/// Rounds through `f32` so bundles survive the on-disk format unchanged.
fn quantize(m: &mut Matrix) {
    for x in m.data_mut() {
        *x = *x as f32 as f64;
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn build_mechanism(config: &GenConfig) -> Mechanism {
    let layout = config.layout();
    let mut r = rng::stream(config.seed, &[tag::MECHANISM]);
    let centroids = rng::normal_matrix(config.num_answers, layout.content.len(), config.centroid_scale, &mut r);
    let env_centers = rng::normal_matrix(config.num_answers, layout.environment.len(), config.env_scale, &mut r);
    let mut qtype_embeddings = rng::normal_matrix(3, config.feature_dim, 1.0 / (config.feature_dim as f64).sqrt(), &mut r);
    let mut answer_phrases = Vec::with_capacity(config.num_answers);
    for k in 0..config.num_answers {
        let mut phrase = rng::normal_matrix(config.answer_phrase_len, config.feature_dim, 0.1, &mut r);
        for t in 0..config.answer_phrase_len {
            for (j, c) in layout.content.clone().enumerate() {
                let v = phrase.get(t, c) + centroids.get(k, j);
                phrase.set(t, c, v);
            }
        }
        quantize(&mut phrase);
        answer_phrases.push(phrase);
    }
    let mut centroids = centroids;
    let mut env_centers = env_centers;
    quantize(&mut centroids);
    quantize(&mut env_centers);
    quantize(&mut qtype_embeddings);
    Mechanism { layout, centroids, env_centers, qtype_embeddings, answer_phrases }
}

fn generate_sample(config: &GenConfig, mech: &Mechanism, index: usize, split: Split) -> Sample {
    let mut r = rng::stream(config.seed, &[tag::INSTANCE, index as u64]);
    let (k_clips, d) = (config.clips, config.feature_dim);
    let sigma = config.noise_sigma;
    let lay = &mech.layout;

    let n_causal = r.random_range(config.causal_span.0..=config.causal_span.1);
    let start = r.random_range(0..=k_clips - n_causal);
    let causal_mask: Vec<bool> = (0..k_clips).map(|k| (start..start + n_causal).contains(&k)).collect();
    let seed_class = r.random_range(0..config.num_answers);
    let scene_key = unit_vector(lay.key.len(), &mut r);

    let mut clips = Matrix::zeros(k_clips, d);
    for k in 0..k_clips {
        for x in clips.row_mut(k) {
            *x = sigma * normal(&mut r);
        }
        if causal_mask[k] {
            for (j, c) in lay.content.clone().enumerate() {
                let v = clips.get(k, c) + mech.centroids.get(seed_class, j);
                clips.set(k, c, v);
            }
            for (j, c) in lay.key.clone().enumerate() {
                let v = clips.get(k, c) + scene_key[j];
                clips.set(k, c, v);
            }
        } else {
            let distractor = unit_vector(lay.key.len(), &mut r);
            for (j, c) in lay.key.clone().enumerate() {
                let v = clips.get(k, c) + distractor[j];
                clips.set(k, c, v);
            }
            if config.distractor_sigma > 0.0 {
                for c in lay.content.clone() {
                    let v = clips.get(k, c) + config.distractor_sigma * normal(&mut r);
                    clips.set(k, c, v);
                }
            }
        }
    }
    quantize(&mut clips);

    let qtype = QuestionType::from_index(r.random_range(0..3)).unwrap_or(QuestionType::Descriptive);
    let mut tokens = rng::normal_matrix(config.question_len, d, sigma, &mut r);
    tokens.row_mut(0).iter_mut().zip(mech.qtype_embeddings.row(qtype.index())).for_each(|(t, &e)| *t += e);
    for l in 1..config.question_len {
        for (j, c) in lay.key.clone().enumerate() {
            let v = tokens.get(l, c) + scene_key[j];
            tokens.set(l, c, v);
        }
    }
    quantize(&mut tokens);

    let provisional = QuestionInstance { tokens, qtype, answer: 0 };
    let causal_rows = clips.select_rows(&positions(&causal_mask, true));
    let answer = mech.oracle_answer(&causal_rows, &provisional).unwrap_or(seed_class);
    let question = QuestionInstance { answer, ..provisional };

    let env_cluster = match split {
        Split::TestOod => match config.ood_coupling {
            OodCoupling::Uniform => r.random_range(0..config.num_answers),
            OodCoupling::Inverted => (answer + 1) % config.num_answers,
        },
        _ => {
            if r.random_bool(config.bias_rho) {
                answer
            } else {
                r.random_range(0..config.num_answers)
            }
        }
    };
    for k in 0..k_clips {
        if !causal_mask[k] {
            for (j, c) in lay.environment.clone().enumerate() {
                let v = clips.get(k, c) + mech.env_centers.get(env_cluster, j);
                clips.set(k, c, v as f32 as f64);
            }
        }
    }

    let objects = (config.objects_per_clip > 0).then(|| {
        (0..k_clips)
            .map(|k| {
                let mut objs = rng::normal_matrix(config.objects_per_clip, d, sigma, &mut r);
                for x in objs.row_mut(0).iter_mut().zip(clips.row(k)) {
                    *x.0 += x.1;
                }
                for s in 1..config.objects_per_clip {
                    let distractor = unit_vector(lay.key.len(), &mut r);
                    for (j, c) in lay.key.clone().enumerate() {
                        let v = objs.get(s, c) + distractor[j];
                        objs.set(s, c, v);
                    }
                }
                quantize(&mut objs);
                objs
            })
            .collect()
    });

    let video = VideoInstance { id: format!("v{index:06}"), clips, objects, causal_mask, env_cluster };
    Sample { video, question }
}

/// Instances are generated independently from `(seed, index)` streams, so
/// any subset can be produced in any order and in parallel.
pub fn generate_dataset(config: &GenConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let mechanism = build_mechanism(config);
    let [n_train, n_val, n_iid, n_ood] = config.split_sizes();
    let mut bundle = DatasetBundle {
        config: config.clone(),
        mechanism,
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
        test_iid: Vec::with_capacity(n_iid),
        test_ood: Vec::with_capacity(n_ood),
    };
    let bounds = [
        (Split::Train, 0..n_train),
        (Split::Val, n_train..n_train + n_val),
        (Split::TestIid, n_train + n_val..n_train + n_val + n_iid),
        (Split::TestOod, n_train + n_val + n_iid..config.num_videos),
    ];
    for (split, range) in bounds {
        for i in range {
            let s = generate_sample(config, &bundle.mechanism, i, split);
            bundle.split_mut(split).push(s);
        }
    }
    Ok(bundle)
}
