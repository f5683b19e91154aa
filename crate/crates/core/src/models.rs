//! Per-method parameter sets, batch objectives and inference paths.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::encoders::{embed_video_linear, EncodedQuestion, SequenceEncoder};
use crate::error::{Error, Result};
use crate::grounding::{
    argmax_indicator, attention_scores, gumbel_indicator, rebalance_degenerate, sample_gumbel, split_mask, split_select,
    AttentionScores, GroundingHeads, Indicator, SceneSplit,
};
use crate::intervention::{build_contrastive, compose, fit_rows, intervene_environment, mix, MemoryBank, MixCoefficients};
use crate::nn::Linear;
use crate::objectives::{
    causal_loss, consistency_loss, eigv_objective, environment_loss, igv_objective, info_nce, soft_cross_entropy,
    LossWeights, PredictionDistribution,
};
use crate::params::ParamStore;
use crate::rationalizer::{Rationale, Rationalizer, RationalizerConfig, SelectMode};
use crate::synthgen::{DatasetBundle, Sample};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Igv,
    Eigv,
    Transtr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Erm, Method::Igv, Method::Eigv, Method::Transtr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Igv => "igv",
            Method::Eigv => "eigv",
            Method::Transtr => "transtr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Dataset dimensions a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub feature_dim: usize,
    pub clips: usize,
    pub num_answers: usize,
    pub objects_per_clip: usize,
}

impl DataShape {
    pub fn of(data: &DatasetBundle) -> Self {
        DataShape {
            feature_dim: data.config.feature_dim,
            clips: data.config.clips,
            num_answers: data.config.num_answers,
            objects_per_clip: data.config.objects_per_clip,
        }
    }
}

/// Architecture and per-method training knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `d_h`; each LSTM direction carries half of it.
    pub hidden: usize,
    /// Hidden width of the grounding MLPs; zero gives single affine maps.
    pub grounding_hidden: usize,
    pub gcn_layers: usize,
    pub fusion_rank: usize,
    pub weights: LossWeights,
    pub temperature: f64,
    /// Linear anneal target reached at the last epoch.
    pub temperature_final: Option<f64>,
    pub hard_indicator: bool,
    pub mix_alpha: f64,
    pub negatives: usize,
    pub detach_regrounding: bool,
    pub bank_capacity: usize,
    pub k_frames: usize,
    pub k_objects: usize,
    pub topk_sigma: f64,
    pub topk_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            grounding_hidden: 0,
            gcn_layers: 2,
            fusion_rank: 4,
            weights: LossWeights::default(),
            temperature: 1.0,
            temperature_final: None,
            hard_indicator: true,
            mix_alpha: 1.0,
            negatives: 5,
            detach_regrounding: true,
            bank_capacity: crate::intervention::DEFAULT_BANK_CAPACITY,
            k_frames: 5,
            k_objects: 12,
            topk_sigma: 0.5,
            topk_samples: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, method: Method) -> Result<()> {
        self.weights.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return fail(format!("hidden size {} must be even and at least 2", self.hidden));
        }
        if !(self.temperature > 0.0) || self.temperature_final.is_some_and(|t| !(t > 0.0)) {
            return fail("temperatures must be positive".into());
        }
        if method == Method::Eigv && self.negatives < 1 {
            return fail("eigv needs at least one negative".into());
        }
        if !(self.mix_alpha > 0.0) {
            return fail(format!("mix alpha {} must be positive", self.mix_alpha));
        }
        if self.bank_capacity == 0 || self.fusion_rank == 0 {
            return fail("bank capacity and fusion rank must be positive".into());
        }
        if method == Method::Transtr && (self.k_frames == 0 || self.k_objects == 0) {
            return fail("k_frames and k_objects must be positive".into());
        }
        if !(self.topk_sigma > 0.0) || self.topk_samples == 0 {
            return fail("top-k sigma and samples must be positive".into());
        }
        Ok(())
    }
}

/// Named loss components summed over the instances of a batch.
pub type LossParts = BTreeMap<String, f64>;

/// Parameters of one method plus the modules that read them.
#[derive(Clone, Debug)]
pub struct Model {
    pub method: Method,
    pub config: ModelConfig,
    pub shape: DataShape,
    pub store: ParamStore,
    pub video_encoder: Option<SequenceEncoder>,
    pub question_encoder: Option<SequenceEncoder>,
    pub grounding: Option<GroundingHeads>,
    pub embedding: Option<Linear>,
    pub backbone: Option<Backbone>,
    pub rationalizer: Option<Rationalizer>,
}

/// Mutable state threaded through training steps.
pub struct StepContext<'a, R: Rng + ?Sized> {
    pub bank: &'a mut MemoryBank,
    pub temperature: f64,
    pub rng: &'a mut R,
}

/// What the inference path reports for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub answer: usize,
    pub probs: Vec<f64>,
    pub causal_mask: Option<Vec<bool>>,
    pub p_c: Option<Vec<f64>>,
    pub indicator: Option<Matrix>,
    pub rationale: Option<Rationale>,
}

fn add_part(parts: &mut LossParts, name: &str, tape: &Tape<'_>, v: Var) {
    *parts.entry(name.into()).or_insert(0.0) += tape.scalar(v);
}

impl Model {
    pub fn new<R: Rng + ?Sized>(method: Method, config: &ModelConfig, shape: DataShape, rng: &mut R) -> Result<Self> {
        config.validate(method)?;
        let mut store = ParamStore::new();
        let d = shape.feature_dim;
        let h = config.hidden;
        let mut model = Model {
            method,
            config: config.clone(),
            shape,
            store: ParamStore::new(),
            video_encoder: None,
            question_encoder: None,
            grounding: None,
            embedding: None,
            backbone: None,
            rationalizer: None,
        };
        let grounding_hidden: Vec<usize> = if config.grounding_hidden > 0 { alloc::vec![config.grounding_hidden] } else { Vec::new() };
        let backbone_config =
            BackboneConfig { hidden: h, gcn_layers: config.gcn_layers, fusion_rank: config.fusion_rank, num_answers: shape.num_answers };
        match method {
            Method::Erm | Method::Igv => {
                model.video_encoder = Some(SequenceEncoder::new(&mut store, "video", d, h / 2, rng));
                model.question_encoder = Some(SequenceEncoder::new(&mut store, "question", d, h / 2, rng));
                if method == Method::Igv {
                    model.grounding = Some(GroundingHeads::new(&mut store, "ground", h, h, &grounding_hidden, h, rng));
                }
                model.backbone = Some(Backbone::new(&mut store, "backbone", backbone_config, rng));
            }
            Method::Eigv => {
                model.embedding = Some(Linear::new(&mut store, "embed", d, h, rng));
                model.video_encoder = Some(SequenceEncoder::new(&mut store, "video", h, h / 2, rng));
                model.question_encoder = Some(SequenceEncoder::new(&mut store, "question", d, h / 2, rng));
                model.grounding = Some(GroundingHeads::new(&mut store, "ground", h, h, &grounding_hidden, h, rng));
                model.backbone = Some(Backbone::new(&mut store, "backbone", backbone_config, rng));
            }
            Method::Transtr => {
                if shape.objects_per_clip == 0 {
                    return Err(Error::Config("transtr needs a dataset with object features".into()));
                }
                let mut rc = RationalizerConfig::new(d, h, shape.num_answers);
                rc.k_frames = config.k_frames;
                rc.k_objects = config.k_objects;
                model.rationalizer = Some(Rationalizer::new(&mut store, "transtr", rc, rng));
            }
        }
        model.store = store;
        Ok(model)
    }

    fn encoder(&self) -> &SequenceEncoder {
        self.video_encoder.as_ref().expect("method has a video encoder")
    }

    fn backbone(&self) -> &Backbone {
        self.backbone.as_ref().expect("method has a backbone")
    }

    fn heads(&self) -> &GroundingHeads {
        self.grounding.as_ref().expect("method has grounding heads")
    }

    fn encode_question(&self, tape: &mut Tape<'_>, tokens: Var) -> Result<EncodedQuestion> {
        self.question_encoder.as_ref().expect("method has a question encoder").encode(tape, tokens)
    }

    fn embed(&self, tape: &mut Tape<'_>, clips: Matrix) -> Result<Var> {
        let c = tape.constant(clips);
        embed_video_linear(tape, self.embedding.as_ref().expect("eigv embedding"), c)
    }

    fn sample_indicator<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        scores: &AttentionScores,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Indicator> {
        let noise = sample_gumbel(scores.clips(tape), rng);
        let ind = gumbel_indicator(tape, scores, temperature, self.config.hard_indicator, &noise)?;
        Ok(rebalance_degenerate(tape, ind, scores).0)
    }

    /// Sum over `batch` of the per-instance objective, plus its named parts.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Sample],
        data: &DatasetBundle,
        ctx: &mut StepContext<'_, R>,
    ) -> Result<(Var, LossParts)> {
        if batch.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        match self.method {
            Method::Erm => self.erm_loss(tape, batch),
            Method::Igv => self.igv_loss(tape, batch, ctx),
            Method::Eigv => self.eigv_loss(tape, batch, ctx),
            Method::Transtr => self.transtr_loss(tape, batch, data, ctx),
        }
    }

    fn erm_loss(&self, tape: &mut Tape<'_>, batch: &[&Sample]) -> Result<(Var, LossParts)> {
        let mut parts = LossParts::new();
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            let tokens = tape.constant(s.question.tokens.clone());
            let q = self.encode_question(tape, tokens)?;
            let clips = tape.constant(s.video.clips.clone());
            let pred = self.backbone().predict(tape, self.encoder(), clips, &q)?;
            let l = causal_loss(tape, &pred, s.question.answer)?;
            add_part(&mut parts, "ce", tape, l);
            terms.push(l);
        }
        let total = tape.add_all(&terms);
        Ok((total, parts))
    }

    fn igv_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Sample],
        ctx: &mut StepContext<'_, R>,
    ) -> Result<(Var, LossParts)> {
        let w = self.config.weights;
        let mut prepared: Vec<(EncodedQuestion, SceneSplit)> = Vec::with_capacity(batch.len());
        for s in batch {
            let tokens = tape.constant(s.question.tokens.clone());
            let q = self.encode_question(tape, tokens)?;
            let clips = tape.constant(s.video.clips.clone());
            let v = self.encoder().encode(tape, clips)?;
            let scores = attention_scores(tape, self.heads(), v.local, q.global)?;
            let ind = self.sample_indicator(tape, &scores, ctx.temperature, ctx.rng)?;
            let split = if ind.hard { split_select(tape, clips, ind)? } else { split_mask(tape, clips, ind)? };
            ctx.bank.insert_split(&s.video.clips, &split, &s.video.id);
            prepared.push((q, split));
        }
        let mut parts = LossParts::new();
        let mut terms = Vec::with_capacity(batch.len());
        for (s, (q, split)) in batch.iter().zip(&prepared) {
            let causal = split.causal.ok_or_else(|| Error::Degenerate("no causal clips".into()))?;
            let pred_c = self.backbone().predict(tape, self.encoder(), causal, q)?;
            let lc = causal_loss(tape, &pred_c, s.question.answer)?;
            let le = match split.environment {
                Some(env) if w.igv_lambda1 > 0.0 => {
                    let pred_e = self.backbone().predict(tape, self.encoder(), env, q)?;
                    environment_loss(tape, &pred_e)?
                }
                _ => tape.constant(Matrix::zeros(1, 1)),
            };
            let lv = if w.igv_lambda2 > 0.0 {
                let entry = ctx.bank.sample(ctx.rng)?;
                let v_star = if split.indicator.hard {
                    intervene_environment(tape, split, entry)?
                } else {
                    let fill = tape.constant(fit_rows(&entry.clips, split.clips));
                    let i1 = split.indicator.environment_column(tape);
                    let fill = tape.mul_col(fill, i1);
                    tape.add(causal, fill)
                };
                let pred_v = self.backbone().predict(tape, self.encoder(), v_star, q)?;
                consistency_loss(tape, &pred_v, &pred_c)?
            } else {
                tape.constant(Matrix::zeros(1, 1))
            };
            add_part(&mut parts, "causal", tape, lc);
            add_part(&mut parts, "environment", tape, le);
            add_part(&mut parts, "consistency", tape, lv);
            terms.push(igv_objective(tape, lc, le, lv, &w));
        }
        let total = tape.add_all(&terms);
        Ok((total, parts))
    }

    fn eigv_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Sample],
        ctx: &mut StepContext<'_, R>,
    ) -> Result<(Var, LossParts)> {
        let a_classes = self.shape.num_answers;
        struct Prepared {
            tokens: Var,
            q: EncodedQuestion,
            split: SceneSplit,
            answer: Var,
        }
        let mut prepared = Vec::with_capacity(batch.len());
        for s in batch {
            let tokens = tape.constant(s.question.tokens.clone());
            let q = self.encode_question(tape, tokens)?;
            let v = self.embed(tape, s.video.clips.clone())?;
            let scores = attention_scores(tape, self.heads(), v, q.global)?;
            let ind = self.sample_indicator(tape, &scores, ctx.temperature, ctx.rng)?;
            let split = split_mask(tape, v, ind)?;
            ctx.bank.insert_split(&s.video.clips, &split, &s.video.id);
            let answer = tape.constant(Matrix::one_hot(a_classes, s.question.answer));
            prepared.push(Prepared { tokens, q, split, answer });
        }
        let mut partners: Vec<usize> = (0..batch.len()).collect();
        partners.shuffle(ctx.rng);

        let mut parts = LossParts::new();
        let mut terms = Vec::with_capacity(batch.len());
        for (i, &j) in partners.iter().enumerate() {
            let (a, b) = (&prepared[i], &prepared[j]);
            let mc = MixCoefficients::sample(self.config.mix_alpha, ctx.rng)?;
            let (c1, e1) = (a.split.causal.expect("mask view"), a.split.environment.expect("mask view"));
            let (c2, e2) = (b.split.causal.expect("mask view"), b.split.environment.expect("mask view"));
            let mixed = crate::intervention::e_intervention(tape, c1, a.tokens, a.answer, c2, b.tokens, b.answer, mc.lambda0)?;
            let e_star = crate::intervention::i_intervention(tape, e1, e2, mc.lambda1)?;
            let v_star = compose(tape, mixed.c_star, e_star)?;
            let q_star = self.encode_question(tape, mixed.q_star)?;
            let pred = self.backbone().predict(tape, self.encoder(), v_star, &q_star)?;
            let l_erm = soft_cross_entropy(tape, &pred, mixed.a_star)?;

            let (v_re, q_re) = if self.config.detach_regrounding {
                (tape.detach(v_star), tape.detach(q_star.global))
            } else {
                (v_star, q_star.global)
            };
            let scores = attention_scores(tape, self.heads(), v_re, q_re)?;
            let mut ind = self.sample_indicator(tape, &scores, ctx.temperature, ctx.rng)?;
            if self.config.detach_regrounding {
                ind.value = tape.detach(ind.value);
                ind.soft = ind.value;
            }
            let regrounded = split_mask(tape, v_star, ind)?;
            let pool: Vec<usize> = (0..batch.len()).filter(|&r| r != j).collect();
            let set = build_contrastive(tape, &regrounded, i, ctx.bank, &pool, self.config.negatives, ctx.rng, |t, m| {
                self.embed(t, m)
            })?;
            let positive = self.backbone().predict(tape, self.encoder(), set.positive, &q_star)?;
            let mut negatives = Vec::with_capacity(set.negatives());
            for &vn in &set.visual_negatives {
                negatives.push(self.backbone().predict(tape, self.encoder(), vn, &q_star)?.probs);
            }
            for &r in &set.textual_negatives {
                negatives.push(self.backbone().predict(tape, self.encoder(), v_star, &prepared[r].q)?.probs);
            }
            let l_cl = info_nce(tape, pred.probs, positive.probs, &negatives)?;
            add_part(&mut parts, "erm", tape, l_erm);
            add_part(&mut parts, "contrastive", tape, l_cl);
            terms.push(eigv_objective(tape, l_erm, l_cl, self.config.weights.beta));
        }
        let total = tape.add_all(&terms);
        Ok((total, parts))
    }

    fn transtr_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Sample],
        data: &DatasetBundle,
        ctx: &mut StepContext<'_, R>,
    ) -> Result<(Var, LossParts)> {
        let mode = SelectMode::Perturbed { sigma: self.config.topk_sigma, samples: self.config.topk_samples };
        let mut parts = LossParts::new();
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            let pred = self.transtr_forward(tape, s, data, mode, ctx.rng)?.0;
            let l = causal_loss(tape, &pred, s.question.answer)?;
            add_part(&mut parts, "ce", tape, l);
            terms.push(l);
        }
        let total = tape.add_all(&terms);
        Ok((total, parts))
    }

    fn transtr_forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        s: &Sample,
        data: &DatasetBundle,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<(PredictionDistribution, Rationale)> {
        let objects = s.video.objects.as_ref().ok_or_else(|| Error::Config("transtr needs object features".into()))?;
        let r = self.rationalizer.as_ref().expect("transtr rationalizer");
        let out = r.forward(
            tape,
            &s.video.clips,
            objects,
            &s.question.tokens,
            Some(data.mechanism.answer_phrases.as_slice()),
            mode,
            rng,
        )?;
        Ok((PredictionDistribution::from_logits(tape, out.logits), out.rationale))
    }

    /// Deterministic inference: causal-scene prediction for IGV, the full
    /// video for ERM and EIGV, hard Top-K for TranSTR.
    pub fn infer(&self, sample: &Sample, data: &DatasetBundle) -> Result<Inference> {
        let mut tape = Tape::new(&self.store);
        let t = &mut tape;
        let mut out = Inference { answer: 0, probs: Vec::new(), causal_mask: None, p_c: None, indicator: None, rationale: None };
        let pred = match self.method {
            Method::Erm => {
                let tokens = t.constant(sample.question.tokens.clone());
                let q = self.encode_question(t, tokens)?;
                let clips = t.constant(sample.video.clips.clone());
                self.backbone().predict(t, self.encoder(), clips, &q)?
            }
            Method::Igv | Method::Eigv => {
                let tokens = t.constant(sample.question.tokens.clone());
                let q = self.encode_question(t, tokens)?;
                let (video, local) = if self.method == Method::Igv {
                    let clips = t.constant(sample.video.clips.clone());
                    (clips, self.encoder().encode(t, clips)?.local)
                } else {
                    let v = self.embed(t, sample.video.clips.clone())?;
                    (v, v)
                };
                let scores = attention_scores(t, self.heads(), local, q.global)?;
                let ind = argmax_indicator(t, &scores)?;
                let (ind, _) = rebalance_degenerate(t, ind, &scores);
                out.causal_mask = Some(ind.causal_mask(t));
                out.p_c = Some(t.value(scores.p_c).data().to_vec());
                out.indicator = Some(t.value(ind.value).clone());
                if self.method == Method::Igv {
                    let split = split_select(t, video, ind)?;
                    let causal = split.causal.ok_or_else(|| Error::Degenerate("no causal clips".into()))?;
                    self.backbone().predict(t, self.encoder(), causal, &q)?
                } else {
                    self.backbone().predict(t, self.encoder(), video, &q)?
                }
            }
            Method::Transtr => {
                let mut unused = crate::rng::stream(0, &[]);
                let (pred, rationale) = self.transtr_forward(t, sample, data, SelectMode::Hard, &mut unused)?;
                let mut mask = alloc::vec![false; sample.video.clips.rows()];
                for &f in &rationale.frame_indices {
                    mask[f] = true;
                }
                out.causal_mask = Some(mask);
                out.rationale = Some(rationale);
                pred
            }
        };
        out.probs = t.value(pred.probs).data().to_vec();
        out.answer = pred.argmax(t);
        Ok(out)
    }

    /// Named parameter arrays in registration order.
    pub fn named_params(&self) -> Vec<(String, Matrix)> {
        self.store.iter().map(|(n, m)| (String::from(n), m.clone())).collect()
    }

    /// Rebuilds the architecture and loads `params` into it.
    pub fn from_params<'a>(
        method: Method,
        config: &ModelConfig,
        shape: DataShape,
        params: impl IntoIterator<Item = (&'a str, Matrix)>,
    ) -> Result<Self> {
        let mut model = Model::new(method, config, shape, &mut crate::rng::stream(0, &[]))?;
        model.store.load_named(params)?;
        Ok(model)
    }

    /// Shuffled mini-batch partition for one epoch.
    pub fn batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// `λ·x1 + (1-λ)·x2` on plain matrices.
pub fn mix_matrices(x1: &Matrix, x2: &Matrix, lambda: f64) -> Result<Matrix> {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let a = t.constant(x1.clone());
    let b = t.constant(x2.clone());
    let m = mix(&mut t, a, b, lambda)?;
    Ok(t.value(m).clone())
}
