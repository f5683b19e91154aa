//! Shared answer predictor: a graph over scene clips and question tokens,
//! attention pooling, low-rank bilinear fusion and a classifier.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{EncodedQuestion, SequenceEncoder};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::objectives::PredictionDistribution;
use crate::params::ParamStore;

/// Added to every symmetrised edge weight before row normalisation.
pub const ADJACENCY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub gcn_layers: usize,
    pub fusion_rank: usize,
    pub num_answers: usize,
}

impl BackboneConfig {
    pub fn new(hidden: usize, num_answers: usize) -> Self {
        BackboneConfig { hidden, gcn_layers: 2, fusion_rank: 4, num_answers }
    }
}

/// Low-rank bilinear fusion: `out(Σ_r (A_r a) ⊙ (B_r b))`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub left: Linear,
    pub right: Linear,
    pub out: Linear,
    pub rank: usize,
    pub dim: usize,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rank: usize, rng: &mut R) -> Self {
        Fusion {
            left: Linear::new(store, &format!("{name}.left"), dim, rank * dim, rng),
            right: Linear::new(store, &format!("{name}.right"), dim, rank * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            rank,
            dim,
        }
    }

    /// The rank-summed elementwise product, before the output projection.
    pub fn interaction(&self, tape: &mut Tape<'_>, a: Var, b: Var) -> Var {
        let pa = self.left.forward(tape, a);
        let pb = self.right.forward(tape, b);
        let prod = tape.mul(pa, pb);
        let chunks: Vec<Var> = (0..self.rank).map(|r| tape.slice_cols(prod, r * self.dim, self.dim)).collect();
        if chunks.len() == 1 {
            chunks[0]
        } else {
            tape.add_all(&chunks)
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, a: Var, b: Var) -> Var {
        let z = self.interaction(tape, a, b);
        self.out.forward(tape, z)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    /// `(N + L) × d_h`, scene rows first.
    pub nodes: Var,
    /// Row-stochastic `(N + L) × (N + L)`.
    pub adjacency: Var,
    pub scene_nodes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedRepresentation {
    pub s_local: Var,
    pub s_global: Var,
    pub s_final: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub adjacency_left: Mlp,
    pub adjacency_right: Mlp,
    pub gcn: Vec<Linear>,
    pub pool_score: Linear,
    pub fuse_global: Fusion,
    pub fuse_final: Fusion,
    pub classifier: Mlp,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: BackboneConfig, rng: &mut R) -> Self {
        let d = config.hidden;
        Backbone {
            config,
            adjacency_left: Mlp::new(store, &format!("{name}.mlp5"), &[d, d], rng),
            adjacency_right: Mlp::new(store, &format!("{name}.mlp6"), &[d, d], rng),
            gcn: (0..config.gcn_layers)
                .map(|i| Linear::new(store, &format!("{name}.gcn{i}"), d, d, rng))
                .collect(),
            pool_score: Linear::new(store, &format!("{name}.pool"), d, 1, rng),
            fuse_global: Fusion::new(store, &format!("{name}.fuse_g"), d, config.fusion_rank, rng),
            fuse_final: Fusion::new(store, &format!("{name}.fuse"), d, config.fusion_rank, rng),
            classifier: Mlp::new(store, &format!("{name}.cls"), &[d, d, config.num_answers], rng),
        }
    }

    pub fn build_graph(&self, tape: &mut Tape<'_>, scene_local: Var, q_local: Option<Var>) -> Result<GraphState> {
        let scene_nodes = tape.shape(scene_local).0;
        if scene_nodes == 0 {
            return Err(Error::Degenerate("graph over an empty scene".into()));
        }
        let nodes = match q_local {
            Some(q) => {
                if tape.shape(q).1 != tape.shape(scene_local).1 {
                    return Err(Error::Shape("scene and question widths differ".into()));
                }
                tape.concat_rows(&[scene_local, q])
            }
            None => scene_local,
        };
        let l = self.adjacency_left.forward(tape, nodes);
        let l = tape.relu(l);
        let r = self.adjacency_right.forward(tape, nodes);
        let r = tape.relu(r);
        let g = tape.matmul_nt(l, r);
        let gt = tape.transpose(g);
        let sym = tape.add(g, gt);
        let sym = tape.scale(sym, 0.5);
        let sym = tape.add_scalar(sym, ADJACENCY_EPS);
        let adjacency = tape.row_normalize(sym);
        Ok(GraphState { nodes, adjacency, scene_nodes })
    }

    /// `layers` rounds of `H ← relu(Â H W + b) + H`.
    pub fn gcn_propagate(&self, tape: &mut Tape<'_>, state: &GraphState, layers: usize) -> Result<Var> {
        if layers > self.gcn.len() {
            return Err(Error::Config(format!("{layers} GCN layers requested, {} configured", self.gcn.len())));
        }
        let mut h = state.nodes;
        for layer in &self.gcn[..layers] {
            let m = tape.matmul(state.adjacency, h);
            let m = layer.forward(tape, m);
            let m = tape.relu(m);
            h = tape.add(m, h);
        }
        Ok(h)
    }

    /// Softmax over learned per-node scores, then the weighted sum (`1 × d_h`).
    pub fn attention_pool(&self, tape: &mut Tape<'_>, nodes: Var) -> Var {
        let scores = self.pool_score.forward(tape, nodes);
        let scores = tape.transpose(scores);
        let weights = tape.softmax_rows(scores);
        tape.matmul(weights, nodes)
    }

    /// Prediction from an already encoded scene.
    pub fn predict_encoded(
        &self,
        tape: &mut Tape<'_>,
        scene_local: Var,
        scene_global: Var,
        question: &EncodedQuestion,
    ) -> Result<(PredictionDistribution, FusedRepresentation)> {
        let graph = self.build_graph(tape, scene_local, Some(question.local))?;
        let z = self.gcn_propagate(tape, &graph, self.config.gcn_layers)?;
        let s_local = self.attention_pool(tape, z);
        let s_global = self.fuse_global.forward(tape, scene_global, question.global);
        let s_final = self.fuse_final.forward(tape, s_global, s_local);
        let logits = self.classifier.forward(tape, s_final);
        let pred = PredictionDistribution::from_logits(tape, logits);
        Ok((pred, FusedRepresentation { s_local, s_global, s_final }))
    }

    /// Encodes `scene` rows with the shared `encoder`, then predicts.
    pub fn predict(
        &self,
        tape: &mut Tape<'_>,
        encoder: &SequenceEncoder,
        scene: Var,
        question: &EncodedQuestion,
    ) -> Result<PredictionDistribution> {
        let enc = encoder.encode(tape, scene)?;
        Ok(self.predict_encoded(tape, enc.local, enc.global, question)?.0)
    }
}
