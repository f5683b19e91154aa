//! Small differentiable layers shared by the encoders, the backbone and the
//! rationalizer.

// Unused whenever std is linked, which then supplies the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// `x · W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.add_glorot(&format!("{name}.weight"), input, output, rng);
        let bias = store.add_zeros(&format!("{name}.bias"), 1, output);
        Linear { weight, bias, input, output }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    pub fn set(&self, store: &mut ParamStore, weight: Matrix, bias: Matrix) {
        assert_eq!(weight.shape(), (self.input, self.output));
        assert_eq!(bias.shape(), (1, self.output));
        *store.get_mut(self.weight) = weight;
        *store.get_mut(self.bias) = bias;
    }
}

/// Linear layers with a rectifier between consecutive layers (none after
/// the last one).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; a two-entry slice gives a single affine map.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, h);
        }
        h
    }
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            dim,
        }
    }

    /// Returns the attended output (`n × d`) and the attention map (`n × m`,
    /// rows summing to one).
    pub fn forward(&self, tape: &mut Tape<'_>, queries: Var, context: Var) -> (Var, Var) {
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, context);
        let v = self.value.forward(tape, context);
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let map = tape.softmax_rows(scores);
        let mixed = tape.matmul(map, v);
        (self.out.forward(tape, mixed), map)
    }

    /// Sets every projection to identity with zero bias.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for l in [&self.query, &self.key, &self.value, &self.out] {
            l.set(store, Matrix::identity(self.dim), Matrix::zeros(1, self.dim));
        }
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        FeedForward { mlp: Mlp::new(store, name, &[dim, 2 * dim, dim], rng) }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        self.mlp.forward(tape, x)
    }
}

/// Self-attention and feed-forward sublayers, each with a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: Attention,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        EncoderLayer {
            attention: Attention::new(store, &format!("{name}.attn"), dim, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let (a, _) = self.attention.forward(tape, x, x);
        let h = tape.add(a, x);
        let f = self.ffn.forward(tape, h);
        tape.add(f, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::rng;

    #[test]
    fn linear_matches_explicit_product() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, &[]);
        let lin = Linear::new(&mut store, "l", 3, 2, &mut r);
        let w = Matrix::from_rows(&[[1.0, -1.0], [0.5, 2.0], [0.0, 3.0]]);
        lin.set(&mut store, w.clone(), Matrix::row_vector(alloc::vec![0.1, -0.2]));
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]]);
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let y = lin.forward(&mut t, xv);
        let expected = Matrix::from_rows(&[[2.1, 11.8], [-0.9, 3.8]]);
        assert!(t.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn attention_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, &[]);
        let layer = EncoderLayer::new(&mut store, "enc", 4, &mut r);
        let x = rng::normal_matrix(3, 4, 1.0, &mut r);
        let report = check_gradients(&store, &[x], GradCheck::default(), |t, v| {
            let y = layer.forward(t, v[0]);
            let y = t.tanh(y);
            t.sum(y)
        });
        assert!(report.passed(), "{report:?}");
    }
}
