//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape through [`Tape::param`] (each parameter becomes at most one node
//! per tape) and [`Tape::backward`] returns gradients for every node, from
//! which [`Grads::params`] extracts the parameter gradients.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowNormalize(Var),
    RowProduct(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
    StraightThrough(Var),
    PerturbedTopK { scores: Var, noise: Matrix, hard: Matrix, sigma: f64 },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A leaf that receives gradients but is not a parameter (inputs).
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul(self.value(b));
        self.push(m, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul_nt(self.value(b));
        self.push(m, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(m, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(m, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(m, Op::Mul(a, b))
    }

    /// Adds the `1 × c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut m = av.clone();
        for r in 0..m.rows() {
            for (x, &b) in m.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        self.push(m, Op::AddRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `r × 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects an r x 1 column");
        let mut m = av.clone();
        for r in 0..m.rows() {
            let s = cv.data()[r];
            for x in m.row_mut(r) {
                *x *= s;
            }
        }
        self.push(m, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let m = self.value(a).scaled(s);
        self.push(m, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let m = self.value(a).map(|x| x + s);
        self.push(m, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let m = self.value(a).map(sigmoid);
        self.push(m, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let m = self.value(a).map(Float::tanh);
        self.push(m, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self.value(a).map(|x| x.max(0.0));
        self.push(m, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let m = self.value(a).map(Float::exp);
        self.push(m, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; no gradient flows through clamped entries.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let m = self.value(a).map(|x| x.max(floor).ln());
        self.push(m, Op::LogClamped(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        for r in 0..m.rows() {
            softmax_in_place(m.row_mut(r));
        }
        self.push(m, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        for r in 0..m.rows() {
            log_softmax_in_place(m.row_mut(r));
        }
        self.push(m, Op::LogSoftmaxRows(a))
    }

    /// Divides every row by its sum. Rows must have a positive sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        for r in 0..m.rows() {
            let s: f64 = m.row(r).iter().sum();
            for x in m.row_mut(r) {
                *x /= s;
            }
        }
        self.push(m, Op::RowNormalize(a))
    }

    /// `r × c → r × 1`, product across each row.
    pub fn row_product(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().product()).collect();
        let m = Matrix::column_vector(data);
        self.push(m, Op::RowProduct(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let m = self.value(a).transpose();
        self.push(m, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut m = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                m.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(m, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let m = Matrix::from_vec(len, av.cols(), av.data()[start * av.cols()..(start + len) * av.cols()].to_vec());
        self.push(m, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut m = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            m.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(m, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a).select_rows(idx);
        self.push(m, Op::GatherRows(a, idx.to_vec()))
    }

    /// Places row `i` of `a` at row `positions[i]` of a zero `total × c` matrix.
    pub fn scatter_rows(&mut self, a: Var, positions: &[usize], total: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), positions.len(), "scatter_rows position count mismatch");
        let mut m = Matrix::zeros(total, av.cols());
        for (i, &p) in positions.iter().enumerate() {
            m.row_mut(p).copy_from_slice(av.row(i));
        }
        self.push(m, Op::ScatterRows(a, positions.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// `r × c → 1 × c` column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut m = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, &x) in m.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        m.scale_in_place(1.0 / av.rows() as f64);
        self.push(m, Op::MeanRows(a))
    }

    /// Forward value `hard`, backward gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Matrix) -> Var {
        assert_eq!(self.shape(soft), hard.shape(), "straight_through shape mismatch");
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Records a perturbed-maximiser node. `noise` and `hard` are `samples × n`
    /// (standard-normal draws and the hard selections they produced); the
    /// value is the column mean of `hard` and the backward pass is the
    /// Gaussian perturbed-optimiser estimator `E[y Zᵀ] / σ`.
    pub(crate) fn perturbed(&mut self, scores: Var, noise: Matrix, hard: Matrix, sigma: f64) -> Var {
        let n = hard.cols();
        let mut mean = Matrix::zeros(1, n);
        for s in 0..hard.rows() {
            for (o, &h) in mean.data_mut().iter_mut().zip(hard.row(s)) {
                *o += h;
            }
        }
        mean.scale_in_place(1.0 / hard.rows() as f64);
        if self.shape(scores).0 != 1 {
            panic!("perturbed scores must be a row vector");
        }
        self.push(mean, Op::PerturbedTopK { scores, noise, hard, sigma })
    }

    /// Sum of all entries of `a` scaled by `s`.
    pub fn sum_scaled(&mut self, a: Var, s: f64) -> Var {
        let t = self.sum(a);
        self.scale(t, s)
    }

    /// Adds scalar `1 × 1` nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        let out_shape = self.value(output).shape();
        grads[output.0] = Some(Matrix::filled(out_shape.0, out_shape.1, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scaled(-1.0));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let mut ga = g.clone();
                    let mut gc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cv.data()[r];
                        gc.data_mut()[r] = crate::tensor::dot(g.row(r), av.row(r));
                        for x in ga.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scaled(*s)),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * y);
                    acc(&mut grads, *a, ga);
                }
                Op::LogClamped(a, floor) => {
                    let f = *floor;
                    let ga = g.zip_map(self.value(*a), |gi, x| if x > f { gi / x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = crate::tensor::dot(g.row(r), y.row(r));
                        for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yi * (gi - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gi - yi.exp() * s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s: f64 = x.row(r).iter().sum();
                        let gy = crate::tensor::dot(g.row(r), y.row(r));
                        for (o, &gi) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = (gi - gy) / s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowProduct(a) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let n = row.len();
                        // prefix/suffix products avoid dividing by zero entries
                        let mut prefix = vec![1.0; n + 1];
                        for j in 0..n {
                            prefix[j + 1] = prefix[j] * row[j];
                        }
                        let mut suffix = 1.0;
                        for j in (0..n).rev() {
                            ga.set(r, j, g.data()[r] * prefix[j] * suffix);
                            suffix *= row[j];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let gp = Matrix::from_vec(r, c, g.data()[start * c..(start + r) * c].to_vec());
                        acc(&mut grads, p, gp);
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Matrix::zeros(r, c);
                        for row in 0..r {
                            gp.row_mut(row).copy_from_slice(&g.row(row)[offset..offset + c]);
                        }
                        acc(&mut grads, p, gp);
                        offset += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterRows(a, positions) => {
                    let ga = g.select_rows(positions);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    let inv = 1.0 / r as f64;
                    for row in 0..r {
                        for (o, &x) in ga.row_mut(row).iter_mut().zip(g.data()) {
                            *o = x * inv;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::StraightThrough(soft) => acc(&mut grads, *soft, g),
                Op::PerturbedTopK { scores, noise, hard, sigma } => {
                    let samples = hard.rows();
                    let mut gs = Matrix::zeros(1, hard.cols());
                    for s in 0..samples {
                        let w = crate::tensor::dot(g.data(), hard.row(s));
                        for (o, &z) in gs.data_mut().iter_mut().zip(noise.row(s)) {
                            *o += w * z;
                        }
                    }
                    gs.scale_in_place(1.0 / (sigma * samples as f64));
                    acc(&mut grads, *scores, gs);
                }
            }
        }
        Grads { grads }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self, tape: &Tape<'_>) -> ParamGrads {
        let mut out = ParamGrads::empty(tape.params.len());
        for (pid, var) in tape.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = self.wrt(*v) {
                    out.set(ParamId(pid), g.clone());
                }
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for x in xs.iter_mut() {
        *x -= lse;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    softmax_in_place(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        use rand::Rng;
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::new();
        let inputs = [random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng), random(3, 1, &mut rng)];
        let report = check_gradients(&store, &inputs, GradCheck::default(), |t, x| {
            let h = t.matmul(x[0], x[1]);
            let h = t.add_row(h, x[2]);
            let h = t.mul_col(h, x[3]);
            let s = t.sigmoid(h);
            let u = t.tanh(h);
            let p = t.mul(s, u);
            let sm = t.softmax_rows(p);
            let ls = t.log_softmax_rows(h);
            let tr = t.transpose(ls);
            let cat = t.concat_cols(&[sm, h]);
            let sl = t.slice_cols(cat, 1, 2);
            let g = t.gather_rows(sl, &[2, 0, 2]);
            let sc = t.scatter_rows(g, &[4, 1, 0], 5);
            let mr = t.mean_rows(sc);
            let e = t.exp(mr);
            let a = t.sum(e);
            let b = t.sum_scaled(tr, 0.3);
            let nt = t.matmul_nt(x[0], x[0]);
            let c = t.sum(nt);
            let c = t.scale(c, 0.1);
            t.add_all(&[a, b, c])
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn normalisation_and_products_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::new();
        let x = random(3, 3, &mut rng).map(|v| v.abs() + 0.2);
        let w = random(3, 3, &mut rng);
        let report = check_gradients(&store, &[x, w], GradCheck::default(), |t, x| {
            let n = t.row_normalize(x[0]);
            let p = t.row_product(x[0]);
            let l = t.log_clamped(x[0], 1e-12);
            let m = t.mul(n, x[1]);
            let r = t.concat_rows(&[m, l]);
            let s1 = t.sum(r);
            let s2 = t.sum(p);
            t.add(s1, s2)
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn straight_through_passes_gradient_to_soft() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let soft = t.constant(Matrix::row_vector(alloc::vec![0.3, 0.7]));
        let st = t.straight_through(soft, Matrix::row_vector(alloc::vec![0.0, 1.0]));
        let w = t.constant(Matrix::row_vector(alloc::vec![2.0, 5.0]));
        let y = t.mul(st, w);
        let loss = t.sum(y);
        assert_eq!(t.scalar(loss), 5.0);
        let g = t.backward(loss);
        assert_eq!(g.wrt(soft).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn params_appear_once_per_tape() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::row_vector(alloc::vec![1.0, 2.0]));
        let mut t = Tape::new(&store);
        let a = t.param(id);
        let b = t.param(id);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        let loss = t.sum(y);
        let grads = t.backward(loss).params(&t);
        assert_eq!(grads.get(id).unwrap().data(), &[2.0, 4.0]);
    }
}
