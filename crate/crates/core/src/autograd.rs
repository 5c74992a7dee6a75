//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built per example. Parameters are read from a shared
//! [`ParamStore`] and their gradients are collected into [`ParamGrads`] after
//! [`Graph::backward`]. Binary elementwise ops broadcast a `1 × n` right-hand
//! side across the rows of the left-hand side.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    GatherElems(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of every node with respect to the scalar passed to [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Matrix>>,
    params: ParamGrads,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.node_grads[v.0].as_ref()
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn broadcast_ok(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols())
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert!(
        broadcast_ok(a, b),
        "broadcast shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = a.clone();
    let bcast = b.rows() == 1 && a.rows() != 1;
    for r in 0..a.rows() {
        let br = if bcast { b.row(0) } else { b.row(r) };
        for (o, &y) in out.row_mut(r).iter_mut().zip(br) {
            *o = f(*o, y);
        }
    }
    out
}

/// Reduces a gradient for a (possibly broadcast) right-hand operand to its shape.
fn unbroadcast(g: Matrix, target: (usize, usize)) -> Matrix {
    if g.shape() == target {
        g
    } else {
        g.sum_rows()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// A leaf whose gradient is tracked but which is not a parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r)
                .copy_from_slice(&crate::tensor::softmax(x.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let lse = crate::tensor::log_sum_exp(x.row(r));
            for o in out.row_mut(r) {
                *o -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardisation to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows { input: a, inv_std })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Row `i` of the result is row `indices[i]` of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).permute_rows(indices);
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x.sum_rows().scaled(1.0 / x.rows() as f64);
        self.push(value, Op::MeanRows(a))
    }

    /// Column-wise maximum over rows; ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        let mut arg = vec![0usize; x.cols()];
        for c in 0..x.cols() {
            let mut best = 0;
            for r in 1..x.rows() {
                if x.get(r, c) > x.get(best, c) {
                    best = r;
                }
            }
            arg[c] = best;
            out.set(0, c, x.get(best, c));
        }
        self.push(out, Op::MaxRows(a, arg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Picks `(row, col)` entries into a `1 × k` row.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let value = Matrix::row_vector(idx.iter().map(|&(r, c)| x.get(r, c)).collect());
        self.push(value, Op::GatherElems(a, idx.to_vec()))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.matmul_t(bv));
                    acc(&mut grads, *b, av.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    let bshape = self.value(*b).shape();
                    acc(&mut grads, *b, unbroadcast(g.clone(), bshape));
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let bshape = self.value(*b).shape();
                    acc(&mut grads, *b, unbroadcast(g.scaled(-1.0), bshape));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = broadcast_zip(&g, bv, |x, y| x * y);
                    let gb_full = g.zip_map(av, |x, y| x * y);
                    acc(&mut grads, *b, unbroadcast(gb_full, bv.shape()));
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scaled(*s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(y, |g, e| g * e)),
                Op::Ln(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| g / x))
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| g * x.signum() * (x != 0.0) as u8 as f64))
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| g * sigmoid(x)))
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(x, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
                    )
                }
                Op::SoftmaxRows(a) => {
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (o, &p) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o = p * (*o - dot);
                        }
                    }
                    acc(&mut grads, *a, out);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (o, &lp) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= lp.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, out);
                }
                Op::LayerNormRows { input, inv_std } => {
                    let n = y.cols() as f64;
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &gi), &yi) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = inv_std[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    acc(&mut grads, *input, out);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut part = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, part);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let cols = g.cols();
                        let part = Matrix::from_vec(
                            h,
                            cols,
                            g.data()[offset * cols..(offset + h) * cols].to_vec(),
                        );
                        offset += h;
                        acc(&mut grads, p, part);
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut out = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, out);
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let mut out = Matrix::zeros(x.rows(), x.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, &gv) in out.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    acc(&mut grads, *a, out);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let scale = 1.0 / x.rows() as f64;
                    let mut out = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for (o, &gv) in out.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = gv * scale;
                        }
                    }
                    acc(&mut grads, *a, out);
                }
                Op::MaxRows(a, arg) => {
                    let x = self.value(*a);
                    let mut out = Matrix::zeros(x.rows(), x.cols());
                    for (c, &r) in arg.iter().enumerate() {
                        out.set(r, c, g.get(0, c));
                    }
                    acc(&mut grads, *a, out);
                }
                Op::SumAll(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Matrix::filled(x.rows(), x.cols(), g.item()));
                }
                Op::GatherElems(a, idx) => {
                    let x = self.value(*a);
                    let mut out = Matrix::zeros(x.rows(), x.cols());
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        out.set(r, c, out.get(r, c) + g.get(0, k));
                    }
                    acc(&mut grads, *a, out);
                }
            }
        }

        let mut params = ParamGrads::new(self.params.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.accumulate(*id, g);
            }
        }
        Gradients {
            node_grads: grads,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(f)/d(input) for a graph-building closure.
    fn check_input_grad(x0: Matrix, f: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let out = f(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.wrt(x).cloned().unwrap_or(Matrix::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let x = g.input(xp);
                let out = f(&mut g, x);
                g.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-8,
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_input_grad(sample(3, 4, 1), |g, x| {
            let a = g.sigmoid(x);
            let b = g.tanh(x);
            let c = g.mul(a, b);
            let d = g.softplus(c);
            let e = g.exp(d);
            let f = g.abs(x);
            let h = g.add(e, f);
            g.sum(h)
        });
    }

    #[test]
    fn row_ops_match_finite_differences() {
        let w = sample(4, 5, 2);
        check_input_grad(sample(3, 4, 3), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let n = g.layer_norm_rows(y, 1e-5);
            let s = g.softmax_rows(n);
            let l = g.log_softmax_rows(y);
            let m = g.max_rows(l);
            let mean = g.mean_rows(s);
            let t = g.transpose(mean);
            let tt = g.transpose(t);
            let both = g.concat_cols(&[tt, m]);
            let sq = g.mul(both, both);
            g.sum(sq)
        });
    }

    #[test]
    fn gather_slice_and_broadcast_match_finite_differences() {
        let bias = sample(1, 4, 5);
        check_input_grad(sample(3, 4, 4), move |g, x| {
            let b = g.constant(bias.clone());
            let y = g.add(x, b);
            let z = g.mul(y, b);
            let rows = g.gather_rows(z, &[2, 0, 2]);
            let sl = g.slice_cols(rows, 1, 2);
            let cat = g.concat_rows(&[sl, sl]);
            let picked = g.gather_elems(cat, &[(0, 0), (3, 1), (5, 1)]);
            let sq = g.mul(picked, picked);
            let total = g.sum(sq);
            let w = g.sub(x, b);
            let c = g.clamp(w, -0.5, 0.5);
            let cs = g.sum(c);
            let both = g.add(total, cs);
            g.scale(both, 0.5)
        });
    }

    #[test]
    fn param_gradients_accumulate_over_reuse() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_rows(&[vec![2.0]]));
        let mut g = Graph::new(&store);
        let w1 = g.param(id);
        let w2 = g.param(id);
        assert_eq!(w1, w2);
        let prod = g.mul(w1, w2);
        let grads = g.backward(prod);
        assert!((grads.params().get(id).unwrap().item() - 4.0).abs() < 1e-12);
    }
}
