//! Building blocks shared by the encoders, heads and decoders.

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::xavier(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }
}

/// Row layer normalisation with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            shift: store.add(format!("{name}.shift"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let scaled = g.mul(n, gain);
        g.add(scaled, shift)
    }
}

/// Scaled dot-product attention with `heads` parallel heads. No masking and
/// no positional terms: keys form an unordered set.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, cat)
    }
}

/// Self-attention followed by residual addition and layer normalisation.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = self.attention.forward(g, x, x);
        let sum = g.add(x, a);
        self.norm.forward(g, sum)
    }
}

/// Post-norm transformer layer: attention block, then a ReLU feed-forward
/// sub-layer with its own residual and norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub block: AttentionBlock,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            block: AttentionBlock::new(store, name, dim, heads, rng),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, 2 * dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 2 * dim, dim, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.block.forward(g, x);
        let f = self.ff_in.forward(g, h);
        let f = g.relu(f);
        let f = self.ff_out.forward(g, f);
        let sum = g.add(h, f);
        self.ff_norm.forward(g, sum)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Standard LSTM cell over row inputs (`rows` independent sequences at once).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Matrix::xavier(input_dim + hidden_dim, 4 * hidden_dim, rng),
        );
        // forget-gate bias starts at 1
        let mut b = Matrix::zeros(1, 4 * hidden_dim);
        for c in hidden_dim..2 * hidden_dim {
            b.set(0, c, 1.0);
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            weight,
            bias,
            input_dim,
            hidden_dim,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> LstmState {
        LstmState {
            hidden: g.constant(Matrix::zeros(rows, self.hidden_dim)),
            cell: g.constant(Matrix::zeros(rows, self.hidden_dim)),
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: LstmState) -> LstmState {
        let h = self.hidden_dim;
        let xh = g.concat_cols(&[x, state.hidden]);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let z = g.matmul(xh, w);
        let z = g.add(z, b);
        let i = g.slice_cols(z, 0, h);
        let f = g.slice_cols(z, h, h);
        let o = g.slice_cols(z, 2 * h, h);
        let c_hat = g.slice_cols(z, 3 * h, h);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let c_hat = g.tanh(c_hat);
        let keep = g.mul(f, state.cell);
        let write = g.mul(i, c_hat);
        let cell = g.add(keep, write);
        let tc = g.tanh(cell);
        let hidden = g.mul(o, tc);
        LstmState { hidden, cell }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn attention_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, Purpose::Init, 0, 0);
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng);
        let mut g = Graph::new(&store);
        let q = g.constant(Matrix::randn(3, 8, 1.0, &mut rng));
        let kv = g.constant(Matrix::randn(5, 8, 1.0, &mut rng));
        let out = mha.forward(&mut g, q, kv);
        assert_eq!(g.value(out).shape(), (3, 8));
    }

    #[test]
    fn lstm_step_shapes() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, Purpose::Init, 0, 0);
        let cell = LstmCell::new(&mut store, "lstm", 4, 6, &mut rng);
        let mut g = Graph::new(&store);
        let s0 = cell.zero_state(&mut g, 2);
        let x = g.constant(Matrix::randn(2, 4, 1.0, &mut rng));
        let s1 = cell.step(&mut g, x, s0);
        assert_eq!(g.value(s1.hidden).shape(), (2, 6));
        assert!(g.value(s1.cell).is_finite());
    }
}
