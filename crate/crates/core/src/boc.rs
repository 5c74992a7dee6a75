//! BOC generator: per-category count distributions from the encoder's
//! intermediate tap, the first-task cross-entropy, and the three ways of
//! turning a distribution into a BOC (relaxed Gumbel-softmax sample, hard
//! Monte-Carlo sample, arg-max baseline).
//!
//! `H = Attn(Q, R, R)` with one trainable query per category, then a shared
//! one-hidden-layer ReLU head maps each row of `H` to `N_m` count logits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::BocLabel;
use crate::error::{Error, Result};
use crate::nn::{Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{argmax, softmax, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BocConfig {
    pub num_categories: usize,
    pub max_count: usize,
    pub model_dim: usize,
    pub num_heads: usize,
}

#[derive(Clone, Debug)]
pub struct BocGenerator {
    pub config: BocConfig,
    pub queries: ParamId,
    pub attention: MultiHeadAttention,
    pub hidden: Linear,
    pub output: Linear,
}

impl BocGenerator {
    pub fn new(store: &mut ParamStore, config: BocConfig, rng: &mut Rng) -> Self {
        let d = config.model_dim;
        let queries = store.add("boc.queries", Matrix::randn(config.num_categories, d, 1.0, rng));
        let attention = MultiHeadAttention::new(store, "boc.attn", d, config.num_heads, rng);
        let hidden = Linear::new(store, "boc.fc_hidden", d, d, rng);
        let output = Linear::new(store, "boc.fc_out", d, config.max_count, rng);
        Self {
            config,
            queries,
            attention,
            hidden,
            output,
        }
    }

    /// Count logits, `L_m × N_m`.
    pub fn predict(&self, g: &mut Graph, boc_view: Var) -> Var {
        let q = g.param(self.queries);
        let h = self.attention.forward(g, q, boc_view);
        let h = self.hidden.forward(g, h);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Row-stochastic count probabilities and their logits.
#[derive(Clone, Debug, PartialEq)]
pub struct BocDistribution {
    pub logits: Matrix,
    pub probs: Matrix,
}

impl BocDistribution {
    pub fn from_logits(logits: Matrix) -> Self {
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            probs.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
        }
        Self { logits, probs }
    }

    pub fn from_probs(probs: Matrix) -> Self {
        Self {
            logits: probs.map(f64::ln),
            probs,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.probs.rows()
    }

    pub fn max_count(&self) -> usize {
        self.probs.cols()
    }

    /// `-Σ_j log p_j(gold_j)`.
    pub fn loss(&self, gold: &BocLabel) -> Result<f64> {
        check_gold(gold, self.num_categories(), self.max_count())?;
        Ok(-gold
            .counts
            .iter()
            .enumerate()
            .map(|(j, &c)| self.probs.get(j, c).ln())
            .sum::<f64>())
    }

    pub fn log_prob(&self, boc: &BocLabel) -> f64 {
        boc.counts
            .iter()
            .enumerate()
            .map(|(j, &c)| self.probs.get(j, c).ln())
            .sum()
    }
}

fn check_gold(gold: &BocLabel, rows: usize, cols: usize) -> Result<()> {
    if gold.counts.len() != rows {
        return Err(Error::Shape(format!(
            "gold BOC has {} categories, distribution has {rows}",
            gold.counts.len()
        )));
    }
    if let Some((j, &c)) = gold.counts.iter().enumerate().find(|(_, &c)| c >= cols) {
        return Err(Error::CountOverflow {
            category: format!("#{j}"),
            count: c,
            max: cols,
        });
    }
    Ok(())
}

/// Differentiable first-task loss `L^m` from count logits.
pub fn boc_loss(g: &mut Graph, logits: Var, gold: &BocLabel) -> Result<Var> {
    let (rows, cols) = g.value(logits).shape();
    check_gold(gold, rows, cols)?;
    let lp = g.log_softmax_rows(logits);
    let idx: Vec<(usize, usize)> = gold.counts.iter().enumerate().map(|(j, &c)| (j, c)).collect();
    let picked = g.gather_elems(lp, &idx);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// `Σ_j log p_j(m_j)`, differentiable in the logits.
pub fn boc_log_prob(g: &mut Graph, logits: Var, boc: &BocLabel) -> Var {
    let lp = g.log_softmax_rows(logits);
    let idx: Vec<(usize, usize)> = boc.counts.iter().enumerate().map(|(j, &c)| (j, c)).collect();
    let picked = g.gather_elems(lp, &idx);
    g.sum(picked)
}

/// Soft one-hot rows of a Gumbel-softmax sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedBoc {
    pub soft_onehots: Matrix,
    pub temperature: f64,
}

/// i.i.d. Gumbel(0, 1) noise.
pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// `softmax((o + g) / τ)` per row, differentiable in `o` with the noise frozen.
pub fn gumbel_relax(g: &mut Graph, logits: Var, noise: &Matrix, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(Error::Temperature(temperature));
    }
    let n = g.constant(noise.clone());
    let perturbed = g.add(logits, n);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    Ok(g.softmax_rows(scaled))
}

pub fn gumbel_sample(dist: &BocDistribution, temperature: f64, rng: &mut Rng) -> Result<RelaxedBoc> {
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(Error::Temperature(temperature));
    }
    let noise = gumbel_noise(dist.num_categories(), dist.max_count(), rng);
    let mut out = Matrix::zeros(dist.num_categories(), dist.max_count());
    for r in 0..out.rows() {
        let z: Vec<f64> = dist
            .logits
            .row(r)
            .iter()
            .zip(noise.row(r))
            .map(|(o, g)| (o + g) / temperature)
            .collect();
        out.row_mut(r).copy_from_slice(&softmax(&z));
    }
    Ok(RelaxedBoc {
        soft_onehots: out,
        temperature,
    })
}

/// Draws each category count from its row categorical (`m̃`).
pub fn hard_sample(dist: &BocDistribution, rng: &mut Rng) -> BocLabel {
    let counts = (0..dist.num_categories())
        .map(|j| {
            let row = dist.probs.row(j);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (k, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return k;
                }
            }
            row.len() - 1
        })
        .collect();
    BocLabel::new(counts)
}

/// Per-row arg-max (`m̄`), ties to the lowest count.
pub fn argmax_baseline(dist: &BocDistribution) -> BocLabel {
    BocLabel::new(
        (0..dist.num_categories())
            .map(|j| argmax(dist.probs.row(j)))
            .collect(),
    )
}

/// Linear temperature anneal from `start` to `end` over `epochs` epochs.
pub fn annealed_temperature(start: f64, end: f64, epoch_in_phase: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return end;
    }
    let t = (epoch_in_phase.min(epochs - 1)) as f64 / (epochs - 1) as f64;
    start + (end - start) * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn zero_logits_are_uniform() {
        let d = BocDistribution::from_logits(Matrix::zeros(3, 4));
        for r in 0..3 {
            for c in 0..4 {
                assert!((d.probs.get(r, c) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn loss_cases() {
        let uniform = BocDistribution::from_logits(Matrix::zeros(3, 4));
        let l = uniform.loss(&BocLabel::new(vec![0, 1, 3])).unwrap();
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 4.1589).abs() < 1e-4);

        let hand = BocDistribution::from_probs(Matrix::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6]]));
        let l = hand.loss(&BocLabel::new(vec![0, 1])).unwrap();
        assert!((l - (-(0.9f64).ln() - (0.6f64).ln())).abs() < 1e-12);
        assert!((l - 0.6162).abs() < 1e-4);

        let exact = BocDistribution::from_probs(Matrix::one_hot_rows(&[1, 0], 2));
        assert_eq!(exact.loss(&BocLabel::new(vec![1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_gold_is_rejected() {
        let d = BocDistribution::from_logits(Matrix::zeros(2, 2));
        assert!(matches!(d.loss(&BocLabel::new(vec![0, 2])), Err(Error::CountOverflow { .. })));
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let store = ParamStore::new();
        let mut rng = stream(5, Purpose::Oracle, 0, 0);
        let logits = Matrix::randn(3, 4, 1.0, &mut rng);
        let gold = BocLabel::new(vec![2, 0, 1]);
        let mut g = Graph::new(&store);
        let l = g.input(logits.clone());
        let loss = boc_loss(&mut g, l, &gold).unwrap();
        let expect = BocDistribution::from_logits(logits).loss(&gold).unwrap();
        assert!((g.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let d = BocDistribution::from_logits(Matrix::zeros(2, 3));
        let mut rng = stream(0, Purpose::Gumbel, 0, 0);
        assert!(matches!(gumbel_sample(&d, 0.0, &mut rng), Err(Error::Temperature(_))));
        assert!(matches!(gumbel_sample(&d, -1.0, &mut rng), Err(Error::Temperature(_))));
    }

    #[test]
    fn tiny_temperature_hits_vertices_and_samples_are_seeded() {
        let mut rng = stream(9, Purpose::Oracle, 0, 0);
        let d = BocDistribution::from_logits(Matrix::randn(4, 5, 1.0, &mut rng));
        let a = gumbel_sample(&d, 1e-6, &mut stream(1, Purpose::Gumbel, 0, 0)).unwrap();
        let b = gumbel_sample(&d, 1e-6, &mut stream(1, Purpose::Gumbel, 0, 0)).unwrap();
        assert_eq!(a, b);
        for r in 0..4 {
            let row = a.soft_onehots.row(r);
            let k = argmax(row);
            assert!((row[k] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn one_hot_rows_give_their_counts() {
        let d = BocDistribution::from_probs(Matrix::one_hot_rows(&[2, 0, 1], 3));
        let mut rng = stream(0, Purpose::BocSampling, 0, 0);
        assert_eq!(hard_sample(&d, &mut rng).counts, vec![2, 0, 1]);
        assert_eq!(argmax_baseline(&d).counts, vec![2, 0, 1]);
    }

    #[test]
    fn argmax_ties_go_low() {
        let d = BocDistribution::from_probs(Matrix::from_rows(&[vec![0.5, 0.5]]));
        assert_eq!(argmax_baseline(&d).counts, vec![0]);
    }

    #[test]
    fn uniform_hard_sample_frequencies() {
        let d = BocDistribution::from_logits(Matrix::zeros(1, 4));
        let mut rng = stream(21, Purpose::BocSampling, 0, 0);
        let n = 100_000;
        let mut hist = [0usize; 4];
        for _ in 0..n {
            hist[hard_sample(&d, &mut rng).counts[0]] += 1;
        }
        for h in hist {
            assert!((h as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn anneal_endpoints() {
        assert_eq!(annealed_temperature(1.0, 0.3, 0, 10), 1.0);
        assert!((annealed_temperature(1.0, 0.3, 9, 10) - 0.3).abs() < 1e-12);
        assert_eq!(annealed_temperature(1.0, 0.3, 0, 1), 0.3);
    }
}
