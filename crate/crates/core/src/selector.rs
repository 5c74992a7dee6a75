//! Image-text selector for picking one caption out of `K` candidates.
//!
//! Images are encoded by a position-free self-attention stack and mean-pooled
//! to `r`; captions by a self-attention stack with learned positions, pooled
//! to `h`. The pair score is `σ(W [h, r, |h − r|, h ⊙ r] + b)`. Training uses a
//! margin ranking loss against the gold caption (score fixed at 1) and between
//! candidates ordered by their gold CIDEr-D.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::{EOS, UNK};
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerLayer};
use crate::optim::Adam;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::rng::{stream, Purpose, Rng};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub input_dim: usize,
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_len: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Random non-adjacent candidate pairs per image on top of the adjacent ones.
    pub random_pairs: usize,
}

impl SelectorConfig {
    pub fn new(input_dim: usize, vocab_size: usize) -> Self {
        Self {
            input_dim,
            vocab_size,
            model_dim: 32,
            num_heads: 4,
            num_layers: 2,
            max_len: 17,
            gamma1: 0.1,
            gamma2: 0.05,
            random_pairs: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Selector {
    pub config: SelectorConfig,
    pub store: ParamStore,
    pub image_projection: Linear,
    pub image_layers: Vec<TransformerLayer>,
    pub embedding: ParamId,
    pub positions: ParamId,
    pub caption_layers: Vec<TransformerLayer>,
    pub scorer: Linear,
}

/// Candidates ordered by gold CIDEr-D, best first; ties keep their input order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub captions: Vec<Vec<usize>>,
    pub gold: Vec<f64>,
}

impl RankedCandidates {
    pub fn new(captions: Vec<Vec<usize>>, gold: Vec<f64>) -> Self {
        assert_eq!(captions.len(), gold.len());
        let mut order: Vec<usize> = (0..gold.len()).collect();
        order.sort_by(|&a, &b| gold[b].total_cmp(&gold[a]));
        Self {
            captions: order.iter().map(|&i| captions[i].clone()).collect(),
            gold: order.iter().map(|&i| gold[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Ordered pairs `(i, j)`, `i` strictly better than `j`: every adjacent
    /// pair plus `random` non-adjacent ones. Equal-score pairs are skipped.
    pub fn sample_pairs(&self, random: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut pairs: Vec<(usize, usize)> = (0..n.saturating_sub(1))
            .filter(|&i| self.gold[i] > self.gold[i + 1])
            .map(|i| (i, i + 1))
            .collect();
        let mut far: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 2..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.gold[i] > self.gold[j])
            .collect();
        far.shuffle(rng);
        pairs.extend(far.into_iter().take(random));
        pairs
    }
}

/// `Σ_i max(0, s_i − 1 + γ1) + Σ_(i,j) max(0, s_j − s_i + γ2)`.
pub fn ranking_loss(g: &mut Graph, scores: &[Var], pairs: &[(usize, usize)], gamma1: f64, gamma2: f64) -> Var {
    let mut terms = Vec::with_capacity(scores.len() + pairs.len());
    for &s in scores {
        let t = g.add_scalar(s, gamma1 - 1.0);
        terms.push(g.relu(t));
    }
    for &(i, j) in pairs {
        let d = g.sub(scores[j], scores[i]);
        let t = g.add_scalar(d, gamma2);
        terms.push(g.relu(t));
    }
    if terms.is_empty() {
        return g.constant(Matrix::scalar(0.0));
    }
    let all = g.concat_cols(&terms);
    g.sum(all)
}

pub fn ranking_loss_value(scores: &[f64], pairs: &[(usize, usize)], gamma1: f64, gamma2: f64) -> f64 {
    scores.iter().map(|s| (s - 1.0 + gamma1).max(0.0)).sum::<f64>()
        + pairs
            .iter()
            .map(|&(i, j)| (scores[j] - scores[i] + gamma2).max(0.0))
            .sum::<f64>()
}

/// Training example: an image and its ranked candidates.
pub struct SelectorExample<'a> {
    pub features: &'a Matrix,
    pub ranked: RankedCandidates,
}

impl Selector {
    pub fn new(config: SelectorConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Selector, 0, 0);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let image_projection = Linear::new(&mut store, "selector.image_projection", config.input_dim, d, &mut rng);
        let image_layers = (0..config.num_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("selector.image_layer{i}"), d, config.num_heads, &mut rng))
            .collect();
        let embedding = store.add("selector.embedding", Matrix::randn(config.vocab_size, d, 0.1, &mut rng));
        let positions = store.add("selector.positions", Matrix::randn(config.max_len, d, 0.1, &mut rng));
        let caption_layers = (0..config.num_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("selector.caption_layer{i}"), d, config.num_heads, &mut rng))
            .collect();
        let scorer = Linear::new(&mut store, "selector.scorer", 4 * d, 1, &mut rng);
        Self {
            config,
            store,
            image_projection,
            image_layers,
            embedding,
            positions,
            caption_layers,
            scorer,
        }
    }

    /// `r_s`, `1 × D`.
    pub fn encode_image(&self, g: &mut Graph, features: &Matrix) -> Result<Var> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "feature width {} does not match selector input {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        let x = g.constant(features.clone());
        let mut h = self.image_projection.forward(g, x);
        for layer in &self.image_layers {
            h = layer.forward(g, h);
        }
        Ok(g.mean_rows(h))
    }

    /// `h_s`, `1 × D`. Out-of-range ids read as unknown; an empty caption is
    /// encoded as the lone end token; long captions are truncated.
    pub fn encode_caption(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        let mut ids: Vec<usize> = tokens
            .iter()
            .map(|&t| if t < self.config.vocab_size { t } else { UNK })
            .take(self.config.max_len)
            .collect();
        if ids.is_empty() {
            ids.push(EOS);
        }
        let table = g.param(self.embedding);
        let words = g.gather_rows(table, &ids);
        let pos_table = g.param(self.positions);
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(pos_table, &pos_ids);
        let mut h = g.add(words, pos);
        for layer in &self.caption_layers {
            h = layer.forward(g, h);
        }
        g.mean_rows(h)
    }

    /// `σ(W [h, r, |h − r|, h ⊙ r] + b)`, `1 × 1`.
    pub fn score_pair(&self, g: &mut Graph, image: Var, caption: Var) -> Result<Var> {
        if g.value(image).shape() != g.value(caption).shape() {
            return Err(Error::Shape(format!(
                "image vector {:?} and caption vector {:?} differ",
                g.value(image).shape(),
                g.value(caption).shape()
            )));
        }
        let diff = g.sub(caption, image);
        let abs = g.abs(diff);
        let prod = g.mul(caption, image);
        let feats = g.concat_cols(&[caption, image, abs, prod]);
        let logit = self.scorer.forward(g, feats);
        Ok(g.sigmoid(logit))
    }

    /// Scores of every candidate; identical captions share one encoding.
    fn candidate_scores(&self, g: &mut Graph, image: Var, candidates: &[Vec<usize>]) -> Result<Vec<Var>> {
        let mut cache: Vec<(&[usize], Var)> = Vec::new();
        let mut out = Vec::with_capacity(candidates.len());
        for c in candidates {
            let s = match cache.iter().find(|(k, _)| *k == c.as_slice()) {
                Some(&(_, s)) => s,
                None => {
                    let h = self.encode_caption(g, c);
                    let s = self.score_pair(g, image, h)?;
                    cache.push((c, s));
                    s
                }
            };
            out.push(s);
        }
        Ok(out)
    }

    pub fn scores(&self, features: &Matrix, candidates: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let r = self.encode_image(&mut g, features)?;
        let s = self.candidate_scores(&mut g, r, candidates)?;
        Ok(s.iter().map(|&v| g.scalar(v)).collect())
    }

    /// Index of the highest-scoring candidate, ties to the first.
    pub fn select_best(&self, features: &Matrix, candidates: &[Vec<usize>]) -> Result<usize> {
        if candidates.is_empty() {
            return Err(Error::Config("select_best needs at least one candidate".into()));
        }
        let s = self.scores(features, candidates)?;
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Loss and parameter gradients for one image.
    pub fn loss_and_grads(&self, example: &SelectorExample, pairs: &[(usize, usize)]) -> Result<(f64, ParamGrads)> {
        let mut g = Graph::new(&self.store);
        let r = self.encode_image(&mut g, example.features)?;
        let scores = self.candidate_scores(&mut g, r, &example.ranked.captions)?;
        let loss = ranking_loss(&mut g, &scores, pairs, self.config.gamma1, self.config.gamma2);
        let value = g.scalar(loss);
        Ok((value, g.backward(loss).into_params()))
    }

    /// Mini-batch Adam training; returns the mean loss per epoch.
    pub fn fit(&mut self, data: &[SelectorExample], epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let mut adam = Adam::new(self.store.len());
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut stream(seed, Purpose::DataOrder, 1000 + epoch as u64, 0));
            let mut pair_rng = stream(seed, Purpose::Selector, 1 + epoch as u64, 0);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size.max(1)) {
                let mut grads = ParamGrads::new(self.store.len());
                for &i in chunk {
                    let pairs = data[i].ranked.sample_pairs(self.config.random_pairs, &mut pair_rng);
                    let (l, gr) = self.loss_and_grads(&data[i], &pairs)?;
                    total += l;
                    grads.merge(&gr);
                }
                grads.scale(1.0 / chunk.len() as f64);
                grads.clip_global_norm(5.0);
                adam.step(&mut self.store, &grads, lr);
            }
            history.push(total / data.len().max(1) as f64);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Selector {
        let mut cfg = SelectorConfig::new(6, 12);
        cfg.model_dim = 8;
        cfg.num_heads = 2;
        Selector::new(cfg, 1)
    }

    #[test]
    fn zero_weights_score_one_half() {
        let mut s = toy();
        let w = s.scorer.weight;
        let b = s.scorer.bias;
        *s.store.get_mut(w) = Matrix::zeros(32, 1);
        *s.store.get_mut(b) = Matrix::zeros(1, 1);
        let f = Matrix::filled(3, 6, 0.2);
        let sc = s.scores(&f, &[vec![4, 5], vec![6]]).unwrap();
        assert!(sc.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn scores_are_strictly_inside_unit_interval() {
        let s = toy();
        let sc = s.scores(&Matrix::zeros(2, 6), &[vec![], vec![4, 4, 4], vec![99]]).unwrap();
        assert!(sc.iter().all(|&x| x > 0.0 && x < 1.0 && x.is_finite()));
    }

    #[test]
    fn image_encoding_is_permutation_invariant() {
        let s = toy();
        let mut rng = stream(2, Purpose::Oracle, 0, 0);
        let f = Matrix::randn(5, 6, 1.0, &mut rng);
        let p = f.permute_rows(&[3, 0, 4, 1, 2]);
        let mut g = Graph::new(&s.store);
        let a = s.encode_image(&mut g, &f).unwrap();
        let b = s.encode_image(&mut g, &p).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-5);
    }

    #[test]
    fn equal_vectors_zero_the_difference_block() {
        let s = toy();
        let mut g = Graph::new(&s.store);
        let v = g.constant(Matrix::row_vector(vec![0.5; 8]));
        let diff = g.sub(v, v);
        let abs = g.abs(diff);
        assert!(g.value(abs).data().iter().all(|&x| x == 0.0));
        assert!(s.score_pair(&mut g, v, v).is_ok());
        let w = g.constant(Matrix::row_vector(vec![0.5; 7]));
        assert!(s.score_pair(&mut g, v, w).is_err());
    }

    #[test]
    fn ranking_loss_cases() {
        assert_eq!(ranking_loss_value(&[0.0, 0.0, 0.0], &[], 0.1, 0.05), 0.0);
        let l = ranking_loss_value(&[0.4, 0.6], &[(0, 1)], 0.1, 0.05);
        assert!((l - 0.25).abs() < 1e-12);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Matrix::scalar(0.4));
        let b = g.input(Matrix::scalar(0.6));
        let v = ranking_loss(&mut g, &[a, b], &[(0, 1)], 0.1, 0.05);
        assert!((g.scalar(v) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ranking_is_stable_and_pairs_skip_ties() {
        let r = RankedCandidates::new(vec![vec![1], vec![2], vec![3], vec![4]], vec![0.5, 2.0, 0.5, 1.0]);
        assert_eq!(r.captions, vec![vec![2], vec![4], vec![1], vec![3]]);
        let pairs = r.sample_pairs(2, &mut stream(0, Purpose::Selector, 0, 0));
        assert!(pairs.contains(&(0, 1)) && pairs.contains(&(1, 2)));
        assert!(!pairs.contains(&(2, 3)));
        assert!(pairs.iter().all(|&(i, j)| r.gold[i] > r.gold[j]));
    }

    #[test]
    fn single_candidate_is_selected() {
        let s = toy();
        assert_eq!(s.select_best(&Matrix::zeros(2, 6), &[vec![5]]).unwrap(), 0);
    }
}
