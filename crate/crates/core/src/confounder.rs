//! Latent confounder `z_c` inferred from a proxy concept set.
//!
//! `q(z_c | c)`: concept embeddings pass through a position-free two-layer
//! transformer, are mean-pooled, and two linear heads give the Gaussian mean
//! and log-variance (clamped to `[-10, 10]`). `p(c | z_c)` is an
//! independent-Bernoulli set decoder over the concept vocabulary. The prior is
//! `N(0, I)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{Linear, TransformerLayer};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderConfig {
    pub num_concepts: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub z_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianPosterior {
    pub fn prior(z_dim: usize) -> Self {
        Self {
            mean: vec![0.0; z_dim],
            log_variance: vec![0.0; z_dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_variance).all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSource {
    Prior,
    Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfounder {
    pub z: Vec<f64>,
    pub source: LatentSource,
}

/// Posterior parameters as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub log_variance: Var,
}

#[derive(Clone, Debug)]
pub struct Confounder {
    pub config: ConfounderConfig,
    pub embedding: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub mean_head: Linear,
    pub log_var_head: Linear,
    pub decoder_hidden: Linear,
    pub decoder_out: Linear,
}

fn standard_normal(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl Confounder {
    pub fn new(store: &mut ParamStore, config: ConfounderConfig, rng: &mut Rng) -> Self {
        let d = config.model_dim;
        let embedding = store.add(
            "confounder.embedding",
            Matrix::randn(config.num_concepts.max(1), d, 0.1, rng),
        );
        let layers = (0..config.num_layers)
            .map(|i| TransformerLayer::new(store, &format!("confounder.layer{i}"), d, config.num_heads, rng))
            .collect();
        let mean_head = Linear::new(store, "confounder.mean", d, config.z_dim, rng);
        let log_var_head = Linear::new(store, "confounder.log_var", d, config.z_dim, rng);
        let decoder_hidden = Linear::new(store, "confounder.dec_hidden", config.z_dim, d, rng);
        let decoder_out = Linear::new(store, "confounder.dec_out", d, config.num_concepts.max(1), rng);
        Self {
            config,
            embedding,
            layers,
            mean_head,
            log_var_head,
            decoder_hidden,
            decoder_out,
        }
    }

    /// `q(z_c | c)`. The empty set maps to the prior's parameters.
    pub fn encode_posterior(&self, g: &mut Graph, concept_ids: &[usize]) -> PosteriorVars {
        if concept_ids.is_empty() {
            let z = self.config.z_dim;
            return PosteriorVars {
                mean: g.constant(Matrix::zeros(1, z)),
                log_variance: g.constant(Matrix::zeros(1, z)),
            };
        }
        let table = g.param(self.embedding);
        let mut h = g.gather_rows(table, concept_ids);
        for layer in &self.layers {
            h = layer.forward(g, h);
        }
        let pooled = g.mean_rows(h);
        let mean = self.mean_head.forward(g, pooled);
        let lv = self.log_var_head.forward(g, pooled);
        let log_variance = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        PosteriorVars { mean, log_variance }
    }

    pub fn posterior(&self, store: &ParamStore, concept_ids: &[usize]) -> GaussianPosterior {
        let mut g = Graph::new(store);
        let p = self.encode_posterior(&mut g, concept_ids);
        GaussianPosterior {
            mean: g.value(p.mean).data().to_vec(),
            log_variance: g.value(p.log_variance).data().to_vec(),
        }
    }

    /// Concept logits `1 × |C|` of `p(c | z_c)`.
    pub fn reconstruct(&self, g: &mut Graph, z: Var) -> Var {
        let h = self.decoder_hidden.forward(g, z);
        let h = g.tanh(h);
        self.decoder_out.forward(g, h)
    }

    /// Indicator row of a concept id set.
    pub fn indicators(&self, concept_ids: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(1, self.config.num_concepts.max(1));
        for &c in concept_ids {
            m.set(0, c, 1.0);
        }
        m
    }

    /// Single-sample ELBO with the standard-normal draw `eps` frozen.
    /// Returns `(elbo, reconstruction log-likelihood, kl)`.
    pub fn elbo(&self, g: &mut Graph, concept_ids: &[usize], eps: &Matrix) -> (Var, Var, Var) {
        let post = self.encode_posterior(g, concept_ids);
        let z = reparameterize(g, post, eps);
        let logits = self.reconstruct(g, z);
        let ind = self.indicators(concept_ids);
        let recon = bernoulli_log_likelihood(g, logits, &ind);
        let kl = kl_to_prior(g, post);
        let elbo = g.sub(recon, kl);
        (elbo, recon, kl)
    }

    pub fn elbo_value(&self, store: &ParamStore, concept_ids: &[usize], rng: &mut Rng) -> f64 {
        let eps = Matrix::row_vector(standard_normal(self.config.z_dim, rng));
        let mut g = Graph::new(store);
        let (e, _, _) = self.elbo(&mut g, concept_ids, &eps);
        g.scalar(e)
    }
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(g: &mut Graph, post: PosteriorVars, eps: &Matrix) -> Var {
    let half = g.scale(post.log_variance, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e);
    g.add(post.mean, noise)
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_to_prior(g: &mut Graph, post: PosteriorVars) -> Var {
    let m2 = g.mul(post.mean, post.mean);
    let var = g.exp(post.log_variance);
    let a = g.add(m2, var);
    let b = g.sub(a, post.log_variance);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    g.scale(s, 0.5)
}

pub fn kl_value(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mean
        .iter()
        .zip(&post.log_variance)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// `Σ_k c_k log σ(ℓ_k) + (1 − c_k) log(1 − σ(ℓ_k)) = Σ_k c_k ℓ_k − softplus(ℓ_k)`.
pub fn bernoulli_log_likelihood(g: &mut Graph, logits: Var, indicators: &Matrix) -> Var {
    let ind = g.constant(indicators.clone());
    let hit = g.mul(logits, ind);
    let sp = g.softplus(logits);
    let diff = g.sub(hit, sp);
    g.sum(diff)
}

pub fn bernoulli_log_likelihood_value(logits: &[f64], indicators: &[f64]) -> f64 {
    logits
        .iter()
        .zip(indicators)
        .map(|(&l, &c)| {
            let sp = if l > 0.0 { l + (-l).exp().ln_1p() } else { l.exp().ln_1p() };
            c * l - sp
        })
        .sum()
}

/// Reparameterised draw from a posterior.
pub fn sample(post: &GaussianPosterior, rng: &mut Rng) -> LatentConfounder {
    let eps = standard_normal(post.dim(), rng);
    LatentConfounder {
        z: post
            .mean
            .iter()
            .zip(&post.log_variance)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect(),
        source: LatentSource::Posterior,
    }
}

/// Draw from `N(0, I)`; `rng = None` is the deterministic mode and returns zeros.
pub fn sample_prior(z_dim: usize, rng: Option<&mut Rng>) -> LatentConfounder {
    LatentConfounder {
        z: match rng {
            Some(rng) => standard_normal(z_dim, rng),
            None => vec![0.0; z_dim],
        },
        source: LatentSource::Prior,
    }
}
