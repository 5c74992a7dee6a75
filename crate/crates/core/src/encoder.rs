//! Hierarchical self-attention encoder over region features.
//!
//! `R⁽⁰⁾` is the affine projection of the raw regions; each layer computes
//! `R⁽ⁱ⁺¹⁾ = LayerNorm(R⁽ⁱ⁾ + MultiHeadAttn(R⁽ⁱ⁾, R⁽ⁱ⁾, R⁽ⁱ⁾))`. No positional
//! encoding is added, so every layer is equivariant to row permutations.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// 1-based layer whose output feeds the BOC head.
    pub boc_tap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            model_dim: 64,
            num_heads: 4,
            num_layers: 4,
            boc_tap: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.boc_tap == 0 || self.boc_tap > self.num_layers {
            return Err(Error::Config(format!(
                "boc_tap {} must lie in 1..={}",
                self.boc_tap, self.num_layers
            )));
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub projection: Linear,
    pub layers: Vec<AttentionBlock>,
}

/// Outputs of every encoder layer for one image.
#[derive(Clone, Debug)]
pub struct EncodedImage {
    pub layer_outputs: Vec<Var>,
    pub boc_tap: usize,
}

impl EncodedImage {
    /// `R^(i_m)`.
    pub fn boc_view(&self) -> Var {
        self.layer_outputs[self.boc_tap - 1]
    }

    /// `R^(n)`.
    pub fn caption_view(&self) -> Var {
        *self.layer_outputs.last().expect("at least one layer")
    }
}

/// Parameter-name prefix of encoder layer `i` (0-based).
pub fn layer_prefix(i: usize) -> String {
    format!("encoder.layer{i}.")
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let projection = Linear::new(store, "encoder.projection", config.input_dim, config.model_dim, rng);
        let layers = (0..config.num_layers)
            .map(|i| {
                AttentionBlock::new(
                    store,
                    &format!("encoder.layer{i}"),
                    config.model_dim,
                    config.num_heads,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            projection,
            layers,
        })
    }

    pub fn project(&self, g: &mut Graph, features: &Matrix) -> Result<Var> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "feature width {} does not match encoder input_dim {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        let x = g.constant(features.clone());
        Ok(self.projection.forward(g, x))
    }

    pub fn encode(&self, g: &mut Graph, projected: Var) -> Result<EncodedImage> {
        let mut x = projected;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite { layer: i + 1 });
            }
            layer_outputs.push(x);
        }
        Ok(EncodedImage {
            layer_outputs,
            boc_tap: self.config.boc_tap,
        })
    }

    pub fn forward(&self, g: &mut Graph, features: &Matrix) -> Result<EncodedImage> {
        let p = self.project(g, features)?;
        self.encode(g, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn toy(model_dim: usize, input_dim: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = stream(11, Purpose::Init, 0, 0);
        let cfg = EncoderConfig {
            input_dim,
            model_dim,
            num_heads: 2,
            num_layers: 3,
            boc_tap: 2,
        };
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn desk_projection_shape() {
        let (store, enc) = toy(16, 32);
        let mut g = Graph::new(&store);
        let mut rng = stream(1, Purpose::Oracle, 0, 0);
        let p = enc.project(&mut g, &Matrix::randn(12, 32, 1.0, &mut rng)).unwrap();
        assert_eq!(g.value(p).shape(), (12, 16));
    }

    #[test]
    fn identity_projection_is_a_no_op() {
        let (mut store, enc) = toy(8, 8);
        *store.get_mut(enc.projection.weight) = Matrix::identity(8);
        let mut g = Graph::new(&store);
        let mut rng = stream(2, Purpose::Oracle, 0, 0);
        let x = Matrix::randn(5, 8, 1.0, &mut rng);
        let p = enc.project(&mut g, &x).unwrap();
        assert_eq!(g.value(p), &x);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, enc) = toy(8, 8);
        let mut g = Graph::new(&store);
        assert!(matches!(enc.project(&mut g, &Matrix::zeros(3, 7)), Err(Error::Shape(_))));
    }

    #[test]
    fn taps_select_the_configured_layers() {
        let (store, enc) = toy(8, 6);
        let mut g = Graph::new(&store);
        let mut rng = stream(3, Purpose::Oracle, 0, 0);
        let out = enc.forward(&mut g, &Matrix::randn(4, 6, 1.0, &mut rng)).unwrap();
        assert_eq!(out.layer_outputs.len(), 3);
        assert_eq!(out.boc_view(), out.layer_outputs[1]);
        assert_eq!(out.caption_view(), out.layer_outputs[2]);
        for &l in &out.layer_outputs {
            assert_eq!(g.value(l).shape(), (4, 8));
        }
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let (store, enc) = toy(8, 6);
        let mut g = Graph::new(&store);
        let mut x = Matrix::zeros(3, 6);
        x.set(0, 0, f64::NAN);
        assert!(matches!(enc.forward(&mut g, &x), Err(Error::NonFinite { layer: 1 })));
    }

    #[test]
    fn bad_tap_is_rejected() {
        let cfg = EncoderConfig {
            boc_tap: 5,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
