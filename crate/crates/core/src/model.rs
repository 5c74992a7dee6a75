//! The assembled captioning model: encoder, BOC head, mediator embedding,
//! decoder and (optionally) the latent confounder, sharing one parameter store.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boc::{argmax_baseline, BocConfig, BocDistribution, BocGenerator};
use crate::captioner::{BocInput, CaptionerConfig, CategoryLexicon, Captioner, Conditioning, DecodeMode, Decoded};
use crate::confounder::{Confounder, ConfounderConfig};
use crate::dataset::{BocLabel, ConceptVocabulary, Corpus, ImageRecord, Vocabulary};
use crate::encoder::{EncodedImage, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, Purpose, Rng};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub boc_tap: usize,
    /// Feed `z_m` to the decoder and train the BOC head.
    pub use_mediator: bool,
    /// Infer `z_c` and feed it to the decoder.
    pub use_confounder: bool,
    pub z_dim: usize,
    pub confounder_layers: usize,
    /// Also feed the pooled proxy concept embedding to the decoder.
    pub proxy_concat: bool,
    pub max_len: usize,
    pub vocab_min_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            num_heads: 4,
            num_layers: 4,
            boc_tap: 2,
            use_mediator: true,
            use_confounder: true,
            z_dim: 16,
            confounder_layers: 2,
            proxy_concat: false,
            max_len: 16,
            vocab_min_count: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("model.dim and model.max_len must be positive".into()));
        }
        if self.use_confounder && self.z_dim == 0 {
            return Err(Error::Config("model.z_dim must be positive when the confounder is on".into()));
        }
        if self.proxy_concat && !self.use_confounder {
            return Err(Error::Config("model.proxy_concat needs model.confounder=true".into()));
        }
        Ok(())
    }

    /// Table 3 style variant name.
    pub fn variant_name(&self) -> &'static str {
        match (self.use_mediator, self.use_confounder) {
            (true, true) => "full",
            (true, false) => "mediator",
            (false, true) => "confounder",
            (false, false) => "baseline",
        }
    }
}

/// How `z_c` is chosen when no proxy posterior is involved.
pub enum Latent<'r> {
    /// The prior mean, i.e. the zero vector.
    Zero,
    Prior(&'r mut Rng),
    Fixed(&'r [f64]),
}

/// Which BOC conditions the decoder at inference.
#[derive(Clone, Copy, Debug)]
pub enum BocSource<'a> {
    Predicted,
    Given(&'a BocLabel),
}

#[derive(Clone, Debug)]
pub struct Dmtci {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub concepts: ConceptVocabulary,
    pub categories: Vec<String>,
    pub max_count: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub boc: BocGenerator,
    pub captioner: Captioner,
    pub confounder: Option<Confounder>,
    /// Concept-id sets of every training caption, the empirical `p(c)`.
    pub proxy_pool: Vec<Vec<usize>>,
}

/// Everything besides parameters needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub vocab: Vocabulary,
    pub concepts: ConceptVocabulary,
    pub categories: Vec<String>,
    pub max_count: usize,
    pub feature_dim: usize,
    pub proxy_pool: Vec<Vec<usize>>,
}

impl ModelMeta {
    pub fn from_corpus(corpus: &Corpus, vocab_min_count: usize) -> Self {
        let concepts = corpus.meta.concepts.clone();
        let proxy_pool = corpus
            .train
            .iter()
            .flat_map(|r| r.concepts.iter().map(|c| concepts.ids(c)))
            .collect();
        Self {
            vocab: Vocabulary::build(&corpus.train_captions(), vocab_min_count),
            concepts,
            categories: corpus.categories().to_vec(),
            max_count: corpus.max_count(),
            feature_dim: corpus.meta.feature_dim,
            proxy_pool,
        }
    }

    /// Restores lookup tables skipped by serde.
    pub fn reindex(&mut self) {
        self.vocab.reindex();
        self.concepts.reindex();
    }
}

impl Dmtci {
    pub fn new(config: ModelConfig, corpus: &Corpus, seed: u64) -> Result<Self> {
        let meta = ModelMeta::from_corpus(corpus, config.vocab_min_count);
        Self::build(config, meta, seed)
    }

    pub fn build(config: ModelConfig, meta: ModelMeta, seed: u64) -> Result<Self> {
        config.validate()?;
        let ModelMeta {
            vocab,
            concepts,
            categories,
            max_count,
            feature_dim,
            proxy_pool,
        } = meta;
        let mut rng = stream(seed, Purpose::Init, 0, 0);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            EncoderConfig {
                input_dim: feature_dim,
                model_dim: config.model_dim,
                num_heads: config.num_heads,
                num_layers: config.num_layers,
                boc_tap: config.boc_tap,
            },
            &mut rng,
        )?;
        let boc = BocGenerator::new(
            &mut store,
            BocConfig {
                num_categories: categories.len(),
                max_count,
                model_dim: config.model_dim,
                num_heads: config.num_heads,
            },
            &mut rng,
        );
        let lexicon = CategoryLexicon::new(&categories, &vocab)?;
        let captioner = Captioner::new(
            &mut store,
            CaptionerConfig {
                vocab_size: vocab.len(),
                model_dim: config.model_dim,
                num_categories: categories.len(),
                max_count,
                use_mediator: config.use_mediator,
                z_dim: if config.use_confounder { config.z_dim } else { 0 },
                proxy_dim: if config.proxy_concat { config.model_dim } else { 0 },
                max_len: config.max_len,
            },
            lexicon,
            &mut rng,
        )?;
        let confounder = config.use_confounder.then(|| {
            Confounder::new(
                &mut store,
                ConfounderConfig {
                    num_concepts: concepts.len(),
                    model_dim: config.model_dim,
                    num_heads: config.num_heads,
                    num_layers: config.confounder_layers,
                    z_dim: config.z_dim,
                },
                &mut rng,
            )
        });
        Ok(Self {
            config,
            vocab,
            concepts,
            categories,
            max_count,
            store,
            encoder,
            boc,
            captioner,
            confounder,
            proxy_pool,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            vocab: self.vocab.clone(),
            concepts: self.concepts.clone(),
            categories: self.categories.clone(),
            max_count: self.max_count,
            feature_dim: self.encoder.config.input_dim,
            proxy_pool: self.proxy_pool.clone(),
        }
    }

    /// Parameter-name prefixes owned by the BOC agent.
    pub fn boc_agent_prefixes(&self) -> Vec<String> {
        let mut p = vec!["encoder.projection.".to_string(), "boc.".to_string()];
        p.extend((0..self.config.boc_tap).map(crate::encoder::layer_prefix));
        p
    }

    /// Parameter-name prefixes owned by the caption agent.
    pub fn caption_agent_prefixes(&self) -> Vec<String> {
        let mut p = vec!["captioner.".to_string(), "confounder.".to_string()];
        p.extend((self.config.boc_tap..self.config.num_layers).map(crate::encoder::layer_prefix));
        p
    }

    pub fn params_with(&self, prefixes: &[String]) -> Vec<ParamId> {
        let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        self.store.ids_with_prefixes(&refs)
    }

    /// Clips gold counts into the representable range `[0, N_m)`.
    pub fn clip_boc(&self, boc: &BocLabel) -> BocLabel {
        BocLabel::new(boc.counts.iter().map(|&c| c.min(self.max_count - 1)).collect())
    }

    pub fn encode(&self, g: &mut Graph, features: &Matrix) -> Result<EncodedImage> {
        self.encoder.forward(g, features)
    }

    pub fn boc_distribution(&self, features: &Matrix) -> Result<BocDistribution> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, features)?;
        let logits = self.boc.predict(&mut g, enc.boc_view());
        Ok(BocDistribution::from_logits(g.value(logits).clone()))
    }

    /// Constant `z_c` row for a latent choice.
    pub fn latent_row(&self, latent: Latent) -> Option<Matrix> {
        if !self.config.use_confounder {
            return None;
        }
        let z = self.config.z_dim;
        Some(match latent {
            Latent::Zero => Matrix::zeros(1, z),
            Latent::Prior(rng) => Matrix::row_vector(crate::confounder::sample_prior(z, Some(rng)).z),
            Latent::Fixed(v) => Matrix::row_vector(v.to_vec()),
        })
    }

    /// Pooled embedding of a proxy concept set (empty set pools to zeros).
    pub fn proxy_embedding(&self, g: &mut Graph, concept_ids: &[usize]) -> Option<Var> {
        if !self.config.proxy_concat {
            return None;
        }
        let c = self.confounder.as_ref()?;
        if concept_ids.is_empty() {
            return Some(g.constant(Matrix::zeros(1, self.config.model_dim)));
        }
        let table = g.param(c.embedding);
        let rows = g.gather_rows(table, concept_ids);
        Some(g.mean_rows(rows))
    }

    /// Draws `c̃ ~ p(c)`: the concept set of a uniformly random training caption.
    pub fn sample_proxy(&self, rng: &mut Rng) -> Vec<usize> {
        use rand::Rng as _;
        if self.proxy_pool.is_empty() {
            return Vec::new();
        }
        self.proxy_pool[rng.gen_range(0..self.proxy_pool.len())].clone()
    }

    /// Decoder conditioning for an encoded image.
    pub fn conditioning(
        &self,
        g: &mut Graph,
        enc: &EncodedImage,
        boc: Option<BocInput>,
        z_c: Option<Var>,
        proxy: Option<Var>,
    ) -> Result<Conditioning> {
        let z_m = if self.config.use_mediator {
            let b = boc.ok_or_else(|| Error::Config("mediator needs a BOC".into()))?;
            Some(self.captioner.embed_boc(g, b)?.pooled)
        } else {
            None
        };
        Ok(Conditioning {
            regions: enc.caption_view(),
            z_m,
            z_c,
            proxy,
        })
    }

    /// Greedy or sampled caption for one image; the BOC is the arg-max
    /// prediction unless one is given.
    pub fn caption(
        &self,
        features: &Matrix,
        boc: BocSource,
        latent: Latent,
        proxy: &[usize],
        mode: DecodeMode,
    ) -> Result<Decoded> {
        let mut g = Graph::new(&self.store);
        self.caption_in(&mut g, features, boc, latent, proxy, mode)
    }

    pub fn caption_in(
        &self,
        g: &mut Graph,
        features: &Matrix,
        boc: BocSource,
        latent: Latent,
        proxy: &[usize],
        mode: DecodeMode,
    ) -> Result<Decoded> {
        let enc = self.encode(g, features)?;
        let label = match (self.config.use_mediator, boc) {
            (false, _) => None,
            (true, BocSource::Given(b)) => Some(self.clip_boc(b)),
            (true, BocSource::Predicted) => {
                let logits = self.boc.predict(g, enc.boc_view());
                Some(argmax_baseline(&BocDistribution::from_logits(g.value(logits).clone())))
            }
        };
        let z = self.latent_row(latent).map(|m| g.constant(m));
        let p = self.proxy_embedding(g, proxy);
        let cond = self.conditioning(g, &enc, label.as_ref().map(BocInput::Hard), z, p)?;
        self.captioner.decode(g, &cond, mode)
    }

    /// `K` greedy captions under the arg-max BOC and `K` prior draws of `z_c`.
    pub fn generate_candidates(&self, record: &ImageRecord, k: usize, seed: u64, index: u64) -> Result<Vec<Vec<usize>>> {
        let mut prior = stream(seed, Purpose::Prior, index, 0);
        let mut proxies = stream(seed, Purpose::ProxyConcepts, index, 0);
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let proxy = if self.config.proxy_concat { self.sample_proxy(&mut proxies) } else { Vec::new() };
            let d = self.caption(
                &record.features,
                BocSource::Predicted,
                Latent::Prior(&mut prior),
                &proxy,
                DecodeMode::Greedy,
            )?;
            out.push(d.tokens);
        }
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Vec<String> {
        tokens.iter().map(|&t| self.vocab.token(t).to_string()).collect()
    }
}
