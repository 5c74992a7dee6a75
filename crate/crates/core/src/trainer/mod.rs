//! Training curriculum, evaluation and checkpointing.
//!
//! The MLE phase minimises `L^m + L^g − ELBO` per example, conditioning the
//! decoder on the gold BOC until `gumbel_start_epoch` and afterwards on a mix
//! of gold and Gumbel-relaxed BOCs. The RL phase alternates the two
//! self-critical agents. Every random draw comes from a counter-based stream
//! keyed by (seed, purpose, epoch, example), so a resumed run continues
//! exactly where an uninterrupted one would.

pub mod checkpoint;
pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::{Config, DataConfig, EvalConfig, RlConfig, SelectorTrainConfig, TrainingConfig};

use crate::autograd::Graph;
use crate::boc::{annealed_temperature, argmax_baseline, boc_loss, gumbel_noise, gumbel_relax};
use crate::captioner::{BocInput, DecodeMode};
use crate::confounder::reparameterize;
use crate::dataset::{
    generate_corpus, mentions_category, tokenize, BocLabel, Corpus, ImageRecord, SceneSpec, SplitFractions,
};
use crate::error::{Error, Result};
use crate::marl::{boc_reward, scrl_boc_step, scrl_caption_step, Agent, StepRngs};
use crate::metrics::{boc_match, cider_d, BleuStats, IdfCorpus};
use crate::model::{BocSource, Dmtci, Latent, ModelMeta};
use crate::optim::Adam;
use crate::params::ParamGrads;
use crate::rng::{stream, Purpose};
use crate::selector::{RankedCandidates, Selector, SelectorConfig, SelectorExample};
use crate::tensor::Matrix;

use checkpoint::{read_container, write_container};

/// Table 1 metric names; the last four slots that need external resources stay null.
pub const METRIC_NAMES: [&str; 6] = ["B1", "B4", "ME", "RG", "CD", "SP"];

/// Builds the corpus named by the config, generating a synthetic one if no
/// directory is given.
pub fn corpus_from_config(config: &Config) -> Result<Corpus> {
    let d = &config.data;
    if !d.corpus.is_empty() {
        return Corpus::load(Path::new(&d.corpus));
    }
    let mut spec = SceneSpec::default();
    for c in &mut spec.confounds {
        c.train_correlation = d.correlation;
    }
    spec.feature_dim = d.feature_dim;
    spec.noise_sigma = d.noise_sigma;
    spec.attribute_scale = d.attribute_scale;
    spec.test_counterexample_share = d.counterexample_share;
    spec.min_train_counterexamples = d.min_train_counterexamples;
    spec.max_caption_len = config.model.max_len;
    generate_corpus(
        &spec,
        d.size,
        SplitFractions {
            train: d.train_fraction,
            val: d.val_fraction,
            test: d.test_fraction,
        },
        config.seed,
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: String,
    pub epoch: usize,
    pub agent: Option<Agent>,
    pub learning_rate: f64,
    /// Mean per-example `L^m + L^g − ELBO`.
    pub loss: f64,
    pub boc_loss: f64,
    pub caption_loss: f64,
    pub neg_elbo: f64,
    pub gumbel_calls: usize,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub advantage_variance: f64,
    pub val_cider: f64,
}

/// Optimiser-independent progress, checkpointed with the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs over both phases.
    pub epoch: usize,
    pub learning_rate: f64,
    pub best_val_cider: f64,
    pub stale_epochs: usize,
    pub history: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointPayload {
    config: Config,
    meta: ModelMeta,
    state: TrainState,
    adam_steps: Vec<u64>,
}

pub struct Trainer {
    pub config: Config,
    pub model: Dmtci,
    pub adam: Adam,
    pub state: TrainState,
    pub idf: IdfCorpus,
    references: HashMap<String, Vec<Vec<String>>>,
}

fn tokenized_references(corpus: &Corpus) -> HashMap<String, Vec<Vec<String>>> {
    corpus
        .all_records()
        .map(|r| (r.id.clone(), r.tokenized_captions()))
        .collect()
}

/// IDF statistics from the training references, one document per image.
pub fn training_idf(corpus: &Corpus) -> IdfCorpus {
    let docs: Vec<Vec<Vec<String>>> = corpus.train.iter().map(|r| r.tokenized_captions()).collect();
    IdfCorpus::build(&docs)
}

impl Trainer {
    pub fn new(config: Config, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let model = Dmtci::new(config.model.clone(), corpus, config.seed)?;
        let adam = Adam::new(model.store.len());
        let state = TrainState {
            epoch: 0,
            learning_rate: config.train.learning_rate,
            best_val_cider: f64::NEG_INFINITY,
            stale_epochs: 0,
            history: Vec::new(),
        };
        Ok(Self {
            idf: training_idf(corpus),
            references: tokenized_references(corpus),
            config,
            model,
            adam,
            state,
        })
    }

    pub fn total_epochs(&self) -> usize {
        self.config.train.mle_epochs + self.config.train.rl_epochs
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.total_epochs()
    }

    fn refs(&self, record: &ImageRecord) -> Vec<Vec<String>> {
        self.references
            .get(&record.id)
            .cloned()
            .unwrap_or_else(|| record.tokenized_captions())
    }

    fn gold_tokens(&self, caption: &str) -> Vec<usize> {
        let mut t = self.model.vocab.encode(caption);
        t.truncate(self.model.config.max_len);
        t
    }

    /// Loss components of one MLE example and its gradients.
    fn mle_example(
        &self,
        record: &ImageRecord,
        epoch: usize,
        index: u64,
        relaxed: bool,
    ) -> Result<([f64; 4], ParamGrads, bool)> {
        let seed = self.config.seed;
        let t = &self.config.train;
        let model = &self.model;
        let mut pick = stream(seed, Purpose::DataOrder, epoch as u64, index + 1);
        let ci = pick.gen_range(0..record.captions.len());
        let gold = self.gold_tokens(&record.captions[ci]);

        let mut g = Graph::new(&model.store);
        let enc = model.encode(&mut g, &record.features)?;
        let mut terms = Vec::with_capacity(3);
        let (mut lm, mut lg, mut nelbo) = (0.0, 0.0, 0.0);
        let mut used_gumbel = false;

        let boc_input = if model.config.use_mediator {
            let logits = model.boc.predict(&mut g, enc.boc_view());
            let gold_boc = model.clip_boc(&record.boc);
            let l = boc_loss(&mut g, logits, &gold_boc)?;
            lm = g.scalar(l);
            terms.push(l);
            if relaxed {
                used_gumbel = true;
                let tau = annealed_temperature(
                    t.tau_start,
                    t.tau_end,
                    epoch - t.gumbel_start_epoch,
                    t.mle_epochs - t.gumbel_start_epoch,
                );
                let shape = g.value(logits).shape();
                let noise = gumbel_noise(shape.0, shape.1, &mut stream(seed, Purpose::Gumbel, epoch as u64, index));
                Some(BocInputOwned::Relaxed(gumbel_relax(&mut g, logits, &noise, tau)?))
            } else {
                Some(BocInputOwned::Hard(gold_boc))
            }
        } else {
            None
        };

        let mut z_c = None;
        let mut proxy = None;
        if let Some(conf) = &model.confounder {
            let z = model.config.z_dim;
            let mut post_rng = stream(seed, Purpose::Posterior, epoch as u64, index);
            let mut normal = |n: usize| {
                Matrix::row_vector((0..n).map(|_| StandardNormal.sample(&mut post_rng)).collect())
            };
            let proxy_ids = model.sample_proxy(&mut stream(seed, Purpose::ProxyConcepts, epoch as u64, index));
            let post = conf.encode_posterior(&mut g, &proxy_ids);
            z_c = Some(reparameterize(&mut g, post, &normal(z)));
            proxy = model.proxy_embedding(&mut g, &proxy_ids);
            let own = model.concepts.ids(&record.concepts[ci]);
            if !own.is_empty() {
                let (elbo, _, _) = conf.elbo(&mut g, &own, &normal(z));
                let ne = g.scale(elbo, -1.0);
                nelbo = g.scalar(ne);
                terms.push(ne);
            }
        }

        let boc_ref = boc_input.as_ref().map(|b| match b {
            BocInputOwned::Hard(l) => BocInput::Hard(l),
            BocInputOwned::Relaxed(v) => BocInput::Relaxed(*v),
        });
        let cond = model.conditioning(&mut g, &enc, boc_ref, z_c, proxy)?;
        let l = model.captioner.mle_loss(&mut g, &cond, &gold)?;
        lg = g.scalar(l) + lg;
        terms.push(l);

        let all = g.concat_cols(&terms);
        let total = g.sum(all);
        let total_value = g.scalar(total);
        let grads = g.backward(total).into_params();
        Ok(([total_value, lm, lg, nelbo], grads, used_gumbel))
    }

    pub fn mle_epoch(&mut self, corpus: &Corpus, epoch: usize) -> Result<EpochStats> {
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut stream(seed, Purpose::DataOrder, epoch as u64, 0));
        let mut sums = [0.0; 4];
        let mut gumbel_calls = 0;
        for (b, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            let t = &self.config.train;
            // gold or relaxed conditioning is drawn once per batch
            let relaxed = epoch >= t.gumbel_start_epoch
                && stream(seed, Purpose::Mixing, epoch as u64, b as u64).gen::<f64>() >= t.gold_mix;
            let mut grads = ParamGrads::new(self.model.store.len());
            for &i in chunk {
                let (parts, gr, used) = self.mle_example(&corpus.train[i], epoch, i as u64, relaxed)?;
                if !parts[0].is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        detail: format!(
                            "record {}: L^m={} L^g={} -ELBO={}",
                            corpus.train[i].id, parts[1], parts[2], parts[3]
                        ),
                    });
                }
                for k in 0..4 {
                    sums[k] += parts[k];
                }
                gumbel_calls += usize::from(used);
                grads.merge(&gr);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            if self.config.train.clip_norm > 0.0 {
                grads.clip_global_norm(self.config.train.clip_norm);
            }
            self.adam.step(&mut self.model.store, &grads, self.state.learning_rate);
        }
        let n = corpus.train.len().max(1) as f64;
        Ok(EpochStats {
            phase: "mle".into(),
            epoch,
            agent: None,
            learning_rate: self.state.learning_rate,
            loss: sums[0] / n,
            boc_loss: sums[1] / n,
            caption_loss: sums[2] / n,
            neg_elbo: sums[3] / n,
            gumbel_calls,
            ..EpochStats::default()
        })
    }

    pub fn rl_epoch(&mut self, corpus: &Corpus, epoch: usize) -> Result<EpochStats> {
        let seed = self.config.seed;
        let rl_index = epoch - self.config.train.mle_epochs;
        let agent = self.config.rl.schedule.agent(rl_index);
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut stream(seed, Purpose::DataOrder, epoch as u64, 0));
        let (mut reward, mut baseline, mut var, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let weights = self.config.rl.weights;
        let strategy = self.config.rl.boc_match;
        for (b, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            let batch: Vec<&ImageRecord> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let mut sampling = stream(
                seed,
                if agent == Agent::Boc { Purpose::BocSampling } else { Purpose::Decoding },
                epoch as u64,
                b as u64,
            );
            let mut prior = stream(seed, Purpose::Prior, epoch as u64, b as u64);
            let rngs = StepRngs {
                sampling: &mut sampling,
                prior: &mut prior,
            };
            let out = {
                let model = &self.model;
                let idf = &self.idf;
                let refs = |r: &ImageRecord| self.refs(r);
                match agent {
                    Agent::Caption => {
                        let f = |r: &ImageRecord, y: &[usize]| cider_d(&model.detokenize(y), &refs(r), idf);
                        scrl_caption_step(model, &batch, &f, rngs)?
                    }
                    Agent::Boc => {
                        let f = |m: &BocLabel, r: &ImageRecord, y: &[usize]| {
                            boc_reward(m, &model.clip_boc(&r.boc), &model.detokenize(y), &refs(r), idf, weights, strategy)
                        };
                        scrl_boc_step(model, &batch, &f, rngs)?
                    }
                }
            };
            let mut grads = out.grads;
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "non-finite policy gradient".into(),
                });
            }
            if self.config.rl.clip_norm > 0.0 {
                grads.clip_global_norm(self.config.rl.clip_norm);
            }
            self.adam.step(&mut self.model.store, &grads, self.state.learning_rate);
            reward += out.stats.mean_reward;
            baseline += out.stats.mean_baseline;
            var += out.stats.advantage_variance;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        Ok(EpochStats {
            phase: "rl".into(),
            epoch,
            agent: Some(agent),
            learning_rate: self.state.learning_rate,
            mean_reward: reward / n,
            mean_baseline: baseline / n,
            advantage_variance: var / n,
            ..EpochStats::default()
        })
    }

    /// Mean greedy CIDEr-D on a split (predicted BOC, `z_c` at the prior mean).
    pub fn greedy_cider(&self, records: &[ImageRecord]) -> Result<f64> {
        let mut total = 0.0;
        for r in records {
            let d = self
                .model
                .caption(&r.features, BocSource::Predicted, Latent::Zero, &[], DecodeMode::Greedy)?;
            total += cider_d(&self.model.detokenize(&d.tokens), &self.refs(r), &self.idf);
        }
        Ok(total / records.len().max(1) as f64)
    }

    /// Runs one epoch of whichever phase is due, then applies the plateau rule.
    pub fn step_epoch(&mut self, corpus: &Corpus) -> Result<EpochStats> {
        let epoch = self.state.epoch;
        let mle = self.config.train.mle_epochs;
        if epoch == mle {
            // entering the RL phase
            self.state.learning_rate = self.config.rl.learning_rate;
            self.state.stale_epochs = 0;
        }
        let mut stats = if epoch < mle {
            self.mle_epoch(corpus, epoch)?
        } else {
            self.rl_epoch(corpus, epoch)?
        };
        let val = self.greedy_cider(&corpus.val)?;
        stats.val_cider = val;
        if val > self.state.best_val_cider {
            self.state.best_val_cider = val;
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
            if self.state.stale_epochs >= self.config.train.lr_decay_patience {
                self.state.learning_rate = (self.state.learning_rate / 2.0).max(self.config.train.min_lr);
                self.state.stale_epochs = 0;
            }
        }
        log::info!(
            "epoch {} [{}] loss {:.4} reward {:.4} val CIDEr-D {:.4} lr {:.2e}",
            epoch,
            stats.phase,
            stats.loss,
            stats.mean_reward,
            val,
            stats.learning_rate
        );
        self.state.history.push(stats.clone());
        self.state.epoch += 1;
        Ok(stats)
    }

    /// Trains to the end of the schedule, saving a checkpoint after every
    /// epoch when `checkpoint` is given.
    pub fn run(&mut self, corpus: &Corpus, checkpoint: Option<&Path>) -> Result<()> {
        while !self.is_finished() {
            self.step_epoch(corpus)?;
            if let Some(p) = checkpoint {
                self.save(p)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(String, &Matrix)> = Vec::new();
        let mut steps = Vec::with_capacity(self.model.store.len());
        for (id, name, value) in self.model.store.iter() {
            arrays.push((name.to_string(), value));
            let (m, v, s) = self.adam.moments(id);
            if let (Some(m), Some(v)) = (m, v) {
                arrays.push((format!("adam.m/{name}"), m));
                arrays.push((format!("adam.v/{name}"), v));
            }
            steps.push(s);
        }
        let payload = CheckpointPayload {
            config: self.config.clone(),
            meta: self.model.meta(),
            state: self.state.clone(),
            adam_steps: steps,
        };
        write_container(path, &payload, &arrays)
    }

    pub fn load(path: &Path, corpus: &Corpus) -> Result<Self> {
        let (payload, mut arrays): (CheckpointPayload, _) = read_container(path)?;
        let mut meta = payload.meta;
        meta.reindex();
        let mut model = Dmtci::build(payload.config.model.clone(), meta, payload.config.seed)?;
        let mut adam = Adam::new(model.store.len());
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let value = arrays
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if value.shape() != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = value;
            if let (Some(m), Some(v)) = (arrays.remove(&format!("adam.m/{name}")), arrays.remove(&format!("adam.v/{name}"))) {
                adam.set_moments(id, m, v, payload.adam_steps.get(id.index()).copied().unwrap_or(0));
            }
        }
        Ok(Self {
            idf: training_idf(corpus),
            references: tokenized_references(corpus),
            config: payload.config,
            model,
            adam,
            state: payload.state,
        })
    }

    /// Trains an image-text selector on frozen generator candidates.
    pub fn train_selector(&self, corpus: &Corpus) -> Result<Selector> {
        let s = &self.config.selector;
        let mut cfg = SelectorConfig::new(self.model.encoder.config.input_dim, self.model.vocab.len());
        cfg.model_dim = s.dim;
        cfg.num_heads = s.heads;
        cfg.num_layers = s.layers;
        cfg.max_len = self.model.config.max_len + 1;
        cfg.gamma1 = s.gamma1;
        cfg.gamma2 = s.gamma2;
        cfg.random_pairs = s.random_pairs;
        let mut selector = Selector::new(cfg, self.config.seed);
        let n = if s.train_images == 0 { corpus.train.len() } else { s.train_images.min(corpus.train.len()) };
        let mut examples = Vec::with_capacity(n);
        for (i, r) in corpus.train.iter().take(n).enumerate() {
            let mut cands = self
                .model
                .generate_candidates(r, self.config.eval.candidates, self.config.seed, 1_000_000 + i as u64)?;
            // repeats add no ordering information, only extra weight on the gold hinge
            let mut seen = std::collections::BTreeSet::new();
            cands.retain(|c| seen.insert(c.clone()));
            let refs = self.refs(r);
            let gold = cands
                .iter()
                .map(|c| cider_d(&self.model.detokenize(c), &refs, &self.idf))
                .collect();
            examples.push(SelectorExample {
                features: &r.features,
                ranked: RankedCandidates::new(cands, gold),
            });
        }
        selector.fit(&examples, s.epochs, s.batch_size, s.learning_rate, self.config.seed)?;
        Ok(selector)
    }

    pub fn evaluate(&self, corpus: &Corpus, split: &str, mode: EvalMode, selector: Option<&Selector>) -> Result<EvalReport> {
        evaluate(self, corpus, split, mode, selector)
    }
}

/// Writes a trained selector into a checkpoint container.
pub fn save_selector(selector: &Selector, path: &Path) -> Result<()> {
    let arrays: Vec<(String, &Matrix)> = selector.store.iter().map(|(_, n, v)| (n.to_string(), v)).collect();
    write_container(path, &selector.config, &arrays)
}

pub fn load_selector(path: &Path) -> Result<Selector> {
    let (config, mut arrays): (SelectorConfig, _) = read_container(path)?;
    let mut selector = Selector::new(config, 0);
    let ids: Vec<_> = selector.store.ids().collect();
    for id in ids {
        let name = selector.store.name(id).to_string();
        let value = arrays
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if value.shape() != selector.store.get(id).shape() {
            return Err(Error::Checkpoint(format!("array {name} has the wrong shape")));
        }
        *selector.store.get_mut(id) = value;
    }
    Ok(selector)
}

/// Owned counterpart of [`BocInput`] for values built inside a graph scope.
enum BocInputOwned {
    Hard(BocLabel),
    Relaxed(crate::autograd::Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Predicted arg-max BOC, `z_c` at the prior mean, greedy decoding.
    Greedy,
    /// Ground-truth BOC fed to the decoder.
    GoldBoc,
    /// `K` prior draws of `z_c`; reports the candidate average plus random,
    /// selector and oracle choices.
    Candidates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub k: usize,
    pub average_cider: f64,
    pub random_cider: f64,
    pub selector_cider: Option<f64>,
    pub optimum_cider: f64,
    /// Share of images with at least two distinct candidates.
    pub diverse_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleSummary {
    pub images: usize,
    /// Captions naming a present category and no absent confounded category.
    pub correct_category_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mode: EvalMode,
    pub variant: String,
    pub images: usize,
    /// CD is mean CIDEr-D on the scorer's 0–10 scale.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub boc_micro_f1: Option<f64>,
    pub counterexamples: CounterexampleSummary,
    pub candidates: Option<CandidateSummary>,
}

/// Whether a caption names one present category and none of the absent
/// confounded ones.
pub fn correct_category(tokens: &[String], record: &ImageRecord, categories: &[String], confounded: &[String]) -> bool {
    let present = categories
        .iter()
        .zip(&record.boc.counts)
        .any(|(c, &n)| n > 0 && mentions_category(tokens, c));
    let hallucinated = confounded.iter().any(|c| {
        let j = categories.iter().position(|x| x == c);
        let absent = j.is_none_or(|j| record.boc.counts[j] == 0);
        absent && mentions_category(tokens, c)
    });
    present && !hallucinated
}

fn evaluate(t: &Trainer, corpus: &Corpus, split: &str, mode: EvalMode, selector: Option<&Selector>) -> Result<EvalReport> {
    let records: &[ImageRecord] = match split {
        "train" => &corpus.train,
        "val" => &corpus.val,
        "test" => &corpus.test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let cap = t.config.eval.max_images;
    let records = if cap > 0 && cap < records.len() { &records[..cap] } else { records };
    let model = &t.model;
    let categories = &model.categories;
    let confounded: Vec<String> = corpus.meta.confounds.iter().map(|c| c.category.clone()).collect();
    let k = t.config.eval.candidates;
    let seed = t.config.seed;

    let mut bleu = BleuStats::default();
    let mut cider_sum = 0.0;
    let (mut inter, mut denom) = (0usize, 0usize);
    let (mut ce_images, mut ce_correct) = (0usize, 0.0);
    let (mut rand_sum, mut sel_sum, mut opt_sum, mut diverse) = (0.0, 0.0, 0.0, 0usize);
    for (i, r) in records.iter().enumerate() {
        let refs = t.refs(r);
        if model.config.use_mediator {
            let pred = argmax_baseline(&model.boc_distribution(&r.features)?);
            inter += pred.counts.iter().zip(&r.boc.counts).map(|(&a, &b)| a.min(b)).sum::<usize>();
            denom += pred.total() + r.boc.total();
        }
        let captions: Vec<Vec<String>> = match mode {
            EvalMode::Greedy | EvalMode::GoldBoc => {
                let boc = if mode == EvalMode::GoldBoc { BocSource::Given(&r.boc) } else { BocSource::Predicted };
                let d = model.caption(&r.features, boc, Latent::Zero, &[], DecodeMode::Greedy)?;
                vec![model.detokenize(&d.tokens)]
            }
            EvalMode::Candidates => model
                .generate_candidates(r, k, seed, i as u64)?
                .iter()
                .map(|c| model.detokenize(c))
                .collect(),
        };
        let scores: Vec<f64> = captions.iter().map(|c| cider_d(c, &refs, &t.idf)).collect();
        let n = captions.len() as f64;
        cider_sum += scores.iter().sum::<f64>() / n;
        for c in &captions {
            bleu.merge(&BleuStats::of(c, &refs, 4));
        }
        if r.counterexample {
            ce_images += 1;
            ce_correct += captions
                .iter()
                .filter(|c| correct_category(c, r, categories, &confounded))
                .count() as f64
                / n;
        }
        if mode == EvalMode::Candidates {
            let pick = stream(seed, Purpose::Eval, i as u64, 0).gen_range(0..captions.len());
            rand_sum += scores[pick];
            opt_sum += scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if let Some(s) = selector {
                let ids: Vec<Vec<usize>> = captions
                    .iter()
                    .map(|c| c.iter().map(|w| model.vocab.id(w)).collect())
                    .collect();
                sel_sum += scores[s.select_best(&r.features, &ids)?];
            }
            let first = &captions[0];
            if captions.iter().any(|c| c != first) {
                diverse += 1;
            }
        }
    }
    let n = records.len().max(1) as f64;
    let b1 = {
        let mut s = bleu.clone();
        s.matches.truncate(1);
        s.totals.truncate(1);
        if s.matches.is_empty() { 0.0 } else { s.score(1) }
    };
    let b4 = if bleu.matches.is_empty() { 0.0 } else { bleu.score(4) };
    let mut metrics: BTreeMap<String, Option<f64>> = METRIC_NAMES.iter().map(|m| (m.to_string(), None)).collect();
    metrics.insert("B1".into(), Some(b1));
    metrics.insert("B4".into(), Some(b4));
    metrics.insert("CD".into(), Some(cider_sum / n));
    Ok(EvalReport {
        split: split.to_string(),
        mode,
        variant: model.config.variant_name().to_string(),
        images: records.len(),
        metrics,
        boc_micro_f1: model.config.use_mediator.then(|| {
            if denom == 0 {
                1.0
            } else {
                2.0 * inter as f64 / denom as f64
            }
        }),
        counterexamples: CounterexampleSummary {
            images: ce_images,
            correct_category_rate: if ce_images == 0 { 0.0 } else { ce_correct / ce_images as f64 },
        },
        candidates: (mode == EvalMode::Candidates).then(|| CandidateSummary {
            k,
            average_cider: cider_sum / n,
            random_cider: rand_sum / n,
            selector_cider: selector.map(|_| sel_sum / n),
            optimum_cider: opt_sum / n,
            diverse_share: diverse as f64 / n,
        }),
    })
}

/// Mean BOC micro-F1 of the arg-max prediction over a split.
pub fn boc_f1(model: &Dmtci, records: &[ImageRecord]) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let pred = argmax_baseline(&model.boc_distribution(&r.features)?);
        total += boc_match(&pred, &r.boc);
    }
    Ok(total / records.len().max(1) as f64)
}

/// Tokens of a caption string under the model vocabulary.
pub fn encode_caption(model: &Dmtci, caption: &str) -> Vec<usize> {
    tokenize(caption).iter().map(|w| model.vocab.id(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        for kv in [
            "data.size=60",
            "model.dim=8",
            "model.heads=2",
            "model.layers=2",
            "model.boc_tap=1",
            "model.z_dim=2",
            "model.vocab_min_count=1",
            "train.mle_epochs=2",
            "train.gumbel_start_epoch=1",
            "train.rl_epochs=2",
            "train.batch_size=8",
            "eval.candidates=3",
            "selector.dim=8",
            "selector.heads=2",
            "selector.epochs=1",
            "selector.train_images=8",
        ] {
            c.apply_override(kv).unwrap();
        }
        c
    }

    #[test]
    fn gumbel_is_idle_before_its_start_epoch() {
        let cfg = tiny_config();
        let corpus = corpus_from_config(&cfg).unwrap();
        let mut t = Trainer::new(cfg, &corpus).unwrap();
        let s0 = t.step_epoch(&corpus).unwrap();
        assert_eq!(s0.gumbel_calls, 0);
        let s1 = t.step_epoch(&corpus).unwrap();
        assert!(s1.gumbel_calls > 0);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let cfg = tiny_config();
        let corpus = corpus_from_config(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");

        let mut straight = Trainer::new(cfg.clone(), &corpus).unwrap();
        straight.run(&corpus, None).unwrap();

        let mut first = Trainer::new(cfg, &corpus).unwrap();
        for _ in 0..3 {
            first.step_epoch(&corpus).unwrap();
        }
        first.save(&path).unwrap();
        let mut resumed = Trainer::load(&path, &corpus).unwrap();
        let r = &corpus.val[0];
        let probe = |t: &Trainer| t.model.boc_distribution(&r.features).unwrap().logits;
        assert_eq!(probe(&first), probe(&resumed));
        resumed.run(&corpus, None).unwrap();
        assert_eq!(straight.state.history, resumed.state.history);
        assert_eq!(probe(&straight), probe(&resumed));
    }

    #[test]
    fn report_has_table_metric_names() {
        let cfg = tiny_config();
        let corpus = corpus_from_config(&cfg).unwrap();
        let t = Trainer::new(cfg, &corpus).unwrap();
        let rep = t.evaluate(&corpus, "test", EvalMode::Greedy, None).unwrap();
        for m in METRIC_NAMES {
            assert!(rep.metrics.contains_key(m));
        }
        assert!(rep.metrics["ME"].is_none() && rep.metrics["CD"].is_some());
        let rep = t.evaluate(&corpus, "test", EvalMode::Candidates, None).unwrap();
        let c = rep.candidates.unwrap();
        assert!(c.optimum_cider >= c.average_cider);
    }

    #[test]
    fn counterexample_rule() {
        let cats: Vec<String> = ["man", "woman", "ball"].iter().map(|s| s.to_string()).collect();
        let rec = ImageRecord {
            id: "x".into(),
            features: Matrix::zeros(1, 1),
            captions: vec![],
            boc: BocLabel::new(vec![1, 0, 1]),
            concepts: vec![],
            counterexample: true,
        };
        let conf = vec!["woman".to_string()];
        let toks = |s: &str| tokenize(s);
        assert!(correct_category(&toks("a long haired man kicking a ball"), &rec, &cats, &conf));
        assert!(!correct_category(&toks("a long haired woman kicking a ball"), &rec, &cats, &conf));
        assert!(!correct_category(&toks("a man and two women"), &rec, &cats, &conf));
        assert!(!correct_category(&toks("a long haired dog"), &rec, &cats, &conf));
    }
}
