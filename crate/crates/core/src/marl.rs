//! Two-agent self-critical policy gradient.
//!
//! The BOC agent samples `m̃`, is rewarded by `λ1 s1(m̃, m) + λ2 s2(ȳ_m̃, y)`
//! where `ȳ_m̃` is the greedy caption under `m̃`, and uses the arg-max BOC as
//! its baseline. The caption agent samples `ỹ` under the arg-max BOC and a
//! prior draw of `z_c`, with the greedy caption as baseline. Agents are
//! updated alternately; each step only produces gradients for its own agent.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boc::{argmax_baseline, boc_log_prob, hard_sample, BocDistribution};
use crate::captioner::{BocInput, DecodeMode};
use crate::dataset::{BocLabel, ImageRecord};
use crate::error::{Error, Result};
use crate::metrics::{boc_score, cider_d, BocMatch, IdfCorpus};
use crate::model::{Dmtci, Latent};
use crate::params::{ParamGrads, ParamId};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::Config(format!(
                "reward weights ({}, {}) must be non-negative with a positive sum",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Caption,
    Boc,
}

/// `caption_epochs` caption-agent epochs, then `boc_epochs` BOC-agent epochs, repeating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxMaxSchedule {
    pub caption_epochs: usize,
    pub boc_epochs: usize,
}

impl Default for MaxMaxSchedule {
    fn default() -> Self {
        Self {
            caption_epochs: 1,
            boc_epochs: 1,
        }
    }
}

impl MaxMaxSchedule {
    pub fn agent(&self, step: usize) -> Agent {
        let period = self.caption_epochs + self.boc_epochs;
        if period == 0 || step % period < self.caption_epochs {
            Agent::Caption
        } else {
            Agent::Boc
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrlBatchStats {
    pub agent: Agent,
    pub step: usize,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub advantage_variance: f64,
}

impl ScrlBatchStats {
    fn from_rewards(agent: Agent, rewards: &[(f64, f64)]) -> Self {
        let n = rewards.len().max(1) as f64;
        let mean_reward = rewards.iter().map(|r| r.0).sum::<f64>() / n;
        let mean_baseline = rewards.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_adv = mean_reward - mean_baseline;
        let advantage_variance = rewards
            .iter()
            .map(|(r, b)| (r - b - mean_adv).powi(2))
            .sum::<f64>()
            / n;
        Self {
            agent,
            step: 0,
            mean_reward,
            mean_baseline,
            advantage_variance,
        }
    }
}

/// `r_1 = λ1 s1(m̃, m) + λ2 s2(ȳ_m̃, y)`.
pub fn boc_reward<S: AsRef<str>, R: AsRef<str>>(
    sample: &BocLabel,
    gold: &BocLabel,
    caption: &[S],
    references: &[Vec<R>],
    idf: &IdfCorpus,
    weights: RewardWeights,
    strategy: BocMatch,
) -> f64 {
    let s1 = if weights.lambda1 == 0.0 { 0.0 } else { boc_score(strategy, sample, gold) };
    let s2 = if weights.lambda2 == 0.0 { 0.0 } else { cider_d(caption, references, idf) };
    weights.lambda1 * s1 + weights.lambda2 * s2
}

/// Scalar whose gradient is `−(r − b) ∇ log p`.
pub fn self_critical_surrogate(g: &mut Graph, log_prob: Var, reward: f64, baseline: f64) -> Var {
    g.scale(log_prob, -(reward - baseline))
}

/// Gradients and statistics of one agent update.
pub struct ScrlOutput {
    pub grads: ParamGrads,
    pub stats: ScrlBatchStats,
}

/// Reward of a BOC given the image and the greedy caption it induced.
pub type BocRewardFn<'a> = dyn Fn(&BocLabel, &ImageRecord, &[usize]) -> f64 + 'a;
/// Reward of a caption for an image.
pub type CaptionRewardFn<'a> = dyn Fn(&ImageRecord, &[usize]) -> f64 + 'a;

/// Per-example randomness for an RL step.
pub struct StepRngs<'r> {
    pub sampling: &'r mut Rng,
    pub prior: &'r mut Rng,
}

fn finish(mut grads: ParamGrads, keep: &[ParamId], n: usize) -> ParamGrads {
    grads.retain(keep);
    if n > 0 {
        grads.scale(1.0 / n as f64);
    }
    grads
}

/// Self-critical update direction for the BOC agent (caption agent frozen).
pub fn scrl_boc_step(
    model: &Dmtci,
    batch: &[&ImageRecord],
    reward: &BocRewardFn,
    rngs: StepRngs,
) -> Result<ScrlOutput> {
    let keep = model.params_with(&model.boc_agent_prefixes());
    let mut grads = ParamGrads::new(model.store.len());
    let mut rewards = Vec::with_capacity(batch.len());
    for record in batch {
        let mut g = Graph::new(&model.store);
        let enc = model.encode(&mut g, &record.features)?;
        let logits = model.boc.predict(&mut g, enc.boc_view());
        let dist = BocDistribution::from_logits(g.value(logits).clone());
        let sample = hard_sample(&dist, rngs.sampling);
        let base = argmax_baseline(&dist);
        let z = model.latent_row(Latent::Prior(rngs.prior));
        let greedy = |g: &mut Graph, boc: &BocLabel| -> Result<Vec<usize>> {
            if !model.config.use_mediator {
                return Ok(Vec::new());
            }
            let zv = z.clone().map(|m| g.constant(m));
            let proxy = model.proxy_embedding(g, &[]);
            let cond = model.conditioning(g, &enc, Some(BocInput::Hard(boc)), zv, proxy)?;
            Ok(model.captioner.decode(g, &cond, DecodeMode::Greedy)?.tokens)
        };
        let y_sample = greedy(&mut g, &sample)?;
        let y_base = if base == sample { y_sample.clone() } else { greedy(&mut g, &base)? };
        let r = reward(&sample, record, &y_sample);
        let b = if base == sample { r } else { reward(&base, record, &y_base) };
        rewards.push((r, b));
        if r != b {
            let lp = boc_log_prob(&mut g, logits, &sample);
            let loss = self_critical_surrogate(&mut g, lp, r, b);
            grads.merge(g.backward(loss).params());
        }
    }
    Ok(ScrlOutput {
        grads: finish(grads, &keep, batch.len()),
        stats: ScrlBatchStats::from_rewards(Agent::Boc, &rewards),
    })
}

/// Self-critical update direction for the caption agent (BOC agent frozen).
pub fn scrl_caption_step(
    model: &Dmtci,
    batch: &[&ImageRecord],
    reward: &CaptionRewardFn,
    rngs: StepRngs,
) -> Result<ScrlOutput> {
    let keep = model.params_with(&model.caption_agent_prefixes());
    let mut grads = ParamGrads::new(model.store.len());
    let mut rewards = Vec::with_capacity(batch.len());
    for record in batch {
        let mut g = Graph::new(&model.store);
        let enc = model.encode(&mut g, &record.features)?;
        let base_boc = if model.config.use_mediator {
            let logits = model.boc.predict(&mut g, enc.boc_view());
            Some(argmax_baseline(&BocDistribution::from_logits(g.value(logits).clone())))
        } else {
            None
        };
        let z: Option<Matrix> = model.latent_row(Latent::Prior(rngs.prior));
        let zv = z.map(|m| g.constant(m));
        let proxy = model.proxy_embedding(&mut g, &[]);
        let cond = model.conditioning(&mut g, &enc, base_boc.as_ref().map(BocInput::Hard), zv, proxy)?;
        let sampled = model.captioner.decode(&mut g, &cond, DecodeMode::Sample(rngs.sampling))?;
        let greedy = model.captioner.decode(&mut g, &cond, DecodeMode::Greedy)?;
        let r = reward(record, &sampled.tokens);
        let b = if sampled.tokens == greedy.tokens && sampled.terminated == greedy.terminated {
            r
        } else {
            reward(record, &greedy.tokens)
        };
        rewards.push((r, b));
        if r != b {
            let loss = self_critical_surrogate(&mut g, sampled.log_prob_var, r, b);
            grads.merge(g.backward(loss).params());
        }
    }
    Ok(ScrlOutput {
        grads: finish(grads, &keep, batch.len()),
        stats: ScrlBatchStats::from_rewards(Agent::Caption, &rewards),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, Corpus, SceneSpec, SplitFractions};
    use crate::model::ModelConfig;
    use crate::rng::{stream, Purpose};

    fn small() -> (Corpus, Dmtci) {
        let corpus = generate_corpus(&SceneSpec::default(), 40, SplitFractions::default(), 2).unwrap();
        let cfg = ModelConfig {
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            boc_tap: 1,
            z_dim: 2,
            vocab_min_count: 1,
            ..ModelConfig::default()
        };
        let m = Dmtci::new(cfg, &corpus, 1).unwrap();
        (corpus, m)
    }

    #[test]
    fn reward_cases() {
        let doc = |s: &str| vec![s.split(' ').map(String::from).collect::<Vec<_>>()];
        let idf = IdfCorpus::build(&[doc("a dog"), doc("two cats"), doc("a pizza")]);
        let m = BocLabel::new(vec![1, 0]);
        let y = vec!["a".to_string(), "man".to_string(), "and".to_string(), "a".to_string(), "dog".to_string()];
        let r = boc_reward(&m, &m, &y, &[y.clone()], &idf, RewardWeights::default(), BocMatch::MicroF1);
        assert!((r - (0.5 + 0.5 * 10.0)).abs() < 1e-9);
        let w = RewardWeights {
            lambda1: 0.7,
            lambda2: 0.0,
        };
        let r = boc_reward(&BocLabel::new(vec![1, 1]), &m, &y, &[y.clone()], &idf, w, BocMatch::MicroF1);
        assert!((r - 0.7 * 2.0 / 3.0).abs() < 1e-12);
        assert!(RewardWeights { lambda1: 0.0, lambda2: 0.0 }.validate().is_err());
    }

    #[test]
    fn schedule_alternates() {
        let s = MaxMaxSchedule::default();
        assert_eq!(s.agent(0), Agent::Caption);
        assert_eq!(s.agent(1), Agent::Boc);
        assert_eq!(s.agent(2), Agent::Caption);
        let s = MaxMaxSchedule {
            caption_epochs: 3,
            boc_epochs: 1,
        };
        let trace: Vec<Agent> = (0..8).map(|e| s.agent(e)).collect();
        assert_eq!(trace.iter().filter(|a| **a == Agent::Boc).count(), 2);
        assert_eq!(trace[3], Agent::Boc);
        assert_eq!(trace[7], Agent::Boc);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<MaxMaxSchedule>(&json).unwrap(), s);
    }

    #[test]
    fn constant_reward_gives_zero_update() {
        let (corpus, m) = small();
        let batch: Vec<&ImageRecord> = corpus.train.iter().take(3).collect();
        let mut a = stream(1, Purpose::BocSampling, 0, 0);
        let mut b = stream(1, Purpose::Prior, 0, 0);
        let out = scrl_boc_step(&m, &batch, &|_, _, _| 1.0, StepRngs { sampling: &mut a, prior: &mut b }).unwrap();
        assert_eq!(out.grads.touched().count(), 0);
        let out = scrl_caption_step(&m, &batch, &|_, _| 2.0, StepRngs { sampling: &mut a, prior: &mut b }).unwrap();
        assert_eq!(out.grads.touched().count(), 0);
        assert_eq!(out.stats.advantage_variance, 0.0);
    }

    #[test]
    fn updates_stay_inside_their_agent() {
        let (corpus, m) = small();
        let batch: Vec<&ImageRecord> = corpus.train.iter().take(4).collect();
        let boc_ids = m.params_with(&m.boc_agent_prefixes());
        let cap_ids = m.params_with(&m.caption_agent_prefixes());
        let mut a = stream(3, Purpose::BocSampling, 0, 0);
        let mut b = stream(3, Purpose::Prior, 0, 0);
        let out = scrl_caption_step(&m, &batch, &|_, y| y.len() as f64, StepRngs { sampling: &mut a, prior: &mut b })
            .unwrap();
        assert!(out.grads.touched().all(|id| cap_ids.contains(&id)));
        let out = scrl_boc_step(
            &m,
            &batch,
            &|s, _, _| s.total() as f64,
            StepRngs { sampling: &mut a, prior: &mut b },
        )
        .unwrap();
        assert!(out.grads.touched().all(|id| boc_ids.contains(&id)));
        assert!(out.grads.touched().count() > 0);
    }
}
