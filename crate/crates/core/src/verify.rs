//! Oracle checks run by `dmtci verify`.
//!
//! Each check compares an estimator against an independent computation
//! (exact enumeration, numerical quadrature, brute-force scoring or finite
//! differences) and reports the measured discrepancy rather than failing.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boc::{argmax_baseline, boc_log_prob, boc_loss, gumbel_noise, gumbel_relax, gumbel_sample, hard_sample, BocDistribution};
use crate::captioner::{BocInput, DecodeMode};
use crate::confounder::{bernoulli_log_likelihood_value, kl_value, Confounder, ConfounderConfig, GaussianPosterior};
use crate::dataset::{BocLabel, ConceptVocabulary, ImageRecord, Vocabulary};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::marl::{scrl_caption_step, self_critical_surrogate, StepRngs};
use crate::metrics::{boc_match, cider_d, IdfCorpus};
use crate::model::{Dmtci, ModelConfig, ModelMeta};
use crate::optim::Adam;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::rng::{stream, Purpose, Rng};
use crate::selector::{ranking_loss, Selector, SelectorConfig};
use crate::tensor::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `|observed − expected| <= tolerance`.
    pub fn close(name: &str, expected: f64, observed: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            expected,
            observed,
            tolerance,
            pass: (observed - expected).abs() <= tolerance,
            detail,
        }
    }

    /// Passes when `observed <= bound`.
    pub fn at_most(name: &str, bound: f64, observed: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            expected: bound,
            observed,
            tolerance: 0.0,
            pass: observed <= bound,
            detail,
        }
    }

    fn errored(name: &str, e: crate::Error) -> Self {
        Self {
            name: name.into(),
            expected: 0.0,
            observed: f64::NAN,
            tolerance: 0.0,
            pass: false,
            detail: format!("error: {e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

fn wrap(name: &str, r: Result<Check>) -> Check {
    r.unwrap_or_else(|e| Check::errored(name, e))
}

pub fn run_suite(seed: u64) -> VerifyReport {
    let mut checks = vec![wrap("mediation_enumeration", mediation_check(seed, 10_000))];
    checks.extend(kl_quadrature_checks(seed, 20, kl_value));
    checks.push(wrap("elbo_below_log_evidence", elbo_bound_check(seed, 2_000)));
    checks.push(gumbel_max_check(seed, 5, 100_000));
    checks.push(gumbel_vertex_check(seed, 5, 200));
    checks.extend(gradient_checks(seed));
    checks.push(wrap("scrl_constant_reward_mean_gradient", constant_reward_check(seed, 1_000)));
    checks.push(wrap("scrl_null_reward_update", null_reward_update_check(seed)));
    checks.push(bandit_check(seed, 500));
    checks.extend(metric_checks());
    VerifyReport {
        schema_version: SCHEMA_VERSION,
        seed,
        checks,
    }
}

/// Toy captioning model: 3 categories, counts in {0, 1}, 20 tokens, d = 16.
pub fn toy_model(seed: u64, use_confounder: bool) -> Result<Dmtci> {
    let words = [
        "a", "man", "dog", "ball", "with", "and", "the", "red", "big", "small", "running", "sitting", "on", "grass",
        "two", "near",
    ];
    let tokens = ["<pad>", "<bos>", "<eos>", "<unk>"]
        .iter()
        .chain(words.iter())
        .map(|s| s.to_string())
        .collect();
    let concepts = ConceptVocabulary::new(
        vec!["man".into(), "red".into(), "running".into()],
        vec![3, 2, 1],
        None,
    );
    let meta = ModelMeta {
        vocab: Vocabulary::from_tokens(tokens, 1),
        concepts,
        categories: vec!["man".into(), "dog".into(), "ball".into()],
        max_count: 2,
        feature_dim: 8,
        proxy_pool: vec![vec![0], vec![1, 2], vec![]],
    };
    let config = ModelConfig {
        model_dim: 16,
        num_heads: 2,
        num_layers: 2,
        boc_tap: 1,
        use_mediator: true,
        use_confounder,
        z_dim: 4,
        confounder_layers: 1,
        proxy_concat: false,
        max_len: 6,
        vocab_min_count: 1,
    };
    Dmtci::build(config, meta, seed)
}

fn toy_features(rng: &mut Rng, regions: usize, dim: usize) -> Matrix {
    Matrix::randn(regions, dim, 1.0, rng)
}

/// All `N_m^{L_m}` count vectors.
pub fn enumerate_bocs(categories: usize, max_count: usize) -> Vec<BocLabel> {
    let total = max_count.pow(categories as u32);
    (0..total)
        .map(|mut k| {
            let counts = (0..categories)
                .map(|_| {
                    let c = k % max_count;
                    k /= max_count;
                    c
                })
                .collect();
            BocLabel::new(counts)
        })
        .collect()
}

/// `p(y | R, m)` under the toy model with `z_c` absent.
fn caption_likelihood(model: &Dmtci, features: &Matrix, boc: &BocLabel, y: &[usize]) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let enc = model.encode(&mut g, features)?;
    let cond = model.conditioning(&mut g, &enc, Some(BocInput::Hard(boc)), None, None)?;
    let lp = model.captioner.sequence_log_prob(&mut g, &cond, y, true)?;
    Ok(g.scalar(lp).exp())
}

/// Monte-Carlo `E_m̃[p(y|R, m̃)]` against exact enumeration over every BOC.
pub fn mediation_check(seed: u64, samples: usize) -> Result<Check> {
    let model = toy_model(seed, false)?;
    let mut rng = stream(seed, Purpose::Oracle, 1, 0);
    let features = toy_features(&mut rng, 4, 8);
    let y: Vec<usize> = vec![model.vocab.id("a"), model.vocab.id("man")];
    let dist = model.boc_distribution(&features)?;
    let all = enumerate_bocs(model.categories.len(), model.max_count);
    let mut table = Vec::with_capacity(all.len());
    let mut exact = 0.0;
    for m in &all {
        let p = caption_likelihood(&model, &features, m, &y)?;
        exact += dist.log_prob(m).exp() * p;
        table.push(p);
    }
    let index = |m: &BocLabel| m.counts.iter().rev().fold(0, |acc, &c| acc * model.max_count + c);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let m = hard_sample(&dist, &mut rng);
        let p = table[index(&m)];
        sum += p;
        sq += p * p;
    }
    let n = samples as f64;
    let mean = sum / n;
    let se = ((sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
    Ok(Check::close(
        "mediation_enumeration",
        exact,
        mean,
        3.0 * se,
        format!("{} BOCs enumerated, {samples} samples, SE {se:.3e}", all.len()),
    ))
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Closed-form KL (`kl`) against 1-D quadrature on random `(μ, σ)` pairs.
/// `kl` is a parameter so a corrupted formula can be checked to fail.
pub fn kl_quadrature_checks(seed: u64, pairs: usize, kl: impl Fn(&GaussianPosterior) -> f64) -> Vec<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 2, 0);
    let mut worst = 0.0f64;
    let mut worst_pair = (0.0, 0.0);
    for _ in 0..pairs {
        let mu: f64 = rng.gen_range(-3.0..3.0);
        let sd: f64 = rng.gen_range(0.2..3.0);
        let closed = kl(&GaussianPosterior {
            mean: vec![mu],
            log_variance: vec![2.0 * sd.ln()],
        });
        let integrand = |z: f64| {
            let lq = log_normal_pdf(z, mu, sd);
            lq.exp() * (lq - log_normal_pdf(z, 0.0, 1.0))
        };
        let quad = simpson(integrand, mu - 16.0 * sd, mu + 16.0 * sd, 40_000);
        let d = (closed - quad).abs();
        if d >= worst {
            worst = d;
            worst_pair = (mu, sd);
        }
    }
    vec![Check::close(
        "kl_quadrature",
        0.0,
        worst,
        1e-6,
        format!("max |closed − quadrature| over {pairs} pairs at μ={:.3} σ={:.3}", worst_pair.0, worst_pair.1),
    )]
}

/// Mean single-sample ELBO must not exceed `log p(c)` (by quadrature) by
/// more than 3 standard errors.
pub fn elbo_bound_check(seed: u64, samples: usize) -> Result<Check> {
    let mut store = ParamStore::new();
    let conf = Confounder::new(
        &mut store,
        ConfounderConfig {
            num_concepts: 3,
            model_dim: 8,
            num_heads: 2,
            num_layers: 1,
            z_dim: 1,
        },
        &mut stream(seed, Purpose::Oracle, 3, 0),
    );
    let ids = [0usize, 2];
    let indicators = conf.indicators(&ids);
    let log_lik = |z: f64| {
        let mut g = Graph::new(&store);
        let zv = g.constant(Matrix::scalar(z));
        let logits = conf.reconstruct(&mut g, zv);
        bernoulli_log_likelihood_value(g.value(logits).data(), indicators.data())
    };
    let evidence = simpson(|z| (log_normal_pdf(z, 0.0, 1.0) + log_lik(z)).exp(), -12.0, 12.0, 4_000).ln();
    let mut rng = stream(seed, Purpose::Oracle, 3, 1);
    let draws: Vec<f64> = (0..samples).map(|_| conf.elbo_value(&store, &ids, &mut rng)).collect();
    let n = samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    Ok(Check::at_most(
        "elbo_below_log_evidence",
        evidence + 3.0 * se,
        mean,
        format!("log p(c) = {evidence:.6}, mean ELBO {mean:.6}, SE {se:.2e}"),
    ))
}

/// Arg-max frequencies of Gumbel-perturbed logits against `softmax(o)`.
pub fn gumbel_max_check(seed: u64, vectors: usize, draws: usize) -> Check {
    let mut rng = stream(seed, Purpose::Oracle, 4, 0);
    let mut worst = 0.0f64;
    for _ in 0..vectors {
        let k = 5;
        let logits: Vec<f64> = (0..k).map(|_| { let x: f64 = StandardNormal.sample(&mut rng); 1.5 * x }).collect();
        let dist = BocDistribution::from_logits(Matrix::row_vector(logits.clone()));
        let mut freq = vec![0usize; k];
        for _ in 0..draws {
            let g = gumbel_noise(1, k, &mut rng);
            let best = (0..k)
                .max_by(|&a, &b| (logits[a] + g.get(0, a)).total_cmp(&(logits[b] + g.get(0, b))))
                .expect("non-empty");
            freq[best] += 1;
        }
        let tv = 0.5
            * (0..k)
                .map(|j| (freq[j] as f64 / draws as f64 - dist.probs.get(0, j)).abs())
                .sum::<f64>();
        worst = worst.max(tv);
    }
    Check::at_most(
        "gumbel_max_frequency",
        0.01,
        worst,
        format!("max total variation over {vectors} logit vectors, {draws} draws each"),
    )
}

/// Near-zero temperature collapses every relaxed row onto a vertex.
pub fn gumbel_vertex_check(seed: u64, vectors: usize, draws: usize) -> Check {
    let mut rng = stream(seed, Purpose::Oracle, 5, 0);
    let mut worst = 0.0f64;
    for _ in 0..vectors {
        let logits = Matrix::randn(3, 4, 2.0, &mut rng);
        let dist = BocDistribution::from_logits(logits);
        for _ in 0..draws {
            let s = match gumbel_sample(&dist, 1e-6, &mut rng) {
                Ok(s) => s,
                Err(e) => return Check::errored("gumbel_low_temperature_vertex", e),
            };
            for r in 0..s.soft_onehots.rows() {
                let max = s.soft_onehots.row(r).iter().cloned().fold(0.0, f64::max);
                worst = worst.max(1.0 - max);
            }
        }
    }
    Check::at_most(
        "gumbel_low_temperature_vertex",
        1e-3,
        worst,
        "max distance of a relaxed row from its nearest vertex at τ = 1e-6".into(),
    )
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and central
/// difference gradients on up to `per_param` random coordinates of each
/// parameter in `ids`.
pub fn gradient_relative_error(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    rng: &mut Rng,
    f: &dyn Fn(&mut Graph) -> Result<Var>,
) -> Result<f64> {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss).into_params()
    };
    let h = 1e-5;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut probe = store.clone();
    for &id in ids {
        let len = store.get(id).len();
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..len)).collect()
        };
        for k in coords {
            let orig = store.get(id).data()[k];
            let mut eval = |x: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[k] = x;
                let mut g = Graph::new(&probe);
                let v = f(&mut g)?;
                Ok(g.scalar(v))
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            probe.get_mut(id).data_mut()[k] = orig;
            let a = analytic.get(id).map_or(0.0, |m| m.data()[k]);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}

fn grad_check(name: &str, detail: &str, r: Result<f64>) -> Check {
    match r {
        Ok(e) => Check::at_most(name, 1e-4, e, detail.into()),
        Err(e) => Check::errored(name, e),
    }
}

/// Finite-difference checks for every trained loss.
pub fn gradient_checks(seed: u64) -> Vec<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 6, 0);
    let mut out = Vec::new();

    // encoder: weighted sum of the caption view
    let mut store = ParamStore::new();
    let encoder = Encoder::new(
        &mut store,
        EncoderConfig {
            input_dim: 6,
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            boc_tap: 1,
        },
        &mut rng,
    );
    out.push(grad_check(
        "gradient_encoder",
        "2-layer encoder, 4 regions",
        encoder.and_then(|enc| {
            let x = Matrix::randn(4, 6, 1.0, &mut rng);
            let w = Matrix::randn(4, 8, 1.0, &mut rng);
            let ids: Vec<ParamId> = store.ids().collect();
            gradient_relative_error(&store, &ids, 4, &mut rng, &|g| {
                let e = enc.forward(g, &x)?;
                let wv = g.constant(w.clone());
                let p = g.mul(e.caption_view(), wv);
                Ok(g.sum(p))
            })
        }),
    ));

    let model = toy_model(seed, true);
    let features = toy_features(&mut rng, 4, 8);
    out.push(grad_check(
        "gradient_boc_gumbel",
        "L^m plus caption loss through a relaxed BOC, frozen noise",
        model.as_ref().map_err(clone_err).and_then(|m| {
            let gold = BocLabel::new(vec![1, 0, 1]);
            let noise = gumbel_noise(3, 2, &mut rng);
            let y = vec![m.vocab.id("a"), m.vocab.id("man"), m.vocab.id("with")];
            let z = Matrix::randn(1, m.config.z_dim, 1.0, &mut rng);
            let ids: Vec<ParamId> = m.store.ids().collect();
            gradient_relative_error(&m.store, &ids, 2, &mut rng, &|g| {
                let enc = m.encode(g, &features)?;
                let logits = m.boc.predict(g, enc.boc_view());
                let lm = boc_loss(g, logits, &gold)?;
                let relaxed = gumbel_relax(g, logits, &noise, 0.7)?;
                let zc = g.constant(z.clone());
                let cond = m.conditioning(g, &enc, Some(BocInput::Relaxed(relaxed)), Some(zc), None)?;
                let lg = m.captioner.mle_loss(g, &cond, &y)?;
                Ok(g.add(lm, lg))
            })
        }),
    ));
    out.push(grad_check(
        "gradient_elbo",
        "confounder ELBO with frozen ε",
        model.as_ref().map_err(clone_err).and_then(|m| {
            let conf = m.confounder.as_ref().expect("toy model has a confounder");
            let eps = Matrix::randn(1, m.config.z_dim, 1.0, &mut rng);
            let ids = m.params_with(&["confounder.".to_string()]);
            gradient_relative_error(&m.store, &ids, 4, &mut rng, &|g| Ok(conf.elbo(g, &[0, 2], &eps).0))
        }),
    ));
    out.push(grad_check(
        "gradient_caption_mle",
        "caption NLL with gold BOC and fixed z_c",
        model.as_ref().map_err(clone_err).and_then(|m| {
            let gold = BocLabel::new(vec![0, 1, 1]);
            let y = vec![m.vocab.id("a"), m.vocab.id("dog"), m.vocab.id("on"), m.vocab.id("grass")];
            let z = Matrix::randn(1, m.config.z_dim, 1.0, &mut rng);
            let ids = m.params_with(&m.caption_agent_prefixes());
            gradient_relative_error(&m.store, &ids, 3, &mut rng, &|g| {
                let enc = m.encode(g, &features)?;
                let zc = g.constant(z.clone());
                let cond = m.conditioning(g, &enc, Some(BocInput::Hard(&gold)), Some(zc), None)?;
                m.captioner.mle_loss(g, &cond, &y)
            })
        }),
    ));
    out.push(grad_check("gradient_selector_ranking", "triplet ranking loss, 4 candidates", {
        let mut cfg = SelectorConfig::new(8, 12);
        cfg.model_dim = 8;
        cfg.num_heads = 2;
        cfg.num_layers = 1;
        cfg.max_len = 6;
        let sel = Selector::new(cfg, seed);
        let captions = vec![vec![4, 5, 6], vec![4, 7], vec![8, 9, 10, 11], vec![5]];
        let pairs = vec![(0, 1), (1, 2), (2, 3), (0, 3)];
        let ids: Vec<ParamId> = sel.store.ids().collect();
        gradient_relative_error(&sel.store, &ids, 3, &mut rng, &|g| {
            let img = sel.encode_image(g, &features)?;
            let mut scores = Vec::new();
            for c in &captions {
                let cv = sel.encode_caption(g, c);
                scores.push(sel.score_pair(g, img, cv)?);
            }
            // wide margins keep every hinge active, away from its kink
            Ok(ranking_loss(g, &scores, &pairs, 5.0, 5.0))
        })
    }));
    out
}

fn clone_err(e: &crate::Error) -> crate::Error {
    crate::Error::Config(e.to_string())
}

/// REINFORCE with a constant reward and no baseline has zero expected
/// gradient; each output-bias coordinate's mean must sit within 4 SE of 0.
pub fn constant_reward_check(seed: u64, steps: usize) -> Result<Check> {
    let model = toy_model(seed, false)?;
    let mut rng = stream(seed, Purpose::Oracle, 7, 0);
    let features = toy_features(&mut rng, 4, 8);
    let bias = model.captioner.output.bias;
    let boc_bias: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, n, m)| n.starts_with("boc.") && n.ends_with(".bias") && m.len() <= 8)
        .map(|(id, _, _)| id)
        .collect();
    let width = model.store.get(bias).len() + boc_bias.iter().map(|&id| model.store.get(id).len()).sum::<usize>();
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    for _ in 0..steps {
        let mut g = Graph::new(&model.store);
        let enc = model.encode(&mut g, &features)?;
        let logits = model.boc.predict(&mut g, enc.boc_view());
        let dist = BocDistribution::from_logits(g.value(logits).clone());
        let m = hard_sample(&dist, &mut rng);
        let lp_m = boc_log_prob(&mut g, logits, &m);
        let base = argmax_baseline(&dist);
        let cond = model.conditioning(&mut g, &enc, Some(BocInput::Hard(&base)), None, None)?;
        let y = model.captioner.decode(&mut g, &cond, DecodeMode::Sample(&mut rng))?;
        let lp = g.add(lp_m, y.log_prob_var);
        let loss = self_critical_surrogate(&mut g, lp, 1.0, 0.0);
        let grads = g.backward(loss).into_params();
        let mut flat = Vec::with_capacity(width);
        for id in std::iter::once(bias).chain(boc_bias.iter().copied()) {
            match grads.get(id) {
                Some(m) => flat.extend_from_slice(m.data()),
                None => flat.extend(std::iter::repeat(0.0).take(model.store.get(id).len())),
            }
        }
        for (k, v) in flat.into_iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    let n = steps as f64;
    let mut worst = 0.0f64;
    for k in 0..width {
        let mean = sum[k] / n;
        let se = ((sq[k] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        let z = if se == 0.0 {
            if mean == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            mean.abs() / se
        };
        worst = worst.max(z);
    }
    Ok(Check::at_most(
        "scrl_constant_reward_mean_gradient",
        4.0,
        worst,
        format!("max |mean|/SE over {width} bias coordinates, {steps} steps"),
    ))
}

/// With a reward that ignores the sample, the self-critical advantage is
/// zero and the update must vanish exactly.
pub fn null_reward_update_check(seed: u64) -> Result<Check> {
    let model = toy_model(seed, true)?;
    let mut rng = stream(seed, Purpose::Oracle, 8, 0);
    let records: Vec<ImageRecord> = (0..4)
        .map(|i| ImageRecord {
            id: format!("toy{i}"),
            features: toy_features(&mut rng, 4, 8),
            captions: vec!["a man".into()],
            boc: BocLabel::new(vec![1, 0, 0]),
            concepts: vec![],
            counterexample: false,
        })
        .collect();
    let batch: Vec<&ImageRecord> = records.iter().collect();
    let mut sampling = stream(seed, Purpose::Oracle, 8, 1);
    let mut prior = stream(seed, Purpose::Oracle, 8, 2);
    let out = scrl_caption_step(
        &model,
        &batch,
        &|_, _| 0.7,
        StepRngs {
            sampling: &mut sampling,
            prior: &mut prior,
        },
    )?;
    Ok(Check::close(
        "scrl_null_reward_update",
        0.0,
        out.grads.global_norm(),
        0.0,
        "global norm of the caption-agent update under a constant reward".into(),
    ))
}

/// Three-armed bandit trained with the self-critical surrogate.
pub fn bandit_check(seed: u64, steps: usize) -> Check {
    let rewards = [0.0, 0.2, 1.0];
    let mut store = ParamStore::new();
    let logits = store.add("bandit.logits", Matrix::zeros(1, 3));
    let mut adam = Adam::new(store.len());
    let mut rng = stream(seed, Purpose::Oracle, 9, 0);
    let softmax = |store: &ParamStore| BocDistribution::from_logits(store.get(logits).clone());
    for _ in 0..steps {
        let dist = softmax(&store);
        let arm = hard_sample(&dist, &mut rng).counts[0];
        let greedy = argmax_baseline(&dist).counts[0];
        let (r, b) = (rewards[arm], rewards[greedy]);
        if r == b {
            continue;
        }
        let mut g = Graph::new(&store);
        let o = g.param(logits);
        let lp = boc_log_prob(&mut g, o, &BocLabel::new(vec![arm]));
        let loss = self_critical_surrogate(&mut g, lp, r, b);
        let grads: ParamGrads = g.backward(loss).into_params();
        adam.step(&mut store, &grads, 0.05);
    }
    let p = softmax(&store).probs.get(0, 2);
    Check {
        name: "scrl_bandit_convergence".into(),
        expected: 0.95,
        observed: p,
        tolerance: 0.0,
        pass: p >= 0.95,
        detail: format!("probability of the rewarded arm after {steps} steps"),
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Straightforward CIDEr-D written without shared code: n-gram lists,
/// linear scans for document frequency, explicit vector union.
pub fn brute_force_cider(candidate: &str, references: &[&str], documents: &[Vec<&str>]) -> f64 {
    let cand = words(candidate);
    let refs: Vec<Vec<&str>> = references.iter().map(|r| words(r)).collect();
    if cand.is_empty() {
        return 0.0;
    }
    let docs: Vec<Vec<Vec<&str>>> = documents.iter().map(|d| d.iter().map(|s| words(s)).collect()).collect();
    let grams = |t: &[&str], n: usize| -> Vec<String> {
        if t.len() < n {
            return vec![];
        }
        (0..=t.len() - n).map(|i| t[i..i + n].join(" ")).collect()
    };
    let log_n = (docs.len() as f64).ln();
    let weight = |gram: &str, n: usize, tf: usize| {
        let df = docs
            .iter()
            .filter(|d| d.iter().any(|r| grams(r, n).iter().any(|g| g == gram)))
            .count()
            .max(1);
        tf as f64 * (log_n - (df as f64).ln())
    };
    let vector = |t: &[&str], n: usize| -> Vec<(String, f64)> {
        let all = grams(t, n);
        let mut keys: Vec<String> = all.clone();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|k| {
                let tf = all.iter().filter(|g| **g == k).count();
                let w = weight(&k, n, tf);
                (k, w)
            })
            .collect()
    };
    let lookup = |v: &[(String, f64)], k: &str| v.iter().find(|(g, _)| g == k).map_or(0.0, |(_, w)| *w);
    let norm = |v: &[(String, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let mut total = 0.0;
    for r in &refs {
        let delta = cand.len() as f64 - r.len() as f64;
        let penalty = (-delta * delta / 72.0).exp();
        let mut per_order = 0.0;
        for n in 1..=4 {
            let vc = vector(&cand, n);
            let vr = vector(r, n);
            let mut dot = 0.0;
            for (k, wc) in &vc {
                let wr = lookup(&vr, k);
                dot += wc.min(wr) * wr;
            }
            let (a, b) = (norm(&vc), norm(&vr));
            let cos = if a != 0.0 && b != 0.0 { dot / (a * b) } else { dot };
            per_order += cos * penalty;
        }
        total += per_order / 4.0;
    }
    10.0 * total / refs.len() as f64
}

fn idf_of(documents: &[Vec<&str>]) -> IdfCorpus {
    let docs: Vec<Vec<Vec<String>>> = documents
        .iter()
        .map(|d| d.iter().map(|s| s.split_whitespace().map(String::from).collect()).collect())
        .collect();
    IdfCorpus::build(&docs)
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn metric_checks() -> Vec<Check> {
    let documents: Vec<Vec<&str>> = vec![
        vec!["a man riding a horse on the beach", "a person on a horse"],
        vec!["a dog catching a red frisbee", "the dog jumps for a frisbee"],
        vec!["two women sitting on a bench", "women chatting on a park bench"],
        vec!["a man throwing a frisbee to a dog", "a dog and a man in a park"],
    ];
    let idf = idf_of(&documents);
    let mut out = Vec::new();
    let own = "a man riding a horse on the beach";
    out.push(Check::close(
        "cider_self_match",
        10.0,
        cider_d(&toks(own), &[toks(own)], &idf),
        1e-9,
        "candidate equal to its single reference".into(),
    ));
    out.push(Check::close(
        "cider_disjoint",
        0.0,
        cider_d(&toks("zebra giraffe elephant"), &[toks(documents[0][0]), toks(documents[0][1])], &idf),
        1e-9,
        "no shared n-grams".into(),
    ));
    let cases: [(&str, &str, usize); 3] = [
        ("hand_partial_overlap", "a man on a horse", 0),
        ("hand_repeated_ngrams", "a dog a dog a dog catching frisbee", 1),
        ("hand_length_mismatch", "women on a bench in a park near the water today", 2),
    ];
    for (name, cand, doc) in cases {
        let refs = &documents[doc];
        let brute = brute_force_cider(cand, refs, &documents);
        let fast = cider_d(&toks(cand), &refs.iter().map(|r| toks(r)).collect::<Vec<_>>(), &idf);
        out.push(Check::close(
            &format!("cider_{name}"),
            brute,
            fast,
            1e-9,
            format!("candidate {cand:?} against brute-force scorer"),
        ));
    }
    let hand: [(&[usize], &[usize], f64); 4] = [
        (&[1, 0, 2], &[1, 1, 1], 2.0 / 3.0),
        (&[0, 0, 0], &[0, 0, 0], 1.0),
        (&[2, 0], &[0, 3], 0.0),
        (&[3, 1], &[1, 1], 2.0 * 2.0 / 6.0),
    ];
    let worst = hand
        .iter()
        .map(|(a, b, want)| (boc_match(&BocLabel::new(a.to_vec()), &BocLabel::new(b.to_vec())) - want).abs())
        .fold(0.0, f64::max);
    out.push(Check::close("boc_match_hand_cases", 0.0, worst, 1e-15, "four hand-computed micro-F1 values".into()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_kl_fails_quadrature() {
        let bad = |p: &GaussianPosterior| kl_value(p) + 0.5 * p.mean[0].abs();
        let checks = kl_quadrature_checks(3, 20, bad);
        assert!(!checks[0].pass);
        assert!(checks[0].observed > 1e-3);
        assert!(kl_quadrature_checks(3, 20, kl_value)[0].pass);
    }

    #[test]
    fn enumeration_covers_every_boc() {
        let all = enumerate_bocs(3, 2);
        assert_eq!(all.len(), 8);
        let mut seen: Vec<Vec<usize>> = all.iter().map(|b| b.counts.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn report_json_shape_is_stable() {
        let r = VerifyReport {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            checks: metric_checks(),
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let c = &v["checks"][0];
        for key in ["name", "expected", "observed", "tolerance", "pass", "detail"] {
            assert!(c.get(key).is_some(), "missing {key}");
        }
        assert!(r.all_passed());
    }
}
