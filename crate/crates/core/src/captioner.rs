//! BOC re-embedding and the top-down attention caption decoder.
//!
//! Each category `j` is embedded as
//! `e_j = (h_j + W_o[j]) ⊙ σ(onehot(m_j) W_m)` where `h_j` is the last hidden
//! state of an LSTM run over the category's name words, and `z_m` is the
//! column-wise max over `E^m`. A relaxed BOC replaces the one-hot count row by
//! its soft row, so both paths share one code path.
//!
//! The decoder is the usual two-cell arrangement: the attention cell reads
//! `[h_lang, mean(V), emb(y_{t-1}), z_m, z_c]`, attends over `V = R^(n)`, and
//! the language cell reads `[v̂, h_att]` and emits the next-token logits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::{tokenize, BocLabel, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmCell, LstmState};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{argmax, log_sum_exp, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_categories: usize,
    pub max_count: usize,
    pub use_mediator: bool,
    /// Width of `z_c`; 0 disables the confounder input.
    pub z_dim: usize,
    /// Width of an optional pooled proxy-concept input; 0 disables it.
    pub proxy_dim: usize,
    pub max_len: usize,
}

impl CaptionerConfig {
    pub fn conditioning_dim(&self) -> usize {
        (if self.use_mediator { self.model_dim } else { 0 }) + self.z_dim + self.proxy_dim
    }
}

/// Vocabulary ids of every category name's words, in category order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryLexicon {
    pub words: Vec<Vec<usize>>,
}

impl CategoryLexicon {
    pub fn new(categories: &[String], vocab: &Vocabulary) -> Result<Self> {
        let mut words = Vec::with_capacity(categories.len());
        for cat in categories {
            let toks = tokenize(cat);
            if toks.is_empty() {
                return Err(Error::UnknownCategory(cat.clone()));
            }
            let mut ids = Vec::with_capacity(toks.len());
            for t in toks {
                if !vocab.contains(&t) {
                    return Err(Error::UnknownCategory(format!("{cat} (word {t:?} not in vocabulary)")));
                }
                ids.push(vocab.id(&t));
            }
            words.push(ids);
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A BOC as fed to the mediator embedding.
#[derive(Clone, Copy, Debug)]
pub enum BocInput<'a> {
    Hard(&'a BocLabel),
    /// `L_m × N_m` soft one-hot rows already on the graph.
    Relaxed(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct BocEmbedding {
    /// `E^m`, `L_m × D`.
    pub rows: Var,
    /// `z_m`, `1 × D`.
    pub pooled: Var,
}

/// What the decoder conditions on for one image.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub regions: Var,
    pub z_m: Option<Var>,
    pub z_c: Option<Var>,
    pub proxy: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub lexicon: CategoryLexicon,
    pub embedding: ParamId,
    pub category_lstm: LstmCell,
    pub category_embedding: ParamId,
    pub count_embedding: ParamId,
    pub att_lstm: LstmCell,
    pub att_regions: Linear,
    pub att_hidden: Linear,
    pub att_score: Linear,
    pub lang_lstm: LstmCell,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Prepared {
    regions: Var,
    keys: Var,
    mean_region: Var,
    extra: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
struct DecoderState {
    att: LstmState,
    lang: LstmState,
}

pub enum DecodeMode<'r> {
    Greedy,
    Sample(&'r mut Rng),
}

/// A decoded caption: token ids without markers, whether it stopped at the end
/// token, and the summed token log-probability (end token included if emitted).
#[derive(Clone, Debug)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub terminated: bool,
    pub log_prob: f64,
    pub log_prob_var: Var,
}

impl Captioner {
    pub fn new(store: &mut ParamStore, config: CaptionerConfig, lexicon: CategoryLexicon, rng: &mut Rng) -> Result<Self> {
        if lexicon.len() != config.num_categories {
            return Err(Error::Config(format!(
                "category lexicon has {} entries, expected {}",
                lexicon.len(),
                config.num_categories
            )));
        }
        if let Some(&bad) = lexicon.words.iter().flatten().find(|&&w| w >= config.vocab_size) {
            return Err(Error::TokenOutOfRange(bad));
        }
        let d = config.model_dim;
        let embedding = store.add("captioner.embedding", Matrix::randn(config.vocab_size, d, 0.1, rng));
        let category_lstm = LstmCell::new(store, "captioner.category_lstm", d, d, rng);
        let category_embedding = store.add(
            "captioner.category_embedding",
            Matrix::randn(config.num_categories, d, 0.1, rng),
        );
        let count_embedding = store.add("captioner.count_embedding", Matrix::randn(config.max_count, d, 0.1, rng));
        let att_in = 3 * d + config.conditioning_dim();
        let att_lstm = LstmCell::new(store, "captioner.att_lstm", att_in, d, rng);
        let att_regions = Linear::new(store, "captioner.att_regions", d, d, rng);
        let att_hidden = Linear::new(store, "captioner.att_hidden", d, d, rng);
        let att_score = Linear::new(store, "captioner.att_score", d, 1, rng);
        let lang_lstm = LstmCell::new(store, "captioner.lang_lstm", 2 * d, d, rng);
        let output = Linear::new(store, "captioner.output", d, config.vocab_size, rng);
        Ok(Self {
            config,
            lexicon,
            embedding,
            category_lstm,
            category_embedding,
            count_embedding,
            att_lstm,
            att_regions,
            att_hidden,
            att_score,
            lang_lstm,
            output,
        })
    }

    /// `h_j` for every category, `L_m × D`. Categories with equal word counts
    /// share one batched LSTM pass.
    fn category_words(&self, g: &mut Graph) -> Var {
        let table = g.param(self.embedding);
        let mut by_len: Vec<(usize, Vec<usize>)> = Vec::new();
        for (j, w) in self.lexicon.words.iter().enumerate() {
            match by_len.iter_mut().find(|(l, _)| *l == w.len()) {
                Some((_, js)) => js.push(j),
                None => by_len.push((w.len(), vec![j])),
            }
        }
        let mut parts = Vec::with_capacity(by_len.len());
        let mut order = Vec::with_capacity(self.lexicon.len());
        for (len, js) in &by_len {
            let mut state = self.category_lstm.zero_state(g, js.len());
            for s in 0..*len {
                let ids: Vec<usize> = js.iter().map(|&j| self.lexicon.words[j][s]).collect();
                let x = g.gather_rows(table, &ids);
                state = self.category_lstm.step(g, x, state);
            }
            parts.push(state.hidden);
            order.extend_from_slice(js);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        // row r of `stacked` is category order[r]; invert
        let mut inverse = vec![0; order.len()];
        for (r, &j) in order.iter().enumerate() {
            inverse[j] = r;
        }
        if inverse.iter().enumerate().all(|(j, &r)| j == r) {
            stacked
        } else {
            g.gather_rows(stacked, &inverse)
        }
    }

    pub fn embed_boc(&self, g: &mut Graph, boc: BocInput) -> Result<BocEmbedding> {
        let (l, n) = (self.config.num_categories, self.config.max_count);
        let counts = match boc {
            BocInput::Hard(label) => {
                if label.num_categories() != l {
                    return Err(Error::Shape(format!(
                        "BOC has {} categories, expected {l}",
                        label.num_categories()
                    )));
                }
                g.constant(label.one_hot(n)?)
            }
            BocInput::Relaxed(v) => {
                if g.value(v).shape() != (l, n) {
                    return Err(Error::Shape(format!(
                        "relaxed BOC has shape {:?}, expected ({l}, {n})",
                        g.value(v).shape()
                    )));
                }
                v
            }
        };
        let words = self.category_words(g);
        let ids = g.param(self.category_embedding);
        let base = g.add(words, ids);
        let w_m = g.param(self.count_embedding);
        let count = g.matmul(counts, w_m);
        let gate = g.sigmoid(count);
        let rows = g.mul(base, gate);
        let pooled = g.max_rows(rows);
        Ok(BocEmbedding { rows, pooled })
    }

    fn prepare(&self, g: &mut Graph, cond: &Conditioning) -> Result<Prepared> {
        let d = self.config.model_dim;
        if g.value(cond.regions).cols() != d {
            return Err(Error::Shape(format!(
                "region width {} does not match decoder width {d}",
                g.value(cond.regions).cols()
            )));
        }
        let mut extra = Vec::new();
        if self.config.use_mediator {
            extra.push(cond.z_m.ok_or_else(|| Error::Config("decoder expects z_m".into()))?);
        }
        if self.config.z_dim > 0 {
            extra.push(cond.z_c.ok_or_else(|| Error::Config("decoder expects z_c".into()))?);
        }
        if self.config.proxy_dim > 0 {
            extra.push(cond.proxy.ok_or_else(|| Error::Config("decoder expects a proxy embedding".into()))?);
        }
        let extra = match extra.len() {
            0 => None,
            1 => Some(extra[0]),
            _ => Some(g.concat_cols(&extra)),
        };
        if let Some(e) = extra {
            if g.value(e).shape() != (1, self.config.conditioning_dim()) {
                return Err(Error::Shape(format!(
                    "conditioning has shape {:?}, expected (1, {})",
                    g.value(e).shape(),
                    self.config.conditioning_dim()
                )));
            }
        }
        let keys = self.att_regions.forward(g, cond.regions);
        let mean_region = g.mean_rows(cond.regions);
        Ok(Prepared {
            regions: cond.regions,
            keys,
            mean_region,
            extra,
        })
    }

    fn initial_state(&self, g: &mut Graph) -> DecoderState {
        DecoderState {
            att: self.att_lstm.zero_state(g, 1),
            lang: self.lang_lstm.zero_state(g, 1),
        }
    }

    /// One decoder step; returns the `1 × V` logits.
    fn step(&self, g: &mut Graph, prep: &Prepared, prev: usize, state: DecoderState) -> (Var, DecoderState) {
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, &[prev]);
        let mut parts = vec![state.lang.hidden, prep.mean_region, emb];
        parts.extend(prep.extra);
        let x = g.concat_cols(&parts);
        let att = self.att_lstm.step(g, x, state.att);

        let q = self.att_hidden.forward(g, att.hidden);
        let pre = g.add(prep.keys, q);
        let act = g.tanh(pre);
        let scores = self.att_score.forward(g, act);
        let scores = g.transpose(scores);
        let alpha = g.softmax_rows(scores);
        let attended = g.matmul(alpha, prep.regions);

        let y = g.concat_cols(&[attended, att.hidden]);
        let lang = self.lang_lstm.step(g, y, state.lang);
        let logits = self.output.forward(g, lang.hidden);
        (logits, DecoderState { att, lang })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&t) => Err(Error::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }

    /// Teacher-forced `log p(tokens | ·)`; the end token is scored iff `with_eos`.
    pub fn sequence_log_prob(&self, g: &mut Graph, cond: &Conditioning, tokens: &[usize], with_eos: bool) -> Result<Var> {
        self.check_tokens(tokens)?;
        let prep = self.prepare(g, cond)?;
        let mut state = self.initial_state(g);
        let mut targets: Vec<usize> = tokens.to_vec();
        if with_eos {
            targets.push(EOS);
        }
        if targets.is_empty() {
            return Ok(g.constant(Matrix::scalar(0.0)));
        }
        let mut prev = BOS;
        let mut logits = Vec::with_capacity(targets.len());
        for &t in &targets {
            let (l, s) = self.step(g, &prep, prev, state);
            logits.push(l);
            state = s;
            prev = t;
        }
        let all = g.concat_rows(&logits);
        let lp = g.log_softmax_rows(all);
        let idx: Vec<(usize, usize)> = targets.iter().enumerate().map(|(r, &t)| (r, t)).collect();
        let picked = g.gather_elems(lp, &idx);
        Ok(g.sum(picked))
    }

    /// Caption loss `L^g`: negative teacher-forced log-likelihood of the gold
    /// tokens followed by the end token.
    pub fn mle_loss(&self, g: &mut Graph, cond: &Conditioning, gold: &[usize]) -> Result<Var> {
        if gold.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "gold caption has {} tokens, maximum is {}",
                gold.len(),
                self.config.max_len
            )));
        }
        let lp = self.sequence_log_prob(g, cond, gold, true)?;
        Ok(g.scale(lp, -1.0))
    }

    /// Greedy (ties to the lowest id) or sampled decoding up to `max_len` tokens.
    pub fn decode(&self, g: &mut Graph, cond: &Conditioning, mut mode: DecodeMode) -> Result<Decoded> {
        let prep = self.prepare(g, cond)?;
        let mut state = self.initial_state(g);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut picked = Vec::new();
        let mut log_prob = 0.0;
        let mut terminated = false;
        for _ in 0..=self.config.max_len {
            let (logits, s) = self.step(g, &prep, prev, state);
            state = s;
            let row = g.value(logits).row(0).to_vec();
            let lse = log_sum_exp(&row);
            let t = match &mut mode {
                DecodeMode::Greedy => argmax(&row),
                DecodeMode::Sample(rng) => sample_categorical(&row, lse, rng),
            };
            log_prob += row[t] - lse;
            let lp = g.log_softmax_rows(logits);
            picked.push(g.gather_elems(lp, &[(0, t)]));
            if t == EOS {
                terminated = true;
                break;
            }
            if tokens.len() == self.config.max_len {
                // the extra step only offers the end token; anything else truncates
                picked.pop();
                log_prob -= row[t] - lse;
                break;
            }
            tokens.push(t);
            prev = t;
        }
        let log_prob_var = if picked.is_empty() {
            g.constant(Matrix::scalar(0.0))
        } else {
            let all = g.concat_cols(&picked);
            g.sum(all)
        };
        Ok(Decoded {
            tokens,
            terminated,
            log_prob,
            log_prob_var,
        })
    }
}

fn sample_categorical(logits: &[f64], lse: f64, rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &l) in logits.iter().enumerate() {
        acc += (l - lse).exp();
        if u < acc {
            return k;
        }
    }
    logits.len() - 1
}
