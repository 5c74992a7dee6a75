//! Caption and BOC scoring: CIDEr-D, BLEU and the BOC match score.
//!
//! CIDEr-D follows the public coco-caption scorer: per-order TF-IDF vectors
//! with `idf = ln N − ln max(1, df)`, clipped dot product
//! `Σ min(v_c, v_r)·v_r`, cosine normalisation, a Gaussian length penalty with
//! σ = 6, averaged over n = 1..4 and over references, then scaled by 10.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::BocLabel;

pub const MAX_ORDER: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const BLEU_EPSILON: f64 = 1e-9;

type Counts = BTreeMap<String, usize>;

/// n-gram counts of orders 1..=max_n, keyed by space-joined tokens.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], max_n: usize) -> Vec<Counts> {
    (1..=max_n)
        .map(|n| {
            let mut c = Counts::new();
            if tokens.len() >= n {
                for w in tokens.windows(n) {
                    let key = w.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ");
                    *c.entry(key).or_insert(0) += 1;
                }
            }
            c
        })
        .collect()
}

/// Document frequencies of reference n-grams; one document per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdfCorpus {
    pub num_documents: usize,
    pub document_frequency: Vec<BTreeMap<String, usize>>,
}

impl IdfCorpus {
    /// Each element of `images` is the tokenized reference set of one image.
    pub fn build(images: &[Vec<Vec<String>>]) -> Self {
        let mut df = vec![BTreeMap::new(); MAX_ORDER];
        for refs in images {
            let mut seen: Vec<BTreeSet<String>> = vec![Default::default(); MAX_ORDER];
            for r in refs {
                for (n, counts) in ngram_counts(r, MAX_ORDER).into_iter().enumerate() {
                    seen[n].extend(counts.into_keys());
                }
            }
            for (n, grams) in seen.into_iter().enumerate() {
                for gram in grams {
                    *df[n].entry(gram).or_insert(0) += 1;
                }
            }
        }
        Self {
            num_documents: images.len(),
            document_frequency: df,
        }
    }

    pub fn document_frequency(&self, order: usize, gram: &str) -> usize {
        self.document_frequency[order - 1].get(gram).copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("idf serializes")
    }

    fn log_documents(&self) -> f64 {
        (self.num_documents.max(1) as f64).ln()
    }
}

struct TfIdf {
    vectors: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn tfidf<S: AsRef<str>>(tokens: &[S], idf: &IdfCorpus) -> TfIdf {
    let log_n = idf.log_documents();
    let mut vectors = Vec::with_capacity(MAX_ORDER);
    let mut norms = Vec::with_capacity(MAX_ORDER);
    for (n, counts) in ngram_counts(tokens, MAX_ORDER).into_iter().enumerate() {
        let mut v = BTreeMap::new();
        let mut sq = 0.0;
        for (gram, tf) in counts {
            let df = idf.document_frequency[n].get(&gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - df.ln());
            sq += w * w;
            v.insert(gram, w);
        }
        vectors.push(v);
        norms.push(sq.sqrt());
    }
    TfIdf {
        vectors,
        norms,
        length: tokens.len(),
    }
}

fn cider_sim(hyp: &TfIdf, reference: &TfIdf) -> [f64; MAX_ORDER] {
    let delta = hyp.length as f64 - reference.length as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let mut val = 0.0;
        for (gram, &h) in &hyp.vectors[n] {
            if let Some(&r) = reference.vectors[n].get(gram) {
                val += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        out[n] = val * penalty;
    }
    out
}

/// CIDEr-D of one candidate against its references, in `[0, 10]`.
pub fn cider_d<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], idf: &IdfCorpus) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let hyp = tfidf(candidate, idf);
    let mut total = [0.0; MAX_ORDER];
    for r in references {
        let s = cider_sim(&hyp, &tfidf(r, idf));
        for n in 0..MAX_ORDER {
            total[n] += s[n];
        }
    }
    let mean = total.iter().sum::<f64>() / MAX_ORDER as f64;
    mean / references.len() as f64 * 10.0
}

/// Sentence BLEU-`max_n` with closest-reference brevity penalty; zero match
/// counts are replaced by ε.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], max_n: usize) -> f64 {
    let stats = BleuStats::of(candidate, references, max_n);
    stats.score(max_n)
}

/// Sufficient statistics for sentence and corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn of<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], max_n: usize) -> Self {
        let cand = ngram_counts(candidate, max_n);
        let refs: Vec<Vec<Counts>> = references.iter().map(|r| ngram_counts(r, max_n)).collect();
        let mut matches = vec![0; max_n];
        let mut totals = vec![0; max_n];
        for n in 0..max_n {
            for (gram, &c) in &cand[n] {
                let max_ref = refs.iter().map(|r| r[n].get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                matches[n] += c.min(max_ref);
                totals[n] += c;
            }
        }
        let c = candidate.len();
        // closest reference length, shorter wins ties
        let reference_len = references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - c as i64).abs(), l))
            .unwrap_or(0);
        Self {
            matches,
            totals,
            candidate_len: c,
            reference_len,
        }
    }

    pub fn merge(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            *self = other.clone();
            return;
        }
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn score(&self, max_n: usize) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..max_n {
            let m = if self.matches[n] == 0 { BLEU_EPSILON } else { self.matches[n] as f64 };
            let t = (self.totals[n] as f64).max(BLEU_EPSILON);
            log_p += (m / t).ln();
        }
        let bp = if self.candidate_len >= self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp()
        };
        bp * (log_p / max_n as f64).exp()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BocMatch {
    /// Multiset micro-F1 over counts.
    #[default]
    MicroF1,
    /// 1 if the counts agree everywhere, else 0.
    Exact,
}

/// `2 Σ min(a_j, b_j) / (Σ a_j + Σ b_j)`, 1 when both are empty.
pub fn boc_match(a: &BocLabel, b: &BocLabel) -> f64 {
    assert_eq!(a.num_categories(), b.num_categories(), "BOCs differ in category count");
    let denom = a.total() + b.total();
    if denom == 0 {
        return 1.0;
    }
    let inter: usize = a.counts.iter().zip(&b.counts).map(|(&x, &y)| x.min(y)).sum();
    2.0 * inter as f64 / denom as f64
}

pub fn boc_score(strategy: BocMatch, a: &BocLabel, b: &BocLabel) -> f64 {
    match strategy {
        BocMatch::MicroF1 => boc_match(a, b),
        BocMatch::Exact => f64::from(u8::from(a == b)),
    }
}
