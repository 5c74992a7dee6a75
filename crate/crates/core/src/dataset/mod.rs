//! Corpus types, BOC labels and concept sets.
//!
//! Images are seen only through their region features. Captions are kept as
//! lowercase whitespace-tokenised strings and mapped to ids by a
//! [`Vocabulary`] when the model consumes them.

mod concepts;
mod io;
mod synth;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use concepts::{extract_concepts, ConceptVocabulary};
pub use io::{
    load_feature_corpus, read_concept_lexicon, read_features, read_meta, write_concept_lexicon,
    write_corpus, write_features, write_split, CorpusMeta, ManifestRecord, FEATURE_MAGIC,
};
pub use synth::{
    generate_corpus, mentions_category, plural_of, AttributeSpec, Confound, SceneSpec,
    SplitFractions,
};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, UNK};

/// Unordered, duplicate-free set of concept strings.
pub type ConceptSet = BTreeSet<String>;

/// Per-category object counts of one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BocLabel {
    pub counts: Vec<usize>,
}

impl BocLabel {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn zeros(num_categories: usize) -> Self {
        Self {
            counts: vec![0; num_categories],
        }
    }

    pub fn num_categories(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// The `L_m × N_m` one-hot matrix with `Y[j][counts[j]] = 1`.
    pub fn one_hot(&self, max_count: usize) -> Result<Matrix> {
        if let Some((j, &c)) = self.counts.iter().enumerate().find(|(_, &c)| c >= max_count) {
            return Err(Error::CountOverflow {
                category: format!("#{j}"),
                count: c,
                max: max_count,
            });
        }
        Ok(Matrix::one_hot_rows(&self.counts, max_count))
    }
}

/// Counts the objects of a scene into a [`BocLabel`] over `categories`.
pub fn boc_from_scene(objects: &[&str], categories: &[String], max_count: usize) -> Result<BocLabel> {
    let mut counts = vec![0usize; categories.len()];
    for obj in objects {
        let j = categories
            .iter()
            .position(|c| c == obj)
            .ok_or_else(|| Error::UnknownCategory(obj.to_string()))?;
        counts[j] += 1;
    }
    for (j, &c) in counts.iter().enumerate() {
        if c >= max_count {
            return Err(Error::CountOverflow {
                category: categories[j].clone(),
                count: c,
                max: max_count,
            });
        }
    }
    Ok(BocLabel { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// `L_r × d` region features.
    pub features: Matrix,
    pub captions: Vec<String>,
    pub boc: BocLabel,
    /// One concept set per caption.
    pub concepts: Vec<ConceptSet>,
    pub counterexample: bool,
}

impl ImageRecord {
    pub fn num_regions(&self) -> usize {
        self.features.rows()
    }

    pub fn tokenized_captions(&self) -> Vec<Vec<String>> {
        self.captions.iter().map(|c| tokenize(c)).collect()
    }
}

/// A generated or loaded corpus with its three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl Corpus {
    pub fn categories(&self) -> &[String] {
        &self.meta.categories
    }

    /// `N_m`: one more than the largest per-category count in the training split.
    pub fn max_count(&self) -> usize {
        self.train
            .iter()
            .flat_map(|r| r.boc.counts.iter().copied())
            .max()
            .unwrap_or(0)
            + 1
    }

    pub fn all_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn train_captions(&self) -> Vec<String> {
        self.train.iter().flat_map(|r| r.captions.iter().cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> Vec<String> {
        ["person", "table", "pizza"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn boc_counts_objects() {
        let boc = boc_from_scene(&["person", "person", "pizza"], &cats(), 4).unwrap();
        assert_eq!(boc.counts, vec![2, 0, 1]);
        let y = boc.one_hot(4).unwrap();
        for j in 0..3 {
            assert_eq!(y.row(j).iter().sum::<f64>(), 1.0);
            assert_eq!(y.get(j, boc.counts[j]), 1.0);
        }
    }

    #[test]
    fn empty_scene_is_all_zero_counts() {
        let boc = boc_from_scene(&[], &cats(), 4).unwrap();
        let y = boc.one_hot(4).unwrap();
        for j in 0..3 {
            assert_eq!(y.get(j, 0), 1.0);
        }
    }

    #[test]
    fn count_overflow_names_category() {
        let err = boc_from_scene(&["person"; 4], &cats(), 4).unwrap_err();
        match err {
            Error::CountOverflow { category, count, max } => {
                assert_eq!(category, "person");
                assert_eq!((count, max), (4, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_category_is_rejected() {
        assert!(matches!(
            boc_from_scene(&["dragon"], &cats(), 4),
            Err(Error::UnknownCategory(_))
        ));
    }
}
