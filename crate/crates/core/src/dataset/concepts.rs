use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{tokenize, ConceptSet};

/// High-frequency predicates and category words used as the proxy confounder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    concepts: Vec<String>,
    /// Corpus frequency of each concept (same order as `concepts`).
    pub frequencies: Vec<usize>,
    pub source: Option<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ConceptVocabulary {
    pub fn new(concepts: Vec<String>, frequencies: Vec<usize>, source: Option<String>) -> Self {
        assert_eq!(concepts.len(), frequencies.len());
        let mut v = Self {
            concepts,
            frequencies,
            source,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    pub fn reindex(&mut self) {
        self.index = self
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
    }

    /// Top-`k` most frequent candidate tokens seen at least `min_frequency`
    /// times in `captions` (frequency descending, then lexicographic).
    pub fn from_candidates<S: AsRef<str>>(
        captions: &[S],
        candidates: &[String],
        k: usize,
        min_frequency: usize,
    ) -> Self {
        let mut freq: BTreeMap<&str, usize> = candidates.iter().map(|c| (c.as_str(), 0)).collect();
        for cap in captions {
            for t in tokenize(cap.as_ref()) {
                if let Some(n) = freq.get_mut(t.as_str()) {
                    *n += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            freq.into_iter().filter(|(_, n)| *n >= min_frequency.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(k);
        let (concepts, frequencies) = ranked.into_iter().map(|(c, n)| (c.to_string(), n)).unzip();
        Self::new(concepts, frequencies, None)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn id(&self, concept: &str) -> Option<usize> {
        self.index.get(concept).copied()
    }

    pub fn contains(&self, concept: &str) -> bool {
        self.index.contains_key(concept)
    }

    /// Sorted concept ids of a set; concepts outside the lexicon are dropped.
    pub fn ids(&self, set: &ConceptSet) -> Vec<usize> {
        let mut ids: Vec<usize> = set.iter().filter_map(|c| self.id(c)).collect();
        ids.sort_unstable();
        ids
    }
}

/// Lexicon hits of a caption as an unordered set.
pub fn extract_concepts(caption: &str, lexicon: &ConceptVocabulary) -> ConceptSet {
    tokenize(caption)
        .into_iter()
        .filter(|t| lexicon.contains(t))
        .collect()
}
