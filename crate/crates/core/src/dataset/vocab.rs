use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase whitespace tokenisation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by frequency
    /// (descending) then lexicographically. Ids 0..4 are the special tokens.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for t in tokenize(c.as_ref()) {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, n)| *n >= min_count && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens, min_count)
    }

    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    /// Rebuilds the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    /// Token ids without begin/end markers.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins ids back into text, stopping at the end marker and skipping
    /// padding and begin markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_count_filters_rare_tokens() {
        let v = Vocabulary::build(&["a a b", "a c"], 2);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn empty_corpus_keeps_specials() {
        let v = Vocabulary::build::<&str>(&[], 5);
        assert_eq!(v.len(), 4);
        let ids: std::collections::HashSet<usize> =
            [PAD, BOS, EOS, UNK].into_iter().collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = Vocabulary::build(&["b a c c", "b a c"], 1);
        assert_eq!(&v.tokens()[4..], &["c", "a", "b"]);
    }

    #[test]
    fn decode_stops_at_end_marker() {
        let v = Vocabulary::build(&["a man walks"], 1);
        let mut ids = vec![BOS];
        ids.extend(v.encode("A man walks"));
        ids.push(EOS);
        ids.push(v.id("man"));
        assert_eq!(v.decode(&ids), "a man walks");
    }
}
