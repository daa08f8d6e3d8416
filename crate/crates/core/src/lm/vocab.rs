use std::collections::{BTreeMap, HashMap};

use crate::util::{Digest, Hasher};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];

/// Whitespace word-level vocabulary. Ids are dense; the five special tokens
/// occupy ids 0..5 and BOS doubles as the sequence-start summary token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Most frequent words first (ties lexicographic), capped at `max_size`
    /// entries including specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().take(keep).map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds from an ordered token list whose first entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
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

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word ids without the BOS prefix.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// BOS-prefixed ids, tail-truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len.min(64));
        ids.push(BOS);
        ids.extend(self.encode_words(text));
        ids.truncate(max_len.max(1));
        ids
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn content_hash(&self) -> Digest {
        let mut h = Hasher::new();
        h.u64(self.tokens.len() as u64);
        for t in &self.tokens {
            h.str(t);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_are_distinct_and_first() {
        let v = Vocab::build(["x y"], 100);
        assert_eq!(v.token(BOS), Some("<bos>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::build(["a b"], 100);
        assert_eq!(v.tokenize("", 64), vec![BOS]);
        let (a, b) = (v.id("a"), v.id("b"));
        assert_eq!(v.tokenize("a b a", 64), vec![BOS, a, b, a]);
        assert_eq!(v.tokenize("a zz", 64), vec![BOS, a, UNK]);
        assert_eq!(v.tokenize("a b a b", 3), vec![BOS, a, b]);
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let v = Vocab::build(["a a a b b c"], 7);
        assert_eq!(v.len(), 7);
        assert_ne!(v.id("a"), UNK);
        assert_ne!(v.id("b"), UNK);
        assert_eq!(v.id("c"), UNK);
    }

    proptest! {
        #[test]
        fn round_trip_on_in_vocab_text(words in proptest::collection::vec(0usize..8, 0..20)) {
            let corpus = "w0 w1 w2 w3 w4 w5 w6 w7";
            let v = Vocab::build([corpus], 64);
            let text = words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.detokenize(&v.tokenize(&text, 64)), text);
        }
    }
}
