use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Default maximum sequence length.
pub const DEFAULT_MAX_LEN: usize = 64;

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !SPECIAL_TOKENS.contains(&t.as_str()) {
                id_to_token.push(t);
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Builds a vocabulary from raw texts. Tokens seen at least `min_freq`
    /// times get ids after the specials, most frequent first, ties broken
    /// lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be >= 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t)))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Lowercased whitespace tokens truncated to `max_len`; EOS is appended
    /// when room remains.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let max_len = max_len.max(1);
        let mut ids: Vec<usize> = tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect();
        if ids.len() < max_len {
            ids.push(EOS);
        }
        ids
    }

    /// Space-joined tokens up to the first EOS; PAD and BOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => words.push(self.token(id).unwrap_or(SPECIAL_TOKENS[UNK])),
            }
        }
        words.join(" ")
    }

    /// One token per line; line `n` (0-based) holds id `n + 4`.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token[NUM_SPECIALS..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_lines(content: &str) -> Self {
        Self::from_tokens(content.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(&content))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_occupy_first_ids() {
        let v = Vocabulary::specials_only();
        assert_eq!(v.len(), 4);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
    }

    #[test]
    fn min_freq_one_keeps_everything() {
        let v = Vocabulary::build(["a a b"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn min_freq_two_drops_rare_tokens() {
        let v = Vocabulary::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("b", 64), vec![UNK, EOS]);
    }

    #[test]
    fn zero_min_freq_is_rejected() {
        assert!(Vocabulary::build(["a"], 0).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(["zeta alpha mid mid"], 1).unwrap();
        assert_eq!(v.token(4), Some("mid"));
        assert_eq!(v.token(5), Some("alpha"));
        assert_eq!(v.token(6), Some("zeta"));
    }

    #[test]
    fn encode_appends_eos_and_truncates() {
        let text = "How do they find an epicenter?";
        let v = Vocabulary::build([text], 1).unwrap();
        let ids = v.encode(text, 64);
        let words = ["how", "do", "they", "find", "an", "epicenter?"];
        let expected: Vec<usize> = words.iter().map(|w| v.id(w)).chain([EOS]).collect();
        assert_eq!(ids, expected);
        assert!(ids[..6].iter().all(|&i| i >= NUM_SPECIALS));

        assert_eq!(v.encode("", 64), vec![EOS]);

        let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let long = long.join(" ");
        let ids = v.encode(&long, 64);
        assert_eq!(ids.len(), 64);
        assert!(!ids.contains(&EOS));
    }

    #[test]
    fn empty_corpus_yields_specials_only() {
        let v = Vocabulary::build(std::iter::empty::<&str>(), 1).unwrap();
        assert_eq!(v, Vocabulary::specials_only());
    }

    #[test]
    fn serialized_lines_round_trip() {
        let v = Vocabulary::build(["the cat sat on the mat"], 1).unwrap();
        let back = Vocabulary::from_lines(&v.to_lines());
        assert_eq!(back, v);
        assert_eq!(v.to_lines().lines().next(), Some("the"));
    }

    proptest! {
        #[test]
        fn ids_and_tokens_are_inverse(words in prop::collection::vec("[a-e]{1,3}", 0..40)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()], 1).unwrap();
            for id in 0..v.len() {
                prop_assert_eq!(v.id(v.token(id).unwrap()), id);
            }
        }

        #[test]
        fn decode_inverts_encode(
            words in prop::collection::vec("[a-dA-D]{1,3}", 0..30),
            vocab_words in prop::collection::vec("[a-d]{1,3}", 0..20),
            max_len in 1usize..40,
        ) {
            let v = Vocabulary::build([vocab_words.join(" ").as_str()], 1).unwrap();
            let text = words.join("  ");
            let expected: Vec<String> = tokenize(&text)
                .into_iter()
                .take(max_len)
                .map(|t| if v.id(&t) == UNK { "<unk>".to_string() } else { t })
                .collect();
            prop_assert_eq!(v.decode(&v.encode(&text, max_len)), expected.join(" "));
        }
    }
}
