use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::mind::NewsRecord;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token ↔ id map with id 0 for padding and id 1 for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    /// Tokens with id ≥ 2, in id order.
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'t>(tokens: impl IntoIterator<Item = &'t str>, min_freq: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 2))
            .collect();
        Self { tokens, index }
    }

    /// Id of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            _ => self.tokens.get(id - 2).map(String::as_str),
        }
    }

    /// Size including the two reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Word, topic and subtopic vocabularies for one corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocabulary,
    pub topics: Vocabulary,
    pub subtopics: Vocabulary,
}

impl Vocabularies {
    pub fn build(records: &[NewsRecord], min_word_freq: usize) -> Self {
        let words = Vocabulary::build(
            records
                .iter()
                .flat_map(|r| r.title_tokens.iter().chain(&r.abstract_tokens))
                .map(String::as_str),
            min_word_freq,
        );
        let topics = Vocabulary::build(records.iter().map(|r| r.topic.as_str()), 1);
        let subtopics = Vocabulary::build(records.iter().map(|r| r.subtopic.as_str()), 1);
        Self {
            words,
            topics,
            subtopics,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_ordering() {
        let v = Vocabulary::build("b a c a b a d d".split(' '), 2);
        assert_eq!(v.tokens(), &["a", "b", "d"]);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("d"), 4);
        assert_eq!(v.id("c"), UNK_ID);
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(3), Some("b"));
    }

    #[test]
    fn build_is_deterministic_and_bijective() {
        let text = "x y z x y q r s t x y z z w w";
        let a = Vocabulary::build(text.split(' '), 1);
        let b = Vocabulary::build(text.split(' ').rev(), 1);
        assert_eq!(a, b);
        for (i, t) in a.tokens().iter().enumerate() {
            assert_eq!(a.id(t), i + 2);
            assert_eq!(a.token(i + 2), Some(t.as_str()));
        }
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build("a b b".split(' '), 1);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"["b","a"]"#);
        assert_eq!(serde_json::from_str::<Vocabulary>(&s).unwrap(), v);
    }
}
