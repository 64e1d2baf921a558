use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which news parts feed the fusion attention. `t` = title, `a` = abstract,
/// `c` = topic and subtopic together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(into = "String", try_from = "String")]
pub enum InputVariant {
    T,
    Tc,
    A,
    Ac,
    At,
    #[default]
    Act,
}

impl InputVariant {
    pub const ALL: [InputVariant; 6] = [Self::T, Self::Tc, Self::A, Self::Ac, Self::At, Self::Act];

    pub fn uses_title(self) -> bool {
        matches!(self, Self::T | Self::Tc | Self::At | Self::Act)
    }

    pub fn uses_abstract(self) -> bool {
        matches!(self, Self::A | Self::Ac | Self::At | Self::Act)
    }

    pub fn uses_categories(self) -> bool {
        matches!(self, Self::Tc | Self::Ac | Self::Act)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T => "t",
            Self::Tc => "tc",
            Self::A => "a",
            Self::Ac => "ac",
            Self::At => "at",
            Self::Act => "act",
        }
    }
}

impl fmt::Display for InputVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Letters may come in any order ("tac" == "act").
        let mut letters: Vec<char> = s.trim().to_ascii_lowercase().chars().collect();
        letters.sort_unstable();
        letters.dedup();
        let key: String = letters.into_iter().collect();
        match key.as_str() {
            "t" => Ok(Self::T),
            "ct" => Ok(Self::Tc),
            "a" => Ok(Self::A),
            "ac" => Ok(Self::Ac),
            "at" => Ok(Self::At),
            "act" => Ok(Self::Act),
            _ => Err(Error::Config(format!(
                "input variant {s:?} must be one of t, tc, a, ac, at, act"
            ))),
        }
    }
}

impl From<InputVariant> for String {
    fn from(v: InputVariant) -> Self {
        v.as_str().to_string()
    }
}

impl TryFrom<String> for InputVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Shapes and switches that determine the parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub topic_vocab_size: usize,
    pub subtopic_vocab_size: usize,
    /// News, session and word-embedding dimension.
    pub dim: usize,
    pub encoder_heads: usize,
    /// Interest channels; also the number of detector heads.
    pub channels: usize,
    pub topic_dim: usize,
    /// Hidden size of every additive-attention scorer.
    pub attention_dim: usize,
    /// Adds a head-mixing output map after the interest detector.
    pub detector_projection: bool,
    pub variant: InputVariant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("encoder heads", self.encoder_heads),
            ("channels", self.channels),
            ("topic dim", self.topic_dim),
            ("attention dim", self.attention_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "{} encoder heads do not divide dimension {}",
                self.encoder_heads, self.dim
            )));
        }
        if self.dim % self.channels != 0 {
            return Err(Error::Config(format!(
                "{} channels do not divide dimension {}",
                self.channels, self.dim
            )));
        }
        if self.vocab_size < 2 || self.topic_vocab_size < 2 || self.subtopic_vocab_size < 2 {
            return Err(Error::Config("vocabularies must include the two reserved ids".into()));
        }
        Ok(())
    }

    /// Rejects `expected` if any shape-determining field differs. Vocabulary
    /// sizes and the input variant are not compared.
    pub fn check_architecture(&self, expected: &ModelConfig) -> Result<()> {
        let fields = [
            ("dim", self.dim, expected.dim),
            ("encoder heads", self.encoder_heads, expected.encoder_heads),
            ("channels", self.channels, expected.channels),
            ("topic dim", self.topic_dim, expected.topic_dim),
            ("attention dim", self.attention_dim, expected.attention_dim),
            ("detector projection", self.detector_projection as usize, expected.detector_projection as usize),
        ];
        for (name, have, want) in fields {
            if have != want {
                return Err(Error::Config(format!("checkpoint has {name} {have}, configuration asks for {want}")));
            }
        }
        Ok(())
    }

    /// Per-channel input width `D / k`.
    pub fn interest_dim(&self) -> usize {
        self.dim / self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing_and_parts() {
        assert_eq!("t".parse::<InputVariant>().unwrap(), InputVariant::T);
        assert_eq!("tac".parse::<InputVariant>().unwrap(), InputVariant::Act);
        assert_eq!("ta".parse::<InputVariant>().unwrap(), InputVariant::At);
        assert!(matches!("c".parse::<InputVariant>(), Err(Error::Config(_))));
        assert!(matches!("x".parse::<InputVariant>(), Err(Error::Config(_))));
        let t = InputVariant::T;
        assert!(t.uses_title() && !t.uses_abstract() && !t.uses_categories());
        for v in InputVariant::ALL {
            assert!(v.uses_title() || v.uses_abstract());
            assert_eq!(v.as_str().parse::<InputVariant>().unwrap(), v);
        }
    }
}
