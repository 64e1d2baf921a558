//! Readers for the MIND `news.tsv` and `behaviors.tsv` layouts.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One parsed row of `news.tsv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsRecord {
    pub news_id: String,
    pub topic: String,
    pub subtopic: String,
    pub title_tokens: Vec<String>,
    pub abstract_tokens: Vec<String>,
    /// Set when the title produced no tokens.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub news_id: String,
    pub clicked: bool,
}

/// One row of `behaviors.tsv`: a click session plus the labelled candidates shown next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub history: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.clicked)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| !c.clicked)
    }
}

/// Lowercases and splits into word runs; each punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_news_tsv(path: impl AsRef<Path>) -> Result<Vec<NewsRecord>> {
    let path = path.as_ref();
    parse_news_str(&read(path)?, path)
}

pub fn parse_news_str(content: &str, source: &Path) -> Result<Vec<NewsRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message: format!("expected 8 tab-separated columns, found {}", cols.len()),
            });
        }
        let news_id = cols[0].trim().to_string();
        if !seen.insert(news_id.clone()) {
            return Err(Error::Corpus(format!(
                "duplicate news id {news_id} at {}:{}",
                source.display(),
                i + 1
            )));
        }
        let title_tokens = tokenize(cols[3]);
        records.push(NewsRecord {
            news_id,
            topic: cols[1].trim().to_string(),
            subtopic: cols[2].trim().to_string(),
            degenerate: title_tokens.is_empty(),
            title_tokens,
            abstract_tokens: tokenize(cols[4]),
        });
    }
    Ok(records)
}

pub fn parse_behaviors_tsv(path: impl AsRef<Path>) -> Result<Vec<Impression>> {
    let path = path.as_ref();
    parse_behaviors_str(&read(path)?, path)
}

pub fn parse_behaviors_str(content: &str, source: &Path) -> Result<Vec<Impression>> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(
                i + 1,
                format!("expected 5 tab-separated columns, found {}", cols.len()),
            ));
        }
        let history = cols[3].split_whitespace().map(str::to_string).collect();
        let candidates = cols[4]
            .split_whitespace()
            .map(|tok| {
                let (id, label) = tok
                    .rsplit_once('-')
                    .ok_or_else(|| err(i + 1, format!("candidate {tok:?} lacks a -0/-1 label")))?;
                let clicked = match label {
                    "1" => true,
                    "0" => false,
                    _ => return Err(err(i + 1, format!("candidate {tok:?} has label {label:?}"))),
                };
                Ok(Candidate {
                    news_id: id.to_string(),
                    clicked,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if candidates.is_empty() {
            return Err(err(i + 1, "impression has no candidates".into()));
        }
        out.push(Impression {
            impression_id: cols[0].trim().to_string(),
            user_id: cols[1].trim().to_string(),
            history,
            candidates,
        });
    }
    Ok(out)
}

/// Serializes records back to the 8-column layout (url and entity columns left empty).
pub fn news_to_tsv(records: &[NewsRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{}\t{}\t{}\t{}\t{}\t\t\t\n",
                r.news_id,
                r.topic,
                r.subtopic,
                r.title_tokens.join(" "),
                r.abstract_tokens.join(" ")
            )
        })
        .collect()
}

pub fn behaviors_to_tsv(impressions: &[Impression]) -> String {
    impressions
        .iter()
        .map(|imp| {
            let cands: Vec<String> = imp
                .candidates
                .iter()
                .map(|c| format!("{}-{}", c.news_id, u8::from(c.clicked)))
                .collect();
            format!(
                "{}\t{}\t\t{}\t{}\n",
                imp.impression_id,
                imp.user_id,
                imp.history.join(" "),
                cands.join(" ")
            )
        })
        .collect()
}
