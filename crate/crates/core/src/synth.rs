//! Synthetic multi-interest sessions with disjoint per-topic vocabularies.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{behaviors_to_tsv, news_to_tsv, Candidate, Impression, NewsRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_topics: usize,
    pub vocab_per_topic: usize,
    /// Interests (topics) mixed into each session.
    pub interests: usize,
    pub sessions: usize,
    pub news_per_topic: usize,
    pub title_len: usize,
    pub history_len: usize,
    /// Candidates per impression; one is clicked.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_topics: 12,
            vocab_per_topic: 20,
            interests: 3,
            sessions: 5000,
            news_per_topic: 40,
            title_len: 4,
            history_len: 9,
            candidates: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("topics", self.num_topics),
            ("vocabulary per topic", self.vocab_per_topic),
            ("interests", self.interests),
            ("sessions", self.sessions),
            ("news per topic", self.news_per_topic),
            ("title length", self.title_len),
            ("history length", self.history_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.interests > self.num_topics {
            return Err(Error::Config(format!(
                "{} interests per session exceed {} topics",
                self.interests, self.num_topics
            )));
        }
        if self.title_len > self.vocab_per_topic {
            return Err(Error::Config(format!(
                "titles of {} distinct tokens need at least that many tokens per topic, got {}",
                self.title_len, self.vocab_per_topic
            )));
        }
        if self.candidates < 2 {
            return Err(Error::Config("impressions need at least two candidates".into()));
        }
        if self.interests == self.num_topics {
            return Err(Error::Config("negatives need at least one topic outside the session".into()));
        }
        let per_topic = self.history_len.div_ceil(self.interests) + 1;
        if self.news_per_topic < per_topic {
            return Err(Error::Config(format!(
                "{} news per topic cannot supply {per_topic} distinct items per session topic",
                self.news_per_topic
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub news: Vec<NewsRecord>,
    pub impressions: Vec<Impression>,
}

impl SynthCorpus {
    /// Writes `news.tsv` and `behaviors.tsv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let news = dir.join("news.tsv");
        fs::write(&news, news_to_tsv(&self.news)).map_err(|e| Error::io(&news, e))?;
        let behaviors = dir.join("behaviors.tsv");
        fs::write(&behaviors, behaviors_to_tsv(&self.impressions)).map_err(|e| Error::io(&behaviors, e))
    }
}

pub fn topic_token(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

fn news_id(topic: usize, i: usize) -> String {
    format!("N{topic}x{i}")
}

/// Generates the corpus. Session `n` interleaves its topics round-robin;
/// its clicked candidate comes from one of those topics and the rest from
/// topics outside the session.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut news = Vec::with_capacity(cfg.num_topics * cfg.news_per_topic);
    for topic in 0..cfg.num_topics {
        for i in 0..cfg.news_per_topic {
            let title = rand::seq::index::sample(&mut rng, cfg.vocab_per_topic, cfg.title_len)
                .into_iter()
                .map(|j| topic_token(topic, j))
                .collect();
            news.push(NewsRecord {
                news_id: news_id(topic, i),
                topic: format!("topic{topic}"),
                subtopic: format!("topic{topic}-{}", i % 2),
                title_tokens: title,
                abstract_tokens: Vec::new(),
                degenerate: false,
            });
        }
    }

    let topics: Vec<usize> = (0..cfg.num_topics).collect();
    let mut impressions = Vec::with_capacity(cfg.sessions);
    for n in 0..cfg.sessions {
        let chosen: Vec<usize> = topics.choose_multiple(&mut rng, cfg.interests).copied().collect();
        let mut used: Vec<Vec<usize>> = vec![Vec::new(); cfg.interests];
        let mut history = Vec::with_capacity(cfg.history_len);
        for t in 0..cfg.history_len {
            let slot = t % cfg.interests;
            let item = pick_unused(&mut rng, cfg.news_per_topic, &used[slot]);
            used[slot].push(item);
            history.push(news_id(chosen[slot], item));
        }
        let slot = rng.gen_range(0..cfg.interests);
        let positive = news_id(chosen[slot], pick_unused(&mut rng, cfg.news_per_topic, &used[slot]));
        let outside: Vec<usize> = topics.iter().copied().filter(|t| !chosen.contains(t)).collect();
        let mut candidates: Vec<Candidate> = (1..cfg.candidates)
            .map(|_| {
                let topic = *outside.choose(&mut rng).expect("validated: a topic lies outside the session");
                Candidate {
                    news_id: news_id(topic, rng.gen_range(0..cfg.news_per_topic)),
                    clicked: false,
                }
            })
            .collect();
        candidates.push(Candidate { news_id: positive, clicked: true });
        candidates.shuffle(&mut rng);
        impressions.push(Impression {
            impression_id: (n + 1).to_string(),
            user_id: format!("U{n}"),
            history,
            candidates,
        });
    }
    Ok(SynthCorpus { news, impressions })
}

fn pick_unused<R: Rng>(rng: &mut R, n: usize, used: &[usize]) -> usize {
    let taken: HashSet<usize> = used.iter().copied().collect();
    let free: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
    free[rng.gen_range(0..free.len())]
}
