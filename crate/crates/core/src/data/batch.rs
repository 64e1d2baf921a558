//! Fixed-length numeric encodings and session batches.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::mind::{Impression, NewsRecord};
use super::vocab::{Vocabularies, PAD_ID};
use crate::error::{Error, Result};

/// Token-id form of one news item. Padding slots have id 0 and mask `false`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedNews {
    pub title_ids: Vec<usize>,
    pub title_mask: Vec<bool>,
    pub abstract_ids: Vec<usize>,
    pub abstract_mask: Vec<bool>,
    pub topic_id: usize,
    pub subtopic_id: usize,
}

impl EncodedNews {
    fn padding(title_len: usize, abstract_len: usize) -> Self {
        Self {
            title_ids: vec![PAD_ID; title_len],
            title_mask: vec![false; title_len],
            abstract_ids: vec![PAD_ID; abstract_len],
            abstract_mask: vec![false; abstract_len],
            topic_id: PAD_ID,
            subtopic_id: PAD_ID,
        }
    }

    pub fn has_title(&self) -> bool {
        self.title_mask.iter().any(|&m| m)
    }

    pub fn has_abstract(&self) -> bool {
        self.abstract_mask.iter().any(|&m| m)
    }
}

fn pad_tokens(tokens: &[String], len: usize, lookup: impl Fn(&str) -> usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = vec![PAD_ID; len];
    let mut mask = vec![false; len];
    for (i, t) in tokens.iter().take(len).enumerate() {
        ids[i] = lookup(t);
        mask[i] = true;
    }
    (ids, mask)
}

/// Encoded news indexed by position; slot 0 is the all-padding news item
/// used to fill short histories.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    news: Vec<EncodedNews>,
    news_ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl EncodedCorpus {
    pub fn get(&self, i: usize) -> &EncodedNews {
        &self.news[i]
    }

    pub fn position(&self, news_id: &str) -> Option<usize> {
        self.index.get(news_id).copied()
    }

    pub fn by_id(&self, news_id: &str) -> Option<&EncodedNews> {
        self.position(news_id).map(|i| &self.news[i])
    }

    pub fn news_id(&self, i: usize) -> &str {
        &self.news_ids[i]
    }

    /// Number of real news items (excludes the padding slot).
    pub fn len(&self) -> usize {
        self.news.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn require(&self, news_id: &str, impression: &str) -> Result<usize> {
        self.position(news_id).ok_or_else(|| {
            Error::Data(format!("impression {impression} references unknown news {news_id}"))
        })
    }
}

/// Encodes titles to `title_len` and abstracts to `abstract_len` tokens,
/// keeping the first tokens and right-padding.
pub fn encode_corpus(records: &[NewsRecord], vocabs: &Vocabularies, title_len: usize, abstract_len: usize) -> EncodedCorpus {
    let mut news = vec![EncodedNews::padding(title_len, abstract_len)];
    let mut news_ids = vec![String::new()];
    let mut index = HashMap::with_capacity(records.len());
    for r in records {
        let (title_ids, title_mask) = pad_tokens(&r.title_tokens, title_len, |t| vocabs.words.id(t));
        let (abstract_ids, abstract_mask) = pad_tokens(&r.abstract_tokens, abstract_len, |t| vocabs.words.id(t));
        index.insert(r.news_id.clone(), news.len());
        news_ids.push(r.news_id.clone());
        news.push(EncodedNews {
            title_ids,
            title_mask,
            abstract_ids,
            abstract_mask,
            topic_id: vocabs.topics.id(&r.topic),
            subtopic_id: vocabs.subtopics.id(&r.subtopic),
        });
    }
    EncodedCorpus {
        news,
        news_ids,
        index,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// One row per clicked candidate: the positive followed by `negatives` sampled non-clicks.
    Train { negatives: usize },
    /// One row per impression with every candidate in source order.
    Eval,
}

/// One scored unit: a padded session plus the candidates to score against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRow {
    pub impression_id: String,
    /// Corpus positions, left-padded with 0 to the history length.
    pub history: Vec<usize>,
    pub history_mask: Vec<bool>,
    /// Corpus positions. In train rows the first entry is the positive.
    pub candidates: Vec<usize>,
    pub labels: Vec<bool>,
}

impl BatchRow {
    pub fn session(&self) -> impl Iterator<Item = usize> + '_ {
        self.history
            .iter()
            .zip(&self.history_mask)
            .filter(|(_, &m)| m)
            .map(|(&h, _)| h)
    }

    pub fn has_history(&self) -> bool {
        self.history_mask.iter().any(|&m| m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub no_positive: usize,
    pub no_negative: usize,
    pub empty_history: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SessionBatch {
    pub rows: Vec<BatchRow>,
    pub skipped: SkipCounts,
}

/// Most recent `history_len` clicks, left-padded.
pub fn pad_history(history: &[usize], history_len: usize) -> (Vec<usize>, Vec<bool>) {
    let recent = &history[history.len().saturating_sub(history_len)..];
    let pad = history_len - recent.len();
    let mut ids = vec![PAD_ID; pad];
    ids.extend_from_slice(recent);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat(true).take(recent.len()));
    (ids, mask)
}

/// Turns impressions into rows. In train mode impressions without a click,
/// without a non-click, or with an empty history are skipped and counted.
pub fn build_batch<R: Rng>(
    impressions: &[Impression],
    corpus: &EncodedCorpus,
    history_len: usize,
    mode: BatchMode,
    rng: &mut R,
) -> Result<SessionBatch> {
    if let BatchMode::Train { negatives: 0 } = mode {
        return Err(Error::Config("train batches need at least one negative per positive".into()));
    }
    let mut batch = SessionBatch::default();
    for imp in impressions {
        let history = imp
            .history
            .iter()
            .map(|id| corpus.require(id, &imp.impression_id))
            .collect::<Result<Vec<_>>>()?;
        let cands = imp
            .candidates
            .iter()
            .map(|c| Ok((corpus.require(&c.news_id, &imp.impression_id)?, c.clicked)))
            .collect::<Result<Vec<_>>>()?;
        let (hist_ids, hist_mask) = pad_history(&history, history_len);
        match mode {
            BatchMode::Eval => batch.rows.push(BatchRow {
                impression_id: imp.impression_id.clone(),
                history: hist_ids,
                history_mask: hist_mask,
                candidates: cands.iter().map(|c| c.0).collect(),
                labels: cands.iter().map(|c| c.1).collect(),
            }),
            BatchMode::Train { negatives } => {
                let pos: Vec<usize> = cands.iter().filter(|c| c.1).map(|c| c.0).collect();
                let neg: Vec<usize> = cands.iter().filter(|c| !c.1).map(|c| c.0).collect();
                if pos.is_empty() {
                    batch.skipped.no_positive += 1;
                    continue;
                }
                if neg.is_empty() {
                    batch.skipped.no_negative += 1;
                    continue;
                }
                if history.is_empty() || history_len == 0 {
                    batch.skipped.empty_history += 1;
                    continue;
                }
                for p in pos {
                    let sampled = sample_negatives(&neg, negatives, rng);
                    let mut candidates = Vec::with_capacity(negatives + 1);
                    candidates.push(p);
                    candidates.extend(sampled);
                    let mut labels = vec![false; negatives + 1];
                    labels[0] = true;
                    batch.rows.push(BatchRow {
                        impression_id: imp.impression_id.clone(),
                        history: hist_ids.clone(),
                        history_mask: hist_mask.clone(),
                        candidates,
                        labels,
                    });
                }
            }
        }
    }
    Ok(batch)
}

/// `k` draws from `pool`: without replacement when the pool is large
/// enough, otherwise with replacement.
pub fn sample_negatives<R: Rng>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= k {
        pool.choose_multiple(rng, k).copied().collect()
    } else {
        (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Seeded split of `items` into (train, validation) with `fraction` held out.
pub fn split_validation<T: Clone, R: Rng>(items: &[T], fraction: f64, rng: &mut R) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let n_valid = ((items.len() as f64) * fraction).round() as usize;
    let (valid, train) = order.split_at(n_valid.min(items.len()));
    let mut train = train.to_vec();
    let mut valid = valid.to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    (
        train.into_iter().map(|i| items[i].clone()).collect(),
        valid.into_iter().map(|i| items[i].clone()).collect(),
    )
}
