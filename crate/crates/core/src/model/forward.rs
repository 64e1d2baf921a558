use std::collections::HashMap;

use super::config::ModelConfig;
use super::params::{Layout, ModelParams};
use crate::data::{BatchRow, EncodedCorpus};
use crate::diffcore::{Tape, Var};
use crate::encoder::encode_news;
use crate::error::{Error, Result};
use crate::pin::session_vector;

/// Session vector and raw candidate scores for one row.
#[derive(Debug, Clone, Copy)]
pub struct RowOutput {
    pub session: Var,
    /// Length-`C` vector in candidate order.
    pub scores: Var,
}

/// News vectors encoded on the current tape, keyed by corpus position.
/// `None` marks news without usable text under the configured variant.
pub type NewsCache = HashMap<usize, Option<Var>>;

fn news_var(tape: &mut Tape<'_>, vars: &Layout<Var>, config: &ModelConfig, corpus: &EncodedCorpus, pos: usize, cache: &mut NewsCache) -> Result<Option<Var>> {
    if let Some(v) = cache.get(&pos) {
        return Ok(*v);
    }
    let v = if pos == 0 {
        None
    } else {
        match encode_news(tape, corpus.get(pos), &vars.encoder, config.encoder_heads, config.variant) {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        }
    };
    cache.insert(pos, v);
    Ok(v)
}

/// Scores `candidates` against the session built from `history`, given a
/// way to obtain each news vector.
fn score_session(
    tape: &mut Tape<'_>,
    vars: &Layout<Var>,
    dim: usize,
    history: &[Option<Var>],
    candidates: &[Option<Var>],
) -> Result<RowOutput> {
    let clicked: Vec<Var> = history.iter().flatten().copied().collect();
    let session = if clicked.is_empty() {
        tape.constant(vec![dim], vec![0.0; dim])?
    } else {
        let stacked = tape.stack(&clicked)?;
        session_vector(tape, stacked, &vec![true; clicked.len()], &vars.pin)?
    };
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        rows.push(match c {
            Some(v) => *v,
            None => tape.constant(vec![dim], vec![0.0; dim])?,
        });
    }
    let cands = tape.stack(&rows)?;
    let col = tape.reshape(session, vec![dim, 1])?;
    let scores = tape.matmul(cands, col)?;
    let scores = tape.reshape(scores, vec![rows.len()])?;
    Ok(RowOutput { session, scores })
}

/// Full forward pass for one row, encoding news through `cache` so that
/// news shared across rows of a batch is encoded once.
pub fn forward_row(
    tape: &mut Tape<'_>,
    vars: &Layout<Var>,
    config: &ModelConfig,
    corpus: &EncodedCorpus,
    row: &BatchRow,
    cache: &mut NewsCache,
) -> Result<RowOutput> {
    let history = row
        .session()
        .map(|p| news_var(tape, vars, config, corpus, p, cache))
        .collect::<Result<Vec<_>>>()?;
    let candidates = row
        .candidates
        .iter()
        .map(|&p| news_var(tape, vars, config, corpus, p, cache))
        .collect::<Result<Vec<_>>>()?;
    score_session(tape, vars, config.dim, &history, &candidates)
}

/// Every news vector of the corpus, each computed on its own tape.
/// Entry 0 (padding) and news without usable text are `None`.
pub fn encode_corpus_vectors(params: &ModelParams, corpus: &EncodedCorpus) -> Result<Vec<Option<Vec<f64>>>> {
    let config = params.config();
    let mut out = Vec::with_capacity(corpus.len());
    for pos in 0..=corpus.len() {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut cache = NewsCache::new();
        let v = news_var(&mut tape, &vars, config, corpus, pos, &mut cache)?;
        out.push(v.map(|v| tape.value(v).to_vec()));
    }
    Ok(out)
}

/// Raw scores of a row from precomputed news vectors.
pub fn score_row(params: &ModelParams, vectors: &[Option<Vec<f64>>], row: &BatchRow) -> Result<Vec<f64>> {
    let dim = params.config().dim;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let leaf = |tape: &mut Tape<'_>, p: usize| -> Result<Option<Var>> {
        match vectors.get(p) {
            Some(Some(v)) => Ok(Some(tape.constant(vec![dim], v.clone())?)),
            Some(None) => Ok(None),
            None => Err(Error::Data(format!("news position {p} outside the encoded corpus"))),
        }
    };
    let history = row.session().map(|p| leaf(&mut tape, p)).collect::<Result<Vec<_>>>()?;
    let candidates = row.candidates.iter().map(|&p| leaf(&mut tape, p)).collect::<Result<Vec<_>>>()?;
    let out = score_session(&mut tape, &vars, dim, &history, &candidates)?;
    Ok(tape.value(out.scores).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_corpus, NewsRecord, Vocabularies};
    use crate::model::tiny_config;

    fn corpus() -> (EncodedCorpus, ModelConfig) {
        let rec = |id: &str, topic: &str, title: &[&str], abs: &[&str]| NewsRecord {
            news_id: id.into(),
            topic: topic.into(),
            subtopic: format!("{topic}-sub"),
            title_tokens: title.iter().map(|s| s.to_string()).collect(),
            abstract_tokens: abs.iter().map(|s| s.to_string()).collect(),
            degenerate: title.is_empty() && abs.is_empty(),
        };
        let records = vec![
            rec("N1", "a", &["x", "y"], &["z"]),
            rec("N2", "b", &["y", "w"], &[]),
            rec("N3", "a", &["v"], &["x", "v"]),
            rec("N4", "b", &[], &[]),
        ];
        let vocabs = Vocabularies::build(&records, 1);
        let cfg = ModelConfig {
            vocab_size: vocabs.words.len(),
            topic_vocab_size: vocabs.topics.len(),
            subtopic_vocab_size: vocabs.subtopics.len(),
            ..tiny_config()
        };
        (encode_corpus(&records, &vocabs, 3, 3), cfg)
    }

    fn row(history: &[usize], candidates: &[usize]) -> BatchRow {
        let (h, m) = crate::data::pad_history(history, 3);
        BatchRow {
            impression_id: "1".into(),
            history: h,
            history_mask: m,
            candidates: candidates.to_vec(),
            labels: vec![false; candidates.len()],
        }
    }

    #[test]
    fn cached_and_precomputed_scores_agree() {
        let (corpus, cfg) = corpus();
        let params = ModelParams::init(&cfg, None, 4).unwrap();
        let r = row(&[1, 2], &[3, 1, 4]);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut cache = NewsCache::new();
        let out = forward_row(&mut tape, &vars, &cfg, &corpus, &r, &mut cache).unwrap();
        // News 1 appears in both history and candidates but is encoded once.
        assert_eq!(cache.len(), 4);
        let vectors = encode_corpus_vectors(&params, &corpus).unwrap();
        assert!(vectors[0].is_none() && vectors[4].is_none());
        let direct = score_row(&params, &vectors, &r).unwrap();
        for (a, b) in tape.value(out.scores).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        // Text-free news scores zero.
        assert_eq!(direct[2], 0.0);
    }

    #[test]
    fn empty_history_scores_zero() {
        let (corpus, cfg) = corpus();
        let params = ModelParams::init(&cfg, None, 4).unwrap();
        let vectors = encode_corpus_vectors(&params, &corpus).unwrap();
        let scores = score_row(&params, &vectors, &row(&[], &[1, 2])).unwrap();
        assert_eq!(scores, vec![0.0, 0.0]);
        let scores = score_row(&params, &vectors, &row(&[4], &[1, 2])).unwrap();
        assert_eq!(scores, vec![0.0, 0.0]);
    }
}
