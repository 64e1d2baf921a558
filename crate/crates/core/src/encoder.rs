//! News encoder: title and abstract through multi-head self-attention and
//! additive pooling, topic and subtopic through linear maps, and a second
//! additive attention fusing the four part vectors into one news vector.

use crate::data::EncodedNews;
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Additive, Category, Encoder, InputVariant, SelfAttention, TextEncoder};

/// Projects `x` (`L × D`) to per-head queries, keys and values, attends,
/// and applies the output map if present.
pub fn multi_head_self_attention(tape: &mut Tape<'_>, x: Var, mask: &[bool], p: &SelfAttention<Var>, heads: usize) -> Result<Var> {
    let q = tape.matmul(x, p.query)?;
    let k = tape.matmul(x, p.key)?;
    let v = tape.matmul(x, p.value)?;
    let out = tape.multi_head_attention(q, k, v, mask, heads)?;
    match p.output {
        Some(o) => tape.matmul(out, o),
        None => Ok(out),
    }
}

/// Word embeddings of `ids` refined by multi-head self-attention (`L × D`).
/// Masked positions are not attended to and come back as zero rows.
pub fn self_attend_text(tape: &mut Tape<'_>, ids: &[usize], mask: &[bool], words: Var, p: &SelfAttention<Var>, heads: usize) -> Result<Var> {
    let d = tape.shape(words)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide dimension {d}")));
    }
    let e = tape.embedding_lookup(words, ids)?;
    multi_head_self_attention(tape, e, mask, p, heads)
}

/// Attention weights `α = softmax_mask(qᵀ tanh(h_l·V + b))` over the rows of `h`.
pub fn additive_weights(tape: &mut Tape<'_>, h: Var, mask: &[bool], p: &Additive<Var>) -> Result<Var> {
    let proj = tape.matmul(h, p.proj)?;
    let proj = tape.add_bias(proj, p.bias)?;
    let act = tape.tanh(proj);
    let q = p.query_col(tape)?;
    let scores = tape.matmul(act, q)?;
    let n = tape.shape(h)[0];
    let scores = tape.reshape(scores, vec![n])?;
    tape.softmax(scores, Some(mask))
}

/// `Σ_l α_l h_l` with `α` from [`additive_weights`].
pub fn additive_attention(tape: &mut Tape<'_>, h: Var, mask: &[bool], p: &Additive<Var>) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Degenerate("additive attention over all-masked rows".into()));
    }
    let alpha = additive_weights(tape, h, mask, p)?;
    // αᵀ·H as a vector-matrix product.
    tape.matmul(alpha, h)
}

impl Additive<Var> {
    /// The query vector as an `A × 1` column.
    fn query_col(&self, tape: &mut Tape<'_>) -> Result<Var> {
        let a = tape.shape(self.query)[0];
        tape.reshape(self.query, vec![a, 1])
    }
}

/// Affine map of a looked-up category embedding, no nonlinearity.
pub fn encode_topic(tape: &mut Tape<'_>, id: usize, p: &Category<Var>) -> Result<Var> {
    let e = tape.embedding_lookup(p.table, &[id])?;
    let dt = tape.shape(p.table)[1];
    let e = tape.reshape(e, vec![dt])?;
    let y = tape.matmul(e, p.weight)?;
    tape.add_bias(y, p.bias)
}

fn encode_text(tape: &mut Tape<'_>, ids: &[usize], mask: &[bool], words: Var, p: &TextEncoder<Var>, heads: usize) -> Result<Var> {
    let h = self_attend_text(tape, ids, mask, words, &p.attention, heads)?;
    additive_attention(tape, h, mask, &p.pool)
}

/// Part vectors `[title, abstract, topic, subtopic]` before fusion;
/// `None` where the part is empty or excluded by the variant.
pub fn encode_parts(tape: &mut Tape<'_>, news: &EncodedNews, p: &Encoder<Var>, heads: usize, variant: InputVariant) -> Result<[Option<Var>; 4]> {
    let title = if variant.uses_title() && news.has_title() {
        Some(encode_text(tape, &news.title_ids, &news.title_mask, p.words, &p.title, heads)?)
    } else {
        None
    };
    let abstract_ = if variant.uses_abstract() && news.has_abstract() {
        Some(encode_text(tape, &news.abstract_ids, &news.abstract_mask, p.words, &p.abstract_, heads)?)
    } else {
        None
    };
    let (topic, subtopic) = if variant.uses_categories() {
        (
            Some(encode_topic(tape, news.topic_id, &p.topic)?),
            Some(encode_topic(tape, news.subtopic_id, &p.subtopic)?),
        )
    } else {
        (None, None)
    };
    Ok([title, abstract_, topic, subtopic])
}

/// Stacks the four parts (zero rows for missing ones) and fuses them by
/// masked additive attention.
pub fn fuse_parts(tape: &mut Tape<'_>, parts: &[Option<Var>; 4], fusion: &Additive<Var>) -> Result<Var> {
    let d = parts
        .iter()
        .flatten()
        .map(|&v| tape.shape(v)[0])
        .next()
        .ok_or_else(|| Error::Degenerate("news has no usable title or abstract".into()))?;
    let mut rows = Vec::with_capacity(4);
    let mut mask = [false; 4];
    for (i, part) in parts.iter().enumerate() {
        match part {
            Some(v) => {
                rows.push(*v);
                mask[i] = true;
            }
            None => rows.push(tape.constant(vec![d], vec![0.0; d])?),
        }
    }
    let stacked = tape.stack(&rows)?;
    additive_attention(tape, stacked, &mask, fusion)
}

/// Full news encoder: `n ∈ ℝ^D`.
pub fn encode_news(tape: &mut Tape<'_>, news: &EncodedNews, p: &Encoder<Var>, heads: usize, variant: InputVariant) -> Result<Var> {
    let has_text = (variant.uses_title() && news.has_title()) || (variant.uses_abstract() && news.has_abstract());
    if !has_text {
        return Err(Error::Degenerate(format!(
            "news has no usable text for input variant {variant}"
        )));
    }
    let parts = encode_parts(tape, news, p, heads, variant)?;
    fuse_parts(tape, &parts, &p.fusion)
}
