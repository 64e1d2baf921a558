//! MIND-format ingestion, vocabularies, pre-trained embeddings and batching.

mod batch;
mod embeddings;
mod mind;
mod vocab;

pub use batch::{
    build_batch, encode_corpus, pad_history, sample_negatives, split_validation, BatchMode, BatchRow, EncodedCorpus,
    EncodedNews, SessionBatch, SkipCounts,
};
pub use embeddings::{load_pretrained_embeddings, random_embeddings};
pub use mind::{
    behaviors_to_tsv, news_to_tsv, parse_behaviors_str, parse_behaviors_tsv, parse_news_str, parse_news_tsv, tokenize,
    Candidate, Impression, NewsRecord,
};
pub use vocab::{Vocabularies, Vocabulary, PAD_ID, UNK_ID};
