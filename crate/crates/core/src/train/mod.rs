//! Mini-batch training with sampled negatives, validation-AUC model
//! selection and checkpointing.

mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use optim::{Optimizer, OptimizerKind, BETA1, BETA2, EPSILON};

use crate::data::{build_batch, encode_corpus, split_validation, BatchMode, BatchRow, EncodedCorpus, Impression, NewsRecord, SkipCounts, Vocabularies};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::head::{nll_loss_tape, Reduction};
use crate::model::{forward_row, InputVariant, ModelConfig, ModelParams, NewsCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub encoder_heads: usize,
    pub channels: usize,
    pub topic_dim: usize,
    pub attention_dim: usize,
    pub detector_projection: bool,
    pub variant: InputVariant,
    pub learning_rate: f64,
    pub negatives: usize,
    /// Positives per mini-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub reduction: Reduction,
    pub freeze_embeddings: bool,
    pub validation_fraction: f64,
    pub title_len: usize,
    pub abstract_len: usize,
    pub history_len: usize,
    pub min_word_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            encoder_heads: 15,
            channels: 6,
            topic_dim: 100,
            attention_dim: 200,
            detector_projection: false,
            variant: InputVariant::Act,
            learning_rate: 1e-4,
            negatives: 4,
            batch_size: 64,
            max_epochs: 10,
            patience: 3,
            max_steps: None,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            reduction: Reduction::Sum,
            freeze_embeddings: false,
            validation_fraction: 0.1,
            title_len: 20,
            abstract_len: 50,
            history_len: 50,
            min_word_freq: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dim % self.channels != 0 {
            return Err(Error::Config(format!("{} channels do not divide dimension {}", self.channels, self.dim)));
        }
        if self.encoder_heads == 0 || self.dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "{} encoder heads do not divide dimension {}",
                self.encoder_heads, self.dim
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.negatives == 0 {
            return Err(Error::Config("need at least one negative per positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, vocabs: &Vocabularies) -> ModelConfig {
        ModelConfig {
            vocab_size: vocabs.words.len(),
            topic_vocab_size: vocabs.topics.len(),
            subtopic_vocab_size: vocabs.subtopics.len(),
            dim: self.dim,
            encoder_heads: self.encoder_heads,
            channels: self.channels,
            topic_dim: self.topic_dim,
            attention_dim: self.attention_dim,
            detector_projection: self.detector_projection,
            variant: self.variant,
        }
    }
}

/// Vocabularies, encoded corpus and architecture derived from training news.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocabs: Vocabularies,
    pub corpus: EncodedCorpus,
    pub model: ModelConfig,
}

impl Prepared {
    pub fn new(config: &TrainConfig, news: &[NewsRecord]) -> Result<Self> {
        config.validate()?;
        let vocabs = Vocabularies::build(news, config.min_word_freq);
        let corpus = encode_corpus(news, &vocabs, config.title_len, config.abstract_len);
        let model = config.model_config(&vocabs);
        model.validate()?;
        Ok(Self { vocabs, corpus, model })
    }

    pub fn meta(&self, config: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.clone(),
            vocabs: self.vocabs.clone(),
            title_len: config.title_len,
            abstract_len: config.abstract_len,
            history_len: config.history_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: Option<f64>,
}

/// `step,epoch,loss,val_auc` with an empty `val_auc` between validations.
pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::from("step,epoch,loss,val_auc\n");
    for h in history {
        let auc = h.val_auc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", h.step, h.epoch, h.loss, auc));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation AUC, or the final ones without validation.
    pub best: ModelParams,
    pub best_val_auc: Option<f64>,
    pub history: Vec<HistoryRecord>,
    pub skipped: SkipCounts,
    pub epochs: usize,
}

pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, mut params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.set_embeddings_trainable(!config.freeze_embeddings);
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params)?;
        Ok(Self {
            config: config.clone(),
            params,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            steps: 0,
        })
    }

    /// Continues from a saved optimizer state.
    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Loss of `rows` and, if `grads` is set, gradients for every tensor.
    fn loss_and_grads(&self, corpus: &EncodedCorpus, rows: &[BatchRow], grads: bool) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let (vars, flat) = self.params.bind_all(&mut tape);
        let mut cache = NewsCache::new();
        let mut groups = Vec::with_capacity(rows.len());
        for row in rows {
            groups.push(forward_row(&mut tape, &vars, self.params.config(), corpus, row, &mut cache)?.scores);
        }
        let loss = nll_loss_tape(&mut tape, &groups, self.config.reduction)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value}")));
        }
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, flat.iter().map(|&v| g.get(v).map(<[f64]>::to_vec)).collect()))
    }

    /// Loss of `rows` under the current parameters.
    pub fn loss(&self, corpus: &EncodedCorpus, rows: &[BatchRow]) -> Result<f64> {
        Ok(self.loss_and_grads(corpus, rows, false)?.0)
    }

    /// One optimizer update on `rows`; returns the loss before the update.
    pub fn step(&mut self, corpus: &EncodedCorpus, rows: &[BatchRow]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(corpus, rows, true)?;
        self.optimizer.apply(&mut self.params, &grads)?;
        self.steps += 1;
        Ok(loss)
    }

    /// Epoch loop with per-epoch validation and early stopping.
    pub fn fit(&mut self, corpus: &EncodedCorpus, impressions: &[Impression]) -> Result<TrainOutcome> {
        let (train_set, val_set) = split_validation(impressions, self.config.validation_fraction, &mut self.rng);
        let mut history = Vec::new();
        let mut best: Option<(f64, ModelParams)> = None;
        let mut stale = 0;
        let mut skipped = SkipCounts::default();
        let mut epochs = 0;
        let negatives = BatchMode::Train { negatives: self.config.negatives };
        'epochs: for epoch in 0..self.config.max_epochs {
            let mut batch = build_batch(&train_set, corpus, self.config.history_len, negatives, &mut self.rng)?;
            if batch.rows.is_empty() {
                return Err(Error::Config("no trainable impressions (each needs a click, a non-click and a history)".into()));
            }
            skipped = batch.skipped.clone();
            batch.rows.shuffle(&mut self.rng);
            epochs = epoch + 1;
            for chunk in batch.rows.chunks(self.config.batch_size) {
                if self.config.max_steps.is_some_and(|m| self.steps >= m) {
                    break;
                }
                let loss = self.step(corpus, chunk)?;
                history.push(HistoryRecord {
                    step: self.steps,
                    epoch,
                    loss,
                    val_auc: None,
                });
            }
            if !val_set.is_empty() {
                let auc = match evaluate(&self.params, &val_set, corpus, self.config.history_len) {
                    Ok(report) => Some(report.auc),
                    Err(Error::MetricUndefined(_)) => None,
                    Err(e) => return Err(e),
                };
                if let Some(last) = history.last_mut() {
                    last.val_auc = auc;
                }
                if let Some(auc) = auc {
                    if best.as_ref().is_none_or(|(b, _)| auc > *b) {
                        best = Some((auc, self.params.clone()));
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= self.config.patience {
                            break 'epochs;
                        }
                    }
                }
            }
            if self.config.max_steps.is_some_and(|m| self.steps >= m) {
                break;
            }
        }
        let (best_val_auc, best) = match best {
            Some((auc, params)) => (Some(auc), params),
            None => (None, self.params.clone()),
        };
        Ok(TrainOutcome {
            best,
            best_val_auc,
            history,
            skipped,
            epochs,
        })
    }
}

/// Builds vocabularies and parameters from `news`, then trains on `impressions`.
/// `words` may supply pre-trained embeddings for the built vocabulary.
pub fn train(
    config: &TrainConfig,
    news: &[NewsRecord],
    impressions: &[Impression],
    words: impl FnOnce(&Vocabularies) -> Result<Option<crate::diffcore::Tensor>>,
) -> Result<(Prepared, TrainOutcome)> {
    if impressions.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let prepared = Prepared::new(config, news)?;
    let table = words(&prepared.vocabs)?;
    let params = ModelParams::init(&prepared.model, table, config.seed)?;
    let mut trainer = Trainer::new(config, params)?;
    let outcome = trainer.fit(&prepared.corpus, impressions)?;
    Ok((prepared, outcome))
}
