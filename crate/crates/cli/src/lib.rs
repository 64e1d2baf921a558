//! Commands behind the `mins` binary: train, eval, predict, ablate, synth.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mins_core::data::{
    encode_corpus, load_pretrained_embeddings, parse_behaviors_tsv, parse_news_tsv, split_validation, Impression,
    NewsRecord, Vocabularies,
};
use mins_core::diffcore::Tensor;
use mins_core::eval::{evaluate, rank_impressions, MetricsReport};
use mins_core::model::InputVariant;
use mins_core::synth::{generate, SynthConfig};
use mins_core::train::{history_csv, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
use mins_core::{Error, Result};

/// Process exit status for an error: 2 configuration, 3 data, 4 runtime.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Parse { .. }
        | Error::Corpus(_)
        | Error::Data(_)
        | Error::Io { .. }
        | Error::Load(_)
        | Error::OutOfVocabulary { .. } => 3,
        Error::Numeric(_) | Error::Degenerate(_) | Error::Dimension { .. } | Error::MetricUndefined(_) => 4,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mins", version, about = "Multi-interest session-based news recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint, loss history and metrics.
    Train(TrainArgs),
    /// Score a behaviors file with a checkpoint and report ranking metrics.
    Eval(EvalArgs),
    /// Write ranked candidates for every impression.
    Predict(PredictArgs),
    /// Train and evaluate over a grid of input variants and channel counts.
    Ablate(AblateArgs),
    /// Generate a synthetic multi-interest corpus in MIND format.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// news.tsv in MIND format.
    #[arg(long)]
    pub news: PathBuf,
    /// behaviors.tsv in MIND format.
    #[arg(long)]
    pub behaviors: PathBuf,
}

/// Overrides applied on top of the default (or `--config`) training setup.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// JSON file with training settings; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input parts: t, tc, a, ac, at or act.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Encoder self-attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub topic_dim: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub detector_projection: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Negatives per positive (K).
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Positives per mini-batch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Fraction of training impressions held out for model selection.
    #[arg(long)]
    pub validation: Option<f64>,
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// sum or mean.
    #[arg(long)]
    pub reduction: Option<String>,
    #[arg(long)]
    pub title_len: Option<usize>,
    #[arg(long)]
    pub abstract_len: Option<usize>,
    #[arg(long)]
    pub history_len: Option<usize>,
    #[arg(long)]
    pub min_word_freq: Option<usize>,
}

impl HyperArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set(&mut c.channels, self.channels);
        set(&mut c.encoder_heads, self.heads);
        set(&mut c.dim, self.dim);
        set(&mut c.topic_dim, self.topic_dim);
        set(&mut c.attention_dim, self.attention_dim);
        set(&mut c.learning_rate, self.lr);
        set(&mut c.negatives, self.negatives);
        set(&mut c.batch_size, self.batch);
        set(&mut c.max_epochs, self.epochs);
        set(&mut c.patience, self.patience);
        set(&mut c.validation_fraction, self.validation);
        set(&mut c.title_len, self.title_len);
        set(&mut c.abstract_len, self.abstract_len);
        set(&mut c.history_len, self.history_len);
        set(&mut c.min_word_freq, self.min_word_freq);
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if let Some(v) = &self.variant {
            c.variant = v.parse()?;
        }
        if let Some(o) = &self.optimizer {
            c.optimizer = o.parse()?;
        }
        if let Some(r) = &self.reduction {
            c.reduction = r.parse()?;
        }
        c.detector_projection |= self.detector_projection;
        c.freeze_embeddings |= self.freeze_embeddings;
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// GloVe-style text file with pre-trained word vectors.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate with a different input variant than the one trained.
    #[arg(long)]
    pub variant: Option<String>,
    /// Expected channel count; a mismatch with the checkpoint is an error.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Expected encoder heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Expected dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Also write the metrics as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub variant: Option<String>,
    /// Ranked output, one `impression_id<TAB>news_id<TAB>rank<TAB>score` row per candidate.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Held-out news.tsv; without it the test set is carved from --behaviors.
    #[arg(long, requires = "test_behaviors")]
    pub test_news: Option<PathBuf>,
    #[arg(long, requires = "test_news")]
    pub test_behaviors: Option<PathBuf>,
    /// Share of --behaviors held out for testing when no test files are given.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Comma-separated input variants; defaults to the configured one.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated channel counts; defaults to the configured one.
    #[arg(long, value_delimiter = ',')]
    pub channel_grid: Vec<usize>,
    /// Output directory for ablation.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub vocab_per_topic: Option<usize>,
    /// Interests mixed into each session.
    #[arg(long)]
    pub interests: Option<usize>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub news_per_topic: Option<usize>,
    #[arg(long)]
    pub title_len: Option<usize>,
    #[arg(long)]
    pub history_len: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn resolve(&self) -> SynthConfig {
        let mut c = SynthConfig::default();
        set(&mut c.num_topics, self.topics);
        set(&mut c.vocab_per_topic, self.vocab_per_topic);
        set(&mut c.interests, self.interests);
        set(&mut c.sessions, self.sessions);
        set(&mut c.news_per_topic, self.news_per_topic);
        set(&mut c.title_len, self.title_len);
        set(&mut c.history_len, self.history_len);
        set(&mut c.candidates, self.candidates);
        set(&mut c.seed, self.seed);
        c
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn load_data(data: &DataArgs) -> Result<(Vec<NewsRecord>, Vec<Impression>)> {
    Ok((parse_news_tsv(&data.news)?, parse_behaviors_tsv(&data.behaviors)?))
}

fn parse_variant(v: &Option<String>) -> Result<Option<InputVariant>> {
    v.as_deref().map(str::parse).transpose()
}

/// Loads a checkpoint, failing with a configuration error if it does not exist.
pub fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path)
}

fn word_table(
    path: Option<&Path>,
    dim: usize,
    seed: u64,
) -> impl FnOnce(&Vocabularies) -> Result<Option<Tensor>> + '_ {
    move |vocabs| {
        let Some(path) = path else { return Ok(None) };
        let (table, found) = load_pretrained_embeddings(path, &vocabs.words, dim, seed)?;
        eprintln!("embeddings: {found} of {} vocabulary words found in {}", vocabs.words.len(), path.display());
        Ok(Some(table))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub best_val_auc: Option<f64>,
    pub skipped_no_positive: usize,
    pub skipped_no_negative: usize,
    pub skipped_empty_history: usize,
}

/// Writes `model.ckpt`, `history.csv` and `train.json` into `--out`.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let config = args.hyper.resolve()?;
    let (news, impressions) = load_data(&args.data)?;
    create_dir(&args.out)?;
    let (prepared, outcome) = train(
        &config,
        &news,
        &impressions,
        word_table(args.embeddings.as_deref(), config.dim, config.seed),
    )?;
    save_checkpoint(args.out.join("model.ckpt"), &prepared.meta(&config), &outcome.best, None)?;
    write_file(&args.out.join("history.csv"), history_csv(&outcome.history))?;
    let summary = TrainSummary {
        config,
        epochs: outcome.epochs,
        steps: outcome.history.last().map_or(0, |h| h.step),
        final_loss: outcome.history.last().map(|h| h.loss),
        best_val_auc: outcome.best_val_auc,
        skipped_no_positive: outcome.skipped.no_positive,
        skipped_no_negative: outcome.skipped.no_negative,
        skipped_empty_history: outcome.skipped.empty_history,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&args.out.join("train.json"), json)?;
    Ok(summary)
}

/// Checkpoint plus news encoded with its stored vocabularies.
fn prepare_scoring(
    checkpoint: &Path,
    variant: &Option<String>,
    data: &DataArgs,
) -> Result<(Checkpoint, mins_core::data::EncodedCorpus, Vec<Impression>)> {
    let variant = parse_variant(variant)?;
    let mut ckpt = open_checkpoint(checkpoint)?;
    if let Some(v) = variant {
        ckpt.params.set_variant(v);
        ckpt.meta.model.variant = v;
    }
    let (news, impressions) = load_data(data)?;
    let m = &ckpt.meta;
    let corpus = encode_corpus(&news, &m.vocabs, m.title_len, m.abstract_len);
    Ok((ckpt, corpus, impressions))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    parse_variant(&args.variant)?;
    let (ckpt, corpus, impressions) = prepare_scoring(&args.checkpoint, &args.variant, &args.data)?;
    let got = &ckpt.meta.model;
    let mut expected = got.clone();
    set(&mut expected.channels, args.channels);
    set(&mut expected.encoder_heads, args.heads);
    set(&mut expected.dim, args.dim);
    got.check_architecture(&expected)?;
    let report = evaluate(&ckpt.params, &impressions, &corpus, ckpt.meta.history_len)?;
    if let Some(out) = &args.out {
        write_file(out, report.to_json() + "\n")?;
    }
    Ok(report)
}

/// Returns the number of rows written.
pub fn cmd_predict(args: &PredictArgs) -> Result<usize> {
    let (ckpt, corpus, impressions) = prepare_scoring(&args.checkpoint, &args.variant, &args.data)?;
    let results = rank_impressions(&ckpt.params, &impressions, &corpus, ckpt.meta.history_len)?;
    let mut out = String::new();
    let mut rows = 0;
    for (imp, r) in impressions.iter().zip(&results) {
        for (rank, &i) in r.order().iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", imp.impression_id, imp.candidates[i].news_id, rank + 1, r.scores[i]));
            rows += 1;
        }
    }
    write_file(&args.out, out)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: InputVariant,
    pub channels: usize,
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub best_val_auc: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,channels,auc,mrr,ndcg5,ndcg10,best_val_auc\n");
    for r in rows {
        let val = r.best_val_auc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.variant, r.channels, r.auc, r.mrr, r.ndcg5, r.ndcg10, val));
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<8}{:>9}{:>9}{:>9}{:>9}{:>9}\n", "variant", "channels", "AUC", "MRR", "nDCG@5", "nDCG@10");
    for r in rows {
        out.push_str(&format!(
            "{:<8}{:>9}{:>9.4}{:>9.4}{:>9.4}{:>9.4}\n",
            r.variant.as_str(),
            r.channels,
            r.auc,
            r.mrr,
            r.ndcg5,
            r.ndcg10
        ));
    }
    out
}

/// Trains one model per (variant, channels) pair with the shared seed and
/// evaluates each on the same test split. Writes `ablation.csv` into `--out`.
pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let base = args.hyper.resolve()?;
    let variants = if args.variants.is_empty() {
        vec![base.variant]
    } else {
        args.variants.iter().map(|v| v.parse()).collect::<Result<Vec<_>>>()?
    };
    let channels = if args.channel_grid.is_empty() { vec![base.channels] } else { args.channel_grid.clone() };
    let mut grid = Vec::new();
    for &variant in &variants {
        for &k in &channels {
            let config = TrainConfig { variant, channels: k, ..base.clone() };
            config.validate()?;
            grid.push(config);
        }
    }
    if !(0.0..1.0).contains(&args.test_fraction) {
        return Err(Error::Config(format!("test fraction must lie in [0, 1), got {}", args.test_fraction)));
    }

    let (news, impressions) = load_data(&args.data)?;
    let (train_set, test_set, test_news) = match (&args.test_news, &args.test_behaviors) {
        (Some(n), Some(b)) => (impressions, parse_behaviors_tsv(b)?, Some(parse_news_tsv(n)?)),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
            let (train_set, test_set) = split_validation(&impressions, args.test_fraction, &mut rng);
            (train_set, test_set, None)
        }
    };
    if test_set.is_empty() {
        return Err(Error::Config("ablation test set is empty".into()));
    }
    create_dir(&args.out)?;

    let mut rows = Vec::with_capacity(grid.len());
    for config in &grid {
        eprintln!("ablate: variant {} channels {}", config.variant, config.channels);
        let (prepared, outcome) = train(
            config,
            &news,
            &train_set,
            word_table(args.embeddings.as_deref(), config.dim, config.seed),
        )?;
        let corpus = match &test_news {
            Some(n) => encode_corpus(n, &prepared.vocabs, config.title_len, config.abstract_len),
            None => prepared.corpus,
        };
        let report = evaluate(&outcome.best, &test_set, &corpus, config.history_len)?;
        rows.push(AblationRow {
            variant: config.variant,
            channels: config.channels,
            auc: report.auc,
            mrr: report.mrr,
            ndcg5: report.ndcg5,
            ndcg10: report.ndcg10,
            best_val_auc: outcome.best_val_auc,
        });
        write_file(&args.out.join("ablation.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}

/// Returns the generated news and impression counts.
pub fn cmd_synth(args: &SynthArgs) -> Result<(usize, usize)> {
    let corpus = generate(&args.resolve())?;
    corpus.write(&args.out)?;
    Ok((corpus.news.len(), corpus.impressions.len()))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => {
            let s = cmd_train(args)?;
            println!(
                "trained {} epochs, {} steps, final loss {}",
                s.epochs,
                s.steps,
                s.final_loss.map_or("n/a".into(), |l| format!("{l:.4}"))
            );
            if let Some(auc) = s.best_val_auc {
                println!("best validation AUC {auc:.4}");
            }
            println!("wrote {}", args.out.join("model.ckpt").display());
        }
        Command::Eval(args) => {
            let report = cmd_eval(args)?;
            print!("{}", report.to_table());
            println!("{}", report.to_json());
        }
        Command::Predict(args) => {
            let rows = cmd_predict(args)?;
            println!("wrote {rows} ranked candidates to {}", args.out.display());
        }
        Command::Ablate(args) => {
            let rows = cmd_ablate(args)?;
            print!("{}", ablation_table(&rows));
            println!("wrote {}", args.out.join("ablation.csv").display());
        }
        Command::Synth(args) => {
            let (news, sessions) = cmd_synth(args)?;
            println!("wrote {news} news and {sessions} sessions to {}", args.out.display());
        }
    }
    Ok(())
}
