//! The `smith` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::corpus::{self, PairRecord, RawDocument, VocabCounter, Vocabulary};
use crate::diffcore::AdamConfig;
use crate::encoder::{ModelConfig, SmithModel};
use crate::error::{Result, SmithError};
use crate::fixture::{self, FixtureConfig, TopicStyle};
use crate::matcher::{self, EvalMetrics, FinetuneConfig, MatchExample};
use crate::pretrain::{self, LossKind, PretrainConfig};
use crate::profiler::{self, ProfileShape};
use crate::segmenter::{segment_document, SegmentedDocument};

/// Pairs or documents embedded per forward pass at inference.
const INFERENCE_CHUNK: usize = 16;

#[derive(Parser, Debug)]
#[command(
    name = "smith",
    version,
    about = "Hierarchical Transformer document matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary file from documents and/or pair datasets.
    BuildVocab(BuildVocabArgs),
    /// Print the segmented form of each document as JSON lines.
    Segment(SegmentArgs),
    /// Pretrain with masked word and masked sentence-block prediction.
    Pretrain(PretrainArgs),
    /// Fine-tune on labelled pairs with the matching loss.
    Finetune(FinetuneArgs),
    /// Write one embedding per document as JSON lines.
    Embed(EmbedArgs),
    /// Score a pair dataset with one or more checkpoints.
    Eval(EvalArgs),
    /// Print the attention score-entry budget of flat and hierarchical encoding.
    ProfileAttention(ProfileArgs),
    /// Write a synthetic pair dataset or pretraining corpus.
    GenerateFixture(FixtureArgs),
}

#[derive(Args, Debug)]
pub struct BuildVocabArgs {
    /// Document corpus (`{"id","text"}` lines); repeatable.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Pair dataset; repeatable.
    #[arg(long)]
    pub pairs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Total size including the four special tokens.
    #[arg(long, default_value_t = 30522)]
    pub max_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Model config supplying Ls and Ld.
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    #[value(name = "wp")]
    Wp,
    #[value(name = "wp+sp")]
    WpSp,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: u64,
    #[arg(long, value_enum, default_value = "wp+sp")]
    pub loss: LossArg,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    /// Sentence blocks masked per document.
    #[arg(long, default_value_t = pretrain::DEFAULT_BLOCKS_PER_DOC)]
    pub masked_blocks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Model config; defaults to the configuration of --init-checkpoint.
    #[arg(long, required_unless_present = "init_checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: u64,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Repeatable; one result line per checkpoint.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = matcher::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Tokens per document.
    #[arg(long)]
    pub n: u64,
    #[arg(long)]
    pub ls: u64,
    #[arg(long, default_value_t = 1)]
    pub b: u64,
    #[arg(long, default_value_t = 1)]
    pub a: u64,
    /// Layers per level.
    #[arg(long, default_value_t = 1)]
    pub l: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FixtureKind {
    Pairs,
    Corpus,
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    #[arg(long, value_enum, default_value = "pairs")]
    pub kind: FixtureKind,
    /// Pairs (kind=pairs) or documents (kind=corpus).
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub topics: usize,
    #[arg(long, default_value_t = 96)]
    pub doc_len: usize,
    #[arg(long, default_value_t = 0)]
    pub preamble_tokens: usize,
    #[arg(long, default_value_t = 12)]
    pub words_per_topic: usize,
    #[arg(long, default_value_t = 10)]
    pub script_sentences: usize,
    #[arg(long, default_value_t = 0.6)]
    pub topic_word_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub swap_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` and runs the command. Returns the process exit status:
/// 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).expect("log line serializes");
    writeln!(out, "{line}").map_err(|e| SmithError::io("writing output", e))
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::BuildVocab(a) => build_vocab(a, out),
        Command::Segment(a) => segment(a, out),
        Command::Pretrain(a) => run_pretrain(a, out),
        Command::Finetune(a) => run_finetune(a, out),
        Command::Embed(a) => embed(a, out),
        Command::Eval(a) => eval(a, out),
        Command::ProfileAttention(a) => {
            let budget = profiler::count_attention_entries(ProfileShape {
                n: a.n,
                ls: a.ls,
                b: a.b,
                a: a.a,
                l: a.l,
            })?;
            emit(out, &budget)
        }
        Command::GenerateFixture(a) => generate(a, out),
    }
}

fn build_vocab(a: BuildVocabArgs, out: &mut dyn Write) -> Result<()> {
    if a.corpus.is_empty() && a.pairs.is_empty() {
        return Err(SmithError::InvalidInput(
            "give at least one --corpus or --pairs file".into(),
        ));
    }
    let mut counter = VocabCounter::default();
    for path in &a.corpus {
        for d in corpus::read_documents(path)? {
            counter.add_text(&d.text);
        }
    }
    for path in &a.pairs {
        for d in corpus::pair_documents(&corpus::read_pairs(path)?) {
            counter.add_text(&d.text);
        }
    }
    let vocab = counter.finish(a.max_size, a.min_count)?;
    vocab.save(&a.out)?;
    emit(out, &json!({"vocab_size": vocab.len(), "out": a.out}))
}

/// Config from `path` with `vocab_size` defaulting to the vocabulary's size.
fn load_config(path: &Path, vocab: &Vocabulary) -> Result<ModelConfig> {
    let defaults = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let cfg = ModelConfig::load_with_defaults(path, defaults)?;
    check_vocab(&cfg, vocab)?;
    Ok(cfg)
}

fn check_vocab(cfg: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    if cfg.vocab_size != vocab.len() {
        return Err(SmithError::Config(format!(
            "model vocab_size={} but the vocabulary file has {} tokens",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn segment_all(
    docs: &[RawDocument],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Vec<SegmentedDocument>> {
    docs.iter()
        .map(|d| segment_document(d, vocab, cfg.block_len, cfg.max_blocks))
        .collect()
}

fn segment(a: SegmentArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let cfg = load_config(&a.config, &vocab)?;
    let docs = corpus::read_documents(&a.docs)?;
    let mut text = String::new();
    for seg in segment_all(&docs, &vocab, &cfg)? {
        text.push_str(&seg.to_json_line());
        text.push('\n');
    }
    match a.out {
        Some(path) => crate::io::write_atomic(&path, text.as_bytes()),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| SmithError::io("writing output", e)),
    }
}

fn run_pretrain(a: PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let cfg = load_config(&a.config, &vocab)?;
    let docs = segment_all(&corpus::read_documents(&a.corpus)?, &vocab, &cfg)?;
    let docs: Vec<SegmentedDocument> = docs
        .into_iter()
        .filter(|d| {
            let keep = d.blocks.iter().any(|b| b.real_count > 1);
            if !keep {
                warn!("skipping document `{}`: no tokens", d.doc_id);
            }
            keep
        })
        .collect();
    let mut model = SmithModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let train = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        blocks_per_doc: a.masked_blocks,
        loss: match a.loss {
            LossArg::Wp => LossKind::Wp,
            LossArg::WpSp => LossKind::WpSp,
        },
        adam: AdamConfig {
            lr: a.lr,
            warmup_steps: a.warmup_steps,
            ..AdamConfig::default()
        },
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let mut write_err = None;
    pretrain::pretrain(&mut model, &docs, &train, |step, loss| {
        if a.log_every > 0 && (step % a.log_every == 0 || step + 1 == train.steps) {
            let line = json!({
                "step": step,
                "L_wp": loss.wp,
                "L_sp": loss.sp,
                "total": loss.total,
                "sp_accuracy": loss.sp_accuracy,
            });
            if let Err(e) = emit(out, &line) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    checkpoint::save(&model, &a.checkpoint_out)
}

fn match_examples(
    pairs: &[PairRecord],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Vec<MatchExample>> {
    let seg = |d: &RawDocument| segment_document(d, vocab, cfg.block_len, cfg.max_blocks);
    pairs
        .iter()
        .map(|p| {
            Ok(MatchExample {
                source: seg(&p.source)?,
                target: seg(&p.target)?,
                label: p.label,
            })
        })
        .collect()
}

fn run_finetune(a: FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let init = a
        .init_checkpoint
        .as_deref()
        .map(checkpoint::load)
        .transpose()?;
    let mut model = match (&a.config, init) {
        (Some(path), init) => {
            let cfg = load_config(path, &vocab)?;
            let mut model = SmithModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
            if let Some(init) = init {
                for name in checkpoint::initialize_from(&mut model, &init)? {
                    warn!("initial parameter `{name}` is not used by this configuration");
                }
            }
            model
        }
        (None, Some(init)) => {
            check_vocab(&init.config, &vocab)?;
            init
        }
        (None, None) => unreachable!("clap requires --config or --init-checkpoint"),
    };
    let examples = match_examples(&corpus::read_pairs(&a.pairs)?, &vocab, &model.config)?;
    let train = FinetuneConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            warmup_steps: a.warmup_steps,
            ..AdamConfig::default()
        },
        seed: a.seed,
    };
    let mut write_err = None;
    matcher::finetune(&mut model, &examples, &train, |step, loss| {
        if a.log_every > 0 && (step % a.log_every == 0 || step + 1 == train.steps) {
            if let Err(e) = emit(out, &json!({"step": step, "loss": loss})) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    checkpoint::save(&model, &a.checkpoint_out)
}

fn embed(a: EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let model = checkpoint::load(&a.checkpoint)?;
    check_vocab(&model.config, &vocab)?;
    let docs = corpus::read_documents(&a.docs)?;
    let (embeddings, skipped) = matcher::infer_embeddings(&model, &docs, &vocab, INFERENCE_CHUNK)?;
    crate::io::write_atomic(&a.out, matcher::embeddings_to_jsonl(&embeddings).as_bytes())?;
    emit(
        out,
        &json!({"embedded": embeddings.len(), "skipped": skipped, "out": a.out}),
    )
}

#[derive(Serialize)]
struct EvalLine<'a> {
    checkpoint: &'a Path,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let pairs = corpus::read_pairs(&a.pairs)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    for path in &a.checkpoint {
        let model = checkpoint::load(path)?;
        check_vocab(&model.config, &vocab)?;
        let examples = match_examples(&pairs, &vocab, &model.config)?;
        let scores = matcher::predict(&model, &examples, INFERENCE_CHUNK)?;
        let metrics = matcher::evaluate(&scores, &labels, a.threshold)?;
        emit(
            out,
            &EvalLine {
                checkpoint: path,
                metrics,
            },
        )?;
    }
    Ok(())
}

fn generate(a: FixtureArgs, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&a.topic_word_rate) || !(0.0..=1.0).contains(&a.swap_rate) {
        return Err(SmithError::Config(
            "--topic-word-rate and --swap-rate must lie in [0, 1]".into(),
        ));
    }
    let style = TopicStyle {
        words_per_topic: a.words_per_topic,
        script_sentences: a.script_sentences,
        topic_word_rate: a.topic_word_rate,
        swap_rate: a.swap_rate,
    };
    let text = match a.kind {
        FixtureKind::Pairs => corpus::pairs_to_jsonl(&fixture::generate_fixture(&FixtureConfig {
            n_pairs: a.n,
            topics: a.topics,
            doc_len: a.doc_len,
            seed: a.seed,
            preamble_tokens: a.preamble_tokens,
            style,
        })?),
        FixtureKind::Corpus => corpus::documents_to_jsonl(&fixture::generate_corpus(
            a.n, a.topics, a.doc_len, style, a.seed,
        )?),
    };
    crate::io::write_atomic(&a.out, text.as_bytes())?;
    emit(out, &json!({"records": a.n, "out": a.out}))
}
