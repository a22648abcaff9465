//! Command-line surface: the pipeline as subcommands over checkpoint files.
//!
//! Stage order mirrors the method: `synth` (optional, fabricates desk-scale
//! data), `train-hsmm` (induce the segment model on raw text), `segment`
//! (inspect its Viterbi cuts), `build-pool` (harvest templates), `pretrain`
//! (teacher-forced generator), `adv-train` (policy-gradient fine-tuning
//! against the discriminator), `generate`, and `evaluate`. Generated text
//! goes to standard output; everything else is newline-delimited JSON on
//! standard error. Every subcommand honors `--seed`: identical seeds and
//! inputs give identical outputs, logs excepted only in wall-clock fields.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, ModelBundle};
use crate::corpus::{
    load_paired, read_paired_raw, read_unpaired_raw, RawUnpaired, UnpairedExample, Vocab,
};
use crate::discriminator::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::generator::{generate_beam, GeneratorParams};
use crate::metrics::{evaluate_corpus, WordVectors};
use crate::nhsmm::{train_nhsmm, viterbi_segment};
use crate::synth::{synthesize, write_files, SynthConfig};
use crate::templates::{build_pool, sample_template};
use crate::trainer::{
    adversarial_train, pretrain_discriminator, pretrain_generator, LogSink, TrainConfig,
};

/// Everything a run needs from one JSON document: the training knobs, the
/// synthetic-corpus shape, default data/checkpoint paths, and the ablation
/// switches. Unknown fields are rejected before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Default paired JSONL path (`--paired` overrides).
    pub paired_path: Option<PathBuf>,
    /// Default unpaired JSONL path (`--unpaired` overrides).
    pub unpaired_path: Option<PathBuf>,
    /// Default checkpoint to read (`--ckpt` overrides).
    pub ckpt_path: Option<PathBuf>,
    /// Default output path (`--out` overrides).
    pub out_path: Option<PathBuf>,
    /// Ablation: drop the unpaired corpus entirely; the segment model and
    /// template pool are built from paired responses instead.
    pub no_unpaired: bool,
    /// Ablation: keep only this leading fraction of the unpaired corpus.
    pub unpaired_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            paired_path: None,
            unpaired_path: None,
            ckpt_path: None,
            out_path: None,
            no_unpaired: false,
            unpaired_fraction: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if !(0.0..=1.0).contains(&self.unpaired_fraction) {
            return Err(Error::InvalidConfig(format!(
                "unpaired_fraction must be in [0,1], got {}",
                self.unpaired_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "templar", version, about = "Template-prior response generation pipeline")]
struct Cli {
    /// JSON run-configuration file (see RunConfig).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic corpus (ground-truth segment model, copy-task
    /// pairs, word vectors) into a directory.
    Synth {
        /// Output directory for unpaired.jsonl, paired.jsonl, truth.json,
        /// vectors.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Induce the segment model on raw text and write the first checkpoint.
    TrainHsmm {
        #[arg(long)]
        unpaired: Option<PathBuf>,
        /// Paired data; contributes to the vocabulary, and replaces the
        /// unpaired corpus under --no-unpaired semantics.
        #[arg(long)]
        paired: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print Viterbi segmentations of a JSONL corpus, one bracketed sentence
    /// per line: `[tok tok]_state [tok]_state`.
    Segment {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Unpaired-format JSONL file to segment.
        #[arg(long)]
        input: PathBuf,
    },
    /// Harvest the template pool from Viterbi chains of the corpus.
    BuildPool {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        unpaired: Option<PathBuf>,
        #[arg(long)]
        paired: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher-forced generator pretraining on paired data.
    Pretrain {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        paired: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adversarial fine-tuning: policy-gradient generator updates against a
    /// convolutional discriminator. Writes a checkpoint after every epoch.
    AdvTrain {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        paired: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a response for one message (or one per line of a file).
    Generate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// A single whitespace-tokenized message.
        #[arg(long)]
        message: Option<String>,
        /// Plain-text file with one message per line.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Beam width (defaults to the configured one).
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score hypothesis lines against reference lines and print a JSON
    /// report.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Word-vector file for the embedding metrics.
        #[arg(long)]
        vectors: PathBuf,
    },
}

/// Parse `argv` (program name included) and run it against the real streams:
/// decoded text to stdout, JSON events to stderr. Returns the process exit
/// code: 0 on success, 1 on runtime failure, 2 on config or usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = io::stdout();
    let mut log = LogSink::stderr();
    match exec(cli, &mut stdout, &mut log) {
        Ok(()) => 0,
        Err(e) => {
            let mut err = io::stderr();
            let _ = writeln!(err, "{}", serde_json::json!({ "error": e.to_string() }));
            match e.root() {
                Error::InvalidConfig(_) => 2,
                _ => 1,
            }
        }
    }
}

/// [`dispatch`] with injectable output streams, for tests: `argv` must still
/// start with the program name. Usage errors surface as `InvalidConfig`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, log: &mut LogSink) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli =
        Cli::try_parse_from(argv).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    exec(cli, stdout, log)
}

fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = match path {
        None => RunConfig::default(),
        Some(p) => {
            let body =
                fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&body).map_err(|e| {
                Error::InvalidConfig(format!("{}: {e}", p.display()))
            })?
        }
    };
    if let Some(s) = seed {
        run.train.seed = s;
    }
    run.validate()?;
    Ok(run)
}

/// Training knobs for a stage that continues from a checkpoint: the config
/// file may change schedules and rates, but the dimensions baked into the
/// stored parameters are pinned.
fn merge_config(bundle: &ModelBundle, run: &RunConfig, had_file: bool, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = if had_file {
        let (f, b) = (&run.train, &bundle.config);
        if (f.k, f.d_max, f.d1, f.d2, f.d3) != (b.k, b.d_max, b.d1, b.d2, b.d3) {
            return Err(Error::InvalidConfig(
                "config dimensions disagree with the checkpoint (k, d_max, d1, d2, d3 are fixed once trained)"
                    .to_string(),
            ));
        }
        if bundle.discriminator.is_some()
            && (f.conv_windows != b.conv_windows || f.n_filters != b.n_filters || f.h_d != b.h_d)
        {
            return Err(Error::InvalidConfig(
                "config discriminator shape disagrees with the checkpoint".to_string(),
            ));
        }
        f.clone()
    } else {
        bundle.config.clone()
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn required<T>(flag: Option<T>, fallback: Option<T>, what: &str) -> Result<T> {
    flag.or(fallback).ok_or_else(|| {
        Error::InvalidConfig(format!("no {what} given (flag or config entry required)"))
    })
}

/// The corpus the segment model and pool are built from, after the ablation
/// switches: full or fractional unpaired text, or paired responses only.
fn segment_corpus(
    run: &RunConfig,
    unpaired: Option<&Path>,
    paired: Option<&Path>,
) -> Result<Vec<RawUnpaired>> {
    if run.no_unpaired {
        let path = required(paired, run.paired_path.as_deref(), "paired corpus (--no-unpaired ablation)")?;
        let raw = read_paired_raw(path)?;
        return Ok(raw.into_iter().map(|(_, response, spans)| (response, spans)).collect());
    }
    let path = required(unpaired, run.unpaired_path.as_deref(), "unpaired corpus")?;
    let mut raw = read_unpaired_raw(path)?;
    if run.unpaired_fraction < 1.0 {
        let keep = (run.unpaired_fraction * raw.len() as f64).round() as usize;
        raw.truncate(keep);
    }
    if raw.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(raw)
}

fn read_text_lines(path: &Path) -> Result<Vec<String>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(body.lines().map(|l| l.to_string()).collect())
}

fn tokenize_lines(lines: &[String]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect()
}

fn exec(cli: Cli, stdout: &mut dyn Write, log: &mut LogSink) -> Result<()> {
    let had_file = cli.config.is_some();
    let run = load_run_config(cli.config.as_deref(), cli.seed)?;
    let out_io = |e: io::Error| Error::io("stdout", e);

    match cli.command {
        Command::Synth { out } => {
            let dir = required(out, run.out_path.clone(), "output directory")?;
            let corpus = synthesize(&run.synth, run.train.seed)?;
            write_files(&corpus, &dir)?;
            log.event(serde_json::json!({
                "event": "synth",
                "out": dir.display().to_string(),
                "seed": run.train.seed,
                "unpaired": corpus.unpaired.len(),
                "paired": corpus.paired.len(),
                "vocab": corpus.vectors.len(),
            }));
            Ok(())
        }

        Command::TrainHsmm { unpaired, paired, out } => {
            let out = required(out, run.out_path.clone(), "output checkpoint")?;
            let corpus = segment_corpus(&run, unpaired.as_deref(), paired.as_deref())?;
            // The vocabulary covers every corpus this pipeline will touch, so
            // later stages can share token ids.
            let paired_path = paired.or(run.paired_path.clone());
            let paired_raw = match (&paired_path, run.no_unpaired) {
                (Some(p), false) => read_paired_raw(p)?,
                _ => Vec::new(), // under no_unpaired the corpus already is the paired responses
            };
            let mut texts: Vec<&str> = corpus.iter().map(|(t, _)| t.as_str()).collect();
            for (m, r, _) in &paired_raw {
                texts.push(m);
                texts.push(r);
            }
            let vocab = Vocab::build(texts, run.train.vocab_max_size)?;
            let encoded: Vec<UnpairedExample> = corpus
                .iter()
                .map(|(text, spans)| {
                    Ok(UnpairedExample { text: vocab.encode(text)?, spans: spans.clone() })
                })
                .collect::<Result<_>>()?;
            log.event(serde_json::json!({
                "event": "train-hsmm",
                "sentences": encoded.len(),
                "vocab": vocab.size(),
                "no_unpaired": run.no_unpaired,
                "unpaired_fraction": run.unpaired_fraction,
            }));
            let hsmm = train_nhsmm(&encoded, vocab.size(), &run.train, log)?;
            let bundle = ModelBundle {
                hsmm,
                generator: None,
                discriminator: None,
                pool: None,
                config: run.train.clone(),
                vocab: (0..vocab.size()).map(|i| vocab.token(i as u32).to_string()).collect(),
                seed: run.train.seed,
            };
            save_checkpoint(&bundle, &out)?;
            log.event(serde_json::json!({
                "event": "checkpoint",
                "path": out.display().to_string(),
            }));
            Ok(())
        }

        Command::Segment { ckpt, input } => {
            let ckpt = required(ckpt, run.ckpt_path.clone(), "checkpoint")?;
            let bundle = load_checkpoint(&ckpt)?;
            let vocab = Vocab::from_token_list(bundle.vocab.clone());
            let raw = read_unpaired_raw(&input)?;
            for (text, spans) in &raw {
                let tokens = vocab.encode(text)?;
                let segs = viterbi_segment(&bundle.hsmm, &tokens, spans)?;
                let mut pos = 0;
                let mut rendered = Vec::with_capacity(segs.len());
                for &(state, dur) in &segs {
                    let words: Vec<&str> =
                        tokens[pos..pos + dur].iter().map(|&t| vocab.token(t)).collect();
                    rendered.push(format!("[{}]_{}", words.join(" "), state));
                    pos += dur;
                }
                writeln!(stdout, "{}", rendered.join(" ")).map_err(out_io)?;
            }
            log.event(serde_json::json!({
                "event": "segment",
                "sentences": raw.len(),
            }));
            Ok(())
        }

        Command::BuildPool { ckpt, unpaired, paired, out } => {
            let ckpt = required(ckpt, run.ckpt_path.clone(), "checkpoint")?;
            let out = required(out, run.out_path.clone(), "output checkpoint")?;
            let mut bundle = load_checkpoint(&ckpt)?;
            let vocab = Vocab::from_token_list(bundle.vocab.clone());
            let corpus = segment_corpus(&run, unpaired.as_deref(), paired.as_deref())?;
            let encoded: Vec<UnpairedExample> = corpus
                .iter()
                .map(|(text, spans)| {
                    Ok(UnpairedExample { text: vocab.encode(text)?, spans: spans.clone() })
                })
                .collect::<Result<_>>()?;
            let pool = build_pool(&bundle.hsmm, &encoded)?;
            log.event(serde_json::json!({
                "event": "build-pool",
                "sentences": encoded.len(),
                "chains": pool.chains().len(),
                "occurrences": pool.occurrences(),
            }));
            bundle.pool = Some(pool);
            save_checkpoint(&bundle, &out)?;
            log.event(serde_json::json!({
                "event": "checkpoint",
                "path": out.display().to_string(),
            }));
            Ok(())
        }

        Command::Pretrain { ckpt, paired, out } => {
            let ckpt = required(ckpt, run.ckpt_path.clone(), "checkpoint")?;
            let out = required(out, run.out_path.clone(), "output checkpoint")?;
            let paired_path = required(paired, run.paired_path.clone(), "paired corpus")?;
            let mut bundle = load_checkpoint(&ckpt)?;
            let config = merge_config(&bundle, &run, had_file, cli.seed)?;
            let vocab = Vocab::from_token_list(bundle.vocab.clone());
            let examples = load_paired(&paired_path, &vocab)?;
            // Continue from a stored generator if one exists; otherwise start
            // fresh from the frozen segment-model embeddings.
            let resumed = bundle.generator.is_some();
            let init = match bundle.generator.take() {
                Some(g) => g,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    GeneratorParams::from_hsmm(&bundle.hsmm, &mut rng)?
                }
            };
            log.event(serde_json::json!({
                "event": "pretrain",
                "pairs": examples.len(),
                "resumed": resumed,
            }));
            let trained = pretrain_generator(&init, &bundle.hsmm, &examples, &config, log)?;
            bundle.generator = Some(trained);
            bundle.config = config;
            save_checkpoint(&bundle, &out)?;
            log.event(serde_json::json!({
                "event": "checkpoint",
                "path": out.display().to_string(),
            }));
            Ok(())
        }

        Command::AdvTrain { ckpt, paired, out } => {
            let ckpt = required(ckpt, run.ckpt_path.clone(), "checkpoint")?;
            let out = required(out, run.out_path.clone(), "output checkpoint")?;
            let paired_path = required(paired, run.paired_path.clone(), "paired corpus")?;
            let mut bundle = load_checkpoint(&ckpt)?;
            let config = merge_config(&bundle, &run, had_file, cli.seed)?;
            let vocab = Vocab::from_token_list(bundle.vocab.clone());
            let examples = load_paired(&paired_path, &vocab)?;
            let gen = bundle.generator.clone().ok_or_else(|| {
                Error::InvalidConfig(
                    "checkpoint has no generator; run pretrain before adv-train".to_string(),
                )
            })?;
            let pool = bundle.pool.clone().ok_or_else(|| {
                Error::InvalidConfig(
                    "checkpoint has no template pool; run build-pool before adv-train".to_string(),
                )
            })?;
            let disc = match bundle.discriminator.clone() {
                Some(d) => d,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    let fresh = DiscriminatorParams::new_seeded(
                        vocab.size(),
                        config.d3,
                        config.h_d,
                        &config.conv_windows,
                        config.n_filters,
                        &mut rng,
                    )?;
                    pretrain_discriminator(
                        &fresh, &gen, &bundle.hsmm, &pool, &examples, &config, log,
                    )?
                }
            };
            log.event(serde_json::json!({
                "event": "adv-train",
                "pairs": examples.len(),
                "pool_chains": pool.chains().len(),
            }));
            let hsmm = bundle.hsmm.clone();
            let vocab_list = bundle.vocab.clone();
            let seed = config.seed;
            let epoch_config = config.clone();
            let (final_gen, final_disc) = adversarial_train(
                &gen,
                &disc,
                &bundle.hsmm,
                &pool,
                &examples,
                &config,
                log,
                |_, g, d| {
                    let snapshot = ModelBundle {
                        hsmm: hsmm.clone(),
                        generator: Some(g.clone()),
                        discriminator: Some(d.clone()),
                        pool: Some(pool.clone()),
                        config: epoch_config.clone(),
                        vocab: vocab_list.clone(),
                        seed,
                    };
                    save_checkpoint(&snapshot, &out)
                },
            )?;
            bundle.generator = Some(final_gen);
            bundle.discriminator = Some(final_disc);
            bundle.pool = Some(pool);
            bundle.config = config;
            save_checkpoint(&bundle, &out)?;
            log.event(serde_json::json!({
                "event": "checkpoint",
                "path": out.display().to_string(),
            }));
            Ok(())
        }

        Command::Generate { ckpt, message, input, beam } => {
            let ckpt = required(ckpt, run.ckpt_path.clone(), "checkpoint")?;
            let bundle = load_checkpoint(&ckpt)?;
            let config = merge_config(&bundle, &run, had_file, cli.seed)?;
            let vocab = Vocab::from_token_list(bundle.vocab.clone());
            let gen = bundle.generator.as_ref().ok_or_else(|| {
                Error::InvalidConfig("checkpoint has no generator".to_string())
            })?;
            let pool = bundle.pool.as_ref().ok_or_else(|| {
                Error::InvalidConfig("checkpoint has no template pool".to_string())
            })?;
            let messages: Vec<String> = match (message, input) {
                (Some(m), None) => vec![m],
                (None, Some(path)) => read_text_lines(&path)?
                    .into_iter()
                    .filter(|l| !l.trim().is_empty())
                    .collect(),
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidConfig(
                        "--message and --input are mutually exclusive".to_string(),
                    ))
                }
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "one of --message or --input is required".to_string(),
                    ))
                }
            };
            let beam_width = beam.unwrap_or(config.beam_width);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            for text in &messages {
                let msg = vocab.encode(text)?;
                let template = sample_template(pool, &bundle.hsmm, &mut rng)?;
                let response = generate_beam(gen, &msg, &template, beam_width)?;
                log.event(serde_json::json!({
                    "event": "generate",
                    "template_chain": template.entries.iter().map(|&(z, _)| z).collect::<Vec<_>>(),
                    "template_len": template.total_len(),
                }));
                writeln!(stdout, "{}", vocab.decode(&response)).map_err(out_io)?;
            }
            Ok(())
        }

        Command::Evaluate { hyp, reference, vectors } => {
            let hyps = tokenize_lines(&read_text_lines(&hyp)?);
            let refs = tokenize_lines(&read_text_lines(&reference)?);
            let wv = WordVectors::load(&vectors)?;
            let report = evaluate_corpus(&hyps, &refs, &wv)?;
            log.event(serde_json::json!({
                "event": "evaluate",
                "n_examples": report.n_examples,
                "embedding_skipped": report.embedding_skipped,
            }));
            let body = serde_json::to_string_pretty(&report).expect("report serializes");
            writeln!(stdout, "{body}").map_err(out_io)?;
            Ok(())
        }
    }
}
