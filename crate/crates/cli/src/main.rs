//! `mftts`: featurize a corpus, train, synthesize and screen.

mod settings;

use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use mftts::audiofeat::{write_wav, MelSpectrogram};
use mftts::embedstore::{ContextualEmbeddings, EmbeddingTable};
use mftts::evalharness::{ordering_line, screen_corpus, write_reports, ScreenInputs};
use mftts::featalign::read_matrix;
use mftts::model::{Checkpoint, Tacotron, Variant};
use mftts::pipeline::{encoder_input, featurize, load_dataset, word_vectors, DataDir, FeatureIndex, WorkDir};
use mftts::textfront::{read_manifest, tokenize, Lexicon};
use mftts::trainer::Trainer;
use mftts::vocoder::Vocoder;
use mftts::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use settings::Settings;

#[derive(Parser)]
#[command(name = "mftts", version, about = "Multi-input-encoder TTS toolkit")]
struct Cli {
    /// TOML file with [model], [train], [vocoder] and [featurize] sections.
    #[arg(long, global = true, env = "MFTTS_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for initialization, batching, dropout and phase reconstruction.
    #[arg(long, global = true, env = "MFTTS_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "MFTTS_WORK", default_value = "work")]
    work: PathBuf,
    /// Config override, e.g. `--set train.batch_size=8` (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct VariantArg {
    /// PHONE, PHONE_WORD, PHONE_PARSER or PHONE_WORD_PARSER.
    #[arg(long, env = "MFTTS_VARIANT", value_parser = parse_variant)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert transcripts, trees, embeddings and audio into feature files.
    Featurize {
        #[arg(long, env = "MFTTS_DATA")]
        data: PathBuf,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Train a model on featurized data.
    Train {
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        width_multiplier: Option<f64>,
        /// Continue from the variant's latest checkpoint if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize one sentence to a WAV file.
    Synth {
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the variant's latest checkpoint in the work directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        variant: VariantArg,
        /// Data directory with lexicon.txt and embeddings.txt; defaults to the featurized one.
        #[arg(long, env = "MFTTS_DATA")]
        data: Option<PathBuf>,
        /// Bracketed parse tree, or a file containing one.
        #[arg(long)]
        tree: Option<String>,
        /// Per-token embedding matrix (`.emb`) for this sentence.
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Screen a manifest with one or more checkpoints and write a report.
    Eval {
        /// Checkpoint to screen (repeatable).
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Screen this variant's latest checkpoint (repeatable). Without any
        /// checkpoint or variant, every trained variant is screened.
        #[arg(long, value_parser = parse_variant)]
        variant: Vec<Variant>,
        /// `utt_id<TAB>text` lines; defaults to the data directory's transcripts.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, env = "MFTTS_DATA")]
        data: Option<PathBuf>,
    },
    /// Print the shape, metadata and leading rows of a feature file.
    InspectFmat {
        path: PathBuf,
        #[arg(long, default_value_t = 3)]
        rows: usize,
    },
    /// Write a small synthetic corpus (sine-tone speech with parse trees).
    DemoData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// 0 gives the shortest sentences, 1 the most elaborate.
        #[arg(long, default_value_t = 0.3)]
        complexity: f64,
        /// Text side only (for held-out screening sets).
        #[arg(long)]
        no_audio: bool,
    },
}

fn error_code(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or("cli", Error::code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            eprintln!("ERROR[usage] {}", msg.trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MFTTS_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR[{}] {e:#}", error_code(&e));
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    settings: Settings,
    work: WorkDir,
    seed: u64,
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        settings.train.seed = seed;
    }
    let ctx = Ctx {
        seed: settings.train.seed,
        settings,
        work: WorkDir::new(cli.work),
    };
    match cli.command {
        Command::Featurize { data, variant } => cmd_featurize(&ctx, &data, variant.variant),
        Command::Train {
            variant,
            max_steps,
            batch_size,
            checkpoint_every,
            width_multiplier,
            resume,
        } => {
            let mut ctx = ctx;
            let t = &mut ctx.settings.train;
            t.max_steps = max_steps.unwrap_or(t.max_steps);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.checkpoint_every = checkpoint_every.unwrap_or(t.checkpoint_every);
            if let Some(w) = width_multiplier {
                ctx.settings.model.width_multiplier = w;
            }
            cmd_train(&ctx, variant.variant, resume)
        }
        Command::Synth {
            text,
            out,
            checkpoint,
            variant,
            data,
            tree,
            emb,
            max_frames,
        } => cmd_synth(
            &ctx,
            SynthArgs {
                text,
                out,
                checkpoint,
                variant: variant.variant,
                data,
                tree,
                emb,
                max_frames,
            },
        ),
        Command::Eval {
            checkpoint,
            variant,
            manifest,
            data,
        } => cmd_eval(&ctx, checkpoint, &variant, manifest, data),
        Command::InspectFmat { path, rows } => cmd_inspect(&path, rows),
        Command::DemoData {
            out,
            count,
            complexity,
            no_audio,
        } => {
            let sentences = mftts::demo::write_corpus(&out, count, ctx.seed, complexity, !no_audio)?;
            println!("wrote {} utterances to {}", sentences.len(), out.display());
            Ok(())
        }
    }
}

fn variant_or_config(ctx: &Ctx, flag: Option<Variant>) -> Variant {
    flag.unwrap_or(ctx.settings.model.variant)
}

fn checkpoint_dir(work: &WorkDir, variant: Variant) -> PathBuf {
    work.checkpoints().join(variant.as_str())
}

fn cmd_featurize(ctx: &Ctx, data: &Path, variant: Option<Variant>) -> Result<()> {
    let variant = variant_or_config(ctx, variant);
    let report = featurize(&DataDir::new(data), &ctx.work, variant, ctx.settings.featurize.oov)?;
    println!(
        "featurized {} utterances for {variant}: {} files written, {} up to date",
        report.utterances, report.written, report.skipped
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, variant: Option<Variant>, resume: bool) -> Result<()> {
    let variant = variant_or_config(ctx, variant);
    let dir = checkpoint_dir(&ctx.work, variant);
    let latest = dir.join("latest.ckpt");
    let index = FeatureIndex::load(&ctx.work)?;
    let previous = if resume && latest.is_file() {
        let ck = Checkpoint::load(&latest)?;
        if ck.model.variant() != variant {
            return Err(Error::ConfigError(format!(
                "{} holds a {} model, not {variant}",
                latest.display(),
                ck.model.variant()
            ))
            .into());
        }
        if ck.phones != index.phones {
            return Err(Error::ConfigError(format!(
                "{} was trained on a different phone inventory",
                latest.display()
            ))
            .into());
        }
        Some(ck)
    } else {
        None
    };

    let data = load_dataset(&ctx.work, variant)?;
    let pad_id = data.index.eos_id()?;
    let train_cfg = ctx.settings.train.clone();
    let mut trainer = match previous {
        Some(ck) => {
            info!("resuming {variant} from step {}", ck.step);
            Trainer::resume(ck, train_cfg, pad_id)?
        }
        None => {
            let mut cfg = ctx.settings.model.clone();
            cfg.variant = variant;
            cfg.n_phones = data.index.phones.len();
            cfg.word_dim = data.index.word_dim.unwrap_or(0);
            let model = Tacotron::new(cfg, ctx.seed)?;
            Trainer::new(model, train_cfg, data.index.phones.clone(), pad_id)?
        }
    };
    info!(
        "training {variant}: {} utterances, {} parameters, steps {}..{}",
        data.examples.len(),
        trainer.model.params.scalar_count(),
        trainer.step,
        trainer.config.max_steps
    );
    let history = trainer.train(&data.examples, Some(&dir), |_, _| ControlFlow::Continue(()))?;
    match history.last() {
        Some(last) => println!(
            "trained {variant} to step {} (loss {:.4}); checkpoint {}",
            last.step,
            last.loss.total,
            latest.display()
        ),
        None => println!("{variant} is already at step {}", trainer.step),
    }
    Ok(())
}

struct SynthArgs {
    text: String,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    variant: Option<Variant>,
    data: Option<PathBuf>,
    tree: Option<String>,
    emb: Option<PathBuf>,
    max_frames: Option<usize>,
}

fn data_dir(work: &WorkDir, flag: Option<PathBuf>) -> Result<DataDir> {
    if let Some(d) = flag {
        return Ok(DataDir::new(d));
    }
    FeatureIndex::load(work)
        .ok()
        .and_then(|i| i.data_dir)
        .map(DataDir::new)
        .ok_or_else(|| anyhow!(Error::ConfigError("no data directory known; pass --data".into())))
}

fn load_lexicon(data: &DataDir, phones: &[String], ckpt: &Path) -> Result<Lexicon> {
    let lexicon = Lexicon::load(&data.lexicon())?;
    if lexicon.inventory() != phones {
        return Err(Error::ConfigError(format!(
            "{} does not match the phone inventory of {}",
            data.lexicon().display(),
            ckpt.display()
        ))
        .into());
    }
    Ok(lexicon)
}

fn load_table(data: &DataDir) -> Result<Option<EmbeddingTable>> {
    let path = data.embeddings();
    Ok(if path.is_file() {
        Some(EmbeddingTable::load(&path)?)
    } else {
        None
    })
}

fn cmd_synth(ctx: &Ctx, args: SynthArgs) -> Result<()> {
    let path = match &args.checkpoint {
        Some(p) => p.clone(),
        None => checkpoint_dir(&ctx.work, variant_or_config(ctx, args.variant)).join("latest.ckpt"),
    };
    let ck = Checkpoint::load(&path)?;
    let variant = ck.model.variant();
    if let Some(v) = args.variant {
        if v != variant {
            return Err(Error::ConfigError(format!(
                "--variant {v} does not match checkpoint {} ({variant})",
                path.display()
            ))
            .into());
        }
    }
    if args.tree.is_some() && !variant.uses_parser() {
        warn!("{variant} does not use parse trees; ignoring --tree");
    }
    if args.emb.is_some() && !variant.uses_word() {
        warn!("{variant} does not use word embeddings; ignoring --emb");
    }
    let data = data_dir(&ctx.work, args.data)?;
    let lexicon = load_lexicon(&data, &ck.phones, &path)?;
    let oov = FeatureIndex::load(&ctx.work).map_or(ctx.settings.featurize.oov, |i| i.oov);

    let words = if variant.uses_word() {
        let tokens = tokenize(&args.text)?;
        let emb = match &args.emb {
            Some(p) => Some(ContextualEmbeddings::load(p, "synth")?),
            None => None,
        };
        let table = if emb.is_none() { load_table(&data)? } else { None };
        Some(word_vectors(&tokens, emb.as_ref(), table.as_ref(), &data.embeddings())?)
    } else {
        None
    };
    let tree = if variant.uses_parser() {
        let raw = args
            .tree
            .ok_or_else(|| anyhow!(Error::ConfigError(format!("{variant} needs --tree"))))?;
        Some(if raw.trim_start().starts_with('(') {
            raw
        } else {
            std::fs::read_to_string(&raw).with_context(|| format!("reading tree file {raw}"))?
        })
    } else {
        None
    };
    let input = encoder_input(&args.text, &lexicon, oov, variant, words.as_ref(), tree.as_deref())?;

    let model = &ck.model;
    let enc = model.encode(&input)?;
    let max_frames = args.max_frames.unwrap_or(model.config.max_decoder_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let out = model.infer(&enc, max_frames, Some(&mut rng))?;
    if !out.stopped {
        warn!("decoder reached {max_frames} frames without predicting a stop");
    }
    let vocoder = Vocoder::new(ctx.settings.vocoder)?;
    let clip = vocoder.vocode(&MelSpectrogram { frames: out.mel_after }, ctx.seed)?;
    write_wav(&args.out, &clip)?;
    println!(
        "wrote {} ({} frames, {:.2} s)",
        args.out.display(),
        out.attention.frames(),
        clip.duration_secs()
    );
    Ok(())
}

fn cmd_eval(
    ctx: &Ctx,
    mut checkpoints: Vec<PathBuf>,
    variants: &[Variant],
    manifest: Option<PathBuf>,
    data: Option<PathBuf>,
) -> Result<()> {
    for v in variants {
        checkpoints.push(checkpoint_dir(&ctx.work, *v).join("latest.ckpt"));
    }
    if checkpoints.is_empty() {
        checkpoints = Variant::ALL
            .iter()
            .map(|v| checkpoint_dir(&ctx.work, *v).join("latest.ckpt"))
            .filter(|p| p.is_file())
            .collect();
        if checkpoints.is_empty() {
            return Err(Error::ConfigError(format!(
                "no trained checkpoints under {}",
                ctx.work.checkpoints().display()
            ))
            .into());
        }
    }
    let data = data_dir(&ctx.work, data)?;
    let manifest_path = manifest.unwrap_or_else(|| data.transcripts());
    let lines = read_manifest(&manifest_path)?;
    let trees = if data.trees().is_file() {
        read_manifest(&data.trees())?.into_iter().collect()
    } else {
        Default::default()
    };
    let inputs = ScreenInputs {
        lexicon: Lexicon::load(&data.lexicon())?,
        oov: FeatureIndex::load(&ctx.work).map_or(ctx.settings.featurize.oov, |i| i.oov),
        table: load_table(&data)?,
        table_path: data.embeddings(),
        trees,
        trees_path: data.trees(),
        emb_dir: Some(data.root.clone()),
    };
    let reports = screen_corpus(&checkpoints, &lines, &inputs, ctx.seed)?;
    let (tsv, json) = write_reports(&ctx.work.reports(), &reports)?;
    let mut stdout = std::io::stdout().lock();
    for r in &reports {
        let passed = r.cases.iter().filter(|c| c.passes()).count();
        writeln!(
            stdout,
            "{}\tpass rate {:.3} ({passed}/{})",
            r.variant,
            r.case_pass_rate,
            r.cases.len()
        )?;
    }
    writeln!(stdout, "ordering: {}", ordering_line(&reports))?;
    writeln!(stdout, "report {}\nsummary {}", tsv.display(), json.display())?;
    Ok(())
}

fn cmd_inspect(path: &Path, rows: usize) -> Result<()> {
    let m = read_matrix(path)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}: {} x {}", path.display(), m.rows(), m.cols())?;
    for (k, v) in &m.meta {
        writeln!(out, "  {k} = {v}")?;
    }
    if !m.data.is_empty() {
        let min = m.data.iter().copied().fold(f32::INFINITY, f32::min);
        let max = m.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mean = m.data.iter().map(|&v| f64::from(v)).sum::<f64>() / m.data.len() as f64;
        writeln!(out, "  min {min} max {max} mean {mean:.4}")?;
    }
    for row in m.data.rows().into_iter().take(rows) {
        let cells: Vec<String> = row.iter().take(12).map(|v| format!("{v:.3}")).collect();
        let more = if row.len() > 12 { " ..." } else { "" };
        writeln!(out, "  [{}{more}]", cells.join(", "))?;
    }
    Ok(())
}
