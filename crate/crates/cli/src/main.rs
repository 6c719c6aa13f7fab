//! `vlr` — one command wiring the pipeline end to end: generate data, render
//! previews, precompute the visual-embedding cache, train, infer, evaluate,
//! and run ablation suites.
//!
//! Configuration comes from a TOML file (every section optional); flags
//! override file values, and `VLR_RUN_ROOT` overrides the configured output
//! root (an explicit `--out-root` beats both). Exit codes: 0 success,
//! 2 usage, 3 configuration, 4 data/cache, 5 numerical.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vlr_core::config::{resolve_out_root, AppConfig};
use vlr_core::corpus::{
    build_dataset, encode_dataset, generate_synthetic, load_jsonl, save_jsonl, OnUnknown, Sample,
    Vocabulary,
};
use vlr_core::evalreport::{
    dataset_fingerprint, default_cache_dir, emit_report, evaluate, render_markdown, run_suite,
    Suite, SuiteContext,
};
use vlr_core::infer::reason_and_answer;
use vlr_core::model::checkpoint;
use vlr_core::render::{render, write_png};
use vlr_core::train::{train, PriorMode, TrainConfig};
use vlr_core::vision::{precompute, VisionCache};
use vlr_core::{Error, Result};

use rand::SeedableRng;

#[derive(Parser)]
#[command(
    name = "vlr",
    version,
    about = "Desk-scale latent reasoning with rendered-chain visual priors"
)]
struct Cli {
    /// TOML configuration file; defaults apply for any omitted section.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output root for runs, caches, and reports (beats VLR_RUN_ROOT and the
    /// config file).
    #[arg(long, global = true, value_name = "DIR")]
    out_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic arithmetic corpus as JSON lines.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Destination file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Minimum reasoning steps per sample.
        #[arg(long)]
        min_steps: Option<usize>,
        /// Maximum reasoning steps per sample.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Largest operand value.
        #[arg(long)]
        operand_max: Option<i64>,
    },
    /// Rasterize a text exactly as the embedding cache sees it.
    RenderPreview {
        /// Text to render.
        #[arg(long)]
        text: String,
        /// Destination PNG.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Build the visual-embedding cache for the training set.
    Precompute {
        /// Cache directory (default: <out_root>/cache/<segmentation>).
        #[arg(long, value_name = "DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Train one model on the configured corpus.
    Train {
        /// Training seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Step budget (overrides the config).
        #[arg(long)]
        max_steps: Option<usize>,
        /// Learning rate (overrides the config).
        #[arg(long)]
        lr: Option<f64>,
        /// Run directory (default: <out_root>/runs/train/seed-<seed>).
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Answer one question with a trained model.
    Infer {
        /// Checkpoint file.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Question text (whitespace-tokenized).
        #[arg(long)]
        question: String,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate one checkpoint on the test set and write a metrics report.
    Eval {
        /// Checkpoint file.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Evaluation seed (drives any sampling during decoding).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and compare one ablation suite across the configured seeds.
    Ablate {
        /// One of: main, paradigms, modeling, regularization,
        /// compression-sweep, extreme.
        #[arg(long)]
        suite: Suite,
    },
    /// Compression-rate sweep: fixed-rate segmentation at rates {2, 5, 10}.
    SweepCompression,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData {
            n,
            seed,
            out,
            min_steps,
            max_steps,
            operand_max,
        } => gen_data(
            &cfg,
            n.unwrap_or(cfg.corpus.n_train),
            seed.unwrap_or(cfg.corpus.seed),
            out,
            min_steps.unwrap_or(cfg.corpus.min_steps),
            max_steps.unwrap_or(cfg.corpus.max_steps),
            operand_max.unwrap_or(cfg.corpus.operand_max),
        ),
        Command::RenderPreview { text, out } => render_preview(&cfg, text, out),
        Command::Precompute { cache_dir } => run_precompute(&cfg, cache_dir.as_deref()),
        Command::Train {
            seed,
            max_steps,
            lr,
            run_dir,
        } => run_train(&cfg, *seed, *max_steps, *lr, run_dir.as_deref()),
        Command::Infer {
            checkpoint,
            question,
            seed,
        } => run_infer(&cfg, checkpoint, question, *seed),
        Command::Eval { checkpoint, seed } => run_eval(&cfg, checkpoint, *seed),
        Command::Ablate { suite } => run_ablate(&cfg, *suite),
        Command::SweepCompression => run_ablate(&cfg, Suite::CompressionSweep),
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    cfg.out_root = resolve_out_root(&cfg);
    if let Some(root) = &cli.out_root {
        cfg.out_root = root.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(
    _cfg: &AppConfig,
    n: usize,
    seed: u64,
    out: &Path,
    min_steps: usize,
    max_steps: usize,
    operand_max: i64,
) -> Result<()> {
    let samples = generate_synthetic(n, (min_steps, max_steps), operand_max, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_jsonl(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn render_preview(cfg: &AppConfig, text: &str, out: &Path) -> Result<()> {
    let img = render(text, &cfg.render)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_png(out, &img)?;
    println!(
        "rendered {}x{} px ({} ink) to {}",
        img.width,
        img.height,
        img.ink_count(),
        out.display()
    );
    Ok(())
}

/// Training corpus, early-stop holdout, and test set, all encoded under one
/// vocabulary built over both files (the model's output space must cover the
/// test answers).
struct Corpus {
    vocab: Vocabulary,
    train: Vec<Sample>,
    holdout: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_corpus(cfg: &AppConfig) -> Result<Corpus> {
    let train_raws = load_jsonl(&cfg.corpus.train_path)?;
    let test_raws = load_jsonl(&cfg.corpus.test_path)?;
    if train_raws.is_empty() || test_raws.is_empty() {
        return Err(Error::Config(format!(
            "empty corpus ({}: {} samples, {}: {}); generate data first with gen-data",
            cfg.corpus.train_path.display(),
            train_raws.len(),
            cfg.corpus.test_path.display(),
            test_raws.len()
        )));
    }
    let mut all = train_raws.clone();
    all.extend(test_raws.iter().cloned());
    let (vocab, samples) = build_dataset(&all)?;
    let (train_all, test) = samples.split_at(train_raws.len());
    if cfg.corpus.holdout >= train_all.len() {
        return Err(Error::Config(format!(
            "holdout {} exceeds the {}-sample training set",
            cfg.corpus.holdout,
            train_all.len()
        )));
    }
    let (train, holdout) = train_all.split_at(train_all.len() - cfg.corpus.holdout);
    Ok(Corpus {
        vocab,
        train: train.to_vec(),
        holdout: holdout.to_vec(),
        test: test.to_vec(),
    })
}

fn run_precompute(cfg: &AppConfig, cache_dir: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let policy = cfg.train.segmentation;
    let dir = cache_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_cache_dir(&cfg.out_root, policy));
    let manifest = precompute(
        &corpus.train,
        &corpus.vocab,
        policy,
        &cfg.render,
        &cfg.vision,
        &dir,
    )?;
    println!(
        "cached {} segment embeddings (d_v {}, {} mode) in {}",
        manifest.entries.len(),
        manifest.d_v,
        manifest.mode.name(),
        dir.display()
    );
    Ok(())
}

fn run_train(
    cfg: &AppConfig,
    seed: Option<u64>,
    max_steps: Option<usize>,
    lr: Option<f64>,
    run_dir: Option<&Path>,
) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab = corpus.vocab.len();
    let mut tcfg: TrainConfig = cfg.train.clone();
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    if let Some(m) = max_steps {
        tcfg.max_steps = m;
    }
    if let Some(l) = lr {
        tcfg.lr = l;
    }
    // Echo the effective configuration, overrides included.
    let mut echo_cfg = cfg.clone();
    echo_cfg.train = tcfg.clone();
    echo_cfg.model = model_cfg.clone();
    let echo = echo_cfg.echo()?;

    let cache = if tcfg.objective.mask.use_kl && tcfg.prior == PriorMode::Vision {
        let dir = default_cache_dir(&cfg.out_root, tcfg.segmentation);
        Some(VisionCache::open(&dir, &cfg.render, &cfg.vision).map_err(|e| {
            Error::StaleCache(format!(
                "no usable cache in {} ({e}); run `vlr precompute` first",
                dir.display()
            ))
        })?)
    } else {
        None
    };
    let dir = run_dir.map(Path::to_path_buf).unwrap_or_else(|| {
        cfg.out_root
            .join("runs")
            .join("train")
            .join(format!("seed-{}", tcfg.seed))
    });
    let outcome = train(
        &model_cfg,
        &tcfg,
        &corpus.vocab,
        &corpus.train,
        &corpus.holdout,
        cache.as_ref(),
        &dir,
        &echo,
    )?;
    if let Some(bd) = &outcome.final_loss {
        println!(
            "step {}: answer_ce {:.4} reasoning_ce {:.4} kl {:.4} total {:.4}",
            outcome.steps_run, bd.answer_ce, bd.reasoning_ce, bd.kl, bd.total
        );
    }
    if outcome.stopped_early {
        println!("stopped early at step {}", outcome.steps_run);
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn run_infer(cfg: &AppConfig, checkpoint_path: &Path, question: &str, seed: u64) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let tokens = ckpt.vocab.tokenize(question)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let out = reason_and_answer(&ckpt.model, &tokens, &cfg.infer, &mut rng)?;
    println!(
        "answer: {}  (latent steps: {}{})",
        ckpt.vocab.detokenize(&out.answer),
        out.reasoning_length,
        if out.truncated { ", truncated" } else { "" }
    );
    Ok(())
}

fn run_eval(cfg: &AppConfig, checkpoint_path: &Path, seed: u64) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let test_raws = load_jsonl(&cfg.corpus.test_path)?;
    if test_raws.is_empty() {
        return Err(Error::Config(format!(
            "no test data in {}",
            cfg.corpus.test_path.display()
        )));
    }
    // The checkpoint's vocabulary is authoritative; the test set must encode
    // under it.
    let test = encode_dataset(&ckpt.vocab, &test_raws, OnUnknown::Reject)?;
    let eval = evaluate(&ckpt.model, &ckpt.vocab, &test, &cfg.infer, seed)?;

    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_err(|e| Error::Config(format!("system clock: {e}")))?
        .as_secs();
    let eval_root = cfg.reports_root().join("eval");
    let mut dir = eval_root.join(stamp.to_string());
    let mut bump = 1;
    while dir.exists() {
        dir = eval_root.join(format!("{stamp}-{bump}"));
        bump += 1;
    }
    std::fs::create_dir_all(&dir)?;
    let report = serde_json::json!({
        "checkpoint": checkpoint_path.display().to_string(),
        "dataset_id": dataset_fingerprint(&ckpt.vocab, &test),
        "n": test.len(),
        "accuracy": eval.accuracy,
        "mean_reasoning_length": eval.mean_reasoning_length,
        "truncated": eval.truncated,
        "seed": seed,
        "config": cfg.echo()?,
        "checkpoint_config": ckpt.header.config_echo,
    });
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    vlr_core::infer::save_records(&dir.join("records.jsonl"), &eval.records)?;
    println!(
        "accuracy {:.4}  mean #L {:.2}  truncated {}/{}",
        eval.accuracy,
        eval.mean_reasoning_length,
        eval.truncated,
        test.len()
    );
    println!("report: {}", dir.join("report.json").display());
    Ok(())
}

fn run_ablate(cfg: &AppConfig, suite: Suite) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab = corpus.vocab.len();
    let ctx = SuiteContext {
        model_cfg: &model_cfg,
        base_train: &cfg.train,
        infer_cfg: &cfg.infer,
        vocab: &corpus.vocab,
        train_set: &corpus.train,
        holdout: &corpus.holdout,
        test_set: &corpus.test,
        render_cfg: &cfg.render,
        vision_cfg: &cfg.vision,
        out_root: &cfg.out_root,
        seeds: &cfg.eval.seeds,
        config_echo: cfg.echo()?,
    };
    let report = run_suite(&ctx, suite)?;
    if report.rows.is_empty() {
        let detail = report
            .failures
            .first()
            .map(|f| f.error.clone())
            .unwrap_or_else(|| "no rows produced".into());
        return Err(Error::Config(format!(
            "suite {suite} produced no usable rows: {detail}"
        )));
    }
    let dir = emit_report(&report, &cfg.reports_root(), cfg.eval.plot)?;
    print!("{}", render_markdown(&report));
    println!("report: {}", dir.join("report.json").display());
    Ok(())
}
