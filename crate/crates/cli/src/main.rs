use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cdlm_cli::config::{parse_mode, AppConfig};
use cdlm_cli::experiments::{
    ablate_experiment, entropy_k_experiment, firstpass_experiment, write_entropy_k_csv,
    write_firstpass_csv, AblationArgs,
};
use cdlm_cli::report::{write_trajectory, TrajectoryMeta};
use cdlm_core::corpus::Vocabulary;
use cdlm_core::infer::{generate, DecodeConfig, DecodeOutput};
use cdlm_core::model::load_checkpoint;
use cdlm_core::train::{run_training, Stage, TrainRun};

#[derive(Parser)]
#[command(
    name = "cdlm",
    about = "Causal diffusion language modeling: train, decode, and benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file; defaults apply for missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    /// Checkpoint to decode with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt text (vocabulary symbols).
    #[arg(long)]
    prompt: String,
    /// elastic | fixed | ar (overrides config).
    #[arg(long)]
    mode: Option<String>,
    /// Confidence gate (overrides config).
    #[arg(long)]
    gamma: Option<f64>,
    /// Block size for fixed mode (overrides config).
    #[arg(long)]
    kmax: Option<usize>,
    /// Maximum new tokens (overrides config).
    #[arg(long)]
    max_new: Option<usize>,
    /// Disable the prefix key/value cache.
    #[arg(long)]
    no_cache: bool,
    /// Trajectory output file (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write a checkpoint plus a metrics CSV.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// 1 (backbone) or 2 (horizon head; requires --checkpoint).
        #[arg(long)]
        stage: u8,
        /// Stage-1 checkpoint to continue from (stage 2) or resume (stage 1).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume at this step of the schedule.
        #[arg(long, default_value_t = 0)]
        start_step: usize,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Decode from a prompt and print the generated text.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Decode and print a per-sweep table of the trajectory.
    Trace {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// First-pass accuracy by lookahead offset, split by entropy regime.
    Firstpass {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of probe positions.
        #[arg(long, default_value_t = 12000)]
        probes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Planning-time entropy vs planned horizon, with rank correlation.
    Entropyk {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe positions per document.
        #[arg(long, default_value_t = 8)]
        probes_per_doc: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the attention x decoder grid.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of seeds to average over.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Evaluation items per condition.
        #[arg(long, default_value_t = 128)]
        eval_items: usize,
        /// Directory for intermediate checkpoints.
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<AppConfig> {
    let mut cfg = AppConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_decode(cfg: &AppConfig, args: &DecodeArgs) -> Result<(DecodeOutput, AppConfig, String)> {
    let mut cfg = cfg.clone();
    if let Some(mode) = &args.mode {
        cfg.decode.mode = mode.clone();
    }
    if let Some(gamma) = args.gamma {
        cfg.decode.gamma = gamma;
    }
    if let Some(k) = args.kmax {
        cfg.decode.fixed_k = k;
    }
    if let Some(n) = args.max_new {
        cfg.decode.max_new = n;
    }
    if args.no_cache {
        cfg.decode.cache = false;
    }

    let (backbone, khead) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let vocab = Vocabulary::default();
    if backbone.cfg.vocab_size != vocab.size() {
        bail!(
            "checkpoint vocabulary ({}) does not match the tokenizer ({})",
            backbone.cfg.vocab_size,
            vocab.size()
        );
    }
    let prompt = vocab.tokenize(&args.prompt).context("tokenizing prompt")?;
    let mode = parse_mode(&cfg.decode.mode, cfg.decode.fixed_k)?;
    let mut dcfg = DecodeConfig::new(mode, prompt.len() + cfg.decode.max_new);
    dcfg.gamma = cfg.decode.gamma;
    dcfg.attention = cfg.decode_attention()?;
    dcfg.use_cache = cfg.decode.cache;
    let out = generate(&backbone, Some(&khead), &prompt, &dcfg)?;
    let mode_name = cfg.decode.mode.clone();
    Ok((out, cfg, mode_name))
}

fn render_generation(vocab: &Vocabulary, out: &DecodeOutput) -> String {
    let new = &out.tokens[out.prompt_len..];
    let cut = new
        .iter()
        .position(|&t| t == vocab.eos_id())
        .map(|i| &new[..i])
        .unwrap_or(new);
    vocab.render(cut)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common, stage, checkpoint, start_step, out, metrics, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(steps) = steps {
                cfg.stage1.steps = steps;
                cfg.stage2.steps = steps;
            }
            let stage = match stage {
                1 => Stage::One,
                2 => Stage::Two,
                other => bail!("unknown stage {other} (expected 1 or 2)"),
            };
            let vocab = Vocabulary::default();
            let docs = cfg.build_corpus(&vocab, cfg.seed)?;
            let run = TrainRun {
                stage,
                model: cfg.model.clone(),
                stage1: cfg.stage1.clone(),
                stage2: cfg.stage2.clone(),
                seed: cfg.seed,
                start_step,
                stop_after: None,
                log_every: cfg.log_every,
                checkpoint_every: cfg.checkpoint_every,
                docs: &docs,
                vocab: &vocab,
                checkpoint_in: checkpoint.as_deref(),
                checkpoint_out: &out,
                metrics_out: metrics.as_deref(),
                config_hash: cfg.hash(),
            };
            let summary = run_training(&run)?;
            println!(
                "stage {} done: {} steps, final metric {:.4}, checkpoint {}",
                if stage == Stage::One { 1 } else { 2 },
                summary.steps_run,
                summary.final_metric,
                out.display()
            );
        }
        Command::Generate { common, decode } => {
            let cfg = load_config(&common)?;
            let (out, merged, mode_name) = run_decode(&cfg, &decode)?;
            let vocab = Vocabulary::default();
            println!("{}", render_generation(&vocab, &out));
            eprintln!(
                "[{} new tokens, {} forward passes, {:.3} per token]",
                out.new_tokens(),
                out.forward_passes,
                out.forward_passes_per_token()
            );
            if let Some(path) = &decode.out {
                let meta = TrajectoryMeta {
                    config_hash: merged.hash(),
                    checkpoint: decode.checkpoint.display().to_string(),
                    prompt: decode.prompt.clone(),
                    mode: mode_name,
                    gamma: merged.decode.gamma,
                };
                write_trajectory(path, &meta, &out.events)?;
            }
        }
        Command::Trace { common, decode } => {
            let cfg = load_config(&common)?;
            let (out, merged, mode_name) = run_decode(&cfg, &decode)?;
            let vocab = Vocabulary::default();
            println!("prompt : {}", decode.prompt);
            println!("output : {}", render_generation(&vocab, &out));
            println!("outer  k  sweep cursor delta fp   mean_ent  committed");
            for ev in &out.events {
                let mean_ent =
                    ev.entropy.iter().sum::<f64>() / ev.entropy.len().max(1) as f64;
                println!(
                    "{:5} {:2} {:5} {:6} {:5} {:4} {:8.3}  {:?}",
                    ev.outer,
                    ev.planned_k,
                    ev.sweep,
                    ev.cursor,
                    ev.delta,
                    ev.forward_passes,
                    mean_ent,
                    vocab.render(&ev.committed)
                );
            }
            println!(
                "tokens {} sweeps {} forward/token {:.3}",
                out.new_tokens(),
                out.forward_passes,
                out.forward_passes_per_token()
            );
            if let Some(path) = &decode.out {
                let meta = TrajectoryMeta {
                    config_hash: merged.hash(),
                    checkpoint: decode.checkpoint.display().to_string(),
                    prompt: decode.prompt.clone(),
                    mode: mode_name,
                    gamma: merged.decode.gamma,
                };
                write_trajectory(path, &meta, &out.events)?;
            }
        }
        Command::Firstpass { common, checkpoint, probes, out } => {
            let cfg = load_config(&common)?;
            let (backbone, _) = load_checkpoint(&checkpoint)?;
            let vocab = Vocabulary::default();
            let docs = cfg.build_corpus(&vocab, cfg.seed ^ 0xF1257)?;
            let cells = firstpass_experiment(
                &backbone,
                &docs,
                backbone.cfg.k_max,
                probes,
                cfg.seed,
                cfg.decode_attention()?,
            );
            write_firstpass_csv(&out, &cfg.hash(), &cells)?;
            for c in &cells {
                eprintln!(
                    "offset {:2} {:?}: {:.3} ({}/{})",
                    c.offset,
                    c.regime,
                    c.accuracy(),
                    c.hits,
                    c.total
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Entropyk { common, checkpoint, probes_per_doc, out } => {
            let cfg = load_config(&common)?;
            let (backbone, khead) = load_checkpoint(&checkpoint)?;
            let vocab = Vocabulary::default();
            let docs = cfg.build_corpus(&vocab, cfg.seed ^ 0xE27)?;
            let report = entropy_k_experiment(&backbone, &khead, &docs, probes_per_doc, cfg.seed);
            write_entropy_k_csv(&out, &cfg.hash(), &report)?;
            if report.correlation.rho.is_nan() {
                println!(
                    "rank correlation undefined (constant input); mean K low {:.2} high {:.2}",
                    report.mean_k_low, report.mean_k_high
                );
            } else {
                println!(
                    "spearman rho {:.4} (one-sided p {:.3e}), mean K low {:.2} high {:.2}",
                    report.correlation.rho,
                    report.correlation.p_one_sided,
                    report.mean_k_low,
                    report.mean_k_high
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Ablate { common, seeds, eval_items, workdir, out } => {
            let cfg = load_config(&common)?;
            let tmp;
            let workdir = match workdir {
                Some(d) => {
                    std::fs::create_dir_all(&d)?;
                    d
                }
                None => {
                    tmp = tempdir()?;
                    tmp.clone()
                }
            };
            let args = AblationArgs {
                cfg: &cfg,
                seeds: (0..seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect(),
                workdir: &workdir,
                eval_items,
            };
            let report = ablate_experiment(&args)?;
            report.write_csv(&out)?;
            for row in &report.rows {
                println!(
                    "{:26} seed {} acc {:.3} fpt {:.3} tok/s {:8.1} meanK {:.2} meanD {:.2}",
                    row.condition,
                    row.seed,
                    row.accuracy,
                    row.fpt,
                    row.tokens_per_sec,
                    row.mean_k,
                    row.mean_delta
                );
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn tempdir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("cdlm-ablate-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
