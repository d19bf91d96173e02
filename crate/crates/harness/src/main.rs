use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use asvit_harness::ablate::{cmd_ablate, unmatched, write_ablation_csv, AblateOptions, ArmSet};
use asvit_harness::bench::{cmd_bench, BatchRuleArg, BenchMode, BenchOptions, BenchResult};
use asvit_harness::manifest::Manifest;
use asvit_harness::netpbm::read_pnm;
use asvit_harness::run::{ensure_dir, load_config, load_eval, load_model, write_text};
use asvit_harness::stats::cmd_stats;
use asvit_harness::train::{cmd_train, TrainOptions};
use asvit_harness::viz::{cmd_viz, GRID_FILE};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asvit", version, about = "Adaptive token pruning for vision transformers")]
struct Cli {
    /// Worker threads for parallel inference.
    #[arg(long, global = true, env = "ASVIT_THREADS", default_value_t = 1)]
    threads: usize,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a teacher if needed, then fine-tune thresholds.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Dense checkpoint to start from instead of pre-training.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Throughput and latency of a checkpoint on the configured eval set.
    Bench(BenchArgs),
    /// Kept-token distribution, per-image schedules and token scores.
    Stats {
        /// Trained checkpoint (`model.asvt`).
        #[arg(long)]
        model: PathBuf,
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage pruning masks of one image as PGM overlays and a text grid.
    Viz(VizArgs),
    /// Matched-cost selector comparison and retrained switches.
    Ablate {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dense checkpoint shared by every arm.
        #[arg(long)]
        teacher: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Fine-tuning seeds; each trains its own arms.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = ArmSet::Selectors)]
        arms: ArmSet,
        /// Extra pruning-location sets such as `3-6-9`; repeatable.
        #[arg(long = "locations")]
        location_sets: Vec<String>,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint (`model.asvt`).
    #[arg(long)]
    model: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Dense ignores the pruning schedule.
    #[arg(long, value_enum, default_value_t = BenchMode::Pruned)]
    mode: BenchMode,
    /// Label written to the results row; defaults to the checkpoint stem.
    #[arg(long)]
    model_id: Option<String>,
    /// Images per timed forward batch.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Untimed batch-1 runs before latency timing (at least 10).
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Timed batch-1 runs (at least 100).
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Timed passes over the eval set; the median is reported.
    #[arg(long, default_value_t = 3)]
    passes: usize,
    /// How thresholds apply within a batch.
    #[arg(long, value_enum, default_value_t = BatchRuleArg::PerImage)]
    batch_rule: BatchRuleArg,
}

#[derive(Args)]
struct VizArgs {
    /// Trained checkpoint (`model.asvt`).
    #[arg(long)]
    model: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// P5 or P6 image matching the model resolution.
    #[arg(long, conflicts_with_all = ["config", "index"])]
    image: Option<PathBuf>,
    /// Configuration whose eval set supplies the image.
    #[arg(long, requires = "index")]
    config: Option<PathBuf>,
    /// Eval-set image index, with `--config`.
    #[arg(long)]
    index: Option<usize>,
    /// Output pixels per input pixel.
    #[arg(long, default_value_t = 8)]
    scale: usize,
    /// Show the dense model: nothing is pruned.
    #[arg(long)]
    dense: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Train { config, out, teacher } => {
            let r = cmd_train(&TrainOptions {
                config,
                out,
                teacher,
                threads,
                quiet: cli.quiet,
            })?;
            let last = r.outcome.metrics.last().context("no epochs were run")?;
            println!(
                "model {} acc {:.2}% flops {:.4}",
                r.model_path.display(),
                last.acc,
                last.flops_fraction
            );
        }
        Command::Bench(a) => bench(a, threads)?,
        Command::Stats { model, config, out } => {
            let (cfg, bytes) = load_config(&config)?;
            let ckpt = load_model(&model)?;
            ensure_dir(&out)?;
            let s = cmd_stats(&ckpt, &load_eval(&cfg)?, &out, threads)?;
            for st in 0..s.distribution.stages() {
                println!(
                    "stage {} kept mean {:.2} std {:.2}",
                    st + 1,
                    s.distribution.mean(st),
                    s.distribution.stddev(st)
                );
            }
            Manifest::new("stats", threads)
                .with_config(&bytes)
                .with_checkpoint(&model)?
                .write(&out)?;
        }
        Command::Viz(a) => viz(a, threads)?,
        Command::Ablate {
            config,
            teacher,
            out,
            seeds,
            arms,
            location_sets,
        } => {
            let (cfg, bytes) = load_config(&config)?;
            let t = load_model(&teacher)?;
            let location_sets = location_sets.iter().map(|s| parse_locations(s)).collect::<Result<_>>()?;
            ensure_dir(&out)?;
            let opts = AblateOptions {
                seeds,
                arms,
                location_sets,
                quiet: cli.quiet,
            };
            let rows = cmd_ablate(&cfg, &t.weights, &opts)?;
            let csv = write_ablation_csv(&rows);
            write_text(&out.join("ablation.csv"), &csv)?;
            Manifest::new("ablate", threads)
                .with_config(&bytes)
                .with_checkpoint(&teacher)?
                .write(&out)?;
            print!("{csv}");
            let bad = unmatched(&rows);
            if !bad.is_empty() {
                bail!("{} selector arms miss the adaptive cost by more than 2%", bad.len());
            }
        }
    }
    Ok(())
}

fn bench(a: BenchArgs, threads: usize) -> Result<()> {
    let (cfg, bytes) = load_config(&a.config)?;
    let ckpt = load_model(&a.model)?;
    let id = a.model_id.unwrap_or_else(|| stem(&a.model));
    let opts = BenchOptions {
        mode: a.mode,
        batch_size: a.batch_size,
        warmup: a.warmup,
        runs: a.runs,
        passes: a.passes,
        rule: a.batch_rule.into(),
    };
    let r = cmd_bench(&ckpt, &id, &load_eval(&cfg)?, &opts)?;
    ensure_dir(&a.out)?;
    let mut buf = Vec::new();
    r.write_csv(&mut buf)?;
    std::fs::write(a.out.join("bench.csv"), &buf)?;
    Manifest::new("bench", threads)
        .with_config(&bytes)
        .with_checkpoint(&a.model)?
        .write(&a.out)?;
    print!("{}", BenchResult::CSV_HEADER);
    println!();
    println!("{}", r.csv_row());
    Ok(())
}

fn viz(a: VizArgs, threads: usize) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let mut manifest = Manifest::new("viz", threads).with_checkpoint(&a.model)?;
    let image = match (&a.image, &a.config, a.index) {
        (Some(path), _, _) => read_pnm(path)?,
        (None, Some(config), Some(index)) => {
            let (cfg, bytes) = load_config(config)?;
            manifest = manifest.with_config(&bytes);
            let eval = load_eval(&cfg)?;
            eval.images
                .get(index)
                .with_context(|| format!("index {index} outside the {} eval images", eval.len()))?
                .clone()
        }
        _ => bail!("viz needs --image, or --config with --index"),
    };
    ensure_dir(&a.out)?;
    cmd_viz(&ckpt, &image, &a.out, a.scale, a.dense)?;
    manifest.write(&a.out)?;
    print!("{}", std::fs::read_to_string(a.out.join(GRID_FILE))?);
    Ok(())
}

fn parse_locations(s: &str) -> Result<Vec<usize>> {
    s.split(['-', ','])
        .map(|p| p.trim().parse().with_context(|| format!("bad location list {s:?}")))
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}
