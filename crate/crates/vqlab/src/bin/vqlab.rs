//! Experiment runner CLI. Every study lives in the library
//! (`vqlab::experiments`); this binary only parses flags and maps errors to
//! exit codes: 0 success, 2 configuration/usage error, 1 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqlab::experiments::{self, dataset_preset, ExperimentConfig};

#[derive(Parser)]
#[command(name = "vqlab", version, about = "Vector-quantization laboratory experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults echo the standard desk setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (must not exist unless --force).
    #[arg(long)]
    out: PathBuf,
    /// Master seed override; derives all per-block seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse an existing output directory.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, experiments::ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.apply_seed_override(seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one quantizer configuration end to end.
    Train(Common),
    /// Train the same configuration across ascending codebook sizes.
    SweepCodebook {
        #[command(flatten)]
        common: Common,
        /// Comma-separated codebook sizes, ascending.
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        sizes: Vec<usize>,
    },
    /// Compare codebook initialization strategies under the lc regime.
    AblateInit(Common),
    /// Initialize the codebook on one dataset, train on another.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Source dataset preset (codebook features come from here).
        #[arg(long, default_value = "synth-b")]
        source: String,
        /// Target dataset preset (training happens here).
        #[arg(long, default_value = "synth-a")]
        target: String,
    },
    /// Replace tokens with their M-th nearest entries and measure PSNR.
    TokenReplace {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint (model.vqmd from `train`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated M values.
        #[arg(long, value_delimiter = ',', default_value = "1,2,8,32")]
        m: Vec<usize>,
    },
    /// Static-vs-trainable codebook and projector grid.
    AblateProjector(Common),
    /// Sweep the projected codebook dimension.
    AblateDim {
        #[command(flatten)]
        common: Common,
        /// Comma-separated projected dimensions.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        dims: Vec<usize>,
    },
    /// Time the nearest-entry search across codebook sizes.
    BenchQuantize {
        #[command(flatten)]
        common: Common,
        /// Comma-separated codebook sizes.
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        sizes: Vec<usize>,
        /// Feature rows to quantize.
        #[arg(long, default_value_t = 10_000)]
        tokens: usize,
        /// Feature dimension.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Worker threads for the row-parallel path (1 = single thread).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn run(cli: Cli) -> Result<(), experiments::ExperimentError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let summary = experiments::cmd_train(&cfg, &common.out, common.force)?;
            println!(
                "{}: n={} utilization={:.4} mse={:.6} psnr={:.2}",
                summary.variant, summary.n, summary.utilization, summary.mse, summary.psnr
            );
        }
        Command::SweepCodebook { common, sizes } => {
            let cfg = common.load()?;
            for row in experiments::cmd_sweep_codebook(&cfg, &sizes, &common.out, common.force)? {
                println!(
                    "{} n={} utilization={:.4} mse={:.6} psnr={:.2}",
                    row.variant, row.n, row.utilization, row.mse, row.psnr
                );
            }
        }
        Command::AblateInit(common) => {
            let cfg = common.load()?;
            for row in experiments::cmd_ablate_init(&cfg, &common.out, common.force)? {
                println!(
                    "{} utilization={:.4} mse={:.6} psnr={:.2}",
                    row.variant, row.utilization, row.mse, row.psnr
                );
            }
        }
        Command::Transfer { common, source, target } => {
            let cfg = common.load()?;
            let source = dataset_preset(&source).ok_or_else(|| experiments::ExperimentError::Config {
                field: "source".to_string(),
                reason: format!("unknown dataset preset {source:?} (available: synth-a, synth-b)"),
            })?;
            let target = dataset_preset(&target).ok_or_else(|| experiments::ExperimentError::Config {
                field: "target".to_string(),
                reason: format!("unknown dataset preset {target:?} (available: synth-a, synth-b)"),
            })?;
            for row in experiments::cmd_transfer(&cfg, &source, &target, &common.out, common.force)? {
                println!(
                    "{} utilization={:.4} mse={:.6} psnr={:.2}",
                    row.variant, row.utilization, row.mse, row.psnr
                );
            }
        }
        Command::TokenReplace { common, checkpoint, m } => {
            let cfg = common.load()?;
            for (m, psnr) in experiments::cmd_token_replace(&cfg, &checkpoint, &m, &common.out, common.force)? {
                println!("m={m} psnr={psnr:.3}");
            }
        }
        Command::AblateProjector(common) => {
            let cfg = common.load()?;
            for row in experiments::cmd_ablate_projector(&cfg, &common.out, common.force)? {
                println!(
                    "{} utilization={:.4} mse={:.6} psnr={:.2}",
                    row.variant, row.utilization, row.mse, row.psnr
                );
            }
        }
        Command::AblateDim { common, dims } => {
            let cfg = common.load()?;
            for row in experiments::cmd_ablate_dim(&cfg, &dims, &common.out, common.force)? {
                println!(
                    "{} d'={} utilization={:.4} mse={:.6}",
                    row.variant, row.d_prime, row.utilization, row.mse
                );
            }
        }
        Command::BenchQuantize { common, sizes, tokens, dim, threads } => {
            let res = experiments::cmd_bench_quantize(&sizes, tokens, dim, threads, &common.out, common.force)?;
            for row in &res.rows {
                println!(
                    "n={:<8} tokens={} wall_ms={:.2} tokens/s={:.0}",
                    row.n,
                    row.tokens,
                    row.wall_ns as f64 / 1e6,
                    row.tokens_per_sec
                );
            }
            for share in &res.share_rows {
                println!(
                    "n={} quantize_ms={:.2} forward_ms={:.2} share={:.3}",
                    share.n,
                    share.quantize_ns as f64 / 1e6,
                    share.forward_ns as f64 / 1e6,
                    share.quantize_share
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
