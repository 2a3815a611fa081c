//! Pipeline orchestration behind the `scanfeat` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod plots;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::PipelineConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "scanfeat", version, about = "LiDAR scan-image features: simulate, train, extract, register, map, benchmark")]
pub struct Cli {
    /// JSON config layer; repeatable, later files win.
    #[arg(long = "config", global = true, value_name = "FILE")]
    pub configs: Vec<PathBuf>,
    /// Override one config value, e.g. `--set bench.tau1=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write plot data (CSV, gnuplot, PGM).
    #[arg(long, global = true)]
    pub emit_plots: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Synthetic,
    Real,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Raycast a scene along a trajectory into scans and poses.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build synthetic and/or real training pairs with pixel flow.
    Pairgen {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Two-stage training of the detector/descriptor network.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keypoints and descriptors of one scan.
    Extract {
        #[arg(long)]
        scan: PathBuf,
        /// Trained weights; the handcrafted stub when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rigid transform mapping feature file A into B.
    Register {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Odometry over a scan sequence, optionally with loop closure.
    Slam {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loop_closure: bool,
    },
    /// Repeatability, matching and registration recall over a pair manifest.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config and exit.
    Config,
}

impl Cli {
    /// Config layers plus the overrides implied by subcommand flags.
    pub fn resolve_config(&self) -> Result<PipelineConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        match &self.command {
            Command::Slam { loop_closure: true, .. } => overrides.push("slam.loop_closure=true".into()),
            Command::Pairgen { mode: Some(m), .. } => {
                let m = match m {
                    ModeArg::Synthetic => "synthetic",
                    ModeArg::Real => "real",
                    ModeArg::Both => "both",
                };
                overrides.push(format!("pairgen.mode={m}"));
            }
            _ => {}
        }
        PipelineConfig::load(&self.configs, &overrides)
    }
}

/// Resolves the config, logs it, then runs the subcommand.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    log::info!("resolved config:\n{}", cfg.to_json().trim_end());
    let plots = cli.emit_plots;
    match &cli.command {
        Command::Simulate { out } => commands::simulate(&cfg, out),
        Command::Pairgen { scans, out, .. } => commands::pairgen(&cfg, scans, out),
        Command::Train { pairs, out } => commands::train_cmd(&cfg, pairs, out),
        Command::Extract { scan, weights, out } => commands::extract_cmd(&cfg, scan, weights.as_deref(), out, plots),
        Command::Register { a, b, out } => commands::register_cmd(&cfg, a, b, out),
        Command::Slam { scans, weights, out, .. } => commands::slam_cmd(&cfg, scans, weights.as_deref(), out, plots),
        Command::Bench {
            manifest,
            scans,
            weights,
            out,
        } => {
            let r = commands::bench_cmd(&cfg, manifest, scans, weights.as_deref(), out)?;
            println!("RS {:.2}% MR {:.2}% RR {:.2}% ({} pairs)", r.rs, r.mr, r.rr, r.pair_count);
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_json());
            Ok(())
        }
    }
}
