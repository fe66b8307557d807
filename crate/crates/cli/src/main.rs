use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sodkit::commands::{self, sig6};
use sodkit::config::{ConfigLayer, RunConfig, JOBS_ENV};
use sodkit::{selftest, CliError};
use sodkit_core::fusion::BackboneKind;
use sodkit_core::tensor::ResizeMode;
use sodkit_core::weights::NetworkLayout;

/// RGB-D saliency toolkit: depth enhancement, forward inference, losses and evaluation.
#[derive(Parser, Debug)]
#[command(name = "sodkit", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalFlags {
    /// TOML file with run settings; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// Side of the center-surround window (odd).
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use identity weights (and constant mean-intensity features unless --backbone is given).
    #[arg(long, global = true)]
    identity_weights: bool,
    /// Resize predictions to the ground-truth size instead of failing.
    #[arg(long, global = true)]
    resize_pred: bool,
    /// Worker threads for eval; SODKIT_JOBS overrides this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    channel_width: Option<usize>,
    /// Square network input size (multiple of 16).
    #[arg(long, global = true)]
    input_size: Option<usize>,
    /// Ground-truth pixels at or above this value are foreground.
    #[arg(long, global = true)]
    gt_threshold: Option<u8>,
    #[arg(long, global = true, value_enum)]
    backbone: Option<BackboneArg>,
    #[arg(long, global = true, value_enum)]
    resize_mode: Option<ResizeArg>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum BackboneArg {
    Seeded,
    Mean,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ResizeArg {
    Bilinear,
    Maxpool,
}

impl GlobalFlags {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            window: self.window,
            seed: self.seed,
            channel_width: self.channel_width,
            input_size: self.input_size,
            gt_threshold: self.gt_threshold,
            identity_weights: self.identity_weights.then_some(true),
            resize_pred: self.resize_pred.then_some(true),
            backbone: self.backbone.map(|b| match b {
                BackboneArg::Seeded => BackboneKind::Seeded,
                BackboneArg::Mean => BackboneKind::Mean,
            }),
            resize_mode: self.resize_mode.map(|m| match m {
                ResizeArg::Bilinear => ResizeMode::Bilinear,
                ResizeArg::Maxpool => ResizeMode::MaxPool,
            }),
            jobs: self.jobs,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance a depth map and encode it as a 3-channel HHA image.
    Enhance {
        depth: PathBuf,
        /// Output PNG; a JSON sidecar is written next to it.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the fusion network on an RGB image and its depth map.
    Forward {
        rgb: PathBuf,
        depth: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Weight container; otherwise --seed or --identity-weights is required.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Loss of up to three predictions (final first) against a ground-truth mask.
    Loss {
        #[arg(long = "pred", required = true, num_args = 1..=3)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a directory of predictions against ground-truth masks.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Cross-check every kernel against its brute-force reference.
    Selftest {
        /// Weight container to exercise in the forward suite.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write a seeded (or identity) weight container.
    Weights {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let env_jobs = std::env::var(JOBS_ENV).ok();
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.layer(), env_jobs.as_deref())?;
    match cli.command {
        Command::Enhance { depth, out } => {
            let r = commands::enhance(&depth, &out, &cfg)?;
            println!(
                "wrote {} ({}x{}), threshold {}{}",
                r.output,
                r.width,
                r.height,
                r.otsu_threshold,
                if r.degenerate { " (degenerate: constant depth)" } else { "" }
            );
        }
        Command::Forward {
            rgb,
            depth,
            out,
            weights,
        } => {
            let r = commands::forward(&rgb, &depth, &out, weights.as_deref(), &cfg)?;
            println!("wrote {} ({}x{}), mean saliency {}", r.output, r.width, r.height, sig6(r.mean));
            for s in &r.side_maps {
                println!("  side map layer {}: {}", s.layer, s.path);
            }
        }
        Command::Loss { preds, gt, out } => {
            let r = commands::loss(&preds, &gt, &cfg)?;
            let text = serde_json::to_string_pretty(&r).context("serialising loss report")?;
            match out {
                Some(path) => {
                    std::fs::write(&path, text + "\n").map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
                    for p in &r.predictions {
                        println!("{}: epa {}", p.path, sig6(p.loss.l_epa));
                    }
                    if let Some(t) = r.total {
                        println!("total {}", sig6(t));
                    }
                }
                None => println!("{text}"),
            }
        }
        Command::Eval { pred_dir, gt_dir, out } => {
            let r = commands::eval(&pred_dir, &gt_dir, &out, &cfg)?;
            for name in r.unmatched.predictions.iter().chain(&r.unmatched.ground_truth) {
                eprintln!("warning: unmatched file {name}");
            }
            let s = &r.summary;
            println!(
                "{} images: mae {} s {} mean_f {} mean_e {} ({} warnings)",
                s.images,
                sig6(s.mae),
                sig6(s.s_alpha),
                sig6(s.mean_f),
                sig6(s.mean_e),
                r.warnings
            );
        }
        Command::Selftest { weights } => {
            let results = selftest::run(cfg.seed, weights.as_deref());
            let mut failed = 0;
            for s in &results {
                println!("{} {:<10} {}", if s.passed { "PASS" } else { "FAIL" }, s.name, s.detail);
                failed += usize::from(!s.passed);
            }
            if failed > 0 {
                return Err(CliError::internal(format!("{failed} self-test suite(s) failed")).into());
            }
        }
        Command::Weights { out, layers } => {
            if layers < 2 {
                return Err(CliError::input("layers must be at least 2").into());
            }
            let layout = NetworkLayout::new(cfg.channel_width, layers);
            let n = commands::export_weights(&out, &layout, &cfg)?;
            println!("wrote {} entries to {}", n, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<CliError>().map_or(2, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
