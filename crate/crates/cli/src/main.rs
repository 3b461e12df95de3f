use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use unfold_ct_cli::{self as cli, ExperimentConfig};

/// Unfolded diffusion-bridge reconstruction for low-dose CT.
///
/// Any config key can also be given as `--key value` (hyphens or underscores)
/// and overrides the config file.
#[derive(Parser)]
#[command(name = "unfold-ct", version)]
struct Args {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate clean phantoms into <data_dir>/clean.
    Phantom,
    /// Simulate low-dose sinograms and FBP inputs for every clean image.
    Simulate,
    /// Train on the first train_count items into <run_dir>.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample the held-out items into <run_dir>/recon.
    Sample {
        /// Defaults to <run_dir>/final.ckpt.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Skip the noise after the last layer.
        #[arg(long)]
        no_final_noise: bool,
    },
    /// Score reconstructions against the clean images.
    Eval {
        /// Defaults to <run_dir>/recon.
        #[arg(long)]
        recon: Option<PathBuf>,
        /// Score the held-out FBP inputs instead.
        #[arg(long, conflicts_with = "recon")]
        fbp: bool,
        /// Defaults to <run_dir>/metrics.csv (metrics_fbp.csv with --fbp).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the schedule nodes as CSV.
    ScheduleDump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out metrics for several sampling-noise scales.
    AblateSigma {
        #[arg(long, default_value = "1,3,6,9,12,15")]
        scales: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out metrics for several numbers of unfolded layers.
    AblateK {
        /// Comma list or inclusive range, e.g. `5..9`.
        #[arg(long, default_value = "5..9")]
        k_list: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> Result<()> {
    let (rest, overrides) = cli::extract_overrides(std::env::args().collect())?;
    let args = Args::parse_from(rest);
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&overrides)?;
    let run = cfg.run_dir.clone();
    match args.cmd {
        Cmd::Phantom => {
            cli::cmd_phantom(&cfg)?;
        }
        Cmd::Simulate => {
            cli::cmd_simulate(&cfg)?;
        }
        Cmd::Train { resume } => {
            let st = cli::cmd_train(&cfg, &run, resume.as_deref())?;
            println!("trained to step {}; checkpoint {}", st.step(), run.join(cli::FINAL_CKPT).display());
        }
        Cmd::Sample { ckpt, no_final_noise } => {
            if no_final_noise {
                cfg.sample.final_noise = false;
            }
            let ckpt = ckpt.unwrap_or_else(|| run.join(cli::FINAL_CKPT));
            let dir = cli::cmd_sample(&cfg, &ckpt, &run)?;
            println!("wrote {}", dir.display());
        }
        Cmd::Eval { recon, fbp, out } => {
            let report = if fbp {
                let r = cli::fbp_baseline(&cfg)?;
                let out = out.unwrap_or_else(|| run.join("metrics_fbp.csv"));
                std::fs::create_dir_all(&run)?;
                std::fs::write(&out, r.to_csv()).with_context(|| format!("writing {}", out.display()))?;
                r
            } else {
                let recon = recon.unwrap_or_else(|| run.join(cli::RECON_DIR));
                cli::cmd_eval(&cfg, &recon, &out.unwrap_or_else(|| run.join(cli::METRICS_FILE)))?
            };
            println!("{}", cli::summary(&report));
        }
        Cmd::ScheduleDump { out } => {
            let csv = cli::cmd_schedule_dump(&cfg)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Cmd::AblateSigma { scales, ckpt, out } => {
            let scales: Vec<f64> = cli::parse_list(&scales)?;
            let ckpt = ckpt.unwrap_or_else(|| run.join(cli::FINAL_CKPT));
            let out = out.unwrap_or_else(|| run.join(cli::SIGMA_ABLATION_FILE));
            for r in cli::cmd_ablate_sigma(&cfg, &ckpt, &scales, &out)? {
                println!("c = {}: PSNR {:.3} ± {:.3}, SSIM {:.4} ± {:.4}", r.label, r.psnr.0, r.psnr.1, r.ssim.0, r.ssim.1);
            }
        }
        Cmd::AblateK { k_list, out } => {
            let ks: Vec<usize> = cli::parse_list(&k_list)?;
            let out = out.unwrap_or_else(|| run.join(cli::K_ABLATION_FILE));
            for r in cli::cmd_ablate_k(&cfg, &ks, &out)? {
                println!("K = {}: PSNR {:.3} ± {:.3}, SSIM {:.4} ± {:.4}", r.label, r.psnr.0, r.psnr.1, r.ssim.0, r.ssim.1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
