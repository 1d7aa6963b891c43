//! `wsss`: training, pseudo-label export, evaluation and text analyses.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wsss_core::parallel::Execution;
use wsss_core::pipeline::{self, TrainConfig};
use wsss_core::pseudo::Gammas;
use wsss_core::synthetic::{self, SynthSpec};
use wsss_core::Error;

#[derive(Parser)]
#[command(name = "wsss", version, about = "Weakly supervised lesion segmentation pipeline")]
struct Cli {
    /// Run per-image work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Independent runs with consecutive seeds, each in `run_<i>/`.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Export pseudo labels for every sample of a dataset.
    Pseudo {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda: f64,
        /// Fusion weights `cam,sim3,sim4`; defaults to the checkpoint's.
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the fused foreground maps.
        #[arg(long)]
        dump_cams: bool,
    },
    /// Score a directory of label images against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the background threshold on samples that have masks.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption word histograms and slice-window embedding similarity.
    AnalyzeText {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Supplies label groups and volume/slice order.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset and a matching training config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn gammas(arg: Option<&str>) -> wsss_core::Result<Option<Gammas>> {
    arg.map(Gammas::parse).transpose()
}

fn run(cli: Cli) -> wsss_core::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Train { config, seed, repeat } => {
            if repeat == 0 {
                return Err(Error::Config("--repeat must be at least 1".into()));
            }
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if cli.sequential {
                cfg.execution = Execution::Sequential;
            }
            if repeat == 1 {
                let (_, out) = pipeline::train(cfg)?;
                report_training(&out);
            } else {
                for out in pipeline::train_repeated(&cfg, repeat)? {
                    report_training(&out);
                }
            }
        }
        Command::Pseudo {
            ckpt,
            data,
            lambda,
            gamma,
            out,
            dump_cams,
        } => {
            let g = match gammas(gamma.as_deref())? {
                Some(g) => g,
                None => pipeline::restore(&ckpt)?.meta.gammas,
            };
            let n = pipeline::pseudo_cmd(&ckpt, &data, lambda, &g, &out, dump_cams, exec)?;
            println!("wrote {n} pseudo labels to {}", out.display());
        }
        Command::Evaluate { pred, gt, out } => {
            let m = pipeline::evaluate(&pred, &gt, &out, exec)?;
            println!("mIoU {:.4} ({})", m.miou, out.display());
        }
        Command::Sweep { ckpt, data, gamma, out } => {
            let r = pipeline::sweep_cmd(&ckpt, &data, gammas(gamma.as_deref())?, &out, exec)?;
            println!("best lambda {:.2} mIoU {:.4} ({})", r.best_lambda, r.best_miou, out.display());
        }
        Command::AnalyzeText {
            captions,
            embeddings,
            manifest,
            out,
        } => {
            let r = pipeline::analyze_text(&captions, &embeddings, manifest.as_deref(), &out)?;
            println!(
                "{} caption groups, {} window sizes ({})",
                r.histogram.len(),
                r.similarity.len(),
                out.display()
            );
        }
        Command::Synth { out, count, size, seed } => {
            let spec = SynthSpec {
                count,
                height: size,
                width: size,
                seed,
                ..Default::default()
            };
            let layout = synthetic::write_dataset(&out, &spec)?;
            let cfg = TrainConfig::desk_scale("manifest.json", "run", &spec);
            cfg.validate()?;
            let path = out.join("config.json");
            pipeline::write_config(&path, &cfg)?;
            println!("wrote {} samples; manifest {}; config {}", count, layout.manifest.display(), path.display());
        }
    }
    Ok(())
}

fn report_training(out: &pipeline::TrainOutcome) {
    println!(
        "steps {} first loss {:.6} last epoch mean {:.6} checkpoint {}",
        out.steps.len(),
        out.first_loss().unwrap_or(f64::NAN),
        out.last_epoch_mean().unwrap_or(f64::NAN),
        out.checkpoint.display()
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
