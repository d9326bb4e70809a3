use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edmsr::Error;
use edmsr_cli::commands::{
    cmd_eval, cmd_infer, cmd_preprocess, cmd_synth, cmd_train, error_kind, exit_code, EvalInputs,
};
use edmsr_cli::config::{output_path, Arch, RunConfig};

#[derive(Parser)]
#[command(
    name = "edmsr",
    version,
    about = "EDM diffusion super-resolution for volumetric images"
)]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.arch3d.lr=1e-3`. Repeatable; the
    /// last assignment to a key wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic HR volumes and a subject-level split manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_subjects: Option<usize>,
    },
    /// Normalize, downsample and store HR/LR pairs.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Train a denoiser on the preprocessed training subjects.
    Train {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one LR volume.
    Infer {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions and baselines against the HR truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        /// LR input; enables the configured baselines.
        #[arg(long)]
        lr: Option<PathBuf>,
        /// `method=path`; repeatable.
        #[arg(long = "pred", value_name = "METHOD=PATH")]
        predictions: Vec<String>,
        #[arg(long, default_value = "subject")]
        subject: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> edmsr::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.command {
        Command::Synth {
            n_subjects: Some(n), ..
        } => overrides.push(format!("data.n_subjects={n}")),
        Command::Preprocess { scale: Some(s), .. } => overrides.push(format!("data.scale={s}")),
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { out, .. } => {
            let m = cmd_synth(&cfg, &output_path(&out))?;
            println!("synthesized {} train / {} test subjects", m.train.len(), m.test.len());
        }
        Command::Preprocess { input, out, .. } => {
            let m = cmd_preprocess(&cfg, &input, &output_path(&out))?;
            println!("preprocessed {} subjects", m.subjects().count());
        }
        Command::Train {
            arch,
            data,
            out,
            resume,
        } => {
            let (model, log) = cmd_train(&cfg, arch, &data, &output_path(&out), resume.as_deref())?;
            let last = log.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!("{arch}: {} updates, last loss {last:.6}", model.state.t);
        }
        Command::Infer {
            arch,
            checkpoint,
            input,
            out,
        } => {
            let v = cmd_infer(&cfg, arch, &checkpoint, &input, &output_path(&out))?;
            println!("wrote {} volume", v.dims());
        }
        Command::Eval {
            truth,
            lr,
            predictions,
            subject,
            out,
        } => {
            let preds = predictions
                .iter()
                .map(|p| {
                    p.split_once('=')
                        .map(|(m, path)| (m.to_string(), PathBuf::from(path)))
                        .ok_or_else(|| Error::Config(format!("--pred {p:?} is not METHOD=PATH")))
                })
                .collect::<edmsr::Result<Vec<_>>>()?;
            let inputs = EvalInputs {
                subject: &subject,
                truth: &truth,
                lr: lr.as_deref(),
                predictions: &preds,
            };
            let report = cmd_eval(&cfg, &inputs, &output_path(&out))?;
            for a in report.method_aggregates() {
                println!("{:<10} psnr {:>8.3} dB  ssim {:.4}", a.method, a.psnr_db, a.ssim);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edmsr: error[{}]: {e}", error_kind(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
