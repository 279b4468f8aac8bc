use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deft_cli::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_params, cmd_synth, cmd_train, exit_code,
    parse_toggles, render_gradcheck, render_params, resolve_config, GradScope,
};
use deft_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "deft",
    version,
    about = "Surface-defect segmentation: data synthesis, training, evaluation, and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic defect dataset (images/ and masks/ PNG pairs)
    Synth {
        /// Run config TOML; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override every seed in the config
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.deft, loss.csv, and config.toml
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score a checkpoint against a dataset directory
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding images/ and masks/
        #[arg(long)]
        data: PathBuf,
        /// Binarization threshold for the scalar metrics
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value = "deft-out")]
        output_dir: PathBuf,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// op: every autodiff op; block: one transformer block; model: the
        /// whole reduced network
        #[arg(long, default_value = "op")]
        scope: String,
        /// Self-test hook: corrupt one analytic gradient so the run must fail
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Parameter count, per-module breakdown, and a FLOPs estimate
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input side length for the FLOPs estimate (multiple of 32)
        #[arg(long, default_value_t = 256)]
        input_size: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train and score the baseline plus each cumulative component variant
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Comma-separated components to add on top of the baseline
        #[arg(long, default_value = "csb,pab,lpb,lmps,cffn")]
        toggles: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

/// Prints without panicking when stdout is a closed pipe (`deft eval | head`).
fn emit(text: String) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            config,
            seed,
            output_dir,
        } => {
            let cfg = resolve_config(config.as_deref(), seed, output_dir.as_deref())?;
            let n = cmd_synth(&cfg)?;
            emit(format!(
                "wrote {n} image/mask pairs under {}\n",
                cfg.output_dir.display()
            ));
        }
        Cmd::Train {
            config,
            seed,
            output_dir,
        } => {
            let cfg = resolve_config(config.as_deref(), seed, output_dir.as_deref())?;
            let art = cmd_train(&cfg)?;
            let last = art.records.last().map(|r| r.total_loss);
            emit(format!(
                "trained {} iterations{}; checkpoint {}\n",
                art.records.len(),
                last.map(|l| format!(" (final loss {l:.6})")).unwrap_or_default(),
                art.checkpoint.display()
            ));
        }
        Cmd::Eval {
            checkpoint,
            data,
            threshold,
            output_dir,
        } => {
            let metrics = cmd_eval(&checkpoint, &data, threshold, &output_dir)?;
            emit(format!("{}\n", metrics.to_json()));
        }
        Cmd::Gradcheck { scope, corrupt } => {
            let scope: GradScope = scope.parse()?;
            let reports = cmd_gradcheck(scope, corrupt)?;
            emit(render_gradcheck(&reports));
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.pass())
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Error::numeric(format!(
                    "gradient check failed for: {}",
                    failed.join(", ")
                )));
            }
        }
        Cmd::Params {
            config,
            input_size,
            output_dir,
        } => {
            let cfg = resolve_config(config.as_deref(), None, output_dir.as_deref())?;
            let summary = cmd_params(&cfg.model, input_size, &cfg.output_dir)?;
            emit(render_params(&summary));
        }
        Cmd::Ablate {
            config,
            seed,
            output_dir,
            toggles,
            threshold,
        } => {
            let cfg = resolve_config(config.as_deref(), seed, output_dir.as_deref())?;
            let features = parse_toggles(&toggles)?;
            let rows = cmd_ablate(&cfg, &features, threshold)?;
            emit(deft_cli::ablation_to_csv(&rows));
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
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
