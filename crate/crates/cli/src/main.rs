//! `logo`: train, evaluate and inspect the layer-tapped forecaster.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use logo_core::ErrorKind;

#[derive(Parser)]
#[command(name = "logo", version, about = "Layer-tapped transformer forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Independent runs to execute in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output root; the run writes to `<out>/<output.run_name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Long-term protocol: train one model per horizon and test it.
    Train(Common),
    /// Score saved weights on the test segment.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Weight file; defaults to the run directory's weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Train on a prefix of the training segment.
    Fewshot {
        #[command(flatten)]
        common: Common,
        /// Overrides `protocol.few_shot_fraction`.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train on `data`, test on `target` without further updates.
    Zeroshot(Common),
    /// Sweep one configuration axis and tabulate averaged metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// freeze_policy, fusion_variant, layer_selection, n_layers, local_tap or input_len.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; defaults to the axis's standard set.
        #[arg(long)]
        values: Option<String>,
    },
    /// Write per-layer patch similarity matrices for one test window.
    Probe {
        #[command(flatten)]
        common: Common,
        /// `all` or a tap index from 0 to the block count.
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = logo_core::diagnostics::GRAD_CHECK_STEP)]
        h: f64,
    },
    /// Write a synthetic CSV dataset.
    Synth {
        /// sine_mix, ramp or noise.
        #[arg(long, default_value = "sine_mix")]
        kind: String,
        #[arg(long, default_value_t = 4000)]
        length: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 96)]
        input_len: usize,
        #[arg(long, default_value_t = 96)]
        horizon: usize,
        #[arg(long)]
        path: PathBuf,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Eval { common, weights } => commands::eval(&common, weights),
        Command::Fewshot { common, fraction } => commands::fewshot(&common, fraction),
        Command::Zeroshot(c) => commands::zeroshot(&c),
        Command::Ablate {
            common,
            axis,
            values,
        } => commands::ablate(&common, axis, values),
        Command::Probe {
            common,
            layer,
            weights,
        } => commands::probe(&common, &layer, weights),
        Command::Gradcheck { seed, h } => commands::gradcheck(seed, h),
        Command::Synth {
            kind,
            length,
            channels,
            seed,
            noise,
            input_len,
            horizon,
            path,
        } => commands::synth(
            &kind, length, channels, seed, noise, input_len, horizon, &path,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
