use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lanegrid::model::HeadKind;
use lanegrid::Decode;
use lanegrid_cli::commands::{self, group_digits};
use lanegrid_cli::{CliError, CliResult, ExperimentConfig, Overrides};

/// Row-anchor lane detection experiments on synthetic road scenes.
#[derive(Parser)]
#[command(name = "lanegrid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Cls,
    Reg,
    RegNorm,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Argmax,
    Expectation,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for data, initialization, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long, value_enum)]
    decode: Option<DecodeArg>,
    /// Weight of the structural loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the auxiliary segmentation loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the shape term inside the structural loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Cells per anchor row; a comma list for `sweep`.
    #[arg(long, value_delimiter = ',')]
    cells: Vec<usize>,
    /// Output directory (output image for `infer`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of scenes (defaults to data.scenes).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a dataset and write config, log, checkpoint and holdout report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on every scene of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict lanes for one image and write an overlay.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print operation counts and forward latency.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
    /// Train and evaluate once per cell count.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            head: self.head.map(|h| match h {
                HeadArg::Cls => HeadKind::Classification,
                HeadArg::Reg => HeadKind::Regression,
                HeadArg::RegNorm => HeadKind::RegressionNorm,
            }),
            decode: self.decode.map(|d| match d {
                DecodeArg::Argmax => Decode::Argmax,
                DecodeArg::Expectation => Decode::Expectation,
            }),
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            cells: self.cells.clone(),
            out: self.out.clone(),
        }
    }

    fn config(&self, keep_cells: bool) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref())?;
        let mut o = self.overrides();
        if !keep_cells {
            o.cells.clear();
        }
        cfg.apply(&o)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<&Path> {
    cfg.out_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out (or out_dir in the config) is required".into()))
}

fn run(cli: Cli) -> CliResult<()> {
    lanegrid_cli::init_threads()?;
    match cli.command {
        Command::Synth { common, count } => {
            let cfg = common.config(true)?;
            let dir = out_dir(&cfg)?;
            let n = commands::synth(&cfg, dir, count)?;
            commands::echo_config(&cfg, dir)?;
            println!("wrote {n} scenes to {}", dir.display());
        }
        Command::Train { common, data } => {
            if common.cells.len() > 1 {
                return Err(CliError::Usage("train takes a single --cells value".into()));
            }
            let cfg = common.config(true)?;
            let summary = commands::train(&cfg, &data, out_dir(&cfg)?)?;
            println!("{}", commands::to_json(&summary)?);
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let cfg = common.config(false)?;
            let model = commands::load_model(&checkpoint)?;
            let scenes = commands::load_dataset(&data)?;
            let ev = commands::evaluate(&model, &scenes, &cfg.eval)?;
            let text = commands::to_json(&ev)?;
            if let Some(dir) = &cfg.out_dir {
                commands::echo_config(&cfg, dir)?;
                let path = dir.join(commands::REPORT_FILE);
                std::fs::write(&path, &text).map_err(|e| CliError::data(path.display(), e))?;
            }
            println!("{text}");
        }
        Command::Infer {
            common,
            checkpoint,
            image,
        } => {
            let cfg = common.config(false)?;
            let out = cfg
                .out_dir
                .clone()
                .ok_or_else(|| CliError::Usage("--out <image.ppm> is required".into()))?;
            let model = commands::load_model(&checkpoint)?;
            let lanes = commands::infer(&model, &image, &out, cfg.eval.decode)?;
            let points: Vec<Option<&[(f64, f64)]>> = lanes
                .slots()
                .iter()
                .map(|l| l.as_ref().map(|l| l.points()))
                .collect();
            println!("{}", commands::to_json(&points)?);
        }
        Command::Bench { common, runs } => {
            let cfg = common.config(true)?;
            let report = commands::bench(&cfg, runs)?;
            println!(
                "{:<12} {:>10} {:>14} {:>16}",
                "grid", "input", "row-anchor", "segmentation"
            );
            for row in &report.costs {
                println!(
                    "{:<12} {:>10} {:>14} {:>16}",
                    row.name,
                    format!("{}x{}", row.input.0, row.input.1),
                    group_digits(row.formulation),
                    group_digits(row.segmentation)
                );
            }
            println!(
                "mean forward latency: {:.3} ms over {} runs ({} threads)",
                report.mean_forward_ms, report.runs, report.threads
            );
        }
        Command::Sweep { common, data } => {
            let cfg = common.config(false)?;
            let cells = if common.cells.is_empty() {
                vec![25, 50, 100, 200]
            } else {
                common.cells.clone()
            };
            let rows = commands::sweep(&cfg, &data, &cells, cfg.out_dir.as_deref())?;
            print!("{}", commands::sweep_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lanegrid: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
