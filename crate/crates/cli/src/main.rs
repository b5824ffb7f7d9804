//! `citrack` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error. Every
//! failure prints one JSON line `{"error": <kind>, "message": <text>}` to
//! standard error.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use citrack::checkpoint::Checkpoint;
use citrack::config::ExperimentConfig;
use citrack::continual::{
    build_world, generate_det_pls, generate_tracker_pls, run_protocol, stage_training_data, train_stage,
};
use citrack::dataset::{load_dataset, save_dataset, ClassSet};
use citrack::metrics::evaluate;
use citrack::tracker::track_dataset;
use citrack::Error;

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "citrack", version, about = "Class-incremental multi-object tracking on a synthetic world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults are used for missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the world seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlMode {
    Tracker,
    Det,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and validation splits with detector noise.
    Gen,
    /// Train one stage of the configured plan.
    TrainStage {
        /// Dataset directory to train on (e.g. `<gen out>/train`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage: usize,
        /// Checkpoint of the previous stage; required for stages after the first.
        #[arg(long)]
        prev: Option<PathBuf>,
    },
    /// Pseudo-label a dataset's videos with a trained model.
    PseudoLabel {
        #[arg(long, value_enum)]
        mode: PlMode,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Track every sequence of a dataset.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Classes to evaluate, comma separated; defaults to every class of the ground truth.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long, default_value = "eval")]
        method: String,
    },
    /// Run every stage of the plan and evaluate each one.
    RunProtocol,
    /// Draw per-stage metric trajectories of one or more protocol runs as SVG.
    Report {
        /// Run directories written by `run-protocol`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (kind, message, code) = match self {
            Failure::Usage(m) => ("usage", m.clone(), 1),
            Failure::Run(e) => (e.kind(), e.to_string(), if e.is_numerical() { 3 } else { 2 }),
        };
        let line = ErrorLine { error: kind, message: message.replace('\n', " ") };
        eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
        ExitCode::from(code)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.world.seed = s;
        cfg.training.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    let dir = common.out.as_deref().ok_or_else(|| Failure::Usage("--out is required for this command".into()))?;
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(dir)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?).map_err(Error::from)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    match cli.command {
        Command::Gen => {
            let cfg = load_config(common)?;
            let out = out_dir(common)?;
            let splits = build_world(&cfg)?;
            save_dataset(&splits.train, &out.join("train"))?;
            save_dataset(&splits.val, &out.join("val"))?;
            write_config(out, &cfg)?;
            println!("train {} sequences, val {} sequences", splits.train.sequences.len(), splits.val.sequences.len());
        }
        Command::TrainStage { data, stage, prev } => {
            let cfg = load_config(common)?;
            let out = out_dir(common)?;
            let plan = cfg.stage_plan()?;
            let train = stage_training_data(&load_dataset(&data)?, &plan, stage);
            let prev = prev.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = train_stage(prev.as_ref(), &train, &plan, stage, &cfg)?;
            let digest = outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
            if let Some(pl) = &outcome.pseudo_labels {
                save_dataset(pl, &out.join("pseudo_labels"))?;
            }
            write_json(&out.join("history.json"), &outcome.history)?;
            write_config(out, &cfg)?;
            println!("stage {stage} checkpoint {digest}");
        }
        Command::PseudoLabel { mode, checkpoint, data } => {
            let cfg = load_config(common)?;
            let out = out_dir(common)?;
            let model = Checkpoint::load(&checkpoint)?.model;
            let videos = load_dataset(&data)?.videos();
            let pls = match mode {
                PlMode::Tracker => generate_tracker_pls(&model, &videos, &cfg.tracker)?,
                PlMode::Det => generate_det_pls(&model, &videos, &cfg.tracker, cfg.training.det_pl_tau)?,
            };
            save_dataset(&pls, out)?;
            println!("{} pseudo-labels", pls.num_annotations());
        }
        Command::Track { checkpoint, data } => {
            let cfg = load_config(common)?;
            let out = out_dir(common)?;
            let model = Checkpoint::load(&checkpoint)?.model;
            let videos = load_dataset(&data)?.videos();
            let tracks = track_dataset(&model, &videos, &cfg.tracker)?;
            save_dataset(&tracks.to_dataset(&videos), out)?;
            println!("{} tracks", tracks.num_tracks());
        }
        Command::Evaluate { gt, pred, classes, stage, method } => {
            let gt = load_dataset(&gt)?;
            let pred = load_dataset(&pred)?;
            let classes: ClassSet =
                if classes.is_empty() { gt.class_names.keys().copied().collect() } else { classes.into_iter().collect() };
            let report = evaluate(&gt, &pred, &classes, stage, &method);
            if let Some(dir) = &common.out {
                report.write(dir)?;
            }
            print!("{}", report.to_csv()?);
        }
        Command::RunProtocol => {
            let cfg = load_config(common)?;
            let out = out_dir(common)?;
            write_config(out, &cfg)?;
            let splits = build_world(&cfg)?;
            let result = run_protocol(&splits, &cfg.stage_plan()?, &cfg, Some(out))?;
            for r in &result.reports {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "stage {} {}: mMOTA {} mIDF1 {} mAP {}",
                    r.stage,
                    r.method,
                    f(r.means.mmota),
                    f(r.means.midf1),
                    f(r.overall.map)
                );
            }
        }
        Command::Report { runs } => {
            let out = out_dir(common)?;
            let series = runs.iter().map(|r| report::load_run(r)).collect::<citrack::Result<Vec<_>>>()?;
            let path = out.join("report.svg");
            std::fs::write(&path, report::render(&series)).map_err(Error::from)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ").to_string();
            return Failure::Usage(first).report();
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
