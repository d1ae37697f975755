use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mace_core::config::PipelineConfig;
use mace_core::dataset::Dataset;
use mace_core::io::{load_checkpoint, load_dataset, save_checkpoint, write_dataset, Checkpoint, ModelState};
use mace_core::pipeline;
use mace_core::splat::export_splats;
use mace_core::synth::build_dataset;
use mace_core::trainer::{Stage, TrainLog};
use mace_core::Error;

mod report;

#[derive(Parser)]
#[command(name = "mace", version, about = "Mixture-of-experts relocalization and splat rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file (optional; built-in defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gating.eta=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and write it as a manifest.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an untrained checkpoint.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        stage: TrainStage,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint of the previous stage (defaults to `--out`).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Export artifacts.
    Export {
        #[command(subcommand)]
        what: ExportCommand,
    },
    /// Chart map size vs. error and PSNR vs. render time from report files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        plot: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Experts,
    Gate,
    Joint,
    Render,
}

impl From<TrainStage> for Stage {
    fn from(s: TrainStage) -> Self {
        match s {
            TrainStage::Experts => Stage::Experts,
            TrainStage::Gate => Stage::Gate,
            TrainStage::Joint => Stage::Joint,
            TrainStage::Render => Stage::Render,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Map,
    Query,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Localize every query frame.
    Loc {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write per-frame results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render views from predicted coordinates and score PSNR/SSIM.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "map")]
        split: SplitArg,
        /// Keep wall-clock fields (makes the report non-reproducible).
        #[arg(long)]
        timing: bool,
    },
}

#[derive(Subcommand)]
enum ExportCommand {
    /// Write one frame's predicted splats as PLY.
    Splats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mace: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<PipelineConfig> {
    Ok(PipelineConfig::load(args.config.as_deref(), &args.set)?)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn open_checkpoint(dir: &Path, allowed: &[Stage]) -> CliResult<(Checkpoint, ModelState, PipelineConfig)> {
    let ckpt = load_checkpoint(dir)?;
    ckpt.require_stage(allowed)?;
    let state = ModelState::from_checkpoint(&ckpt)?;
    let cfg = ckpt.config()?;
    Ok((ckpt, state, cfg))
}

/// Architecture is fixed by the first stage; later stages keep it.
fn keep_architecture(cfg: &mut PipelineConfig, snapshot: &PipelineConfig) {
    cfg.train.experts = snapshot.train.experts;
    cfg.train.decoder_k = snapshot.train.decoder_k;
    cfg.train.encoder = snapshot.train.encoder.clone();
    cfg.train.expert = snapshot.train.expert;
    cfg.train.router.hidden = snapshot.train.router.hidden.clone();
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth { config, out } => {
            let cfg = load_config(&config)?;
            let (scene, dataset) = build_dataset(&cfg.synth)?;
            let manifest = write_dataset(&dataset, &out)?;
            let info = serde_json::json!({
                "frames": dataset.len(),
                "map_frames": dataset.map_indices().len(),
                "query_frames": dataset.query_indices().len(),
                "regions": scene.regions(),
                "diameter": scene.diameter,
            });
            write_text(&out.join("scene.json"), &serde_json::to_string_pretty(&info).map_err(Error::from)?)?;
            println!("{}", manifest.display());
        }
        Command::Init { data, config, out } => {
            let cfg = load_config(&config)?;
            let dataset = load_dataset(&data)?;
            let state = pipeline::init_state(&dataset, &cfg)?;
            save_checkpoint(&state.to_checkpoint(Stage::Init, &cfg)?, &out)?;
        }
        Command::Train {
            stage,
            data,
            config,
            out,
            from,
        } => train(stage.into(), &data, &config, &out, from.as_deref())?,
        Command::Eval { what } => match what {
            EvalCommand::Loc { ckpt, data, report, csv } => {
                let (_, state, cfg) = open_checkpoint(&ckpt, &[Stage::Init, Stage::Gate, Stage::Joint])?;
                let dataset = load_dataset(&data)?;
                let r = pipeline::localization_report(&state, &dataset, &cfg)?;
                write_text(&report, &r.to_json()?)?;
                if let Some(csv) = csv {
                    write_text(&csv, &r.to_csv())?;
                }
                println!(
                    "median {} cm / {} deg, failure rate {:.3}",
                    fmt_opt(r.median_translation_cm),
                    fmt_opt(r.median_rotation_deg),
                    r.failure_rate
                );
            }
            EvalCommand::Render {
                ckpt,
                data,
                report,
                split,
                timing,
            } => {
                let (_, state, cfg) = open_checkpoint(&ckpt, &[Stage::Render])?;
                let dataset = load_dataset(&data)?;
                let frames = match split {
                    SplitArg::Map => dataset.map_indices(),
                    SplitArg::Query => dataset.query_indices(),
                };
                let r = pipeline::render_report(&state, &dataset, &cfg, Some(&frames))?;
                write_text(&report, &r.to_json(timing)?)?;
                println!("PSNR {:.2} dB, SSIM {:.4}", r.mean_psnr, r.mean_ssim);
            }
        },
        Command::Export {
            what: ExportCommand::Splats { ckpt, data, frame, out },
        } => {
            let (_, state, _) = open_checkpoint(&ckpt, &[Stage::Render])?;
            let dataset = load_dataset(&data)?;
            let splats = pipeline::frame_splats(&state, &dataset, frame)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            export_splats(&splats, &out)?;
            println!("{} splats", splats.len());
        }
        Command::Report { inputs, plot } => report::run(&inputs, &plot)?,
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

fn train(stage: Stage, data: &Path, config: &ConfigArgs, out: &Path, from: Option<&Path>) -> CliResult {
    let mut cfg = load_config(config)?;
    let dataset: Dataset = load_dataset(data)?;
    let mut state = match stage.prerequisite() {
        None => pipeline::init_state(&dataset, &cfg)?,
        Some(prev) => {
            let (_, state, snapshot) = open_checkpoint(from.unwrap_or(out), &[prev])?;
            keep_architecture(&mut cfg, &snapshot);
            state
        }
    };
    let mut log = TrainLog::default();
    let result = pipeline::train_stage(stage, &mut state, &dataset, &cfg, &mut log);
    let name = stage.as_str();
    match result {
        Ok(summary) => {
            save_checkpoint(&state.to_checkpoint(stage, &cfg)?, out)?;
            write_text(&out.join(format!("log_{name}.csv")), &log.to_csv())?;
            write_text(
                &out.join(format!("summary_{name}.json")),
                &serde_json::to_string_pretty(&summary).map_err(Error::from)?,
            )?;
            Ok(())
        }
        Err(e @ Error::Divergence(_)) => {
            // Keep what was reached for post-mortem inspection.
            let dump = out.join("divergence");
            let mut failure = Failure::from(e);
            match state.to_checkpoint(stage, &cfg).and_then(|c| save_checkpoint(&c, &dump)) {
                Ok(()) => {
                    write_text(&dump.join(format!("log_{name}.csv")), &log.to_csv())?;
                    failure.message.push_str(&format!(" (state dumped to {})", dump.display()));
                }
                Err(dump_err) => failure.message.push_str(&format!(" (state dump failed: {dump_err})")),
            }
            Err(failure)
        }
        Err(e) => Err(e.into()),
    }
}
