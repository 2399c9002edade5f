//! `recon`: synthetic data generation, online reconstruction, evaluation
//! and loss diagnostics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 runtime failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use recon_core::commands::{self, CommandError, CommandResult};
use recon_core::metrics::{PoseAlignment, Scaling};
use recon_core::synth::SceneSpec;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "recon", version, about = "Online pointmap reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Curved static surface, drifting camera.
    Rigid,
    /// Flat-ish surface at 320x256 with two oscillating disks.
    Deforming,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// Scene description (JSON). Mutually exclusive with --preset.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Preset image width (rigid only).
        #[arg(long, default_value_t = 128)]
        width: usize,
        /// Preset image height (rigid only).
        #[arg(long, default_value_t = 96)]
        height: usize,
        /// Print the scene spec as JSON instead of generating.
        #[arg(long)]
        print_spec: bool,
        #[arg(long, required_unless_present = "print_spec")]
        out: Option<PathBuf>,
    },
    /// Reconstruct a dataset and write traj.txt, depth_%06d.bin and report.json.
    Run {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key = value` run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the fused point cloud as ASCII PLY.
        #[arg(long)]
        export_ply: Option<PathBuf>,
    },
    /// Depth metrics: two depth files, or a run directory against a dataset.
    EvalDepth {
        pred: PathBuf,
        gt: PathBuf,
        /// median, affine or none. Defaults to the config value.
        #[arg(long)]
        scaling: Option<Scaling>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trajectory metrics: TUM files or run/dataset directories.
    EvalPose {
        pred: PathBuf,
        gt: PathBuf,
        /// sim3 or se3.
        #[arg(long, default_value = "sim3")]
        alignment: PoseAlignment,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
    },
    /// Loss breakdown per consecutive frame pair, one JSON object per line.
    Losses {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn preset(kind: Preset, seed: u64, frames: usize, width: usize, height: usize) -> SceneSpec {
    match kind {
        Preset::Rigid => SceneSpec::rigid(seed, width, height, frames),
        Preset::Deforming => SceneSpec::two_disks(seed, frames, true),
    }
}

/// Writes to stdout. A closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{text}").and_then(|_| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: stdout: {e}");
            std::process::exit(2);
        }
    }
}

fn print(value: &Value) {
    emit(&serde_json::to_string_pretty(value).expect("JSON values always serialize"));
}

fn execute(command: Command) -> CommandResult<ExitCode> {
    match command {
        Command::Synth {
            spec,
            preset: kind,
            seed,
            frames,
            width,
            height,
            print_spec,
            out,
        } => {
            let spec = match (spec, kind) {
                (Some(path), _) => commands::load_scene_spec(&path)?,
                (None, Some(kind)) => preset(kind, seed, frames, width, height),
                (None, None) => unreachable!("clap requires one of --spec and --preset"),
            };
            if print_spec {
                print(&serde_json::to_value(&spec).map_err(|e| CommandError::Runtime(e.to_string()))?);
                return Ok(ExitCode::SUCCESS);
            }
            let out = out.expect("clap requires --out");
            let data = commands::cmd_synth(&spec, &out)?;
            let dynamic: usize = data.frames.iter().map(|f| f.dynamic_mask.iter().filter(|&&d| d).count()).sum();
            print(&json!({
                "schema": "recon.synth/1",
                "out": out.display().to_string(),
                "manifest": data.manifest,
                "dynamic_pixels": dynamic,
            }));
        }
        Command::Run {
            dataset,
            out,
            config,
            export_ply,
        } => {
            let config = commands::load_run_config(config.as_deref())?;
            let summary = commands::cmd_run(&dataset, &config, &out, export_ply.as_deref())?;
            let ok = summary.success();
            print(&json!({ "schema": "recon.run-summary/1", "success": ok, "summary": summary }));
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
        Command::EvalDepth {
            pred,
            gt,
            scaling,
            config,
        } => {
            let scaling = match scaling {
                Some(s) => s,
                None => commands::load_run_config(config.as_deref())?.scaling,
            };
            print(&commands::cmd_eval_depth(&pred, &gt, scaling)?);
        }
        Command::EvalPose { pred, gt, alignment } => print(&commands::cmd_eval_pose(&pred, &gt, alignment)?),
        Command::Gradcheck {
            seeds,
            width,
            height,
            epsilon,
        } => {
            let report = commands::cmd_gradcheck(seeds, width, height, epsilon)?;
            print(&report);
            if report["pass"] != Value::Bool(true) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Losses { dataset, config } => {
            let config = commands::load_run_config(config.as_deref())?;
            for line in commands::cmd_losses(&dataset, &config)? {
                emit(&line.to_string());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
