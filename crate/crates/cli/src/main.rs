//! `flope`: scene generation, noise calibration, simulation and evaluation.

use clap::{Args, Parser, Subcommand};
use flope_core::calibrate::{calibrate_noise, CalibrationSetup, CalibrationTargets};
use flope_core::camera::Intrinsics;
use flope_core::experiment::{run, write_outputs, write_report, ExperimentConfig};
use flope_core::logs::{read_csv, RunContext, RunLogs};
use flope_core::metrics::{aggregate, RunReport, Thresholds};
use flope_core::simworld::{gen_scene, load_scene, stream_rng, streams, NoiseModel, SceneGenParams, ViewpointProtocol};
use flope_core::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "flope", version, about = "Flower pose estimation and pollination simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment and write its logs and report.
    Simulate(SimulateArgs),
    /// Fit the noise model to target single-shot statistics.
    CalibrateNoise(CalibrateArgs),
    /// Recompute a report from logs.
    Eval(EvalArgs),
    /// Write a random scene.
    GenScene(GenSceneArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of arms.
    #[arg(long)]
    arms: Option<u32>,
    /// Do not print the summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = CalibrationTargets::default().trans_cm)]
    trans_cm: f64,
    #[arg(long, default_value_t = CalibrationTargets::default().rot_deg)]
    rot_deg: f64,
    #[arg(long, default_value_t = CalibrationTargets::default().det_rate)]
    det_rate: f64,
    #[arg(long, default_value_t = CalibrationTargets::default().det_err_px)]
    det_err_px: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of (flower, viewpoint) samples.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `simulate`.
    #[arg(long, conflicts_with_all = ["tracks", "scene"], required_unless_present_all = ["tracks", "scene"])]
    run: Option<PathBuf>,
    /// Track CSV, evaluated against `--scene`.
    #[arg(long, requires = "scene")]
    tracks: Option<PathBuf>,
    #[arg(long, requires = "tracks")]
    scene: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SceneGenParams::default().count)]
    count: usize,
    /// Half extents of the placement box in meters; smaller is tighter.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    spread: Option<Vec<f64>>,
    #[arg(long)]
    min_separation: Option<f64>,
    #[arg(long)]
    facing_spread_deg: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Input problems exit with 2, failures while running with 3.
enum Failure {
    Input(Error),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn input<T>(r: flope_core::Result<T>) -> CliResult<T> {
    r.map_err(Failure::Input)
}

fn runtime<T>(r: flope_core::Result<T>) -> CliResult<T> {
    r.map_err(Failure::Runtime)
}

fn read_failed(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    }
}

fn write_text(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => runtime(fs::write(p, text).map_err(|e| read_failed(p, e.into()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut cfg = input(ExperimentConfig::load(&a.config).map_err(|e| read_failed(&a.config, e)))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.arms {
        cfg.arms = n;
    }
    input(cfg.validate())?;
    let scene = match cfg.resolve_scene() {
        Err(e @ Error::SceneGeneration(_)) => return Err(Failure::Runtime(e)),
        r => input(r)?,
    };
    log::info!(
        "simulating {} flowers, {} arm(s), seed {}",
        scene.len(),
        cfg.arms,
        cfg.seed
    );
    // nothing touches the output directory until the run has succeeded
    let out = runtime(run(&cfg, &scene))?;
    runtime(write_outputs(&a.out, &cfg, &out))?;
    if !a.quiet {
        print!("{}", out.report.summary_table());
    }
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let targets = CalibrationTargets {
        trans_cm: a.trans_cm,
        rot_deg: a.rot_deg,
        det_rate: a.det_rate,
        det_err_px: a.det_err_px,
    };
    if a.samples == 0 {
        return Err(Failure::Input(Error::config("samples", "must be positive")));
    }
    let setup = CalibrationSetup::new(
        a.seed,
        a.samples,
        Intrinsics::default_test(),
        &ViewpointProtocol::default(),
    );
    let noise = match calibrate_noise(&targets, &setup, &NoiseModel::default()) {
        Err(e @ Error::Config { .. }) => return Err(Failure::Input(e)),
        r => runtime(r)?,
    };
    let stats = setup.stats(&noise);
    log::info!(
        "fitted: {:.3} cm, {:.2} deg, detection {:.4}, {:.2} px",
        stats.trans_cm,
        stats.rot_deg,
        stats.det_rate,
        stats.det_err_px
    );
    let json = serde_json::to_string_pretty(&noise).expect("noise model serializes") + "\n";
    write_text(a.out.as_deref(), &json)
}

/// Logs holding only tracks and a scene: no detections, arms or views.
fn bare_logs(tracks: &Path, scene: &Path) -> CliResult<RunLogs> {
    let scene = input(load_scene(scene).map_err(|e| read_failed(scene, e)))?;
    let tracks = input(read_csv(tracks).map_err(|e| read_failed(tracks, e)))?;
    Ok(RunLogs {
        context: RunContext {
            seed: 0,
            config_digest: String::new(),
            n_views: 0,
            ticks: 0,
            thresholds: Thresholds::default(),
            workspace: None,
        },
        scene,
        tracks,
        detections: Vec::new(),
        pollinations: Vec::new(),
        commands: Vec::new(),
    })
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let logs = match (&a.run, &a.tracks, &a.scene) {
        (Some(dir), _, _) => input(RunLogs::read_dir(dir).map_err(|e| read_failed(dir, e)))?,
        (None, Some(t), Some(s)) => bare_logs(t, s)?,
        _ => unreachable!("clap enforces the argument groups"),
    };
    let report: RunReport = runtime(aggregate(&logs))?;
    if let Some(dir) = &a.out {
        runtime(write_report(dir, &report))?;
    }
    if !a.quiet {
        print!("{}", report.summary_table());
    }
    Ok(())
}

fn gen(a: &GenSceneArgs) -> CliResult<()> {
    let d = SceneGenParams::default();
    let p = SceneGenParams {
        count: a.count,
        spread: match &a.spread {
            Some(v) => [v[0], v[1], v[2]],
            None => d.spread,
        },
        min_separation: a.min_separation.unwrap_or(d.min_separation),
        facing_spread_deg: a.facing_spread_deg.unwrap_or(d.facing_spread_deg),
        ..d
    };
    input(p.validate())?;
    let scene = runtime(gen_scene::<f64>(&mut stream_rng(a.seed, streams::SCENE), &p))?;
    write_text(a.out.as_deref(), &(scene.to_json() + "\n"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOPE_LOG", "warn")).init();
    let cli = Cli::parse();
    let r = match &cli.command {
        Cmd::Simulate(a) => simulate(a),
        Cmd::CalibrateNoise(a) => calibrate(a),
        Cmd::Eval(a) => eval(a),
        Cmd::GenScene(a) => gen(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e}");
            ExitCode::from(f.code())
        }
    }
}
