//! Command-line front end: dataset synthesis, pipeline runs, trajectory
//! evaluation, and Doppler-error analysis.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 estimation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mrio::config::PipelineConfig;
use mrio::dataset::{load_dataset, Trajectory};
use mrio::eval::{doppler_error_analysis, evaluate};
use mrio::pipeline::{run_pipeline, PipelineError, RadarSelection};
use mrio::sim::{synthesize_dataset, Scenario, SimConfig, SimSeed, TrajectoryModel};

#[derive(Parser)]
#[command(name = "mrio", version, about = "Multi-radar inertial odometry tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (IMU + dual radar + ground truth).
    Sim(SimArgs),
    /// Estimate a trajectory from a dataset directory.
    Run(RunArgs),
    /// Compare an estimated trajectory against ground truth (APE/RPE).
    Eval(EvalArgs),
    /// Analyze the Doppler error distribution against a reference trajectory.
    DopplerAnalysis(DopplerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Line,
    Circle,
    Helix,
    Stair,
    Walk,
}

#[derive(Args)]
struct SimArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Trajectory preset.
    #[arg(long, value_enum, default_value = "walk")]
    preset: Preset,
    /// Cruise duration after the startup ramp [s].
    #[arg(long)]
    duration: Option<f64>,
    /// Nominal speed [m/s] (preset-specific interpretation).
    #[arg(long)]
    speed: Option<f64>,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable all sensor noise, biases, and outliers.
    #[arg(long)]
    noise_free: bool,
    /// Fraction of radar points contaminated by an independent mover.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    /// IMU sample rate [Hz].
    #[arg(long, default_value_t = 200.0)]
    imu_rate: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Radars {
    Dual,
    Horizontal,
    Vertical,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory (imu.csv, radar_<id>.jsonl, calib.yaml).
    dataset: PathBuf,
    /// Radar subset to fuse.
    #[arg(long, value_enum, default_value = "dual")]
    radars: Radars,
    /// Pipeline configuration YAML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output trajectory file.
    #[arg(long, default_value = "trajectory.txt")]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth trajectory file.
    #[arg(long)]
    gt: PathBuf,
    /// Estimated trajectory file.
    #[arg(long)]
    est: PathBuf,
    /// RPE segment length [m].
    #[arg(long, default_value_t = 5.0)]
    rpe_delta: f64,
    /// Optional per-pose error CSV.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DopplerArgs {
    /// Dataset directory.
    dataset: PathBuf,
    /// Reference trajectory file.
    #[arg(long)]
    reference: PathBuf,
    /// Histogram CSV output.
    #[arg(long, default_value = "doppler_hist.csv")]
    output: PathBuf,
}

enum CliError {
    Usage(String),
    Data(String),
    Estimation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Estimation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Estimation(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Sim(args) => cmd_sim(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DopplerAnalysis(args) => cmd_doppler(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn preset_scenario(preset: Preset, speed: Option<f64>, duration: Option<f64>) -> Scenario {
    let (model, default_duration, ramp) = match preset {
        Preset::Line => (
            TrajectoryModel::Line {
                speed: speed.unwrap_or(1.0),
            },
            30.0,
            0.3,
        ),
        Preset::Circle => (
            TrajectoryModel::Circle {
                radius: 5.0,
                speed: speed.unwrap_or(1.0),
            },
            40.0,
            0.3,
        ),
        Preset::Helix => (
            TrajectoryModel::Helix {
                radius: 5.0,
                speed: speed.unwrap_or(1.0),
                climb_rate: 0.2,
            },
            60.0,
            0.3,
        ),
        Preset::Stair => (
            TrajectoryModel::Stair {
                radius: 2.5,
                speed: speed.unwrap_or(0.8),
                climb_rate: 0.3,
                step_period: 10.0,
            },
            60.0,
            1.0,
        ),
        Preset::Walk => (
            TrajectoryModel::FigureEight {
                amp_x: 8.0,
                amp_y: 8.0,
                period: 60.0,
            },
            120.0,
            1.0,
        ),
    };
    Scenario {
        model,
        hold: 3.0,
        ramp,
        motion_duration: duration.unwrap_or(default_duration),
        ramp_down: ramp,
    }
}

fn cmd_sim(args: SimArgs) -> Result<(), CliError> {
    if args.imu_rate <= 0.0 {
        return Err(CliError::Usage("imu-rate must be positive".into()));
    }
    if !(0.0..=0.9).contains(&args.outliers) {
        return Err(CliError::Usage("outliers must be in [0, 0.9]".into()));
    }
    let scenario = preset_scenario(args.preset, args.speed, args.duration);
    let config = if args.noise_free {
        SimConfig::noise_free(scenario, args.imu_rate)
    } else {
        SimConfig::consumer(scenario, args.imu_rate, args.outliers)
    };
    let (dataset, truth) = synthesize_dataset(&config, SimSeed(args.seed));
    dataset
        .write_dir(&args.out)
        .map_err(|e| CliError::Data(e.to_string()))?;
    truth
        .write_file(args.out.join("truth.txt"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let path_length = config.scenario.path_length();
    println!(
        "wrote dataset to {} ({} radars, {:.0} s, path length {:.1} m)",
        args.out.display(),
        dataset.radar.len(),
        config.scenario.total_duration(),
        path_length
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| CliError::Data(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    let dataset = load_dataset(&args.dataset).map_err(|e| CliError::Data(e.to_string()))?;
    let selection = match args.radars {
        Radars::Dual => RadarSelection::All,
        Radars::Horizontal => RadarSelection::Only(vec!["horizontal".into()]),
        Radars::Vertical => RadarSelection::Only(vec!["vertical".into()]),
    };
    let (trajectory, stats) = run_pipeline(&dataset, &config, &selection).map_err(|e| match e {
        PipelineError::NoRadarStreams => CliError::Data(e.to_string()),
        _ => CliError::Estimation(e.to_string()),
    })?;
    trajectory
        .write_file(&args.output)
        .map_err(|e| CliError::Data(e.to_string()))?;
    eprintln!(
        "initialized at t={:.3}s; {} keyframes ({} with velocity factors, {} IMU-only)",
        stats.initialization_time,
        stats.keyframes,
        stats.velocity_factors,
        stats.velocity_dropouts
    );
    println!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let gt = Trajectory::read_file(&args.gt).map_err(|e| CliError::Data(e.to_string()))?;
    let est = Trajectory::read_file(&args.est).map_err(|e| CliError::Data(e.to_string()))?;
    let report = evaluate(&gt, &est, args.rpe_delta).map_err(|e| CliError::Data(e.to_string()))?;
    println!("APE translation RMSE [m]:    {:.6}", report.ape_translation_rmse);
    println!("APE rotation RMSE [deg]:     {:.6}", report.ape_rotation_rmse_deg);
    println!("RPE translation [%]:         {:.6}", report.rpe_translation_percent);
    println!("RPE rotation [deg/m]:        {:.6}", report.rpe_rotation_deg_per_m);
    println!("RPE segments:                {}", report.rpe_segments);
    if let Some(path) = args.output {
        let mut csv = String::from("t,translation_m,rotation_deg\n");
        for p in &report.per_pose {
            csv.push_str(&format!("{},{},{}\n", p.timestamp, p.translation_m, p.rotation_deg));
        }
        std::fs::write(&path, csv).map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote per-pose errors to {}", path.display());
    }
    Ok(())
}

fn cmd_doppler(args: DopplerArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset).map_err(|e| CliError::Data(e.to_string()))?;
    let reference =
        Trajectory::read_file(&args.reference).map_err(|e| CliError::Data(e.to_string()))?;
    let analysis =
        doppler_error_analysis(&dataset, &reference).map_err(|e| CliError::Data(e.to_string()))?;
    println!("points analyzed:   {}", analysis.total_points);
    println!("robust MAD sigma:  {:.6} m/s", analysis.sigma_mad);
    println!(
        "outliers excluded: {} ({:.2}%)",
        analysis.excluded_points,
        100.0 * analysis.excluded_points as f64 / analysis.total_points as f64
    );
    println!("fitted sigma:      {:.6} m/s", analysis.sigma_fitted);
    let mut csv = String::from("bin_center,count\n");
    for (center, count) in &analysis.histogram {
        csv.push_str(&format!("{center},{count}\n"));
    }
    std::fs::write(&args.output, csv).map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote histogram to {}", args.output.display());
    Ok(())
}
