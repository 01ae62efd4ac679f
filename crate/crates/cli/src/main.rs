use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use suture_core::geometry::Point3;
use suture_core::harness::{
    histogram_csv, metrics_by_preset, read_logs, report_render, run_experiment, write_logs, ExperimentConfig, Preset,
    ReportFormat, TrialLog,
};
use suture_core::perception::{
    estimate_needle_pose, random_needle_pose, synth_needle_cloud, EstimatorParams, NeedleSpec, NoiseModel, PointCloud,
};

#[derive(Parser)]
#[command(
    name = "suture",
    version,
    about = "Needle pose estimation and multi-throw suturing simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic needle point clouds plus a truth.jsonl of their poses.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        points: usize,
        /// Per-axis noise, meters.
        #[arg(long, default_value_t = 5e-4)]
        sigma: f64,
        #[arg(long, default_value_t = 0.2)]
        outliers: f64,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        /// Contiguous hidden arc centered on the body, degrees.
        #[arg(long, default_value_t = 0.0)]
        occlusion_deg: f64,
        #[arg(long, default_value_t = 0.012)]
        radius: f64,
    },
    /// Estimate the needle pose in a cloud file (one `x,y,z` per line) and print it as JSON.
    Estimate {
        cloud: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.012)]
        radius: f64,
        #[arg(long, default_value_t = 180.0)]
        span_deg: f64,
    },
    /// Run seeded suturing trials and print the metrics table.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON-lines trial logs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// Render metrics from one or more log files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Also print the sutures-to-failure histogram as CSV.
        #[arg(long)]
        histogram: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            out,
            count,
            seed,
            points,
            sigma,
            outliers,
            dropout,
            occlusion_deg,
            radius,
        } => {
            let spec = NeedleSpec {
                radius,
                ..NeedleSpec::default()
            };
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let noise = NoiseModel {
                gaussian_sigma: sigma,
                outlier_fraction: outliers,
                dropout_fraction: dropout,
                occlusion_arc: occlusion_deg.to_radians(),
                ..NoiseModel::none()
            };
            noise.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            synth(&out, count, seed, points, &spec, &noise).map_err(|e| Failure::Runtime(e.to_string()))
        }
        Command::Estimate {
            cloud,
            seed,
            radius,
            span_deg,
        } => {
            let spec = NeedleSpec {
                radius,
                arc_span: span_deg.to_radians(),
            };
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let points =
                PointCloud::read_file(&cloud).map_err(|e| Failure::Runtime(format!("{}: {e}", cloud.display())))?;
            let est = estimate_needle_pose(&points, &spec, &EstimatorParams::default().with_seed(seed))
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{}", serde_json::to_string(&est).expect("estimate serializes"));
            Ok(())
        }
        Command::Simulate {
            config,
            preset,
            trials,
            seed,
            out,
            format,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::from_file(path).map_err(|e| Failure::Usage(e.to_string()))?,
                None => ExperimentConfig::default(),
            };
            if let Some(p) = preset {
                cfg.preset = p;
            }
            if let Some(n) = trials {
                cfg.n_trials = n;
            }
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            let logs = run_experiment(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(path) = &out {
                write_logs(&logs, path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            }
            print!("{}", render(&logs, format, false)?);
            Ok(())
        }
        Command::Report {
            logs,
            format,
            histogram,
        } => {
            let mut all = Vec::new();
            for path in &logs {
                all.extend(read_logs(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?);
            }
            print!("{}", render(&all, format, histogram)?);
            Ok(())
        }
    }
}

fn render(logs: &[TrialLog], format: ReportFormat, histogram: bool) -> Result<String, Failure> {
    let rows = metrics_by_preset(logs).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut text = report_render(&rows, format);
    if histogram {
        text.push('\n');
        text.push_str(&histogram_csv(&rows));
    }
    Ok(text)
}

fn synth(
    out: &Path,
    count: usize,
    seed: u64,
    points: usize,
    spec: &NeedleSpec,
    noise: &NoiseModel,
) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let mut truth = String::new();
    for k in 0..count {
        let pose_seed = seed.wrapping_add(k as u64);
        let pose = random_needle_pose(spec, Point3::new(0.0, 0.0, 0.05), 0.05, pose_seed);
        let cloud = synth_needle_cloud(&pose, spec, noise, points, pose_seed ^ 0x5EED);
        let name = format!("cloud_{k:04}.txt");
        fs::write(out.join(&name), cloud.to_text())?;
        let record = serde_json::json!({ "file": name, "seed": pose_seed, "pose": pose });
        truth.push_str(&record.to_string());
        truth.push('\n');
    }
    fs::write(out.join("truth.jsonl"), truth)
}
