use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pseudolabel::eval::{evaluate, report_text};
use pseudolabel::pipeline::config::apply_scenario_text;
use pseudolabel::pipeline::{self, MotionModel, PipelineConfig};
use pseudolabel::scenario::{Scenario, ScenarioConfig};

#[derive(Parser)]
#[command(version, about = "Temporally consistent 3D pseudo-labels from noisy detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic sequence directory.
    Generate {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Detection sets to write, one per pipeline iteration.
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the pseudo-label pipeline on a sequence directory.
    Refine {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long, default_value = "output")]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a label directory against ground truth.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Export per-track global trajectories and velocities as CSV.
    Profile {
        #[arg(short, long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    iterations: Option<usize>,
    /// Chamfer-only refinement.
    #[arg(long)]
    no_temporal: bool,
    #[arg(long, value_parser = parse_motion_model)]
    motion_model: Option<MotionModel>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// RANSAC seed for moving-object segment fits.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_motion_model(s: &str) -> Result<MotionModel, String> {
    s.parse()
}

type BoxError = Box<dyn std::error::Error>;

fn read_config(path: &Path) -> Result<String, BoxError> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn pipeline_config(config: Option<&Path>) -> Result<PipelineConfig, BoxError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = config {
        cfg.apply_text(&read_config(path)?)
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(cfg)
}

fn generate(
    output: &Path,
    seed: u64,
    iterations: usize,
    frames: Option<usize>,
    config: Option<&Path>,
) -> Result<(), BoxError> {
    let mut cfg = ScenarioConfig::urban(seed);
    if let Some(path) = config {
        apply_scenario_text(&mut cfg, &read_config(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    if let Some(n) = frames {
        cfg.frame_count = n;
    }
    let scenario = Scenario::generate(cfg)?;
    scenario.write_sequence(output, iterations)?;
    println!(
        "wrote {} frames, {} cars, {} detection sets to {}",
        scenario.frame_count(),
        scenario.objects.len(),
        iterations.max(1),
        output.display()
    );
    Ok(())
}

fn refine(input: &Path, output: &Path, args: &RunArgs) -> Result<(), BoxError> {
    let mut cfg = pipeline_config(args.config.as_deref())?;
    cfg.input = input.to_path_buf();
    cfg.output = output.to_path_buf();
    if let Some(k) = args.iterations {
        cfg.iterations = k;
    }
    if args.no_temporal {
        cfg.temporal = false;
    }
    if let Some(m) = args.motion_model {
        cfg.motion_model = m;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(seed) = args.seed {
        cfg.moving.ransac.seed = seed;
    }
    let results = pipeline::run(&cfg)?;
    for r in &results {
        let boxes: usize = r.frames.iter().map(|f| f.boxes.len()).sum();
        println!(
            "iteration {}: {} tracklets, {} boxes",
            r.iteration,
            r.tracklets.len(),
            boxes
        );
        if let Some(m) = &r.metrics {
            print!("{}", report_text(m));
        }
    }
    println!("labels written to {}", output.display());
    Ok(())
}

fn eval(labels: &Path, gt: &Path, threshold: f64) -> Result<(), BoxError> {
    let frames = pipeline::count_frames(gt)?.max(pipeline::count_frames(labels)?);
    let dets = pipeline::read_label_dir(labels, frames)?;
    let truth = pipeline::read_label_dir(gt, frames)?;
    let name = labels.file_name().and_then(|n| n.to_str()).unwrap_or("labels");
    print!("{}", report_text(&evaluate(name, &dets, &truth, threshold)?));
    Ok(())
}

fn profile(input: &Path, output: Option<&Path>, config: Option<&Path>) -> Result<(), BoxError> {
    let mut cfg = pipeline_config(config)?;
    cfg.input = input.to_path_buf();
    let profiles = pipeline::profiles(&cfg)?;
    match output {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            pipeline::write_profiles_csv(&profiles, file)?;
        }
        None => pipeline::write_profiles_csv(&profiles, std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate {
            output,
            seed,
            iterations,
            frames,
            config,
        } => generate(output, *seed, *iterations, *frames, config.as_deref()),
        Command::Refine { input, output, run } => refine(input, output, run),
        Command::Eval { labels, gt, threshold } => eval(labels, gt, *threshold),
        Command::Profile { input, output, config } => profile(input, output.as_deref(), config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
