use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use frbench::pipeline::{
    compare_runs, export_annotation_queue, merge_annotation_file, run, PipelineError, RunConfig, RunManifest, Stage,
};
use frbench::simulator::generate_world;
use frbench::types::ServiceId;

#[derive(Parser)]
#[command(name = "frbench", version, about = "Annotation-free benchmarking of face verification services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pair-plan seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Indicator threshold tau.
    #[arg(long)]
    tau: Option<f64>,
    /// Eigenvalue threshold T.
    #[arg(long)]
    eigen: Option<f64>,
    #[arg(long)]
    annotation_budget: Option<f64>,
    #[arg(long)]
    confidence: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(t) = self.tau {
            cfg.thresholds.z = t;
        }
        if let Some(t) = self.eigen {
            cfg.thresholds.eigen = t;
        }
        if let Some(b) = self.annotation_budget {
            cfg.annotation_budget = b;
        }
        if let Some(c) = self.confidence {
            cfg.confidence = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline, reusing up-to-date stages.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated subset of source,detect,score,estimate,evaluate,report.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
    /// Write the simulated world's ground-truth dump.
    Simulate {
        #[arg(long, short)]
        config: PathBuf,
        /// Output CSV; defaults to world.csv in the run's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// World seed, overriding the simulator config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run through the estimate stage.
    Estimate {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run through the evaluate stage.
    Evaluate {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run every stage and print the summary.
    Report {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Semi-supervised annotation round trips.
    Annotate {
        #[command(subcommand)]
        action: AnnotateCommand,
    },
    /// Compare one service across two finished runs.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        service: String,
    },
}

#[derive(Subcommand)]
enum AnnotateCommand {
    /// Write the most ambiguous faces to annotation_queue.csv.
    Export {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, short)]
        k: usize,
    },
    /// Merge a `face_id,y` CSV and re-run estimation onwards.
    Merge {
        #[command(flatten)]
        args: RunArgs,
        file: PathBuf,
    },
}

fn finish(manifest: &RunManifest) -> Result<(), PipelineError> {
    for r in &manifest.stages {
        let note = if r.cached { " (cached)" } else { "" };
        match &r.error {
            Some(e) => eprintln!("{:<9} {:?}: {e}", r.stage.as_str(), r.status),
            None => eprintln!("{:<9} {:?}{note}", r.stage.as_str(), r.status),
        }
    }
    match manifest.failed() {
        Some(r) => Err(PipelineError::Validation(format!(
            "stage {} failed: {}",
            r.stage,
            r.error.as_deref().unwrap_or("unknown error")
        ))),
        None => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<ExitCode, PipelineError> {
    let stage_failed = |m: &RunManifest| -> Result<ExitCode, PipelineError> {
        Ok(if finish(m).is_err() { ExitCode::from(3) } else { ExitCode::SUCCESS })
    };
    match cli.command {
        Command::Run { args, stages } => {
            let cfg = args.load()?;
            let stages = stages.unwrap_or_else(|| Stage::ALL.to_vec());
            stage_failed(&run(&cfg, &stages)?)
        }
        Command::Simulate { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let mut world_cfg = cfg
                .simulator
                .as_ref()
                .ok_or_else(|| PipelineError::Validation("config has no simulator section".into()))?
                .world
                .clone();
            if let Some(s) = seed {
                world_cfg.seed = s;
            }
            let world = generate_world(&world_cfg)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("world.csv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| PipelineError::Validation(e.to_string()))?;
            }
            let file = std::fs::File::create(&path).map_err(|e| PipelineError::Validation(e.to_string()))?;
            world.write_dump(file)?;
            println!("{} queries, {} images -> {}", world.queries.len(), world.images.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Estimate { args } => stage_failed(&run(&args.load()?, &Stage::Estimate.through())?),
        Command::Evaluate { args } => stage_failed(&run(&args.load()?, &Stage::Evaluate.through())?),
        Command::Report { args } => {
            let cfg = args.load()?;
            let m = run(&cfg, &Stage::ALL)?;
            if m.failed().is_none() {
                if let Ok(text) = std::fs::read_to_string(cfg.out_dir.join("summary.txt")) {
                    print!("{text}");
                }
            }
            stage_failed(&m)
        }
        Command::Annotate { action } => match action {
            AnnotateCommand::Export { out, k } => {
                let e = export_annotation_queue(&out, k)?;
                if e.truncated(k) {
                    eprintln!("warning: queue holds only {} faces", e.queue_len);
                }
                println!("{} rows -> {}", e.rows.len(), e.path.display());
                Ok(ExitCode::SUCCESS)
            }
            AnnotateCommand::Merge { args, file } => {
                let cfg = args.load()?;
                stage_failed(&merge_annotation_file(&cfg, &file)?)
            }
        },
        Command::Compare { run_a, run_b, service } => {
            let report = compare_runs(&run_a, &run_b, &ServiceId::new(service))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.probable_model_change {
                eprintln!("probable model change: EER intervals are disjoint");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
