//! `vidistill`: drives the toy video distillation lab end to end.
//!
//! Every subcommand reads one TOML config and works inside one workspace
//! directory; artifacts never get overwritten.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vidistill::config::ExperimentConfig;
use vidistill::pipeline::{self, SampleRequest, Workspace};
use vidistill::samplers::SamplerKind;
use vidistill::verify::{self, OracleSettings};
use vidistill::Error;

#[derive(Parser)]
#[command(name = "vidistill", version, about = "Toy video diffusion distillation lab")]
struct Cli {
    /// Experiment config (TOML); every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Workspace holding data, models, logs and manifests.
    #[arg(long, global = true, default_value = "work")]
    work_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits of the toy video world.
    Datagen,
    /// Train the teacher denoiser and pretrain the frozen backbone.
    TrainTeacher,
    /// Run one distillation stage.
    Distill {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Start stage 2 from the teacher when no stage-1 checkpoint exists.
        #[arg(long)]
        allow_skip_stage1: bool,
    },
    /// Sample clips from a checkpoint.
    Sample {
        /// Checkpoint stage; 0 samples the teacher.
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a frame grid of the first clips.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Toy-FVD, self-consistency gap and feature diagnostic of the checkpoints.
    Eval,
    /// Training-free exact and oracle checks.
    Verify {
        /// Skip the slower oracle checks.
        #[arg(long)]
        quick: bool,
    },
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(cli: Cli) -> vidistill::Result<bool> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let ws = Workspace::new(&cli.work_dir);
    let manifest = match cli.command {
        Command::Datagen => pipeline::cmd_datagen(&cfg, &ws)?,
        Command::TrainTeacher => pipeline::cmd_train_teacher(&cfg, &ws)?,
        Command::Distill {
            stage,
            allow_skip_stage1,
        } => pipeline::cmd_distill(&cfg, &ws, stage, allow_skip_stage1)?,
        Command::Sample {
            stage,
            steps,
            sampler,
            cfg_scale,
            seed,
            count,
            out,
            png,
        } => {
            let mut req = SampleRequest::from_config(&cfg, &ws);
            req.stage = stage.unwrap_or(req.stage);
            req.steps = steps.unwrap_or(req.steps);
            req.kind = sampler.unwrap_or(req.kind);
            req.cfg_scale = cfg_scale.unwrap_or(req.cfg_scale);
            req.seed = seed.unwrap_or(req.seed);
            req.count = count.unwrap_or(req.count);
            req.out = out.unwrap_or(req.out);
            req.png = png;
            pipeline::cmd_sample(&cfg, &ws, &req)?
        }
        Command::Eval => pipeline::cmd_eval(&cfg, &ws)?,
        Command::Verify { quick } => {
            let mut checks = verify::exact_checks();
            if !quick {
                let settings = OracleSettings {
                    grid_sizes: cfg.eval.theorem_grid_sizes.clone(),
                    probes: cfg.eval.theorem_probes,
                    seed: cfg.seed,
                    ..OracleSettings::default()
                };
                checks.extend(verify::oracle_checks(&settings));
            }
            for c in &checks {
                println!("{c}");
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    };
    for (path, digest) in &manifest.outputs {
        println!("wrote {path} ({digest})");
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
