//! `reactgen`: synthesize data, train the four stages, generate reactions,
//! evaluate and diagnose.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use reactgen::config::PipelineConfig;
use reactgen::pipeline::{cmd_diagnose, cmd_evaluate, cmd_generate, cmd_synth, cmd_train, write_json, RunDir, Stage};
use reactgen::refinement::MixerBranch;
use reactgen::{Error, Result};

#[derive(Parser)]
#[command(
    name = "reactgen",
    version,
    about = "Observation-conditioned reaction motion generation"
)]
struct Cli {
    /// Pipeline config (JSON). Falls back to $REACTGEN_CONFIG, then defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location: dataset dir (synth), run dir (train), motion dir
    /// (generate), report file (evaluate) or report dir (diagnose).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Log progress to stderr (`RUST_LOG` takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset.
    Synth,
    /// Train one stage: rvq, base, motion or residual.
    Train {
        stage: String,
        /// Dataset root (with train/ and test/) or a single split.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Generate one reaction per observation of the test split.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// FID, diversity, multimodality and class accuracy as JSON.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Class relation matrices of raw and rectified observations.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        /// Run whose rectifier adds the rectified and projected views.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AblationFlags {
    /// Condition the motion transformer on raw observations.
    #[arg(long)]
    no_pfs: bool,
    /// Decoupled residual training on raw observations.
    #[arg(long)]
    no_dcrr: bool,
    /// Residual training on quantizer first-layer tokens.
    #[arg(long)]
    decoupled: bool,
    /// Residual conditioning branch: raw, rectified or both.
    #[arg(long)]
    mixer_branch: Option<String>,
    /// Also supervise first-layer tokens in residual training.
    #[arg(long)]
    supervise_layer_one: bool,
    /// Start the motion transformer from the base transformer weights.
    #[arg(long)]
    init_from_base: bool,
}

impl AblationFlags {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        let a = &mut cfg.ablation;
        a.pfs &= !self.no_pfs;
        a.dcrr &= !self.no_dcrr;
        a.decoupled |= self.decoupled;
        a.supervise_layer_one |= self.supervise_layer_one;
        a.init_from_base |= self.init_from_base;
        if let Some(b) = &self.mixer_branch {
            a.mixer_branch = b.parse::<MixerBranch>()?;
        }
        Ok(())
    }
}

fn require_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| Error::Usage(format!("--out is required: {what}")))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Synth => {
            let out = require_out(&cli.out, "dataset directory to create")?;
            let (train, test) = cmd_synth(&cfg, &out, cli.force)?;
            println!(
                "wrote {} train and {} test samples to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::Train { stage, data, ablation } => {
            let stage: Stage = stage.parse()?;
            ablation.apply(&mut cfg)?;
            cfg.validate()?;
            let out = require_out(&cli.out, "run directory")?;
            let run = RunDir::open(&out)?;
            let entry = cmd_train(stage, &cfg, &data, &run, cli.force)?;
            print_json(&entry)?;
        }
        Command::Generate { run, data } => {
            let out = require_out(&cli.out, "directory for generated motions")?;
            let run = RunDir::open(&run)?;
            let generated = cmd_generate(&cfg, &run, &data, &out, cli.force)?;
            println!("wrote {} motions to {}", generated.len(), out.display());
        }
        Command::Evaluate {
            run,
            generated,
            reference,
        } => {
            let run = RunDir::open(&run)?;
            let report = cmd_evaluate(&cfg, &run, &generated, &reference)?;
            match &cli.out {
                Some(p) => write_json(p, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Diagnose { data, run } => {
            let out = require_out(&cli.out, "report directory")?;
            let run = run.as_deref().map(RunDir::open).transpose()?;
            let report = cmd_diagnose(&cfg, &data, run.as_ref(), &out)?;
            print_json(&report)?;
            println!("wrote {}", Path::new(&out).join("diagnose.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
