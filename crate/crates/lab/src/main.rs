use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pugd_core::OptimizerKind;
use pugd_lab::config::parse_override;
use pugd_lab::experiments::{run_landscape, run_shared_landscape_race, run_train_history, Data};
use pugd_lab::{check, ExperimentConfig, ExperimentKind, Result};

#[derive(Parser)]
#[command(name = "pugd-lab", version, about = "Unit-step optimizer experiments on a small MLP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eight optimizers from one start point over one shared loss slice.
    Race(RunArgs),
    /// Loss and accuracy curves per optimizer.
    History(RunArgs),
    /// Loss surface around each optimizer's trained weights.
    Landscape(RunArgs),
    /// Loss contours with the projected training path.
    Trajectory(RunArgs),
    /// Run the synthetic invariant suite.
    Check,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file merged over the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to these optimizers (repeatable).
    #[arg(long = "optimizer")]
    optimizers: Vec<OptimizerKind>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Dotted-key override, e.g. `landscape.resolution=11` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(n) = self.iterations {
            overrides.push(("iterations".into(), n.to_string()));
        }
        if let Some(out) = &self.out {
            overrides.push(("output_dir".into(), format!("{:?}", out.display().to_string())));
        }
        if !self.optimizers.is_empty() {
            let names: Vec<String> = self.optimizers.iter().map(|k| format!("{:?}", k.name())).collect();
            overrides.push(("optimizers".into(), format!("[{}]", names.join(", "))));
        }
        ExperimentConfig::load(kind, self.config.as_deref(), &overrides)
    }
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<()> {
    let cfg = args.resolve(kind)?;
    let data = Data::load(&cfg)?;
    let dir = cfg.output_dir.clone();
    match kind {
        ExperimentKind::TrainHistory => run_train_history(&cfg, &data)?.write(&dir)?,
        ExperimentKind::Landscape3d | ExperimentKind::Trajectory2d => run_landscape(&cfg, &data)?.write(&dir)?,
        ExperimentKind::SharedLandscapeRace => run_shared_landscape_race(&cfg, &data)?.write(&dir)?,
    }
    println!("{kind}: wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Check => {
            let outcomes = check::run_all();
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            return if outcomes.iter().all(|o| o.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
        Command::Race(a) => (ExperimentKind::SharedLandscapeRace, a),
        Command::History(a) => (ExperimentKind::TrainHistory, a),
        Command::Landscape(a) => (ExperimentKind::Landscape3d, a),
        Command::Trajectory(a) => (ExperimentKind::Trajectory2d, a),
    };
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
