use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rdm_core::harness::{run_experiment, ExperimentConfig, ExperimentKind, RunOutcome};
use rdm_core::RdmError;

#[derive(Parser)]
#[command(name = "rdm", version, about = "Spectral-filter and rank-dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config (any kind).
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the randomized property suite.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        instances: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a filter to a seeded batch and read the transformation back.
    Filters {
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the linear predictor and compare it with the optimum.
    Align {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, kind: Option<ExperimentKind>, extra: Vec<String>) -> Result<ExperimentConfig, RdmError> {
    let base = match (&common.config, kind) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(kind)) => ExperimentConfig::new(kind),
        (None, None) => return Err(RdmError::Config("simulate needs --config".into())),
    };
    let mut overrides = Vec::new();
    if let Some(kind) = kind {
        overrides.push(format!("kind=\"{kind}\""));
    }
    overrides.extend(common.overrides.iter().cloned());
    overrides.extend(extra);
    base.with_overrides(&overrides)
}

fn config_for(cmd: &Command) -> Result<ExperimentConfig, RdmError> {
    match cmd {
        Command::Simulate { common } => load(common, None, Vec::new()),
        Command::Align { common } => load(common, Some(ExperimentKind::Align), Vec::new()),
        Command::Verify { seed, instances, common } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(format!("seed={s}"));
            }
            if let Some(n) = instances {
                extra.push(format!("instances={n}"));
            }
            load(common, Some(ExperimentKind::Verify), extra)
        }
        Command::Filters { filter, seed, common } => {
            let mut extra = Vec::new();
            if let Some(f) = filter {
                extra.push(format!("filter={}", serde_json::Value::String(f.clone())));
            }
            if let Some(s) = seed {
                extra.push(format!("seed={s}"));
            }
            load(common, Some(ExperimentKind::Filters), extra)
        }
    }
}

fn report(outcome: &RunOutcome) {
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    let s = &outcome.summary;
    if let Some(props) = s.get("properties").and_then(|p| p.as_array()) {
        for p in props {
            println!(
                "{:<34} failures {:>5} / {:<6} worst margin {}",
                p["name"].as_str().unwrap_or("?"),
                p["failures"],
                p["instances"],
                p["worst_margin"]
            );
        }
        println!("overall: {}", if outcome.passed { "pass" } else { "FAIL" });
    } else {
        println!(
            "final erank online {} target {} alignment {}",
            s["final_erank_online"], s["final_erank_target"], s["final_alignment"]
        );
        if let Some(v) = s["details"].get("verdict") {
            println!("verdict {v}");
        }
        if let Some(w) = s["warnings"].as_array() {
            for w in w {
                eprintln!("warning: {}", w.as_str().unwrap_or_default());
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match config_for(&cli.command) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&cfg) {
        Ok(outcome) => {
            report(&outcome);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, RdmError::Config(_)) { 2 } else { 1 })
        }
    }
}
