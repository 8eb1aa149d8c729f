use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocds::pipeline::simulate::{simulate_exact_vs_efficient, SimulationConfig};
use ocds::pipeline::{read_toml, run_through, PipelineConfig, RunManifest, Stage};
use ocds::scaling::{self, FlopsConfig, ScalingFitDocument, ScalingFitOptions};
use ocds::Error;

#[derive(Parser)]
#[command(name = "ocds", version, about = "Data selection by optimal control of training dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run stages even when their outputs are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the proxy set, pre-train it and solve for its quality scores.
    SolveGamma(Common),
    /// Fit the data scorer on the solved scores.
    TrainScorer(Common),
    /// Score the full corpus.
    Score(Common),
    /// Select the training subset.
    Select(Common),
    /// Run every stage.
    Pipeline(Common),
    /// Fit `L(N, D) = E + A / N^alpha + B / D^beta` to a CSV of `N,D,L` rows.
    FitScaling {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Estimate per-stage FLOPs.
    EstimateFlops(Common),
    /// Compare exact and efficient solving on the planted fixture.
    Simulate(Common),
}

fn pipeline_config(c: &Common) -> Result<PipelineConfig, Error> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config is required"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out = o.clone();
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(dir: Option<&Path>, name: &str, value: &T) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    match dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(name);
            fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
            println!("wrote {}", p.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn report(manifest: &RunManifest) {
    for r in &manifest.stages {
        let state = if r.skipped { "up to date" } else { "ran" };
        println!("{:<15} {state:<10} {:.2}s", r.stage, r.seconds);
    }
    for (name, digest) in &manifest.artifacts {
        println!("{name} {digest}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let stage = |c: &Common, last: Stage| -> Result<(), Error> {
        let cfg = pipeline_config(c)?;
        report(&run_through(&cfg, last, c.force)?);
        Ok(())
    };
    match cli.command {
        Command::SolveGamma(c) => stage(&c, Stage::Solve),
        Command::TrainScorer(c) => stage(&c, Stage::Scorer),
        Command::Score(c) => stage(&c, Stage::Score),
        Command::Select(c) | Command::Pipeline(c) => stage(&c, Stage::Select),
        Command::FitScaling { common, input } => {
            let options: ScalingFitOptions = match &common.config {
                Some(p) => read_toml(p)?,
                None => ScalingFitOptions::default(),
            };
            let points = scaling::read_loss_points(&input)?;
            let fit = scaling::fit_scaling_law(&points, &options).map_err(|e| e.in_stage("fit-scaling"))?;
            let doc = ScalingFitDocument {
                fit,
                options,
                num_points: points.len(),
                input_digest: scaling::points_digest(&points),
            };
            write_json(common.out.as_deref(), "scaling_fit.json", &doc)
        }
        Command::EstimateFlops(c) => {
            let path = c.config.as_deref().ok_or_else(|| Error::config("--config is required"))?;
            let cfg: FlopsConfig = read_toml(path)?;
            let est = scaling::estimate_flops(&cfg)?;
            let doc = serde_json::json!({
                "solver": est.solver,
                "scorer": est.scorer,
                "selection": est.selection,
                "pretraining": est.pretraining,
                "total": est.total(),
            });
            write_json(c.out.as_deref(), "flops.json", &doc)
        }
        Command::Simulate(c) => {
            let mut cfg: SimulationConfig = match &c.config {
                Some(p) => read_toml(p)?,
                None => SimulationConfig::default(),
            };
            if let Some(s) = c.seed {
                cfg.fixture.seed = s;
                cfg.select.seed = s;
            }
            let rec = simulate_exact_vs_efficient(&cfg).map_err(|e| e.in_stage("simulate"))?;
            eprintln!(
                "auc exact {:.3} efficient {:.3} baseline {:.3}; solver FLOPs exact {:.3e} efficient {:.3e}",
                rec.exact.auc, rec.efficient.auc, rec.baseline.auc, rec.exact.solver_flops, rec.efficient.solver_flops
            );
            write_json(c.out.as_deref(), "simulation.json", &rec)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!(": {s}"));
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
