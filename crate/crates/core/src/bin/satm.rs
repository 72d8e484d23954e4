use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use satm::autodiff::FaultKind;
use satm::config::RunConfig;
use satm::error::{Error, Result};
use satm::graph::SymptomGraph;
use satm::model::Model;
use satm::pipeline::{self, load_raw};
use satm::sweep::{run_sweep, SweepKind};
use satm::verify::{run_verify, VerifyOptions};

#[derive(Parser)]
#[command(name = "satm", version, about = "Structure-aware temporal progression modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration with dotted keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Cohort CSV path, or `synthetic`.
    #[arg(long, value_name = "PATH|synthetic")]
    data: Option<String>,
    /// Config override, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, loss curve, graph and checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on every split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Edge list to use instead of rebuilding the graph from data.
        #[arg(long, value_name = "PATH")]
        graph: Option<PathBuf>,
    },
    /// Train fixed-gate models over a grid of gating ratios.
    SweepGate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated grid, overrides `sweep.gammas`.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Train models over a grid of graph densities.
    SweepDensity {
        #[command(flatten)]
        common: Common,
        /// Comma-separated grid, overrides `sweep.densities`.
        #[arg(long, value_delimiter = ',')]
        densities: Option<Vec<f64>>,
    },
    /// Run the invariant suite; exits nonzero on any failure.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one gradient rule: matmul, sigmoid, softmax, layernorm, propagate.
        #[arg(long)]
        fault: Option<FaultKind>,
        /// Also write the report as JSON into this directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write the synthetic cohort and its ground-truth graph.
    GenerateData(Common),
}

fn resolve(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut run = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    run.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(data) = &common.data {
        run.data = data.clone();
    }
    run.validate()?;
    Ok(run)
}

fn report(path: PathBuf) {
    println!("wrote {}", path.display());
}

fn train(common: &Common) -> Result<()> {
    let run = resolve(common, None)?;
    let tr = pipeline::run_train(&run)?;
    pipeline::write_train_artifacts(&run, &tr, &common.out)?;
    let curve = &tr.outcome.loss_curve;
    let (first, last) = (curve[0].train_loss, curve[curve.len() - 1].train_loss);
    println!("train loss {first:.6} -> {last:.6} over {} epochs", curve.len() - 1);
    if let Some(test) = &tr.outcome.metrics.test {
        println!("test auc {:.4} rmse {:.4} ipw_f1 {:.2}", test.auc, test.rmse, test.ipw_f1);
    }
    println!("artifacts in {}", common.out.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, graph: Option<&Path>) -> Result<()> {
    let (model, embedded) = Model::load(checkpoint)?;
    let base = embedded.map(|s| RunConfig::from_json(&s)).transpose()?;
    let mut run = resolve(common, base)?;
    run.model = model.config.clone();
    let graph = graph.map(SymptomGraph::read_edgelist).transpose()?;
    let (_, metrics) = pipeline::run_eval(&run, &model, graph)?;
    report(pipeline::write(&common.out, pipeline::METRICS_FILE, &pipeline::metrics_json(&run, &metrics, None))?);
    if let Some(test) = &metrics.test {
        println!("test auc {:.4} rmse {:.4} ipw_f1 {:.2}", test.auc, test.rmse, test.ipw_f1);
    }
    Ok(())
}

fn sweep(common: &Common, kind: SweepKind, grid: Option<Vec<f64>>) -> Result<()> {
    let mut run = resolve(common, None)?;
    if let Some(g) = grid {
        match kind {
            SweepKind::Gate => run.sweep.gammas = g,
            SweepKind::Density => run.sweep.densities = g,
        }
        run.validate()?;
    }
    let rows = run_sweep(&load_raw(&run)?, &run, kind)?;
    let name = match kind {
        SweepKind::Gate => "sweep_gate.csv",
        SweepKind::Density => "sweep_density.csv",
    };
    for r in &rows {
        println!("{} {:.2}: auc {:.4} rmse {:.4} ipw_f1 {:.2}", kind.column(), r.value, r.auc, r.rmse, r.ipw_f1);
    }
    report(pipeline::write(&common.out, name, &pipeline::sweep_csv(&run, kind, &rows))?);
    report(pipeline::write_config(&run, &common.out)?);
    Ok(())
}

fn verify(seed: u64, fault: Option<FaultKind>, out: Option<&Path>) -> Result<bool> {
    let rep = run_verify(&VerifyOptions { seed, fault });
    for c in &rep.checks {
        println!("{c}");
    }
    let passed = rep.checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} checks passed across {} modules", rep.checks.len(), rep.modules().len());
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&rep).map_err(|e| Error::Config(e.to_string()))?;
        report(pipeline::write(dir, "verify.json", &(json + "\n"))?);
    }
    Ok(rep.passed())
}

fn generate_data(common: &Common) -> Result<()> {
    let run = resolve(common, None)?;
    if !run.is_synthetic() {
        return Err(Error::Config("generate-data needs --data synthetic".into()));
    }
    let cohort = load_raw(&run)?;
    report(pipeline::write(&common.out, pipeline::COHORT_FILE, &pipeline::cohort_csv(&run, &cohort))?);
    if let Some(g) = &cohort.truth_graph {
        report(pipeline::write(&common.out, pipeline::TRUTH_GRAPH_FILE, &pipeline::edgelist_with_config(&run, g))?);
    }
    report(pipeline::write_config(&run, &common.out)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c).map(|_| true),
        Command::Eval { common, checkpoint, graph } => eval(common, checkpoint, graph.as_deref()).map(|_| true),
        Command::SweepGate { common, gammas } => sweep(common, SweepKind::Gate, gammas.clone()).map(|_| true),
        Command::SweepDensity { common, densities } => sweep(common, SweepKind::Density, densities.clone()).map(|_| true),
        Command::Verify { seed, fault, out } => verify(*seed, *fault, out.as_deref()),
        Command::GenerateData(c) => generate_data(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
