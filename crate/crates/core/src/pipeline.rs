//! End-to-end runs and artifact rendering. Every artifact carries the
//! run configuration as a single-line JSON echo.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::cohort::{generate, load_csv, preprocess, Cohort};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::SymptomGraph;
use crate::model::Model;
use crate::rng::Rng;
use crate::sweep::{SweepKind, SweepRow};
use crate::train::{build_graph, evaluate_splits, train, EpochRecord, SplitMetrics, TrainOutcome};

pub const INIT_STREAM: u64 = 1;
pub const SHUFFLE_STREAM: u64 = 2;

pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const GRAPH_FILE: &str = "graph.edgelist";
pub const COHORT_FILE: &str = "cohort.csv";
pub const TRUTH_GRAPH_FILE: &str = "truth_graph.edgelist";
pub const CONFIG_FILE: &str = "config.toml";

/// Unprocessed cohort named by `run.data`.
pub fn load_raw(run: &RunConfig) -> Result<Cohort> {
    if run.is_synthetic() {
        generate(&run.synth)
    } else {
        load_csv(Path::new(&run.data), run.model.d_in)
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub cohort: Cohort,
    pub graph: SymptomGraph,
    pub outcome: TrainOutcome,
}

pub fn run_train(run: &RunConfig) -> Result<TrainRun> {
    run.validate()?;
    let cohort = preprocess(load_raw(run)?, run.seed)?;
    let graph = build_graph(&cohort, run.graph.density)?;
    let model = Model::init(run.model.clone(), &mut Rng::derive(run.seed, INIT_STREAM))?;
    let outcome = train(model, &cohort, &graph, &run.train, &mut Rng::derive(run.seed, SHUFFLE_STREAM))?;
    Ok(TrainRun { cohort, graph, outcome })
}

/// Re-evaluates a trained model on the cohort and split named by `run`.
/// Uses `graph` when given, otherwise rebuilds it from the training split.
pub fn run_eval(run: &RunConfig, model: &Model, graph: Option<SymptomGraph>) -> Result<(SymptomGraph, SplitMetrics)> {
    let cohort = preprocess(load_raw(run)?, run.seed)?;
    let graph = match graph {
        Some(g) if g.n_nodes() != cohort.n_nodes => {
            return Err(Error::Data(format!("graph has {} nodes, cohort has {}", g.n_nodes(), cohort.n_nodes)))
        }
        Some(g) => g.normalize(),
        None => build_graph(&cohort, run.graph.density)?,
    };
    let metrics = evaluate_splits(model, &cohort, &graph)?;
    Ok((graph, metrics))
}

fn comment(run: &RunConfig) -> String {
    format!("# seed={} config={}\n", run.seed, run.to_json())
}

pub fn metrics_json(run: &RunConfig, metrics: &SplitMetrics, curve: Option<&[EpochRecord]>) -> String {
    let mut doc = json!({
        "seed": run.seed,
        "config": run,
        "train": metrics.train,
        "val": metrics.val,
        "test": metrics.test,
    });
    if let Some(curve) = curve {
        doc["initial_train_loss"] = json!(curve.first().map(|r| r.train_loss));
        doc["final_train_loss"] = json!(curve.last().map(|r| r.train_loss));
        doc["epochs"] = json!(curve.len().saturating_sub(1));
    }
    let mut s = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn loss_curve_csv(run: &RunConfig, curve: &[EpochRecord]) -> String {
    let mut s = comment(run);
    s.push_str("epoch,train_loss,val_loss\n");
    for r in curve {
        let val = if r.val_loss.is_nan() { String::new() } else { r.val_loss.to_string() };
        let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, val);
    }
    s
}

pub fn sweep_csv(run: &RunConfig, kind: SweepKind, rows: &[SweepRow]) -> String {
    let mut s = comment(run);
    let _ = writeln!(s, "{},auc,rmse,ipw_f1", kind.column());
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.value, r.auc, r.rmse, r.ipw_f1);
    }
    s
}

/// Edge list with the config echo after the header line.
pub fn edgelist_with_config(run: &RunConfig, graph: &SymptomGraph) -> String {
    let text = graph.to_edgelist();
    let (header, rest) = text.split_once('\n').unwrap_or((&text, ""));
    format!("{header}\n{}{rest}", comment(run))
}

pub fn cohort_csv(run: &RunConfig, cohort: &Cohort) -> String {
    comment(run) + &cohort.to_csv_string()
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_config(run: &RunConfig, dir: &Path) -> Result<PathBuf> {
    write(dir, CONFIG_FILE, &run.to_toml_string()?)
}

pub fn write_train_artifacts(run: &RunConfig, tr: &TrainRun, dir: &Path) -> Result<()> {
    let curve = &tr.outcome.loss_curve;
    write(dir, METRICS_FILE, &metrics_json(run, &tr.outcome.metrics, Some(curve)))?;
    write(dir, LOSS_CURVE_FILE, &loss_curve_csv(run, curve))?;
    write(dir, GRAPH_FILE, &edgelist_with_config(run, &tr.graph))?;
    write(dir, CHECKPOINT_FILE, &tr.outcome.model.checkpoint_string(Some(&run.to_json()))?)?;
    write_config(run, dir)?;
    Ok(())
}
