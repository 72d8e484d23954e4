//! Gating-ratio and graph-density sweeps.
//!
//! Replicate `r` runs under seed `seed + r`. Every grid point starts from a
//! fresh model; within a replicate all points share the patient split, the
//! initialization stream and the batch-order stream, so rows differ only in
//! the swept variable.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{preprocess, Cohort, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{correlation_matrix, threshold_by_density, SymptomGraph};
use crate::model::{GateConfig, Model, ModelConfig};
use crate::pipeline::{INIT_STREAM, SHUFFLE_STREAM};
use crate::rng::Rng;
use crate::train::{build_graph, evaluate_indices, train};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    Gate,
    Density,
}

impl SweepKind {
    pub fn column(self) -> &'static str {
        match self {
            SweepKind::Gate => "gamma",
            SweepKind::Density => "rho",
        }
    }
}

/// Test-split metrics at one grid point, averaged over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub auc: f64,
    pub rmse: f64,
    pub ipw_f1: f64,
}

/// Sorted, de-duplicated grid; values must lie in `[0, 1]`.
pub fn normalize_grid(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("sweep grid value {v} outside [0, 1]")));
    }
    let mut g = values.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// One normalized graph per density, all cut from the same correlation
/// matrix. Fails if a denser graph drops an edge of a sparser one.
pub fn density_graphs(cohort: &Cohort, densities: &[f64]) -> Result<Vec<SymptomGraph>> {
    let corr = correlation_matrix(&cohort.node_summaries(cohort.split(Split::Train)?)?)?;
    let graphs = densities
        .iter()
        .map(|&rho| threshold_by_density(&corr, rho).map(SymptomGraph::normalize))
        .collect::<Result<Vec<_>>>()?;
    for (w, pair) in graphs.windows(2).enumerate() {
        if let Some(e) = pair[0].edges().iter().find(|e| !pair[1].has_edge(e.i, e.j)) {
            return Err(Error::Contract(format!(
                "edge ({}, {}) at density {} missing at density {}",
                e.i, e.j, densities[w], densities[w + 1]
            )));
        }
    }
    Ok(graphs)
}

struct Replicate {
    seed: u64,
    cohort: Cohort,
    graphs: Vec<SymptomGraph>,
}

fn run_point(rep: &Replicate, i: usize, model_cfg: &ModelConfig, run: &RunConfig) -> Result<[f64; 3]> {
    let graph = if rep.graphs.len() == 1 { &rep.graphs[0] } else { &rep.graphs[i] };
    let model = Model::init(model_cfg.clone(), &mut Rng::derive(rep.seed, INIT_STREAM))?;
    let out = train(model, &rep.cohort, graph, &run.sweep.train, &mut Rng::derive(rep.seed, SHUFFLE_STREAM))?;
    let test = rep.cohort.split(Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("sweep needs a non-empty test split".into()));
    }
    let m = evaluate_indices(&out.model, &rep.cohort, graph, test)?;
    Ok([m.auc, m.rmse, m.ipw_f1])
}

/// Runs the sweep over `raw` (an unprocessed cohort) and returns one row
/// per grid point, sorted by the swept value.
pub fn run_sweep(raw: &Cohort, run: &RunConfig, kind: SweepKind) -> Result<Vec<SweepRow>> {
    run.validate()?;
    let grid = normalize_grid(match kind {
        SweepKind::Gate => &run.sweep.gammas,
        SweepKind::Density => &run.sweep.densities,
    })?;
    let reps = (0..run.sweep.seeds as u64)
        .map(|r| {
            let seed = run.seed.wrapping_add(r);
            let cohort = preprocess(raw.clone(), seed)?;
            let graphs = match kind {
                SweepKind::Gate => vec![build_graph(&cohort, run.graph.density)?],
                SweepKind::Density => density_graphs(&cohort, &grid)?,
            };
            Ok(Replicate { seed, cohort, graphs })
        })
        .collect::<Result<Vec<_>>>()?;

    let configs: Vec<ModelConfig> = grid
        .iter()
        .map(|&v| match kind {
            SweepKind::Gate => ModelConfig { gate: GateConfig::fixed(v), ..run.sweep.model.clone() },
            SweepKind::Density => run.sweep.model.clone(),
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..reps.len()).flat_map(|r| (0..grid.len()).map(move |i| (r, i))).collect();
    let job = |&(r, i): &(usize, usize)| run_point(&reps[r], i, &configs[i], run);
    #[cfg(feature = "parallel")]
    let results = jobs.par_iter().map(job).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let results = jobs.iter().map(job).collect::<Result<Vec<_>>>()?;

    let n = reps.len() as f64;
    let rows = grid
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut acc = [0.0; 3];
            for (&(_, gi), res) in jobs.iter().zip(&results) {
                if gi == i {
                    acc.iter_mut().zip(res).for_each(|(a, b)| *a += b);
                }
            }
            SweepRow { value, auc: acc[0] / n, rmse: acc[1] / n, ipw_f1: acc[2] / n }
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate, SynthConfig};

    fn tiny_run() -> (Cohort, RunConfig) {
        let mut run = RunConfig::default();
        run.synth = SynthConfig { n_patients: 30, t: 4, n_nodes: 5, n_communities: 2, ..Default::default() };
        run.sweep.seeds = 2;
        run.sweep.train.epochs = 1;
        run.sweep.model.d_model = 4;
        (generate(&run.synth).unwrap(), run)
    }

    #[test]
    fn grid_is_sorted_and_checked() {
        assert_eq!(normalize_grid(&[0.5, 0.0, 0.5, 1.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(normalize_grid(&[1.2]).is_err());
        assert!(normalize_grid(&[]).is_err());
    }

    #[test]
    fn gate_endpoints_give_two_rows() {
        let (raw, mut run) = tiny_run();
        run.sweep.gammas = vec![1.0, 0.0];
        let rows = run_sweep(&raw, &run, SweepKind::Gate).unwrap();
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn density_rows_follow_grid_and_repeat() {
        let (raw, mut run) = tiny_run();
        run.sweep.densities = vec![0.0, 0.4, 1.0];
        let a = run_sweep(&raw, &run, SweepKind::Density).unwrap();
        let b = run_sweep(&raw, &run, SweepKind::Density).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn density_graphs_are_nested() {
        let (raw, _) = tiny_run();
        let c = preprocess(raw, 1).unwrap();
        let grid = crate::config::unit_grid(0, 10);
        let gs = density_graphs(&c, &grid).unwrap();
        assert_eq!(gs[0].edges().len(), 0);
        assert_eq!(gs[10].edges().len(), 10);
        assert!(gs.windows(2).all(|w| w[0].edges().len() <= w[1].edges().len()));
    }
}
