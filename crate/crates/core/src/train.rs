//! Mini-batch training, batch gradient evaluation and split evaluation.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cohort::{Cohort, Split};
use crate::error::{Error, Result};
use crate::graph::{correlation_matrix, threshold_by_density, SymptomGraph};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Model, TargetScaler};
use crate::params::{AdamConfig, Gradients};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 300, batch_size: 16, optimizer: AdamConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// One row of the loss curve. Losses are on the regression scale the
/// network is trained on. Epoch 0 is the initialized model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: MetricsReport,
    pub val: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_curve: Vec<EpochRecord>,
    pub metrics: SplitMetrics,
}

/// Builds the shared symptom graph from training-split node summaries.
pub fn build_graph(cohort: &Cohort, density: f64) -> Result<SymptomGraph> {
    let train = cohort.split(Split::Train)?;
    let corr = correlation_matrix(&cohort.node_summaries(train)?)?;
    Ok(threshold_by_density(&corr, density)?.normalize())
}

fn patient_grads(model: &Model, cohort: &Cohort, graph: &SymptomGraph, i: usize) -> Result<(f64, Gradients)> {
    let p = &cohort.patients[i];
    model.loss_and_gradients(&p.features, &p.y, graph)
}

fn reduce(n_params: usize, parts: Vec<(f64, Gradients)>) -> (f64, Gradients) {
    let mut total = Gradients { slots: vec![None; n_params] };
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    (loss, total)
}

/// Summed loss and gradients over `indices`, one patient at a time.
pub fn batch_gradients_sequential(
    model: &Model,
    cohort: &Cohort,
    graph: &SymptomGraph,
    indices: &[usize],
) -> Result<(f64, Gradients)> {
    let parts = indices
        .iter()
        .map(|&i| patient_grads(model, cohort, graph, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(model.params.len(), parts))
}

/// Same result as [`batch_gradients_sequential`], bit for bit: per-patient
/// passes run on the rayon pool and are summed in index order.
#[cfg(feature = "parallel")]
pub fn batch_gradients_parallel(
    model: &Model,
    cohort: &Cohort,
    graph: &SymptomGraph,
    indices: &[usize],
) -> Result<(f64, Gradients)> {
    let parts = indices
        .par_iter()
        .map(|&i| patient_grads(model, cohort, graph, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(model.params.len(), parts))
}

pub fn batch_gradients(
    model: &Model,
    cohort: &Cohort,
    graph: &SymptomGraph,
    indices: &[usize],
) -> Result<(f64, Gradients)> {
    #[cfg(feature = "parallel")]
    {
        batch_gradients_parallel(model, cohort, graph, indices)
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch_gradients_sequential(model, cohort, graph, indices)
    }
}

fn patient_loss(model: &Model, cohort: &Cohort, graph: &SymptomGraph, i: usize) -> Result<f64> {
    let p = &cohort.patients[i];
    let mut tape = Tape::new();
    let loss = model.loss_on_tape(&mut tape, &p.features, &p.y, graph)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean objective over `indices` (forward only). `NaN` when empty.
pub fn mean_loss(model: &Model, cohort: &Cohort, graph: &SymptomGraph, indices: &[usize]) -> Result<f64> {
    #[cfg(feature = "parallel")]
    let losses = indices
        .par_iter()
        .map(|&i| patient_loss(model, cohort, graph, i))
        .collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let losses = indices
        .iter()
        .map(|&i| patient_loss(model, cohort, graph, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / indices.len() as f64)
}

/// Raw-scale predictions and targets for every visit of every patient in
/// `indices`, flattened in patient order.
pub fn predict(model: &Model, cohort: &Cohort, graph: &SymptomGraph, indices: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let run = |i: usize| model.forward(&cohort.patients[i].features, graph).map(|o| o.y_hat.into_data());
    #[cfg(feature = "parallel")]
    let preds = indices.par_iter().map(|&i| run(i)).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let preds = indices.iter().map(|&i| run(i)).collect::<Result<Vec<_>>>()?;
    Ok((preds.concat(), cohort.targets(indices)))
}

pub fn evaluate_indices(model: &Model, cohort: &Cohort, graph: &SymptomGraph, indices: &[usize]) -> Result<MetricsReport> {
    let (y_hat, y) = predict(model, cohort, graph, indices)?;
    evaluate(&y_hat, &y, cohort.stage_threshold)
}

pub fn evaluate_splits(model: &Model, cohort: &Cohort, graph: &SymptomGraph) -> Result<SplitMetrics> {
    let opt = |s: Split| -> Result<Option<MetricsReport>> {
        let idx = cohort.split(s)?;
        if idx.is_empty() {
            Ok(None)
        } else {
            evaluate_indices(model, cohort, graph, idx).map(Some)
        }
    };
    Ok(SplitMetrics {
        train: evaluate_indices(model, cohort, graph, cohort.split(Split::Train)?)?,
        val: opt(Split::Val)?,
        test: opt(Split::Test)?,
    })
}

/// Fits the target scaler on the training split, then runs shuffled
/// mini-batch Adam for `cfg.epochs` epochs. Batch gradients are the mean
/// of per-patient gradients.
pub fn train(mut model: Model, cohort: &Cohort, graph: &SymptomGraph, cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = cohort.split(Split::Train)?.to_vec();
    let val_idx = cohort.split(Split::Val)?.to_vec();
    model.target = TargetScaler::fit(&cohort.targets(&train_idx));

    let record = |model: &Model, epoch: usize| -> Result<EpochRecord> {
        let train_loss = mean_loss(model, cohort, graph, &train_idx)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let val_loss = if val_idx.is_empty() { f64::NAN } else { mean_loss(model, cohort, graph, &val_idx)? };
        Ok(EpochRecord { epoch, train_loss, val_loss })
    };

    let mut curve = vec![record(&model, 0)?];
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = batch_gradients(&model, cohort, graph, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            grads.scale(1.0 / batch.len() as f64);
            model.params.zero_grads();
            model.params.accumulate(&grads);
            model.params.adam_step(&cfg.optimizer)?;
        }
        curve.push(record(&model, epoch)?);
    }
    let metrics = evaluate_splits(&model, cohort, graph)?;
    Ok(TrainOutcome { model, loss_curve: curve, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate, preprocess, SynthConfig};
    use crate::model::ModelConfig;

    fn setup() -> (Cohort, SymptomGraph, Model) {
        let synth = SynthConfig { n_patients: 24, t: 4, n_nodes: 4, n_communities: 2, ..Default::default() };
        let cohort = preprocess(generate(&synth).unwrap(), 1).unwrap();
        let graph = build_graph(&cohort, 0.5).unwrap();
        let cfg = ModelConfig { d_model: 8, n_heads: 2, n_blocks: 1, t_max: 8, ..Default::default() };
        let model = Model::init(cfg, &mut Rng::new(2)).unwrap();
        (cohort, graph, model)
    }

    #[test]
    fn zero_epochs_leaves_params_untouched() {
        let (cohort, graph, model) = setup();
        let before = model.params.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(model, &cohort, &graph, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(out.loss_curve.len(), 1);
        assert_eq!(out.model.params.step_count(), 0);
        for (a, b) in before.iter().zip(out.model.params.iter()) {
            assert!(a.value.bit_eq(&b.value));
        }
    }

    #[test]
    fn short_training_reduces_loss() {
        let (cohort, graph, model) = setup();
        let cfg = TrainConfig { epochs: 40, batch_size: 4, optimizer: AdamConfig { lr: 1e-2, ..Default::default() } };
        let out = train(model, &cohort, &graph, &cfg, &mut Rng::new(3)).unwrap();
        let first = out.loss_curve[0].train_loss;
        let last = out.loss_curve.last().unwrap().train_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 2, batch_size: 5, ..Default::default() };
        let run = || {
            let (cohort, graph, model) = setup();
            train(model, &cohort, &graph, &cfg, &mut Rng::new(3)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.metrics, b.metrics);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (cohort, graph, model) = setup();
        let idx = cohort.split(Split::Train).unwrap().to_vec();
        let (ls, gs) = batch_gradients_sequential(&model, &cohort, &graph, &idx).unwrap();
        let (lp, gp) = batch_gradients_parallel(&model, &cohort, &graph, &idx).unwrap();
        assert_eq!(ls.to_bits(), lp.to_bits());
        for k in 0..model.params.len() {
            let (a, b) = (gs.get(k).unwrap(), gp.get(k).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn graph_is_built_from_train_split_only() {
        let (mut cohort, graph, _) = setup();
        let test = cohort.split(Split::Test).unwrap().to_vec();
        for &i in &test {
            cohort.patients[i].features.data_mut().iter_mut().for_each(|v| *v *= -3.0);
        }
        let again = build_graph(&cohort, 0.5).unwrap();
        assert_eq!(graph.edges(), again.edges());
    }
}
