//! Longitudinal cohorts: seeded synthetic generation, CSV ingestion and
//! leak-free preprocessing (split, impute, standardize).
//!
//! CSV layout (header required, UTF-8, LF):
//!
//! ```text
//! patient_id,visit,indicator_1,…,indicator_{N·d_in},y
//! ```
//!
//! `visit` is a 0-based contiguous index per patient. Indicator columns are
//! node-major: column `n·d_in + k + 1` holds channel `k` of node `n`. Empty
//! cells are missing values. Lines starting with `#` are skipped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, SymptomGraph};
use crate::metrics::median;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSeries {
    pub patient_id: String,
    /// `[T × N × d_in]`; `NaN` marks a missing cell before preprocessing.
    pub features: Tensor,
    /// `[T]` progression score.
    pub y: Tensor,
    pub stage: Vec<u8>,
}

impl PatientSeries {
    pub fn t_len(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-feature standardization statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows: usize,
    pub patients_seen: usize,
    pub dropped_gaps: usize,
    pub dropped_missing_target: usize,
    pub dropped_short: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub patients: Vec<PatientSeries>,
    pub n_nodes: usize,
    pub d_in: usize,
    pub splits: Option<Splits>,
    pub scaler: Option<Scaler>,
    /// Threshold that produced `stage`.
    pub stage_threshold: f64,
    pub truth_graph: Option<SymptomGraph>,
    pub warnings: Vec<String>,
    pub load_report: Option<LoadReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub t: usize,
    pub n_nodes: usize,
    pub d_in: usize,
    pub n_communities: usize,
    pub drift_min: f64,
    pub drift_max: f64,
    /// Std of the per-step latent innovation.
    pub step_noise: f64,
    pub loading_min: f64,
    pub loading_max: f64,
    /// Std of the factor shared by all nodes of a community at one visit.
    pub community_noise: f64,
    /// Std of independent per-indicator noise.
    pub feature_noise: f64,
    pub y_scale: f64,
    pub y_noise: f64,
    /// Probability that an indicator cell is blanked out.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            t: 8,
            n_nodes: 12,
            d_in: 2,
            n_communities: 3,
            drift_min: 0.02,
            drift_max: 0.10,
            step_noise: 0.01,
            loading_min: 0.5,
            loading_max: 1.5,
            community_noise: 0.5,
            feature_noise: 0.8,
            y_scale: 80.0,
            y_noise: 2.0,
            missing_rate: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_patients, self.t, self.n_nodes, self.d_in, self.n_communities];
        if positive.contains(&0) {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.n_communities > self.n_nodes {
            return Err(Error::Config(format!(
                "n_communities {} exceeds n_nodes {}",
                self.n_communities, self.n_nodes
            )));
        }
        if !(self.drift_min <= self.drift_max) || !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("invalid drift range or missing rate".into()));
        }
        Ok(())
    }

    pub fn community_of(&self, node: usize) -> usize {
        node * self.n_communities / self.n_nodes
    }
}

/// Seeded synthetic cohort. A latent severity `s` starts in `U(0,1)` and
/// drifts upward by a per-patient rate plus Gaussian innovation. Each
/// indicator channel reads `loading·s + community factor + noise`, and the
/// target is `y_scale·s + N(0, y_noise)`.
pub fn generate(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let (n, d, t_len, b) = (cfg.n_nodes, cfg.d_in, cfg.t, cfg.n_communities);
    let loadings: Vec<f64> = (0..n * d).map(|_| rng.uniform(cfg.loading_min, cfg.loading_max)).collect();

    let mut patients = Vec::with_capacity(cfg.n_patients);
    for p in 0..cfg.n_patients {
        let mut s = rng.uniform(0.0, 1.0);
        let drift = rng.uniform(cfg.drift_min, cfg.drift_max);
        let mut x = Vec::with_capacity(t_len * n * d);
        let mut y = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if t > 0 {
                s += drift + rng.normal(0.0, cfg.step_noise);
            }
            let factors: Vec<f64> = (0..b).map(|_| rng.normal(0.0, cfg.community_noise)).collect();
            for node in 0..n {
                let f = factors[cfg.community_of(node)];
                for k in 0..d {
                    let v = loadings[node * d + k] * s + f + rng.normal(0.0, cfg.feature_noise);
                    let missing = cfg.missing_rate > 0.0 && rng.bernoulli(cfg.missing_rate);
                    x.push(if missing { f64::NAN } else { v });
                }
            }
            y.push(cfg.y_scale * s + rng.normal(0.0, cfg.y_noise));
        }
        patients.push(PatientSeries {
            patient_id: format!("P{p:04}"),
            features: Tensor::new([t_len, n, d], x)?,
            y: Tensor::new([t_len], y)?,
            stage: Vec::new(),
        });
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if cfg.community_of(i) == cfg.community_of(j) {
                edges.push(Edge { i, j, weight: 1.0 });
            }
        }
    }
    let mut cohort = Cohort {
        patients,
        n_nodes: n,
        d_in: d,
        splits: None,
        scaler: None,
        stage_threshold: 0.0,
        truth_graph: Some(SymptomGraph::from_edges(n, edges)?),
        warnings: Vec::new(),
        load_report: None,
    };
    cohort.relabel_stages_by_median(None)?;
    Ok(cohort)
}

impl Cohort {
    pub fn n_features(&self) -> usize {
        self.n_nodes * self.d_in
    }

    pub fn t_len(&self) -> usize {
        self.patients.first().map_or(0, PatientSeries::t_len)
    }

    pub fn ids(&self, indices: &[usize]) -> Vec<&str> {
        indices.iter().map(|&i| self.patients[i].patient_id.as_str()).collect()
    }

    pub fn split(&self, split: Split) -> Result<&[usize]> {
        self.splits
            .as_ref()
            .map(|s| s.get(split))
            .ok_or_else(|| Error::Contract("cohort has not been split".into()))
    }

    /// All target values of the given patients, flattened.
    pub fn targets(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| self.patients[i].y.data().iter().copied())
            .collect()
    }

    /// Relabels stages as `y > median(y)` over `indices` (all patients when
    /// `None`).
    pub fn relabel_stages_by_median(&mut self, indices: Option<&[usize]>) -> Result<()> {
        let all: Vec<usize> = (0..self.patients.len()).collect();
        let ys = self.targets(indices.unwrap_or(&all));
        let thr = median(&ys)?;
        for p in &mut self.patients {
            p.stage = crate::metrics::stage_labels(p.y.data(), thr);
        }
        self.stage_threshold = thr;
        Ok(())
    }

    /// One scalar per node and observation: the mean over the node's
    /// channels. Returns `[Σ_p T × N]`.
    pub fn node_summaries(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, d) = (self.n_nodes, self.d_in);
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in indices {
            let f = self.patients[i].features.data();
            for t in 0..self.patients[i].t_len() {
                for node in 0..n {
                    let cells = &f[(t * n + node) * d..(t * n + node + 1) * d];
                    data.push(cells.iter().sum::<f64>() / d as f64);
                }
                rows += 1;
            }
        }
        Tensor::new([rows, n], data)
    }

    pub fn has_missing(&self) -> bool {
        self.patients.iter().any(|p| p.features.data().iter().any(|v| v.is_nan()))
    }

    pub fn to_csv_string(&self) -> String {
        let nf = self.n_features();
        let mut s = String::from("patient_id,visit");
        for k in 1..=nf {
            let _ = write!(s, ",indicator_{k}");
        }
        s.push_str(",y\n");
        for p in &self.patients {
            let f = p.features.data();
            for t in 0..p.t_len() {
                let _ = write!(s, "{},{}", p.patient_id, t);
                for v in &f[t * nf..(t + 1) * nf] {
                    if v.is_nan() {
                        s.push(',');
                    } else {
                        let _ = write!(s, ",{v}");
                    }
                }
                let _ = writeln!(s, ",{}", p.y.data()[t]);
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_csv(path: &Path, d_in: usize) -> Result<Cohort> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, d_in)
}

struct RawVisit {
    visit: usize,
    features: Vec<f64>,
    y: Option<f64>,
}

/// Parses the cohort CSV. Patients with non-contiguous visits or a missing
/// target are dropped; the remaining series are brought to the most common
/// length (longer ones truncated, shorter ones dropped).
pub fn parse_csv(text: &str, d_in: usize) -> Result<Cohort> {
    if d_in == 0 {
        return Err(Error::Config("d_in must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Data("empty cohort file".into()));
    }
    let nf = headers.len().saturating_sub(3);
    let header_ok = headers.len() >= 4
        && &headers[0] == "patient_id"
        && &headers[1] == "visit"
        && &headers[headers.len() - 1] == "y"
        && (0..nf).all(|k| headers[k + 2] == *format!("indicator_{}", k + 1));
    if !header_ok {
        return Err(Error::Parse { line: 1, msg: "header must be patient_id,visit,indicator_1..indicator_K,y".into() });
    }
    if nf % d_in != 0 {
        return Err(Error::Data(format!("{nf} indicator columns not divisible by d_in {d_in}")));
    }
    let n_nodes = nf / d_in;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawVisit>> = HashMap::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |msg: String| Error::Parse { line, msg };
        if rec.len() != headers.len() {
            return Err(perr(format!("expected {} fields, got {}", headers.len(), rec.len())));
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(perr("empty patient_id".into()));
        }
        let visit: usize = rec[1].trim().parse().map_err(|_| perr(format!("bad visit `{}`", &rec[1])))?;
        let cell = |s: &str| -> Result<f64> {
            let s = s.trim();
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse::<f64>().map_err(|_| perr(format!("bad number `{s}`")))
            }
        };
        let features = (0..nf).map(|k| cell(&rec[k + 2])).collect::<Result<Vec<_>>>()?;
        let yv = cell(&rec[nf + 2])?;
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if entry.iter().any(|v| v.visit == visit) {
            return Err(Error::Data(format!("duplicate visit {visit} for patient `{id}` (line {line})")));
        }
        entry.push(RawVisit { visit, features, y: if yv.is_nan() { None } else { Some(yv) } });
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("cohort file has no rows".into()));
    }

    let mut report = LoadReport { rows, patients_seen: order.len(), ..Default::default() };
    let mut complete: Vec<(String, Vec<RawVisit>)> = Vec::new();
    for id in order {
        let mut visits = groups.remove(&id).expect("grouped");
        visits.sort_by_key(|v| v.visit);
        if visits.iter().enumerate().any(|(i, v)| v.visit != i) {
            report.dropped_gaps += 1;
            continue;
        }
        if visits.iter().any(|v| v.y.is_none()) {
            report.dropped_missing_target += 1;
            continue;
        }
        complete.push((id, visits));
    }
    let t_len = modal_length(complete.iter().map(|(_, v)| v.len()))
        .ok_or_else(|| Error::Data("no patient with complete follow-up".into()))?;

    let mut patients = Vec::new();
    for (id, mut visits) in complete {
        if visits.len() < t_len {
            report.dropped_short += 1;
            continue;
        }
        if visits.len() > t_len {
            report.truncated += 1;
            visits.truncate(t_len);
        }
        let features: Vec<f64> = visits.iter().flat_map(|v| v.features.iter().copied()).collect();
        let y: Vec<f64> = visits.iter().map(|v| v.y.expect("checked")).collect();
        patients.push(PatientSeries {
            patient_id: id,
            features: Tensor::new([t_len, n_nodes, d_in], features)?,
            y: Tensor::new([t_len], y)?,
            stage: Vec::new(),
        });
    }
    let mut cohort = Cohort {
        patients,
        n_nodes,
        d_in,
        splits: None,
        scaler: None,
        stage_threshold: 0.0,
        truth_graph: None,
        warnings: Vec::new(),
        load_report: Some(report),
    };
    cohort.relabel_stages_by_median(None)?;
    Ok(cohort)
}

/// Most frequent value; ties go to the larger length.
fn modal_length(lengths: impl Iterator<Item = usize>) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for l in lengths {
        *counts.entry(l).or_default() += 1;
    }
    counts.into_iter().max_by_key(|&(len, c)| (c, len)).map(|(len, _)| len)
}

/// Stream index of the split shuffle, kept apart from generation streams.
const SPLIT_STREAM: u64 = 0x5EED_5B17;

/// Seeded 70/15/15 patient-level shuffle split.
pub fn split_indices(n: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, SPLIT_STREAM).shuffle(&mut idx);
    let n_train = ((n as f64) * 0.70).round() as usize;
    let n_val = (((n as f64) * 0.15).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Splits { train: idx, val, test }
}

/// Splits by patient, forward-fills each series, fills what remains with
/// the training mean, and z-scores every feature with training statistics.
/// Stage labels are re-derived from the training-split median.
pub fn preprocess(mut cohort: Cohort, seed: u64) -> Result<Cohort> {
    let n_pat = cohort.patients.len();
    if n_pat == 0 {
        return Err(Error::Data("cannot preprocess an empty cohort".into()));
    }
    let splits = split_indices(n_pat, seed);
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let nf = cohort.n_features();

    for p in &mut cohort.patients {
        let t_len = p.t_len();
        let f = p.features.data_mut();
        for k in 0..nf {
            let mut last = f64::NAN;
            for t in 0..t_len {
                let c = &mut f[t * nf + k];
                if c.is_nan() {
                    *c = last;
                } else {
                    last = *c;
                }
            }
        }
    }

    let mut sum = vec![0.0; nf];
    let mut count = vec![0usize; nf];
    for &i in &splits.train {
        for row in cohort.patients[i].features.data().chunks(nf) {
            for k in 0..nf {
                if !row[k].is_nan() {
                    sum[k] += row[k];
                    count[k] += 1;
                }
            }
        }
    }
    let fill: Vec<f64> = (0..nf).map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 }).collect();
    for p in &mut cohort.patients {
        for row in p.features.data_mut().chunks_mut(nf) {
            for k in 0..nf {
                if row[k].is_nan() {
                    row[k] = fill[k];
                }
            }
        }
    }

    let mut mean = vec![0.0; nf];
    let mut rows = 0usize;
    for &i in &splits.train {
        for row in cohort.patients[i].features.data().chunks(nf) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            rows += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; nf];
    for &i in &splits.train {
        for row in cohort.patients[i].features.data().chunks(nf) {
            for k in 0..nf {
                var[k] += (row[k] - mean[k]) * (row[k] - mean[k]);
            }
        }
    }
    let mut std = Vec::with_capacity(nf);
    for (k, v) in var.iter().enumerate() {
        let s = (v / rows as f64).sqrt();
        if s > 0.0 && s.is_finite() {
            std.push(s);
        } else {
            cohort.warnings.push(format!("indicator_{} has zero variance on the training split; std clamped to 1", k + 1));
            std.push(1.0);
        }
    }
    for p in &mut cohort.patients {
        for row in p.features.data_mut().chunks_mut(nf) {
            for k in 0..nf {
                row[k] = (row[k] - mean[k]) / std[k];
            }
        }
    }

    cohort.relabel_stages_by_median(Some(&splits.train))?;
    cohort.scaler = Some(Scaler { mean, std });
    cohort.splits = Some(splits);
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_patients: 40, t: 5, n_nodes: 6, d_in: 2, n_communities: 2, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.to_csv_string(), c.to_csv_string());
    }

    #[test]
    fn targets_trend_upward() {
        let c = generate(&SynthConfig::default()).unwrap();
        let t = c.t_len();
        let first: f64 = c.patients.iter().map(|p| p.y.data()[0]).sum::<f64>();
        let last: f64 = c.patients.iter().map(|p| p.y.data()[t - 1]).sum::<f64>();
        assert!(last > first);
    }

    #[test]
    fn stage_prevalence_is_half() {
        let c = generate(&small()).unwrap();
        let total: usize = c.patients.iter().map(|p| p.t_len()).sum();
        let pos: usize = c.patients.iter().flat_map(|p| &p.stage).map(|&s| s as usize).sum();
        assert_eq!(pos, total / 2);
    }

    #[test]
    fn truth_graph_is_community_blocks() {
        let c = generate(&small()).unwrap();
        let g = c.truth_graph.unwrap();
        assert!(g.has_edge(0, 2) && !g.has_edge(2, 3) && g.has_edge(3, 5));
    }

    #[test]
    fn csv_roundtrip() {
        let c = generate(&small()).unwrap();
        let back = parse_csv(&c.to_csv_string(), c.d_in).unwrap();
        assert_eq!(back.patients, c.patients);
        assert_eq!(back.n_nodes, c.n_nodes);
        assert_eq!(back.stage_threshold, c.stage_threshold);
    }

    #[test]
    fn gap_drops_patient() {
        let text = "patient_id,visit,indicator_1,indicator_2,y\n\
                    a,0,1,2,10\na,1,1,2,11\na,2,1,2,12\na,3,1,2,13\n\
                    b,0,1,2,10\nb,1,1,2,11\nb,2,1,2,12\nb,4,1,2,13\n\
                    c,0,1,,10\nc,1,1,2,11\nc,2,1,2,12\nc,3,1,2,13\n";
        let c = parse_csv(text, 1).unwrap();
        let ids: Vec<&str> = c.patients.iter().map(|p| p.patient_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        assert_eq!(c.load_report.as_ref().unwrap().dropped_gaps, 1);
        assert!(c.patients[1].features.data()[1].is_nan());
    }

    #[test]
    fn empty_file_is_a_data_error() {
        assert!(matches!(parse_csv("", 1), Err(Error::Data(_))));
        assert!(matches!(
            parse_csv("patient_id,visit,indicator_1,y\n", 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "patient_id,visit,indicator_1,y\na,0,1,2\na,1,oops,3\n";
        match parse_csv(text, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_visit_is_a_data_error() {
        let text = "patient_id,visit,indicator_1,y\na,0,1,2\na,0,1,3\n";
        assert!(matches!(parse_csv(text, 1), Err(Error::Data(_))));
    }

    #[test]
    fn preprocessed_train_features_are_standard() {
        let c = preprocess(generate(&SynthConfig { missing_rate: 0.1, ..small() }).unwrap(), 3).unwrap();
        assert!(!c.has_missing());
        let nf = c.n_features();
        let train = c.split(Split::Train).unwrap();
        for k in 0..nf {
            let vals: Vec<f64> = train
                .iter()
                .flat_map(|&i| c.patients[i].features.data().chunks(nf).map(move |r| r[k]))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6, "feature {k}: {m} {v}");
        }
    }

    #[test]
    fn leading_missing_cell_gets_train_mean() {
        let mut c = generate(&small()).unwrap();
        c.patients[0].features.data_mut()[0] = f64::NAN;
        let raw = c.clone();
        let c = preprocess(c, 1).unwrap();
        let train = c.split(Split::Train).unwrap().to_vec();
        let nf = c.n_features();
        let vals: Vec<f64> = train
            .iter()
            .flat_map(|&i| raw.patients[i].features.data().chunks(nf).map(|r| r[0]))
            .filter(|v| !v.is_nan())
            .collect();
        let train_mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sc = c.scaler.as_ref().unwrap();
        let restored = c.patients[0].features.data()[0] * sc.std[0] + sc.mean[0];
        assert!((restored - train_mean).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_feature_warns() {
        let mut c = generate(&small()).unwrap();
        let nf = c.n_features();
        for p in &mut c.patients {
            for row in p.features.data_mut().chunks_mut(nf) {
                row[1] = 4.0;
            }
        }
        let c = preprocess(c, 2).unwrap();
        assert_eq!(c.scaler.as_ref().unwrap().std[1], 1.0);
        assert!(c.warnings.iter().any(|w| w.contains("indicator_2")));
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let a = split_indices(101, 9);
        let b = split_indices(101, 9);
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (71, 15, 15));
        assert_ne!(split_indices(101, 10), a);
    }
}
