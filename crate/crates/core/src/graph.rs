//! Symptom graph construction: correlation statistic, density-controlled
//! thresholding, and the self-looped symmetric normalization
//! `D̃^{-1/2} (A + I) D̃^{-1/2}` consumed by the graph convolution.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SymptomGraph {
    n_nodes: usize,
    adjacency: Tensor,
    edges: Vec<Edge>,
    density: f64,
    normalized: Option<Arc<Tensor>>,
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Absolute Pearson correlation between the columns of `obs: [n_obs × N]`.
/// Columns with zero variance are isolated (off-diagonal entries 0).
pub fn correlation_matrix(obs: &Tensor) -> Result<Tensor> {
    if obs.rank() != 2 {
        return Err(Error::Contract(format!(
            "correlation input must be [observations × nodes], got {:?}",
            obs.shape()
        )));
    }
    let (m, n) = (obs.shape()[0], obs.shape()[1]);
    if m < 2 {
        return Err(Error::Data(format!(
            "correlation needs at least 2 observations per node, got {m}"
        )));
    }
    let x = obs.data();
    let mut means = vec![0.0; n];
    for r in 0..m {
        for c in 0..n {
            means[c] += x[r * n + c];
        }
    }
    means.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = vec![0.0; n * n];
    for r in 0..m {
        let row = &x[r * n..(r + 1) * n];
        for a in 0..n {
            let da = row[a] - means[a];
            for b in a..n {
                cov[a * n + b] += da * (row[b] - means[b]);
            }
        }
    }
    let mut out = Tensor::eye(n);
    for a in 0..n {
        for b in a + 1..n {
            let (va, vb) = (cov[a * n + a], cov[b * n + b]);
            let r = if va > 0.0 && vb > 0.0 {
                (cov[a * n + b] / (va * vb).sqrt()).abs().min(1.0)
            } else {
                0.0
            };
            out.set(&[a, b], r);
            out.set(&[b, a], r);
        }
    }
    Ok(out)
}

/// Keeps the `⌈ρ·N(N−1)/2⌉` strongest off-diagonal pairs of `corr` as
/// undirected edges. Ties go to the lexicographically smaller `(i, j)`.
pub fn threshold_by_density(corr: &Tensor, rho: f64) -> Result<SymptomGraph> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Contract(format!("density {rho} outside [0, 1]")));
    }
    if corr.rank() != 2 || corr.shape()[0] != corr.shape()[1] {
        return Err(Error::shape("threshold_by_density", corr.shape(), corr.shape()));
    }
    let n = corr.shape()[0];
    for i in 0..n {
        for j in i + 1..n {
            if (corr.get(&[i, j]) - corr.get(&[j, i])).abs() > 1e-12 {
                return Err(Error::Contract(format!("correlation not symmetric at ({i}, {j})")));
            }
        }
    }
    let total = pair_count(n);
    // slack absorbs products like 0.7 * 10 = 7.000000000000001
    let keep = ((rho * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total);
    let mut pairs: Vec<Edge> = Vec::with_capacity(total);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(Edge { i, j, weight: corr.get(&[i, j]) });
        }
    }
    pairs.sort_by(|a, b| {
        b.weight
            .abs()
            .total_cmp(&a.weight.abs())
            .then((a.i, a.j).cmp(&(b.i, b.j)))
    });
    pairs.truncate(keep);
    pairs.sort_by_key(|e| (e.i, e.j));
    SymptomGraph::from_edges(n, pairs)
}

impl SymptomGraph {
    pub fn from_edges(n_nodes: usize, mut edges: Vec<Edge>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Contract("graph needs at least one node".into()));
        }
        let mut adjacency = Tensor::zeros([n_nodes, n_nodes]);
        for e in &mut edges {
            if e.i == e.j || e.i >= n_nodes || e.j >= n_nodes {
                return Err(Error::Data(format!("invalid edge ({}, {})", e.i, e.j)));
            }
            if e.i > e.j {
                std::mem::swap(&mut e.i, &mut e.j);
            }
            if adjacency.get(&[e.i, e.j]) != 0.0 {
                return Err(Error::Data(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
            adjacency.set(&[e.i, e.j], 1.0);
            adjacency.set(&[e.j, e.i], 1.0);
        }
        edges.sort_by_key(|e| (e.i, e.j));
        let total = pair_count(n_nodes);
        let density = if total == 0 { 0.0 } else { edges.len() as f64 / total as f64 };
        Ok(Self {
            n_nodes,
            adjacency,
            edges,
            density,
            normalized: None,
        })
    }

    pub fn empty(n_nodes: usize) -> Result<Self> {
        Self::from_edges(n_nodes, Vec::new())
    }

    pub fn complete(n_nodes: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n_nodes {
            for j in i + 1..n_nodes {
                edges.push(Edge { i, j, weight: 1.0 });
            }
        }
        Self::from_edges(n_nodes, edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(&[i, j]) != 0.0
    }

    /// Populates the normalized operator. Degrees include the self-loop, so
    /// none is zero.
    pub fn normalize(mut self) -> Self {
        self.normalized = Some(Arc::new(normalized_adjacency(&self.adjacency)));
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized.is_some()
    }

    pub fn normalized(&self) -> Result<&Arc<Tensor>> {
        self.normalized
            .as_ref()
            .ok_or_else(|| Error::Contract("graph used before normalization".into()))
    }

    /// Same graph with node `k` renamed to `perm[k]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge { i: perm[e.i], j: perm[e.j], weight: e.weight })
            .collect();
        let g = Self::from_edges(self.n_nodes, edges)?;
        Ok(if self.is_normalized() { g.normalize() } else { g })
    }

    /// Plain-text edge list: a `nodes=N density=ρ` header, then one
    /// `i j weight` line per undirected edge. Lines starting with `#` are
    /// skipped on read.
    pub fn to_edgelist(&self) -> String {
        let mut s = format!("nodes={} density={}\n", self.n_nodes, self.density);
        for e in &self.edges {
            let _ = writeln!(s, "{} {} {}", e.i, e.j, e.weight);
        }
        s
    }

    pub fn from_edgelist(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Data("empty edge list".into()))?;
        let mut n_nodes = None;
        for tok in header.split_whitespace() {
            if let Some(v) = tok.strip_prefix("nodes=") {
                n_nodes = Some(v.parse::<usize>().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?);
            } else if let Some(v) = tok.strip_prefix("density=") {
                v.parse::<f64>().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
            } else {
                return Err(Error::Parse { line: 1, msg: format!("unexpected header token `{tok}`") });
            }
        }
        let n_nodes = n_nodes.ok_or(Error::Parse { line: 1, msg: "missing nodes=".into() })?;
        let mut edges = Vec::new();
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: ln as u64 + 1, msg };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(err(format!("expected `i j weight`, got `{line}`")));
            }
            let i = parts[0].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
            let j = parts[1].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
            let weight = parts[2].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
            edges.push(Edge { i, j, weight });
        }
        Self::from_edges(n_nodes, edges)
    }

    pub fn write_edgelist(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_edgelist()).map_err(|e| Error::io(path, e))
    }

    pub fn read_edgelist(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_edgelist(&text)
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`.
pub fn normalized_adjacency(adjacency: &Tensor) -> Tensor {
    let n = adjacency.shape()[0];
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = 1.0 + (0..n).map(|j| adjacency.get(&[i, j])).sum::<f64>();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut out = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            let a = adjacency.get(&[i, j]) + if i == j { 1.0 } else { 0.0 };
            if a != 0.0 {
                out.set(&[i, j], inv_sqrt[i] * a * inv_sqrt[j]);
            }
        }
    }
    out
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_radius(sym: &Tensor) -> f64 {
    let n = sym.shape()[0];
    let m = nalgebra::DMatrix::from_row_slice(n, n, sym.data());
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn path3() -> SymptomGraph {
        SymptomGraph::from_edges(
            3,
            vec![Edge { i: 0, j: 1, weight: 1.0 }, Edge { i: 1, j: 2, weight: 1.0 }],
        )
        .unwrap()
        .normalize()
    }

    #[test]
    fn empty_graph_normalizes_to_identity() {
        for n in 1..6 {
            let g = SymptomGraph::empty(n).unwrap().normalize();
            assert_eq!(**g.normalized().unwrap(), Tensor::eye(n));
        }
    }

    #[test]
    fn single_edge_normalization() {
        let g = SymptomGraph::complete(2).unwrap().normalize();
        let a = g.normalized().unwrap();
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn path_normalization_hand_values() {
        let g = path3();
        let a = g.normalized().unwrap();
        assert!((a.get(&[0, 0]) - 0.5).abs() < 1e-12);
        assert!((a.get(&[0, 1]) - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!((a.get(&[1, 1]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.get(&[0, 2]), 0.0);
    }

    #[test]
    fn correlation_duplicate_and_constant() {
        let mut rng = Rng::new(5);
        let rows = 50;
        let mut data = Vec::new();
        for _ in 0..rows {
            let v = rng.normal(0.0, 1.0);
            data.extend_from_slice(&[v, v, 3.0, rng.normal(0.0, 1.0)]);
        }
        let c = correlation_matrix(&Tensor::new([rows, 4], data).unwrap()).unwrap();
        assert!((c.get(&[0, 1]) - 1.0).abs() < 1e-12);
        assert_eq!(c.get(&[2, 0]), 0.0);
        assert_eq!(c.get(&[2, 3]), 0.0);
        for i in 0..4 {
            assert_eq!(c.get(&[i, i]), 1.0);
        }
    }

    #[test]
    fn correlation_independent_is_small() {
        let mut rng = Rng::new(11);
        let rows = 10_000;
        let data = (0..rows * 2).map(|_| rng.normal(0.0, 1.0)).collect();
        let c = correlation_matrix(&Tensor::new([rows, 2], data).unwrap()).unwrap();
        assert!(c.get(&[0, 1]) < 0.05);
    }

    #[test]
    fn correlation_needs_two_observations() {
        assert!(matches!(
            correlation_matrix(&Tensor::zeros([1, 3])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn density_endpoints() {
        let c = Tensor::full([5, 5], 0.3);
        let g0 = threshold_by_density(&c, 0.0).unwrap();
        assert!(g0.edges().is_empty());
        assert_eq!(**g0.normalize().normalized().unwrap(), Tensor::eye(5));
        let g1 = threshold_by_density(&c, 1.0).unwrap();
        assert_eq!(g1.edges().len(), 10);
        assert_eq!(g1.density(), 1.0);
        assert!(threshold_by_density(&c, 1.5).is_err());
        assert!(threshold_by_density(&c, -0.1).is_err());
    }

    #[test]
    fn density_half_keeps_top_three() {
        #[rustfmt::skip]
        let c = Tensor::new([4, 4], vec![
            1.0, 0.9, 0.1, 0.4,
            0.9, 1.0, 0.7, 0.2,
            0.1, 0.7, 1.0, 0.3,
            0.4, 0.2, 0.3, 1.0,
        ]).unwrap();
        // sort-and-count oracle
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                pairs.push((c.get(&[i, j]), i, j));
            }
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let expected: Vec<(usize, usize)> = {
            let mut v: Vec<_> = pairs[..3].iter().map(|p| (p.1, p.2)).collect();
            v.sort();
            v
        };
        let g = threshold_by_density(&c, 0.5).unwrap();
        let got: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![(0, 1), (0, 3), (1, 2)]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let c = Tensor::full([4, 4], 0.5);
        let g = threshold_by_density(&c, 0.5).unwrap();
        let got: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(got, vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn edgelist_roundtrip() {
        let c = Tensor::new([3, 3], vec![1.0, 0.25, 0.1, 0.25, 1.0, 0.123456789, 0.1, 0.123456789, 1.0]).unwrap();
        let g = threshold_by_density(&c, 0.7).unwrap();
        let text = g.to_edgelist();
        assert!(text.starts_with("nodes=3 density="));
        let back = SymptomGraph::from_edgelist(&text).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.density(), g.density());
    }

    #[test]
    fn unnormalized_graph_is_a_contract_error() {
        let g = SymptomGraph::empty(3).unwrap();
        assert!(matches!(g.normalized(), Err(Error::Contract(_))));
    }
}
