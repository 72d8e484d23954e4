//! Self-check suite behind the `verify` command. Every check reports the
//! module it belongs to, the invariant, what was observed and what was
//! expected.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::autodiff::{Activation, FaultKind, Tape, Var};
use crate::cohort::{generate, parse_csv, preprocess, split_indices, Split, SynthConfig};
use crate::config::RunConfig;
use crate::error::Result;
use crate::gcn::{encode_structural, GcnConfig};
use crate::gradcheck::{grad_check_with_fault, GradCheckReport};
use crate::graph::{correlation_matrix, normalized_adjacency, spectral_radius, threshold_by_density, Edge, SymptomGraph};
use crate::metrics::{self, oracle};
use crate::model::{forward_on_tape, fuse, mse_loss, GateConfig, Model, ModelConfig, GATE_BIAS, GATE_WEIGHT};
use crate::params::{AdamConfig, ParamStore};
use crate::pipeline::{metrics_json, run_train, sweep_csv};
use crate::rng::Rng;
use crate::sweep::{run_sweep, SweepKind};
use crate::temporal::{attention, encode_temporal, PositionalTable, TemporalConfig};
use crate::tensor::{matmul, matmul_naive, sigmoid, softmax_rows, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub invariant: String,
    pub observed: String,
    pub expected: String,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{}] {}: observed {}; expected {}", self.module, self.invariant, self.observed, self.expected)
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Corrupts one backward rule in every gradient check.
    pub fault: Option<FaultKind>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn modules(&self) -> Vec<&'static str> {
        let mut m: Vec<_> = self.checks.iter().map(|c| c.module).collect();
        m.dedup();
        m
    }
}

struct Suite {
    checks: Vec<Check>,
    rng: Rng,
    fault: Option<FaultKind>,
}

impl Suite {
    fn record(&mut self, module: &'static str, invariant: &str, outcome: Result<(bool, String, String)>) {
        let (passed, observed, expected) = outcome.unwrap_or_else(|e| (false, format!("error: {e}"), "no error".into()));
        self.checks.push(Check { module, invariant: invariant.into(), observed, expected, passed });
    }

    fn check(&mut self, module: &'static str, invariant: &str, f: impl FnOnce(&mut Suite) -> Result<(bool, String, String)>) {
        let outcome = f(self);
        self.record(module, invariant, outcome);
    }

    fn random(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.normal(0.0, 1.0)).collect()).expect("shape")
    }

    fn grad(
        &mut self,
        module: &'static str,
        invariant: &str,
        params: &ParamStore,
        tol: f64,
        f: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
    ) {
        let outcome = grad_check_with_fault(f, params, 1e-5, tol, self.fault).map(|r| grad_outcome(&r, tol));
        self.record(module, invariant, outcome);
    }
}

fn grad_outcome(r: &GradCheckReport, tol: f64) -> (bool, String, String) {
    let observed = match r.failures().next() {
        Some(f) if !f.non_finite.is_empty() => format!("non-finite loss perturbing `{}`", f.name),
        Some(f) => format!(
            "rel err {:.3e} at `{}`[{}] (analytic {:.6e}, numeric {:.6e})",
            f.max_rel_error, f.name, f.worst_index, f.analytic, f.numeric
        ),
        None => format!("max rel err {:.3e}", r.max_rel_error()),
    };
    (r.passed(), observed, format!("< {tol:e} for every parameter"))
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).expect("unique names");
    }
    s
}

/// `Σ r ⊙ v` with a fixed random `r`, so every output entry gets a distinct
/// upstream gradient.
fn probe(t: &mut Tape, v: Var, r: &Tensor) -> Result<Var> {
    let r = t.leaf(r.clone().reshape(t.shape(v).to_vec())?);
    let m = t.mul(v, r)?;
    Ok(t.sum(m))
}

fn ok(passed: bool, observed: impl Into<String>, expected: impl Into<String>) -> Result<(bool, String, String)> {
    Ok((passed, observed.into(), expected.into()))
}

fn random_graph(rng: &mut Rng, n: usize, p: f64) -> Result<SymptomGraph> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.bernoulli(p) {
                edges.push(Edge { i, j, weight: 1.0 });
            }
        }
    }
    Ok(SymptomGraph::from_edges(n, edges)?.normalize())
}

fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut p);
    p
}

/// `out[:, perm[i], :] = x[:, i, :]` for `[T × N × d]`.
fn relabel_nodes(x: &Tensor, perm: &[usize]) -> Tensor {
    let (t, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros([t, n, d]);
    for s in 0..t {
        for i in 0..n {
            for k in 0..d {
                out.set(&[s, perm[i], k], x.get(&[s, i, k]));
            }
        }
    }
    out
}

/// `out[perm[i]] = x[i]` along axis 0.
fn permute_axis0(x: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Tensor> = (0..x.shape()[0]).map(|i| x.index_axis0(i)).collect();
    let mut out = rows.clone();
    for (i, r) in rows.into_iter().enumerate() {
        out[perm[i]] = r;
    }
    Tensor::stack(&out).expect("same shapes")
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let mut s = Suite { checks: Vec::new(), rng: Rng::new(opts.seed), fault: opts.fault };
    numeric_core(&mut s);
    graph_builder(&mut s);
    gcn_encoder(&mut s);
    temporal_encoder(&mut s);
    fusion_model(&mut s);
    evalkit(&mut s);
    cohort_io(&mut s);
    cli_harness(&mut s);
    VerifyReport { checks: s.checks }
}

fn numeric_core(s: &mut Suite) {
    const M: &str = "numeric-core";
    let r = s.random(&[64]);
    let probe_r = move |t: &mut Tape, v: Var| -> Result<Var> {
        let n = t.value(v).len();
        probe(t, v, &Tensor::new([n], r.data()[..n].to_vec())?)
    };

    let p = store(vec![("a", s.random(&[3, 4])), ("b", s.random(&[4, 2]))]);
    s.grad(M, "gradient fidelity: matmul", &p, 1e-6, |ps, t| {
        let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
        let y = t.matmul(a, b)?;
        probe_r(t, y)
    });
    let p = store(vec![("a", s.random(&[2, 3, 4])), ("b", s.random(&[2, 3, 4]))]);
    s.grad(M, "gradient fidelity: batched matmul", &p, 1e-6, |ps, t| {
        let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
        let y = t.bmm(a, b, true)?;
        probe_r(t, y)
    });
    let adj = Arc::new(s.random(&[3, 3]));
    let p = store(vec![("h", s.random(&[2, 3, 2]))]);
    s.grad(M, "gradient fidelity: graph propagation", &p, 1e-6, |ps, t| {
        let h = t.param(ps, "h")?;
        let y = t.propagate(adj.clone(), h)?;
        probe_r(t, y)
    });
    let p = store(vec![("a", s.random(&[3, 4])), ("b", s.random(&[3, 4])), ("row", s.random(&[4]))]);
    s.grad(M, "gradient fidelity: add, sub, mul, add_row, scale", &p, 1e-6, |ps, t| {
        let (a, b, row) = (t.param(ps, "a")?, t.param(ps, "b")?, t.param(ps, "row")?);
        let x = t.add(a, b)?;
        let y = t.sub(x, b)?;
        let y = t.mul(y, b)?;
        let y = t.add_row(y, row)?;
        let y = t.scale(y, 0.7);
        probe_r(t, y)
    });
    let p = store(vec![("x", s.random(&[3, 5]))]);
    s.grad(M, "gradient fidelity: sigmoid, tanh, gelu", &p, 1e-6, |ps, t| {
        let x = t.param(ps, "x")?;
        let a = t.sigmoid(x);
        let b = t.tanh(x);
        let c = t.gelu(x);
        let y = t.add(a, b)?;
        let y = t.add(y, c)?;
        probe_r(t, y)
    });
    let mut away = s.random(&[3, 5]);
    away.data_mut().iter_mut().for_each(|v| *v += 0.2 * v.signum());
    let p = store(vec![("x", away)]);
    s.grad(M, "gradient fidelity: relu", &p, 1e-6, |ps, t| {
        let x = t.param(ps, "x")?;
        let y = t.relu(x);
        probe_r(t, y)
    });
    let p = store(vec![("x", s.random(&[2, 3, 4]))]);
    s.grad(M, "gradient fidelity: softmax", &p, 1e-6, |ps, t| {
        let x = t.param(ps, "x")?;
        let y = t.softmax(x);
        probe_r(t, y)
    });
    let p = store(vec![("x", s.random(&[4, 5])), ("gain", s.random(&[5])), ("bias", s.random(&[5]))]);
    s.grad(M, "gradient fidelity: layer norm", &p, 1e-6, |ps, t| {
        let (x, g, b) = (t.param(ps, "x")?, t.param(ps, "gain")?, t.param(ps, "bias")?);
        let y = t.layer_norm(x, g, b, 1e-9)?;
        probe_r(t, y)
    });
    let pe = s.random(&[3, 4]);
    let p = store(vec![("a", s.random(&[2, 3, 4])), ("b", s.random(&[2, 3, 2]))]);
    s.grad(M, "gradient fidelity: concat, slice, permute, reshape, mean, add_const", &p, 1e-6, |ps, t| {
        let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
        let c = t.concat_lastdim(a, b)?;
        let c = t.slice_last(c, 1, 4)?;
        let c = t.add_const(c, &pe)?;
        let c = t.permute(c, &[1, 0, 2])?;
        let c = t.reshape(c, &[3, 8])?;
        let c = t.mean_axis(c, 0)?;
        probe_r(t, c)
    });
    let p = store(vec![("g", s.random(&[2, 3])), ("t", s.random(&[2, 3])), ("z", s.random(&[2, 3]))]);
    s.grad(M, "gradient fidelity: gated mix and mse", &p, 1e-6, |ps, t| {
        let (g, h, z) = (t.param(ps, "g")?, t.param(ps, "t")?, t.param(ps, "z")?);
        let gamma = t.sigmoid(z);
        let m = t.mix(g, h, gamma)?;
        let m2 = t.mix_const(m, h, 0.3)?;
        t.mse(m2, &Tensor::full([2, 3], 0.25))
    });

    s.check(M, "shape algebra: mismatched operands are rejected", |_| {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros([2, 3]));
        let b = t.leaf(Tensor::zeros([2, 3]));
        let c = t.leaf(Tensor::zeros([3]));
        let d = t.leaf(Tensor::zeros([2]));
        let rejected = [
            t.matmul(a, b).is_err(),
            t.add(a, c).is_err(),
            t.add_row(a, d).is_err(),
            t.reshape(a, &[5]).is_err(),
            t.permute(a, &[0, 0]).is_err(),
            t.concat_lastdim(a, c).is_err(),
            t.mse(a, &Tensor::zeros([5])).is_err(),
            matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).is_err(),
        ];
        let n = rejected.iter().filter(|&&r| r).count();
        ok(n == rejected.len(), format!("{n}/{} rejected", rejected.len()), "all rejected")
    });

    s.check(M, "matmul agrees with the naive triple loop", |s| {
        let (a, b) = (s.random(&[7, 5]), s.random(&[5, 6]));
        let diff = matmul(&a, &b)?.max_abs_diff(&matmul_naive(&a, &b)?);
        ok(diff < 1e-12, format!("max diff {diff:.3e}"), "< 1e-12")
    });

    s.check(M, "determinism: forward, backward and Adam trajectories repeat bit for bit", |_| {
        let run = || -> Result<Vec<u64>> {
            let mut rng = Rng::new(99);
            let cfg = ModelConfig { d_model: 4, n_heads: 2, n_blocks: 1, t_max: 4, ..Default::default() };
            let mut model = Model::init(cfg, &mut rng)?;
            let x = Tensor::new([3, 4, 2], (0..24).map(|_| rng.normal(0.0, 1.0)).collect())?;
            let y = Tensor::new([3], vec![0.5, -0.2, 1.0])?;
            let g = SymptomGraph::complete(4)?.normalize();
            let mut bits = Vec::new();
            for _ in 0..3 {
                let (loss, grads) = model.loss_and_gradients(&x, &y, &g)?;
                bits.push(loss.to_bits());
                model.params.zero_grads();
                model.params.accumulate(&grads);
                model.params.adam_step(&AdamConfig::default())?;
            }
            bits.extend(model.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())));
            Ok(bits)
        };
        let (a, b) = (run()?, run()?);
        ok(a == b, format!("{} values, identical: {}", a.len(), a == b), "identical")
    });

    s.check(M, "softmax rows sum to 1 and sigmoid stays in (0, 1)", |s| {
        let mut x = s.random(&[20, 7]);
        x.data_mut()[0] = 800.0;
        x.data_mut()[1] = -800.0;
        let sm = softmax_rows(&x);
        let worst = sm.data().chunks(7).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        let ext = Tensor::new([4], vec![-1000.0, -40.0, 40.0, 1000.0])?;
        let sg = sigmoid(&ext);
        let inside = sg.data().iter().all(|&v| v > 0.0 && v < 1.0);
        ok(worst <= 1e-9 && inside, format!("row-sum err {worst:.3e}, sigmoid open interval: {inside}"), "≤ 1e-9 and true")
    });
}

fn graph_builder(s: &mut Suite) {
    const M: &str = "graph-builder";
    s.check(M, "threshold_by_density is monotone in density", |s| {
        let obs = s.random(&[30, 7]);
        let corr = correlation_matrix(&obs)?;
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let graphs = grid.iter().map(|&r| threshold_by_density(&corr, r)).collect::<Result<Vec<_>>>()?;
        let nested = graphs
            .windows(2)
            .all(|w| w[0].edges().iter().all(|e| w[1].has_edge(e.i, e.j)));
        ok(nested, format!("nested over {} densities: {nested}", grid.len()), "true")
    });

    s.check(M, "normalize(A = 0) is the identity exactly", |_| {
        let worst = (1..=8)
            .all(|n| normalized_adjacency(&Tensor::zeros([n, n])).bit_eq(&Tensor::eye(n)));
        ok(worst, format!("bit-equal to I for N = 1..8: {worst}"), "true")
    });

    s.check(M, "K2 and path-3 normalized adjacency match hand values", |_| {
        let k2 = normalized_adjacency(&Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])?);
        let e1 = k2.max_abs_diff(&Tensor::full([2, 2], 0.5));
        let p3 = normalized_adjacency(&Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]])?);
        let r6 = 1.0 / 6f64.sqrt();
        let hand = Tensor::from_rows(&[&[0.5, r6, 0.0], &[r6, 1.0 / 3.0, r6], &[0.0, r6, 0.5]])?;
        let e2 = p3.max_abs_diff(&hand);
        ok(e1 <= 1e-12 && e2 <= 1e-12, format!("K2 err {e1:.3e}, path-3 err {e2:.3e}"), "≤ 1e-12")
    });

    s.check(M, "normalized adjacency is symmetric with spectral radius ≤ 1", |s| {
        let mut worst_sym: f64 = 0.0;
        let mut worst_rad: f64 = 0.0;
        for _ in 0..100 {
            let n = 1 + (s.rng.uniform(0.0, 8.0) as usize).min(7);
            let p = s.rng.uniform(0.0, 1.0);
            let g = random_graph(&mut s.rng, n, p)?;
            let a = g.normalized()?;
            worst_sym = worst_sym.max(a.max_abs_diff(&a.transpose2()?));
            worst_rad = worst_rad.max(spectral_radius(a));
        }
        ok(
            worst_sym == 0.0 && worst_rad <= 1.0 + 1e-9,
            format!("asymmetry {worst_sym:.3e}, max radius {worst_rad:.12}"),
            "0 and ≤ 1 + 1e-9 over 100 graphs",
        )
    });

    s.check(M, "relabeling nodes permutes the normalized adjacency", |s| {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let g = random_graph(&mut s.rng, 6, 0.5)?;
            let perm = permutation(&mut s.rng, 6);
            let moved = g.relabel(&perm)?.normalize();
            let a = g.normalized()?;
            let b = moved.normalized()?;
            for i in 0..6 {
                for j in 0..6 {
                    worst = worst.max((a.get(&[i, j]) - b.get(&[perm[i], perm[j]])).abs());
                }
            }
        }
        ok(worst <= 1e-15, format!("max diff {worst:.3e}"), "≤ 1e-15")
    });

    s.check(M, "edge list round-trips", |s| {
        let g = random_graph(&mut s.rng, 7, 0.4)?;
        let back = SymptomGraph::from_edgelist(&g.to_edgelist())?;
        ok(back.edges() == g.edges(), format!("{} edges preserved: {}", g.edges().len(), back.edges() == g.edges()), "true")
    });
}

fn gcn_setup(s: &mut Suite, d_in: usize, n: usize) -> Result<(GcnConfig, ParamStore, SymptomGraph)> {
    let cfg = GcnConfig::new(vec![d_in, 5, 4], Activation::Tanh)?;
    let mut p = ParamStore::new();
    cfg.init_params(&mut s.rng, &mut p)?;
    let g = random_graph(&mut s.rng, n, 0.5)?;
    Ok((cfg, p, g))
}

fn encode(cfg: &GcnConfig, p: &ParamStore, g: &SymptomGraph, x: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let h = encode_structural(&mut t, xv, g, cfg, p)?;
    Ok(t.value(h).clone())
}

fn gcn_encoder(s: &mut Suite) {
    const M: &str = "gcn-encoder";
    s.check(M, "output at step t depends only on x_t", |s| {
        let (cfg, p, g) = gcn_setup(s, 2, 5)?;
        let x = s.random(&[4, 5, 2]);
        let base = encode(&cfg, &p, &g, &x)?;
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[2 * 10..] {
            *v += 1.0;
        }
        let moved = encode(&cfg, &p, &g, &x2)?;
        let same = base.data()[..2 * 20] == moved.data()[..2 * 20];
        let changed = base.data()[2 * 20..] != moved.data()[2 * 20..];
        ok(same && changed, format!("earlier steps unchanged: {same}, later changed: {changed}"), "true, true")
    });

    s.check(M, "empty graph reduces to a per-node MLP", |s| {
        let cfg = GcnConfig::new(vec![3, 4, 2], Activation::Relu)?;
        let mut p = ParamStore::new();
        cfg.init_params(&mut s.rng, &mut p)?;
        let x = s.random(&[2, 5, 3]);
        let got = encode(&cfg, &p, &SymptomGraph::empty(5)?.normalize(), &x)?;
        let mut h = x.clone().reshape([10, 3])?;
        for l in 0..cfg.n_layers() {
            h = matmul(&h, &p.get(&GcnConfig::weight_name(l)).expect("weight").value)?;
            if cfg.bias {
                let b = &p.get(&GcnConfig::bias_name(l)).expect("bias").value;
                let d = b.len();
                for row in h.data_mut().chunks_mut(d) {
                    row.iter_mut().zip(b.data()).for_each(|(x, b)| *x += b);
                }
            }
            h = h.map(|v| v.max(0.0));
        }
        let diff = got.reshape([10, 2])?.max_abs_diff(&h);
        ok(diff == 0.0, format!("max diff {diff:.3e}"), "0 (exact)")
    });

    s.check(M, "relabeling nodes in x and graph permutes the output", |s| {
        let (cfg, p, g) = gcn_setup(s, 2, 6)?;
        let x = s.random(&[3, 6, 2]);
        let perm = permutation(&mut s.rng, 6);
        let base = encode(&cfg, &p, &g, &x)?;
        let moved = encode(&cfg, &p, &g.relabel(&perm)?.normalize(), &relabel_nodes(&x, &perm))?;
        let diff = relabel_nodes(&base, &perm).max_abs_diff(&moved);
        ok(diff <= 1e-12, format!("max diff {diff:.3e}"), "≤ 1e-12")
    });

    let cfg = GcnConfig::new(vec![2, 3, 4], Activation::Tanh).expect("valid");
    let mut p = ParamStore::new();
    cfg.init_params(&mut s.rng, &mut p).expect("init");
    let x = s.random(&[3, 4, 2]);
    let g = random_graph(&mut s.rng, 4, 0.6).expect("graph");
    let r = s.random(&[48]);
    s.grad(M, "two-layer encoder gradients match finite differences", &p, 1e-6, |ps, t| {
        let xv = t.leaf(x.clone());
        let h = encode_structural(t, xv, &g, &cfg, ps)?;
        probe(t, h, &r)
    });
}

fn temporal_setup(s: &mut Suite, d: usize, heads: usize) -> Result<(TemporalConfig, ParamStore)> {
    let cfg = TemporalConfig { d_model: d, n_heads: heads, n_blocks: 1, ffn_mult: 2, ..Default::default() };
    let mut p = ParamStore::new();
    cfg.init_params(&mut s.rng, &mut p)?;
    Ok((cfg, p))
}

fn run_temporal(cfg: &TemporalConfig, p: &ParamStore, pe: &PositionalTable, h: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.leaf(h.clone());
    let out = encode_temporal(&mut t, v, cfg, pe, p)?;
    Ok(t.value(out).clone())
}

fn temporal_encoder(s: &mut Suite) {
    const M: &str = "temporal-encoder";
    s.check(M, "attention weight rows form a probability simplex", |s| {
        let mut worst: f64 = 0.0;
        let mut negative = false;
        for _ in 0..50 {
            let (q, k, v) = (s.random(&[2, 5, 3]), s.random(&[2, 5, 3]), s.random(&[2, 5, 3]));
            let mut t = Tape::new();
            let (q, k, v) = (t.leaf(q), t.leaf(k), t.leaf(v));
            let w = attention(&mut t, q, k, v, false)?.weights;
            for row in t.value(w).data().chunks(5) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                negative |= row.iter().any(|&x| x < 0.0);
            }
        }
        ok(worst <= 1e-9 && !negative, format!("row-sum err {worst:.3e}, negative entries: {negative}"), "≤ 1e-9, none")
    });

    s.check(M, "time permutation: equivariant without positions, broken with them", |s| {
        let (cfg, p) = temporal_setup(s, 4, 2)?;
        let (zero, sinus) = (PositionalTable::zeros(8, 4), PositionalTable::new(8, 4)?);
        let (mut worst_eq, mut min_broken) = (0.0f64, f64::INFINITY);
        for _ in 0..50 {
            let h = s.random(&[5, 3, 4]);
            let perm = permutation(&mut s.rng, 5);
            if perm.iter().enumerate().all(|(i, &j)| i == j) {
                continue;
            }
            let hp = permute_axis0(&h, &perm);
            let a = permute_axis0(&run_temporal(&cfg, &p, &zero, &h)?, &perm);
            worst_eq = worst_eq.max(a.max_abs_diff(&run_temporal(&cfg, &p, &zero, &hp)?));
            let b = permute_axis0(&run_temporal(&cfg, &p, &sinus, &h)?, &perm);
            min_broken = min_broken.min(b.max_abs_diff(&run_temporal(&cfg, &p, &sinus, &hp)?));
        }
        ok(
            worst_eq <= 1e-10 && min_broken > 1e-6,
            format!("no-PE diff {worst_eq:.3e}, with-PE min diff {min_broken:.3e}"),
            "≤ 1e-10 and > 1e-6",
        )
    });

    s.check(M, "each node's output depends only on its own sequence", |s| {
        let (cfg, p) = temporal_setup(s, 4, 2)?;
        let pe = PositionalTable::new(8, 4)?;
        let h = s.random(&[4, 3, 4]);
        let base = run_temporal(&cfg, &p, &pe, &h)?;
        let mut h2 = h.clone();
        for t in 0..4 {
            for k in 0..4 {
                h2.set(&[t, 1, k], h.get(&[t, 1, k]) + 2.0);
            }
        }
        let moved = run_temporal(&cfg, &p, &pe, &h2)?;
        let mut others = 0.0f64;
        let mut own = 0.0f64;
        for t in 0..4 {
            for n in 0..3 {
                for k in 0..4 {
                    let d = (base.get(&[t, n, k]) - moved.get(&[t, n, k])).abs();
                    if n == 1 { own = own.max(d) } else { others = others.max(d) }
                }
            }
        }
        ok(others == 0.0 && own > 0.0, format!("other nodes diff {others:.3e}, own diff {own:.3e}"), "0 and > 0")
    });

    s.check(M, "positional table has the closed-form first rows", |_| {
        let pe = PositionalTable::new(4, 6)?;
        let mut worst: f64 = 0.0;
        for t in 0..4 {
            for i in 0..3 {
                let ang = t as f64 / 10000f64.powf(2.0 * i as f64 / 6.0);
                worst = worst.max((pe.table().get(&[t, 2 * i]) - ang.sin()).abs());
                worst = worst.max((pe.table().get(&[t, 2 * i + 1]) - ang.cos()).abs());
            }
        }
        ok(worst <= 1e-15, format!("max diff {worst:.3e}"), "≤ 1e-15")
    });

    let (cfg, p) = temporal_setup(s, 4, 2).expect("setup");
    let pe = PositionalTable::new(8, 4).expect("pe");
    let h = s.random(&[3, 2, 4]);
    let r = s.random(&[24]);
    s.grad(M, "block gradients match finite differences (T=3, d=4, 2 heads)", &p, 1e-4, |ps, t| {
        let v = t.leaf(h.clone());
        let out = encode_temporal(t, v, &cfg, &pe, ps)?;
        probe(t, out, &r)
    });
}

fn e2e_config(gate: GateConfig) -> ModelConfig {
    ModelConfig { d_in: 2, d_model: 4, gcn_layers: 2, n_heads: 2, n_blocks: 1, ffn_mult: 2, t_max: 8, gate, ..Default::default() }
}

fn fusion_model(s: &mut Suite) {
    const M: &str = "fusion-model";
    s.check(M, "learned-gate output lies between the two branches", |s| {
        let mut outside = 0usize;
        for _ in 0..100 {
            let mut p = ParamStore::new();
            p.insert(GATE_WEIGHT, s.random(&[6, 3]))?;
            p.insert(GATE_BIAS, s.random(&[3]))?;
            let mut t = Tape::new();
            let (g, h) = (t.leaf(s.random(&[2, 4, 3])), t.leaf(s.random(&[2, 4, 3])));
            let (z, _) = fuse(&mut t, g, h, &GateConfig::default(), &p)?;
            let (gv, hv, zv) = (t.value(g).data(), t.value(h).data(), t.value(z).data());
            outside += (0..zv.len()).filter(|&i| zv[i] < gv[i].min(hv[i]) || zv[i] > gv[i].max(hv[i])).count();
        }
        ok(outside == 0, format!("{outside} entries outside"), "0 over 100 instances")
    });

    s.check(M, "fixed γ ∈ {0, 1} reproduces one branch bit-exactly", |s| {
        let mut exact = true;
        for _ in 0..20 {
            let mut t = Tape::new();
            let (g, h) = (t.leaf(s.random(&[3, 4, 2])), t.leaf(s.random(&[3, 4, 2])));
            let (z1, _) = fuse(&mut t, g, h, &GateConfig::fixed(1.0), &ParamStore::new())?;
            let (z0, _) = fuse(&mut t, g, h, &GateConfig::fixed(0.0), &ParamStore::new())?;
            exact &= t.value(z1).bit_eq(t.value(g)) && t.value(z0).bit_eq(t.value(h));
        }
        ok(exact, format!("bit-exact: {exact}"), "true")
    });

    s.check(M, "zero-initialized gate gives γ ≡ 0.5", |s| {
        let mut p = ParamStore::new();
        p.insert(GATE_WEIGHT, Tensor::zeros([8, 4]))?;
        p.insert(GATE_BIAS, Tensor::zeros([4]))?;
        let mut t = Tape::new();
        let (g, h) = (t.leaf(s.random(&[3, 5, 4])), t.leaf(s.random(&[3, 5, 4])));
        let (_, gamma) = fuse(&mut t, g, h, &GateConfig::default(), &p)?;
        let all = t.value(gamma).data().iter().all(|&v| v == 0.5);
        ok(all, format!("all entries exactly 0.5: {all}"), "true")
    });

    s.check(M, "loss is non-negative and zero iff the fit is exact", |s| {
        let y = s.random(&[9]).into_data();
        let z = mse_loss(&y, &y)?;
        let mut off = y.clone();
        off[4] += 1e-3;
        let pos = mse_loss(&off, &y)?;
        let other = s.random(&[9]).into_data();
        let nonneg = mse_loss(&other, &y)? >= 0.0;
        ok(z == 0.0 && pos > 0.0 && nonneg, format!("exact {z}, perturbed {pos:.3e}"), "0 and > 0")
    });

    for (label, gate) in [("learned", GateConfig::default()), ("fixed γ=0.3", GateConfig::fixed(0.3))] {
        let cfg = e2e_config(gate);
        let model = Model::init(cfg.clone(), &mut s.rng).expect("init");
        let x = s.random(&[3, 4, 2]);
        let y = s.random(&[3]);
        let g = random_graph(&mut s.rng, 4, 0.6).expect("graph");
        let pe = model.positional().clone();
        let inv = format!("end-to-end gradients match finite differences ({label} gate)");
        s.grad(M, &inv, &model.params, 1e-4, |ps, t| {
            let v = forward_on_tape(t, &cfg, &pe, ps, &x, &g)?;
            t.mse(v.y, &y)
        });
    }

    s.check(M, "checkpoint round-trip is bit-exact", |s| {
        let model = Model::init(e2e_config(GateConfig::default()), &mut s.rng)?;
        let (back, _) = Model::from_checkpoint_str(&model.checkpoint_string(None)?)?;
        let same = model.params.iter().zip(back.params.iter()).all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
            && back.config == model.config
            && back.target == model.target;
        ok(same, format!("identical: {same}"), "true")
    });
}

fn random_labels(rng: &mut Rng, n: usize) -> Vec<u8> {
    let mut l: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5) as u8).collect();
    l[0] = 1;
    l[1] = 0;
    l
}

fn random_scores(rng: &mut Rng, n: usize) -> Vec<f64> {
    // coarse values so ties occur
    (0..n).map(|_| (rng.uniform(0.0, 10.0) as i64) as f64 / 2.0).collect()
}

fn evalkit(s: &mut Suite) {
    const M: &str = "evalkit";
    s.check(M, "AUC equals the pairwise oracle exactly", |s| {
        let mut mismatches = 0;
        for _ in 0..200 {
            let n = 2 + (s.rng.uniform(0.0, 49.0) as usize);
            let (sc, lb) = (random_scores(&mut s.rng, n), random_labels(&mut s.rng, n));
            if metrics::auc(&sc, &lb)? != oracle::auc_pairwise(&sc, &lb) {
                mismatches += 1;
            }
        }
        ok(mismatches == 0, format!("{mismatches} mismatches"), "0 over 200 instances")
    });

    s.check(M, "IPW-F1 matches the weighted-confusion oracle", |s| {
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let n = 2 + (s.rng.uniform(0.0, 49.0) as usize);
            let truth = random_labels(&mut s.rng, n);
            let pred: Vec<u8> = (0..n).map(|_| s.rng.bernoulli(0.5) as u8).collect();
            worst = worst.max((metrics::ipw_f1(&pred, &truth)? - oracle::ipw_f1_confusion(&pred, &truth)).abs());
        }
        ok(worst <= 1e-12, format!("max diff {worst:.3e}"), "≤ 1e-12 over 200 instances")
    });

    s.check(M, "hand cases: AUC 0.75 and IPW-F1 57.14", |_| {
        let a = metrics::auc(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0])?;
        let f = metrics::ipw_f1(&[1, 0, 1, 0, 0, 0], &[1, 1, 0, 0, 0, 0])?;
        ok(a == 0.75 && (f - 400.0 / 7.0).abs() < 1e-12, format!("auc {a}, ipw_f1 {f:.4}"), "0.75, 57.1429")
    });

    s.check(M, "AUC is invariant under strictly increasing transforms", |s| {
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let n = 4 + (s.rng.uniform(0.0, 40.0) as usize);
            let (sc, lb) = (random_scores(&mut s.rng, n), random_labels(&mut s.rng, n));
            let tr: Vec<f64> = sc.iter().map(|v| (0.3 * v).exp() * 5.0 - 2.0).collect();
            worst = worst.max((metrics::auc(&sc, &lb)? - metrics::auc(&tr, &lb)?).abs());
        }
        ok(worst == 0.0, format!("max diff {worst:.3e}"), "0")
    });

    s.check(M, "AUC(s) + AUC(−s) = 1 without ties", |s| {
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let n = 4 + (s.rng.uniform(0.0, 40.0) as usize);
            let sc: Vec<f64> = (0..n).map(|_| s.rng.normal(0.0, 1.0)).collect();
            let lb = random_labels(&mut s.rng, n);
            let neg: Vec<f64> = sc.iter().map(|v| -v).collect();
            worst = worst.max((metrics::auc(&sc, &lb)? + metrics::auc(&neg, &lb)? - 1.0).abs());
        }
        ok(worst <= 1e-12, format!("max deviation {worst:.3e}"), "≤ 1e-12")
    });

    s.check(M, "IPW-F1 is invariant to duplicating the dataset", |s| {
        let mut worst: f64 = 0.0;
        for k in 2..6 {
            let n = 10 + k;
            let truth = random_labels(&mut s.rng, n);
            let pred: Vec<u8> = (0..n).map(|_| s.rng.bernoulli(0.5) as u8).collect();
            let (pt, tt) = (pred.repeat(k), truth.repeat(k));
            worst = worst.max((metrics::ipw_f1(&pred, &truth)? - metrics::ipw_f1(&pt, &tt)?).abs());
        }
        ok(worst <= 1e-12, format!("max diff {worst:.3e}"), "≤ 1e-12")
    });

    s.check(M, "rmse is symmetric and scales with its arguments", |s| {
        let (a, b) = (s.random(&[20]).into_data(), s.random(&[20]).into_data());
        let sym = (metrics::rmse(&a, &b)? - metrics::rmse(&b, &a)?).abs();
        let (a3, b3): (Vec<f64>, Vec<f64>) = (a.iter().map(|v| -3.0 * v).collect(), b.iter().map(|v| -3.0 * v).collect());
        let hom = (metrics::rmse(&a3, &b3)? - 3.0 * metrics::rmse(&a, &b)?).abs();
        let hand = metrics::rmse(&[0.0, 0.0], &[3.0, 4.0])?;
        ok(
            sym == 0.0 && hom <= 1e-12 && (hand - 12.5f64.sqrt()).abs() < 1e-15,
            format!("asymmetry {sym:.3e}, scaling err {hom:.3e}, hand {hand:.6}"),
            "0, ≤ 1e-12, 3.535534",
        )
    });
}

fn small_synth() -> SynthConfig {
    SynthConfig { n_patients: 40, t: 5, n_nodes: 6, n_communities: 2, missing_rate: 0.05, ..Default::default() }
}

fn cohort_io(s: &mut Suite) {
    const M: &str = "cohort-io";
    s.check(M, "generation and splitting are functions of the seed", |_| {
        let a = generate(&small_synth())?.to_csv_string();
        let b = generate(&small_synth())?.to_csv_string();
        let other = generate(&SynthConfig { seed: 8, ..small_synth() })?.to_csv_string();
        let splits = split_indices(40, 3) == split_indices(40, 3) && split_indices(40, 3) != split_indices(40, 4);
        let pass = a == b && a != other && splits;
        ok(pass, format!("same seed equal: {}, new seed differs: {}, splits repeat: {splits}", a == b, a != other), "true")
    });

    s.check(M, "splits partition the patients", |_| {
        let c = preprocess(generate(&small_synth())?, 5)?;
        let sp = c.splits.as_ref().expect("split");
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort();
        let pass = all == (0..c.patients.len()).collect::<Vec<_>>();
        ok(pass, format!("partition: {pass}"), "true")
    });

    s.check(M, "scaler, graph and stage threshold come from the training split alone", |_| {
        let raw = generate(&small_synth())?;
        let c = preprocess(raw.clone(), 5)?;
        let train = c.split(Split::Train)?.to_vec();
        let thr = metrics::median(&c.targets(&train))?;
        // scramble val/test raw data; train-derived quantities must not move
        let mut noisy = raw;
        for &i in c.split(Split::Val)?.iter().chain(c.split(Split::Test)?) {
            noisy.patients[i].features.data_mut().iter_mut().for_each(|v| *v = *v * 7.0 + 3.0);
            noisy.patients[i].y.data_mut().iter_mut().for_each(|v| *v += 500.0);
        }
        let c2 = preprocess(noisy, 5)?;
        let g1 = crate::train::build_graph(&c, 0.4)?;
        let g2 = crate::train::build_graph(&c2, 0.4)?;
        let pass = c.scaler == c2.scaler && c.stage_threshold == thr && c2.stage_threshold == thr && g1.edges() == g2.edges();
        ok(pass, format!("scaler equal: {}, threshold {} vs train median {thr}, graph equal: {}", c.scaler == c2.scaler, c2.stage_threshold, g1.edges() == g2.edges()), "all unchanged")
    });

    s.check(M, "preprocessed cohorts have no missing values and uniform T", |_| {
        let c = preprocess(generate(&small_synth())?, 2)?;
        let t = c.t_len();
        let pass = !c.has_missing() && c.patients.iter().all(|p| p.t_len() == t);
        ok(pass, format!("missing: {}, uniform T: {}", c.has_missing(), c.patients.iter().all(|p| p.t_len() == t)), "false, true")
    });

    s.check(M, "CSV write then load reproduces the cohort", |_| {
        let c = generate(&SynthConfig { missing_rate: 0.0, ..small_synth() })?;
        let back = parse_csv(&c.to_csv_string(), c.d_in)?;
        ok(back.patients == c.patients, format!("equal: {}", back.patients == c.patients), "true")
    });

    s.check(M, "train-split features are z-scored", |_| {
        let c = preprocess(generate(&small_synth())?, 2)?;
        let nf = c.n_features();
        let train = c.split(Split::Train)?;
        let (mut wm, mut wv) = (0.0f64, 0.0f64);
        for k in 0..nf {
            let vals: Vec<f64> = train.iter().flat_map(|&i| c.patients[i].features.data().chunks(nf).map(move |r| r[k])).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            wm = wm.max(m.abs());
            wv = wv.max((v - 1.0).abs());
        }
        ok(wm <= 1e-9 && wv <= 1e-6, format!("max |mean| {wm:.3e}, max |var − 1| {wv:.3e}"), "≤ 1e-9, ≤ 1e-6")
    });
}

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.synth = SynthConfig { n_patients: 24, t: 4, n_nodes: 4, n_communities: 2, ..Default::default() };
    run.model = ModelConfig { d_model: 4, n_heads: 2, n_blocks: 1, t_max: 8, ..Default::default() };
    run.train.epochs = 2;
    run.sweep.seeds = 1;
    run.sweep.model = run.model.clone();
    run.sweep.train.epochs = 1;
    run.sweep.gammas = vec![1.0, 0.0, 0.5];
    run.sweep.densities = vec![0.5, 0.0];
    run
}

fn cli_harness(s: &mut Suite) {
    const M: &str = "cli-harness";
    s.check(M, "equal configs give byte-identical artifacts that embed the config", |_| {
        let run = tiny_run();
        let (a, b) = (run_train(&run)?, run_train(&run)?);
        let ma = metrics_json(&run, &a.outcome.metrics, Some(&a.outcome.loss_curve));
        let mb = metrics_json(&run, &b.outcome.metrics, Some(&b.outcome.loss_curve));
        let ca = a.outcome.model.checkpoint_string(Some(&run.to_json()))?;
        let cb = b.outcome.model.checkpoint_string(Some(&run.to_json()))?;
        let embeds = ma.contains("\"config\"") && ma.contains("\"seed\"") && ca.contains(&run.to_json());
        ok(ma == mb && ca == cb && embeds, format!("metrics equal: {}, checkpoint equal: {}, config embedded: {embeds}", ma == mb, ca == cb), "true")
    });

    s.check(M, "sweep CSVs are sorted with one row per grid point", |_| {
        let run = tiny_run();
        let raw = generate(&run.synth)?;
        let mut pass = true;
        let mut seen = Vec::new();
        for (kind, n) in [(SweepKind::Gate, 3), (SweepKind::Density, 2)] {
            let rows = run_sweep(&raw, &run, kind)?;
            let csv = sweep_csv(&run, kind, &rows);
            let values: Vec<f64> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap_or("").parse().unwrap_or(f64::NAN)).collect();
            pass &= values.len() == n && values.windows(2).all(|w| w[0] < w[1]);
            seen.push(format!("{}: {:?}", kind.column(), values));
        }
        ok(pass, seen.join("; "), "ascending, one row per point")
    });
}
