//! Stacked graph convolution `H ← σ(Â H W)` applied to every time slice
//! with one shared weight stack.

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::SymptomGraph;
use crate::params::{xavier_init, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnConfig {
    /// `[d_in, d_1, …, d_h]`; one layer per consecutive pair.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

impl GcnConfig {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let cfg = Self {
            layer_dims,
            activation,
            bias: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "gcn layer dims must have at least two positive entries, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn d_in(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn d_out(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn weight_name(l: usize) -> String {
        format!("gcn.layer{l}.weight")
    }

    pub fn bias_name(l: usize) -> String {
        format!("gcn.layer{l}.bias")
    }

    pub fn init_params(&self, rng: &mut Rng, store: &mut ParamStore) -> Result<()> {
        for l in 0..self.n_layers() {
            let shape = [self.layer_dims[l], self.layer_dims[l + 1]];
            store.insert(Self::weight_name(l), xavier_init(rng, shape))?;
            if self.bias {
                store.insert(Self::bias_name(l), Tensor::zeros([shape[1]]))?;
            }
        }
        Ok(())
    }
}

/// One layer `σ(Â · h · w + b)` on `h: [..., N, d_l]`.
pub fn gcn_layer(
    tape: &mut Tape,
    h: Var,
    graph: &SymptomGraph,
    w: Var,
    bias: Option<Var>,
    activation: Activation,
) -> Result<Var> {
    let adj = graph.normalized()?.clone();
    let sh = tape.shape(h).to_vec();
    let ws = tape.shape(w).to_vec();
    let r = sh.len();
    if r < 2 || ws.len() != 2 || sh[r - 1] != ws[0] || sh[r - 2] != graph.n_nodes() {
        return Err(Error::shape("gcn_layer", &sh, &ws));
    }
    let mixed = tape.propagate(adj, h)?;
    let rows = tape.value(mixed).len() / ws[0];
    let flat = tape.reshape(mixed, &[rows, ws[0]])?;
    let mut out = tape.matmul(flat, w)?;
    if let Some(b) = bias {
        out = tape.add_row(out, b)?;
    }
    let mut out_shape = sh;
    out_shape[r - 1] = ws[1];
    let out = tape.reshape(out, &out_shape)?;
    Ok(tape.activate(out, activation))
}

/// Structural encoding of `x: [T × N × d_in]` → `[T × N × d_h]`. Every time
/// slice goes through the same layers independently.
pub fn encode_structural(
    tape: &mut Tape,
    x: Var,
    graph: &SymptomGraph,
    cfg: &GcnConfig,
    params: &ParamStore,
) -> Result<Var> {
    let sh = tape.shape(x);
    if sh.len() != 3 || sh[0] == 0 || sh[1] != graph.n_nodes() || sh[2] != cfg.d_in() {
        return Err(Error::shape("encode_structural", sh, &[graph.n_nodes(), cfg.d_in()]));
    }
    let mut h = x;
    for l in 0..cfg.n_layers() {
        let w = tape.param(params, &GcnConfig::weight_name(l))?;
        let b = if cfg.bias {
            Some(tape.param(params, &GcnConfig::bias_name(l))?)
        } else {
            None
        };
        h = gcn_layer(tape, h, graph, w, b, cfg.activation)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::graph::{threshold_by_density, Edge};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    fn path3() -> SymptomGraph {
        SymptomGraph::from_edges(
            3,
            vec![Edge { i: 0, j: 1, weight: 1.0 }, Edge { i: 1, j: 2, weight: 1.0 }],
        )
        .unwrap()
        .normalize()
    }

    #[test]
    fn empty_graph_identity_activation_is_plain_product() {
        let mut rng = Rng::new(1);
        let g = SymptomGraph::empty(4).unwrap().normalize();
        let h = random(&mut rng, &[4, 3]);
        let w = random(&mut rng, &[3, 2]);
        let mut t = Tape::new();
        let (hv, wv) = (t.leaf(h.clone()), t.leaf(w.clone()));
        let out = gcn_layer(&mut t, hv, &g, wv, None, Activation::Identity).unwrap();
        assert_eq!(*t.value(out), h.matmul(&w).unwrap());
    }

    #[test]
    fn identity_weight_gives_propagation() {
        let mut rng = Rng::new(2);
        let g = path3();
        let h = random(&mut rng, &[3, 3]);
        let mut t = Tape::new();
        let (hv, wv) = (t.leaf(h.clone()), t.leaf(Tensor::eye(3)));
        let out = gcn_layer(&mut t, hv, &g, wv, None, Activation::Identity).unwrap();
        let expected = g.normalized().unwrap().matmul(&h).unwrap();
        assert!(t.value(out).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn path_graph_identity_inputs_reproduce_operator() {
        let g = path3();
        let mut t = Tape::new();
        let (hv, wv) = (t.leaf(Tensor::eye(3)), t.leaf(Tensor::eye(3)));
        let out = gcn_layer(&mut t, hv, &g, wv, None, Activation::Identity).unwrap();
        let v = t.value(out);
        assert!((v.get(&[0, 0]) - 0.5).abs() < 1e-12);
        assert!((v.get(&[0, 1]) - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!((v.get(&[1, 1]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_graph_rejected() {
        let g = SymptomGraph::empty(2).unwrap();
        let mut t = Tape::new();
        let (hv, wv) = (t.leaf(Tensor::eye(2)), t.leaf(Tensor::eye(2)));
        assert!(matches!(
            gcn_layer(&mut t, hv, &g, wv, None, Activation::Relu),
            Err(Error::Contract(_))
        ));
    }

    fn setup(seed: u64, t_len: usize) -> (SymptomGraph, GcnConfig, ParamStore, Tensor) {
        let mut rng = Rng::new(seed);
        let n = 5;
        let corr = random(&mut rng, &[n, n]);
        let sym = {
            let mut s = Tensor::zeros([n, n]);
            for i in 0..n {
                for j in 0..n {
                    s.set(&[i, j], corr.get(&[i, j]) + corr.get(&[j, i]));
                }
            }
            s
        };
        let g = threshold_by_density(&sym, 0.4).unwrap().normalize();
        let cfg = GcnConfig::new(vec![3, 4, 4], Activation::Tanh).unwrap();
        let mut store = ParamStore::new();
        cfg.init_params(&mut rng, &mut store).unwrap();
        let x = random(&mut rng, &[t_len, n, 3]);
        (g, cfg, store, x)
    }

    #[test]
    fn single_step_equals_stacked_layers() {
        let (g, cfg, store, x) = setup(3, 1);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let enc = encode_structural(&mut t, xv, &g, &cfg, &store).unwrap();

        let mut t2 = Tape::new();
        let mut h = t2.leaf(x.index_axis0(0));
        for l in 0..2 {
            let w = t2.param(&store, &GcnConfig::weight_name(l)).unwrap();
            h = gcn_layer(&mut t2, h, &g, w, None, Activation::Tanh).unwrap();
        }
        assert_eq!(t.value(enc).index_axis0(0), *t2.value(h));
    }

    #[test]
    fn duplicated_slice_duplicates_output() {
        let (g, cfg, store, x) = setup(4, 2);
        let s0 = x.index_axis0(0);
        let dup = Tensor::stack(&[s0.clone(), s0]).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(dup);
        let enc = encode_structural(&mut t, xv, &g, &cfg, &store).unwrap();
        let v = t.value(enc);
        assert_eq!(v.index_axis0(0), v.index_axis0(1));
    }

    #[test]
    fn two_layer_gradient_matches_finite_differences() {
        let (g, cfg, store, x) = setup(5, 3);
        let target = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(
            |s, t| {
                let xv = t.leaf(x.clone());
                let h = encode_structural(t, xv, &g, &cfg, s)?;
                let pooled = t.mean_axis(h, 1)?;
                let y = t.mean_axis(pooled, 1)?;
                t.mse(y, &target)
            },
            &store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
