//! Sinusoidal positional table and the per-node self-attention encoder
//! that runs over time steps.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_init, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_mult: usize,
    /// Mask attention to past and present steps only.
    pub causal: bool,
    pub ln_eps: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_blocks: 2,
            ffn_mult: 4,
            causal: false,
            ln_eps: 1e-9,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("n_blocks and ffn_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_name(block: usize, part: &str, field: &str) -> String {
        format!("tform.block{block}.{part}.{field}")
    }

    pub fn init_params(&self, rng: &mut Rng, store: &mut ParamStore) -> Result<()> {
        let d = self.d_model;
        let hidden = self.ffn_mult * d;
        for b in 0..self.n_blocks {
            let name = |part: &str, field: &str| Self::param_name(b, part, field);
            store.insert(name("norm1", "gain"), Tensor::full([d], 1.0))?;
            store.insert(name("norm1", "bias"), Tensor::zeros([d]))?;
            store.insert(name("qkv", "weight"), xavier_init(rng, [d, 3 * d]))?;
            store.insert(name("qkv", "bias"), Tensor::zeros([3 * d]))?;
            store.insert(name("out", "weight"), xavier_init(rng, [d, d]))?;
            store.insert(name("out", "bias"), Tensor::zeros([d]))?;
            store.insert(name("norm2", "gain"), Tensor::full([d], 1.0))?;
            store.insert(name("norm2", "bias"), Tensor::zeros([d]))?;
            store.insert(name("ffn1", "weight"), xavier_init(rng, [d, hidden]))?;
            store.insert(name("ffn1", "bias"), Tensor::zeros([hidden]))?;
            store.insert(name("ffn2", "weight"), xavier_init(rng, [hidden, d]))?;
            store.insert(name("ffn2", "bias"), Tensor::zeros([d]))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    table: Tensor,
}

impl PositionalTable {
    /// `PE(t, 2i) = sin(t / 10000^{2i/d})`, `PE(t, 2i+1) = cos(…)` for
    /// zero-based `t`. An odd `d_model` is computed at `d_model + 1` and the
    /// extra column dropped.
    pub fn new(t_max: usize, d_model: usize) -> Result<Self> {
        if t_max == 0 || d_model == 0 {
            return Err(Error::Contract("positional table needs t_max, d_model >= 1".into()));
        }
        let d_even = d_model + d_model % 2;
        let mut table = Tensor::zeros([t_max, d_model]);
        for t in 0..t_max {
            for c in 0..d_model {
                let i2 = (c - c % 2) as f64;
                let angle = t as f64 / 10000f64.powf(i2 / d_even as f64);
                table.set(&[t, c], if c % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
        Ok(Self { table })
    }

    pub fn zeros(t_max: usize, d_model: usize) -> Self {
        Self {
            table: Tensor::zeros([t_max, d_model]),
        }
    }

    pub fn t_max(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// First `t` rows.
    pub fn rows(&self, t: usize) -> Result<Tensor> {
        if t > self.t_max() {
            return Err(Error::Contract(format!(
                "sequence length {t} exceeds positional table length {}",
                self.t_max()
            )));
        }
        let d = self.d_model();
        Tensor::new([t, d], self.table.data()[..t * d].to_vec())
    }
}

pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k) V` over the key axis. Accepts `[T × d_k]` or a
/// batch `[B × T × d_k]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<AttentionOutput> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq != sk || sk != sv || !(sq.len() == 2 || sq.len() == 3) {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let (q3, k3, v3) = if sq.len() == 2 {
        let s = [1, sq[0], sq[1]];
        (tape.reshape(q, &s)?, tape.reshape(k, &s)?, tape.reshape(v, &s)?)
    } else {
        (q, k, v)
    };
    let (t, dk) = (sq[sq.len() - 2], sq[sq.len() - 1]);
    let scores = tape.bmm(q3, k3, true)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if causal {
        let mut mask = Tensor::zeros([t, t]);
        for i in 0..t {
            for j in i + 1..t {
                mask.set(&[i, j], -1e30);
            }
        }
        scores = tape.add_const(scores, &mask)?;
    }
    let weights = tape.softmax(scores);
    let out = tape.bmm(weights, v3, false)?;
    let output = if sq.len() == 2 { tape.reshape(out, &sq)? } else { out };
    Ok(AttentionOutput { output, weights })
}

fn linear(tape: &mut Tape, x: Var, params: &ParamStore, block: usize, part: &str) -> Result<Var> {
    let w = tape.param(params, &TemporalConfig::param_name(block, part, "weight"))?;
    let b = tape.param(params, &TemporalConfig::param_name(block, part, "bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Temporal encoding of `h: [T × N × d_model]`, attending over time for
/// each node separately with weights shared across nodes. Blocks are
/// pre-normalized: `x += MHA(LN₁(x)); x += FFN(LN₂(x))`.
pub fn encode_temporal(
    tape: &mut Tape,
    h: Var,
    cfg: &TemporalConfig,
    pe: &PositionalTable,
    params: &ParamStore,
) -> Result<Var> {
    let sh = tape.shape(h).to_vec();
    if sh.len() != 3 || sh[2] != cfg.d_model || pe.d_model() != cfg.d_model {
        return Err(Error::shape("encode_temporal", &sh, &[cfg.d_model]));
    }
    let (t, n, d) = (sh[0], sh[1], sh[2]);
    let (heads, dk) = (cfg.n_heads, cfg.d_k());
    let rows = n * t;

    let x = tape.permute(h, &[1, 0, 2])?; // [N, T, d]
    let mut x = tape.add_const(x, &pe.rows(t)?)?;

    let split_heads = |tape: &mut Tape, m: Var| -> Result<Var> {
        let m = tape.reshape(m, &[n, t, heads, dk])?;
        let m = tape.permute(m, &[0, 2, 1, 3])?;
        tape.reshape(m, &[n * heads, t, dk])
    };

    for b in 0..cfg.n_blocks {
        let g1 = tape.param(params, &TemporalConfig::param_name(b, "norm1", "gain"))?;
        let b1 = tape.param(params, &TemporalConfig::param_name(b, "norm1", "bias"))?;
        let a = tape.layer_norm(x, g1, b1, cfg.ln_eps)?;
        let a = tape.reshape(a, &[rows, d])?;
        let qkv = linear(tape, a, params, b, "qkv")?;
        let q = tape.slice_last(qkv, 0, d)?;
        let k = tape.slice_last(qkv, d, d)?;
        let v = tape.slice_last(qkv, 2 * d, d)?;
        let (q, k, v) = (split_heads(tape, q)?, split_heads(tape, k)?, split_heads(tape, v)?);
        let att = attention(tape, q, k, v, cfg.causal)?.output; // [N·H, T, dk]
        let att = tape.reshape(att, &[n, heads, t, dk])?;
        let att = tape.permute(att, &[0, 2, 1, 3])?;
        let att = tape.reshape(att, &[rows, d])?;
        let o = linear(tape, att, params, b, "out")?;
        let o = tape.reshape(o, &[n, t, d])?;
        x = tape.add(x, o)?;

        let g2 = tape.param(params, &TemporalConfig::param_name(b, "norm2", "gain"))?;
        let b2 = tape.param(params, &TemporalConfig::param_name(b, "norm2", "bias"))?;
        let f = tape.layer_norm(x, g2, b2, cfg.ln_eps)?;
        let f = tape.reshape(f, &[rows, d])?;
        let f = linear(tape, f, params, b, "ffn1")?;
        let f = tape.gelu(f);
        let f = linear(tape, f, params, b, "ffn2")?;
        let f = tape.reshape(f, &[n, t, d])?;
        x = tape.add(x, f)?;
    }
    tape.permute(x, &[1, 0, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_first_row_and_first_column() {
        let pe = PositionalTable::new(10, 6).unwrap();
        for c in 0..6 {
            assert_eq!(pe.table().get(&[0, c]), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        for t in 0..10 {
            assert_eq!(pe.table().get(&[t, 0]), (t as f64).sin());
        }
        assert!(pe.table().data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn positional_hand_value() {
        let pe = PositionalTable::new(2, 4).unwrap();
        // 10000^{2/4} = 100
        assert!((pe.table().get(&[1, 2]) - 0.01f64.sin()).abs() < 1e-15);
        assert!((pe.table().get(&[1, 2]) - 0.0099998).abs() < 1e-7);
    }

    #[test]
    fn positional_odd_width() {
        let pe = PositionalTable::new(3, 5).unwrap();
        assert_eq!(pe.d_model(), 5);
        let even = PositionalTable::new(3, 6).unwrap();
        for t in 0..3 {
            for c in 0..5 {
                assert_eq!(pe.table().get(&[t, c]), even.table().get(&[t, c]));
            }
        }
    }

    #[test]
    fn attention_uniform_weights_give_column_mean() {
        let mut rng = Rng::new(1);
        let row = random(&mut rng, &[1, 3]);
        let q = Tensor::stack(&[row.clone(), row.clone(), row.clone(), row.clone()])
            .unwrap()
            .reshape([4, 3])
            .unwrap();
        let krow = random(&mut rng, &[1, 3]);
        let k = Tensor::stack(&vec![krow; 4]).unwrap().reshape([4, 3]).unwrap();
        let v = random(&mut rng, &[4, 3]);
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.leaf(q), t.leaf(k), t.leaf(v.clone()));
        let out = attention(&mut t, qv, kv, vv, false).unwrap().output;
        for c in 0..3 {
            let mean = (0..4).map(|r| v.get(&[r, c])).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((t.value(out).get(&[r, c]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_single_step_returns_values() {
        let mut rng = Rng::new(2);
        let mut t = Tape::new();
        let q = t.leaf(random(&mut rng, &[1, 4]));
        let k = t.leaf(random(&mut rng, &[1, 4]));
        let vt = random(&mut rng, &[1, 4]);
        let v = t.leaf(vt.clone());
        let out = attention(&mut t, q, k, v, false).unwrap().output;
        assert_eq!(*t.value(out), vt);
    }

    #[test]
    fn attention_near_one_hot() {
        let qk = Tensor::from_rows(&[&[10.0, 0.0], &[0.0, 10.0]]).unwrap();
        let v = Tensor::eye(2);
        let mut t = Tape::new();
        let (q, k, vv) = (t.leaf(qk.clone()), t.leaf(qk), t.leaf(v.clone()));
        let res = attention(&mut t, q, k, vv, false).unwrap();
        // logits 100/√2 ≈ 70.7 vs 0 ⇒ off-weight e^{-70.7} ≈ 2e-31
        let off = 1.0 / (1.0 + (100.0 / 2f64.sqrt()).exp());
        assert!(off < 1e-30);
        assert!(t.value(res.output).max_abs_diff(&v) < 1e-9);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let q = t.leaf(random(&mut rng, &[4, 2]));
        let k = t.leaf(random(&mut rng, &[4, 2]));
        let v = t.leaf(random(&mut rng, &[4, 2]));
        let w = attention(&mut t, q, k, v, true).unwrap().weights;
        let w = t.value(w).clone().reshape([4, 4]).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(w.get(&[i, j]), 0.0);
            }
        }
    }

    #[test]
    fn sequence_longer_than_table_rejected() {
        let cfg = TemporalConfig { d_model: 4, n_heads: 2, n_blocks: 1, ..Default::default() };
        let mut store = ParamStore::new();
        cfg.init_params(&mut Rng::new(0), &mut store).unwrap();
        let pe = PositionalTable::new(2, 4).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(Tensor::zeros([3, 2, 4]));
        assert!(matches!(
            encode_temporal(&mut t, h, &cfg, &pe, &store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let cfg = TemporalConfig { d_model: 4, n_heads: 2, n_blocks: 1, ffn_mult: 2, ..Default::default() };
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        cfg.init_params(&mut rng, &mut store).unwrap();
        // perturb norms so their gradients are non-trivial
        for name in ["tform.block0.norm1.bias", "tform.block0.norm2.gain"] {
            let v = store.value_mut(name).unwrap();
            for x in v.data_mut() {
                *x += rng.normal(0.0, 0.3);
            }
        }
        let pe = PositionalTable::new(3, 4).unwrap();
        let x = random(&mut rng, &[3, 2, 4]);
        let target = random(&mut rng, &[3 * 2 * 4]);
        let report = grad_check(
            |s, t| {
                let xv = t.leaf(x.clone());
                let h = encode_temporal(t, xv, &cfg, &pe, s)?;
                t.mse(h, &target)
            },
            &store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}
