//! The end-to-end progression model: structural encoding, temporal encoding
//! of that structural encoding, the elementwise gate that mixes the two, a
//! node-pooled affine readout, and the squared-error objective.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::gcn::{encode_structural, GcnConfig};
use crate::graph::SymptomGraph;
use crate::params::{xavier_init, Gradients, ParamStore};
use crate::rng::Rng;
use crate::temporal::{encode_temporal, PositionalTable, TemporalConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Learned,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub mode: GateMode,
    /// Mixing weight on the structural branch in fixed mode.
    pub fixed_gamma: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            mode: GateMode::Learned,
            fixed_gamma: 0.5,
        }
    }
}

impl GateConfig {
    pub fn fixed(gamma: f64) -> Self {
        Self {
            mode: GateMode::Fixed,
            fixed_gamma: gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fixed_gamma) {
            return Err(Error::Config(format!(
                "fixed_gamma {} outside [0, 1]",
                self.fixed_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    /// Width of the structural encoding and of the temporal encoder.
    pub d_model: usize,
    pub gcn_layers: usize,
    pub gcn_activation: Activation,
    pub gcn_bias: bool,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_mult: usize,
    pub causal: bool,
    pub ln_eps: f64,
    pub t_max: usize,
    pub gate: GateConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 2,
            d_model: 32,
            gcn_layers: 2,
            gcn_activation: Activation::Relu,
            gcn_bias: false,
            n_heads: 4,
            n_blocks: 2,
            ffn_mult: 4,
            causal: false,
            ln_eps: 1e-9,
            t_max: 64,
            gate: GateConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn gcn(&self) -> GcnConfig {
        let mut dims = vec![self.d_in];
        dims.extend(std::iter::repeat_n(self.d_model, self.gcn_layers));
        GcnConfig {
            layer_dims: dims,
            activation: self.gcn_activation,
            bias: self.gcn_bias,
        }
    }

    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            ffn_mult: self.ffn_mult,
            causal: self.causal,
            ln_eps: self.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gcn().validate()?;
        self.temporal().validate()?;
        self.gate.validate()?;
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map between the raw target scale and the scale the network
/// regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetScaler {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn encode(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn decode(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Predicted score per time step, in target units.
    pub y_hat: Tensor,
    pub gate_trace: Tensor,
    pub fused: Tensor,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub h_gcn: Var,
    pub h_tform: Var,
    pub gamma: Var,
    pub fused: Var,
    /// Readout on the regression scale, `[T]`.
    pub y: Var,
}

pub const GATE_WEIGHT: &str = "gate.weight";
pub const GATE_BIAS: &str = "gate.bias";
pub const READOUT_WEIGHT: &str = "readout.weight";
pub const READOUT_BIAS: &str = "readout.bias";

/// Gated mixture `γ ⊙ h_gcn + (1 − γ) ⊙ h_tform`. In learned mode
/// `γ = sigmoid([h_gcn ; h_tform] · W_γ + b_γ)`; in fixed mode γ is the
/// configured constant. Returns `(z, γ)`.
pub fn fuse(
    tape: &mut Tape,
    h_gcn: Var,
    h_tform: Var,
    gate: &GateConfig,
    params: &ParamStore,
) -> Result<(Var, Var)> {
    let sh = tape.shape(h_gcn).to_vec();
    if sh != tape.shape(h_tform) {
        return Err(Error::shape("fuse", &sh, tape.shape(h_tform)));
    }
    match gate.mode {
        GateMode::Fixed => {
            gate.validate()?;
            let gamma = tape.leaf(Tensor::full(sh.clone(), gate.fixed_gamma));
            let z = tape.mix_const(h_gcn, h_tform, gate.fixed_gamma)?;
            Ok((z, gamma))
        }
        GateMode::Learned => {
            let d = *sh.last().ok_or_else(|| Error::shape("fuse", &sh, &sh))?;
            let rows = tape.value(h_gcn).len() / d.max(1);
            let w = tape.param(params, GATE_WEIGHT)?;
            let b = tape.param(params, GATE_BIAS)?;
            let cat = tape.concat_lastdim(h_gcn, h_tform)?;
            let cat = tape.reshape(cat, &[rows, 2 * d])?;
            let logits = tape.matmul(cat, w)?;
            let logits = tape.add_row(logits, b)?;
            let gamma = tape.sigmoid(logits);
            let gamma = tape.reshape(gamma, &sh)?;
            let z = tape.mix(h_gcn, h_tform, gamma)?;
            Ok((z, gamma))
        }
    }
}

/// Mean over nodes, then an affine map to one scalar per step:
/// `[T × N × d] → [T]`.
pub fn readout(tape: &mut Tape, z: Var, params: &ParamStore) -> Result<Var> {
    let sh = tape.shape(z).to_vec();
    if sh.len() != 3 {
        return Err(Error::shape("readout", &sh, &[3]));
    }
    let pooled = tape.mean_axis(z, 1)?;
    let w = tape.param(params, READOUT_WEIGHT)?;
    let b = tape.param(params, READOUT_BIAS)?;
    let y = tape.matmul(pooled, w)?;
    let y = tape.add_row(y, b)?;
    tape.reshape(y, &[sh[0]])
}

/// Full forward pass over `x: [T × N × d_in]` recorded on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pe: &PositionalTable,
    params: &ParamStore,
    x: &Tensor,
    graph: &SymptomGraph,
) -> Result<ForwardVars> {
    let xv = tape.leaf(x.clone());
    let h_gcn = encode_structural(tape, xv, graph, &cfg.gcn(), params)?;
    let h_tform = encode_temporal(tape, h_gcn, &cfg.temporal(), pe, params)?;
    let (fused, gamma) = fuse(tape, h_gcn, h_tform, &cfg.gate, params)?;
    let y = readout(tape, fused, params)?;
    Ok(ForwardVars { h_gcn, h_tform, gamma, fused, y })
}

/// Mean over steps of the squared error.
pub fn mse_loss(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::shape("mse_loss", &[y_hat.len()], &[y.len()]));
    }
    Ok(y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub target: TargetScaler,
    pe: PositionalTable,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        config.gcn().init_params(rng, &mut params)?;
        config.temporal().init_params(rng, &mut params)?;
        if config.gate.mode == GateMode::Learned {
            let d = config.d_model;
            params.insert(GATE_WEIGHT, xavier_init(rng, [2 * d, d]))?;
            params.insert(GATE_BIAS, Tensor::zeros([d]))?;
        }
        params.insert(READOUT_WEIGHT, xavier_init(rng, [config.d_model, 1]))?;
        params.insert(READOUT_BIAS, Tensor::zeros([1]))?;
        Self::from_parts(config, params, TargetScaler::default())
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore, target: TargetScaler) -> Result<Self> {
        config.validate()?;
        let pe = PositionalTable::new(config.t_max, config.d_model)?;
        Ok(Self { config, params, target, pe })
    }

    pub fn positional(&self) -> &PositionalTable {
        &self.pe
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Tensor, graph: &SymptomGraph) -> Result<ForwardVars> {
        forward_on_tape(tape, &self.config, &self.pe, &self.params, x, graph)
    }

    pub fn forward(&self, x: &Tensor, graph: &SymptomGraph) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, x, graph)?;
        let y_hat = tape.value(vars.y).map(|z| self.target.decode(z));
        Ok(ModelOutput {
            y_hat,
            gate_trace: tape.value(vars.gamma).clone(),
            fused: tape.value(vars.fused).clone(),
        })
    }

    /// Training objective on the regression scale for one series.
    pub fn loss_on_tape(&self, tape: &mut Tape, x: &Tensor, y: &Tensor, graph: &SymptomGraph) -> Result<Var> {
        let vars = self.forward_on_tape(tape, x, graph)?;
        let target = y.map(|v| self.target.encode(v));
        tape.mse(vars.y, &target)
    }

    /// Loss value and parameter gradients for one series.
    pub fn loss_and_gradients(&self, x: &Tensor, y: &Tensor, graph: &SymptomGraph) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, x, y, graph)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.into_gradients(self.params.len());
        Ok((value, grads))
    }

    /// Self-describing text checkpoint. Values are stored as IEEE-754 bit
    /// patterns so reloading is exact.
    pub fn checkpoint_string(&self, run_config: Option<&str>) -> Result<String> {
        let mut s = String::from("satm-checkpoint 1\n");
        let cfg = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let _ = writeln!(s, "model {cfg}");
        if let Some(rc) = run_config {
            let _ = writeln!(s, "run {}", rc.replace('\n', " "));
        }
        let _ = writeln!(s, "target {:016x} {:016x}", self.target.mean.to_bits(), self.target.std.to_bits());
        let _ = writeln!(s, "params {}", self.params.len());
        for p in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "param {} {}", p.name, dims.join(" "));
            let vals: Vec<String> = p.value.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path, run_config: Option<&str>) -> Result<()> {
        fs::write(path, self.checkpoint_string(run_config)?).map_err(|e| Error::io(path, e))
    }

    /// Parses a checkpoint; returns the model and the echoed run config, if any.
    pub fn from_checkpoint_str(text: &str) -> Result<(Self, Option<String>)> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse { line: 0, msg: format!("truncated checkpoint, expected {what}") })
        };
        let (ln, magic) = next("header")?;
        if magic != "satm-checkpoint 1" {
            return Err(Error::Parse { line: ln, msg: "not a checkpoint".into() });
        }
        let (ln, model_line) = next("model")?;
        let cfg_json = model_line
            .strip_prefix("model ")
            .ok_or(Error::Parse { line: ln, msg: "expected `model`".into() })?;
        let config: ModelConfig =
            serde_json::from_str(cfg_json).map_err(|e| Error::Parse { line: ln, msg: e.to_string() })?;
        let (mut ln, mut line) = next("target")?;
        let mut run = None;
        if let Some(rc) = line.strip_prefix("run ") {
            run = Some(rc.to_string());
            (ln, line) = next("target")?;
        }
        let bits = |tok: &str, ln: u64| -> Result<f64> {
            u64::from_str_radix(tok, 16)
                .map(f64::from_bits)
                .map_err(|e| Error::Parse { line: ln, msg: e.to_string() })
        };
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 3 || t[0] != "target" {
            return Err(Error::Parse { line: ln, msg: "expected `target mean std`".into() });
        }
        let target = TargetScaler { mean: bits(t[1], ln)?, std: bits(t[2], ln)? };
        let (ln, count_line) = next("params")?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|c| c.parse().ok())
            .ok_or(Error::Parse { line: ln, msg: "expected `params N`".into() })?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (ln, head) = next("param header")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() < 2 || parts[0] != "param" {
                return Err(Error::Parse { line: ln, msg: "expected `param NAME DIMS…`".into() });
            }
            let shape: Vec<usize> = parts[2..]
                .iter()
                .map(|d| d.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad extent `{d}`") }))
                .collect::<Result<_>>()?;
            let (vln, vals) = next("param values")?;
            let data: Vec<f64> = vals.split_whitespace().map(|tok| bits(tok, vln)).collect::<Result<_>>()?;
            let value = Tensor::new(shape, data).map_err(|e| Error::Parse { line: vln, msg: e.to_string() })?;
            params.insert(parts[1], value)?;
        }
        Ok((Self::from_parts(config, params, target)?, run))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}
