//! Central finite-difference verification of tape gradients.

use crate::autodiff::{FaultKind, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose perturbed loss was not finite.
    pub non_finite: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.max_rel_error < self.tol && p.non_finite.is_empty())
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < self.tol) || !p.non_finite.is_empty())
    }
}

/// Magnitude below which gradients are compared on an absolute scale.
/// Central differences at step 1e-5 carry round-off near 1e-10 for losses
/// of order one, so entries whose true gradient is exactly zero would
/// otherwise read as total disagreement.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of the scalar built by `forward` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar entry of every parameter.
pub fn grad_check<F>(forward: F, params: &ParamStore, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    grad_check_with_fault(forward, params, step, tol, None)
}

pub fn grad_check_with_fault<F>(
    forward: F,
    params: &ParamStore,
    step: f64,
    tol: f64,
    fault: Option<FaultKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.corrupt_rule(kind);
    }
    let loss = forward(params, &mut tape)?;
    let analytic = tape.backward(loss)?.into_gradients(params.len());

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(store, &mut t)?;
        Ok(t.value(l).data()[0])
    };

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let name = params.by_index(idx).name.clone();
        let n = params.by_index(idx).value.len();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            non_finite: Vec::new(),
        };
        for i in 0..n {
            let orig = params.by_index(idx).value.data()[i];
            work.value_mut(&name).expect("present").data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.value_mut(&name).expect("present").data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.value_mut(&name).expect("present").data_mut()[i] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                check.non_finite.push(i);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(idx).map_or(0.0, |g| g[i]);
            let err = rel_error(a, numeric);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_is_exact() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        store.insert("w", random(&mut rng, &[3, 2])).unwrap();
        let x = random(&mut rng, &[4, 3]);
        let report = grad_check(
            |s, t| {
                let w = t.param(s, "w")?;
                let xv = t.leaf(x.clone());
                let y = t.matmul(xv, w)?;
                Ok(t.sum(y))
            },
            &store,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sigmoid_chain() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        store.insert("w", random(&mut rng, &[3, 3])).unwrap();
        store.insert("b", random(&mut rng, &[3])).unwrap();
        let x = random(&mut rng, &[5, 3]);
        let report = grad_check(
            |s, t| {
                let w = t.param(s, "w")?;
                let b = t.param(s, "b")?;
                let xv = t.leaf(x.clone());
                let h = t.matmul(xv, w)?;
                let h = t.add_row(h, b)?;
                let h = t.sigmoid(h);
                let h2 = t.matmul(h, w)?;
                let h2 = t.sigmoid(h2);
                Ok(t.sum(h2))
            },
            &store,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_rule_is_caught_and_named() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.insert("inner", random(&mut rng, &[2, 2])).unwrap();
        let x = random(&mut rng, &[3, 2]);
        let f = |s: &ParamStore, t: &mut Tape| {
            let w = t.param(s, "inner")?;
            let xv = t.leaf(x.clone());
            let h = t.matmul(xv, w)?;
            let h = t.sigmoid(h);
            Ok(t.sum(h))
        };
        let clean = grad_check_with_fault(f, &store, 1e-5, 1e-6, None).unwrap();
        assert!(clean.passed());
        let bad = grad_check_with_fault(f, &store, 1e-5, 1e-6, Some(FaultKind::Sigmoid)).unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.failures().next().unwrap().name, "inner");
    }
}
