//! Finite-difference verification of reverse-mode gradients.

use crate::error::{QrnError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F, M>(model: &M, store: &ParamStore<F>) -> Result<F>
where
    F: Scalar,
    M: Fn(&mut Tape<F>, &ParamStore<F>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = model(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(QrnError::Contract(format!(
            "gradient check needs a scalar loss, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `model` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of `params`.
///
/// `model` builds the loss on the tape it is given and must be a pure
/// function of the store. Gradients already in `store` are cleared.
pub fn check_gradients<F, M>(
    model: M,
    store: &mut ParamStore<F>,
    params: &[ParamId],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Scalar,
    M: Fn(&mut Tape<F>, &ParamStore<F>) -> Result<Var>,
{
    let first = evaluate(&model, store)?;
    let second = evaluate(&model, store)?;
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(QrnError::Determinism(format!(
            "loss evaluated to {first} then {second}"
        )));
    }

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = model(&mut tape, store)?;
    tape.backward(loss, store)?;

    let eps = F::from_f64(step);
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tolerance,
    };
    for &id in params {
        let n = store.get(id).numel();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + eps;
            let plus = evaluate(&model, store)?;
            store.get_mut(id).value.data_mut()[i] = original - eps;
            let minus = evaluate(&model, store)?;
            store.get_mut(id).value.data_mut()[i] = original;

            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * step);
            let analytic = store.get(id).gradient.data()[i].as_f64();
            let rel = relative_error(analytic, numeric);
            check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
            if rel > check.max_rel_error || i == 0 {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamKind, Parameter};
    use crate::tensor::Tensor;

    fn single(values: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add(Parameter::new("theta", ParamKind::Weight, Tensor::row(values)))
            .unwrap();
        (store, id)
    }

    #[test]
    fn quadratic_is_exact() {
        let (mut store, id) = single(vec![0.3, -1.2, 2.0]);
        let report = check_gradients(
            |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
                let w = tape.param(s, id);
                let sq = tape.mul(w, w)?;
                let c = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
                let weighted = tape.mul(sq, c)?;
                Ok(tape.sum(weighted))
            },
            &mut store,
            &[id],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sigmoid_chain() {
        let (mut store, id) = single(vec![0.7, -0.4, 1.5, -2.0]);
        let report = check_gradients(
            |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
                let w = tape.param(s, id);
                let a = tape.sigmoid(w);
                let b = tape.tanh(a);
                let c = tape.mul(b, w)?;
                let d = tape.sigmoid(c);
                let e = tape.exp(d);
                let f = tape.log(e)?;
                Ok(tape.sum(f))
            },
            &mut store,
            &[id],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        use std::cell::Cell;
        let (mut store, id) = single(vec![1.0]);
        let calls = Cell::new(0.0);
        let result = check_gradients(
            |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
                calls.set(calls.get() + 1.0);
                let w = tape.param(s, id);
                let c = tape.constant(Tensor::scalar(calls.get()));
                let y = tape.mul(w, c)?;
                Ok(tape.sum(y))
            },
            &mut store,
            &[id],
            1e-5,
            1e-6,
        );
        assert!(matches!(result, Err(QrnError::Determinism(_))));
    }
}
