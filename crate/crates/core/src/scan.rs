//! Closed-form, time-parallel evaluation of the QRN recurrence.
//!
//! Unrolling `h_t = z_t h̃_t + (1 − z_t) h_{t−1}` with `h_0 = 0` gives
//!
//! ```text
//! h_t = Σ_{i≤t} [Π_{j=i+1..t} (1 − z_j)] z_i h̃_i
//! ```
//!
//! With `b_j = log(1 − z_j)` the bracketed products form a lower-triangular
//! decay matrix `D = L ∘ exp(L · (B ∘ L′))`, where `B` tiles `b` across
//! columns, `L` is lower-triangular ones and `L′` strictly lower. Then
//! `H = D · (Z ∘ H̃)`. The entries that would be `−∞` before exponentiation
//! are zeroed by the outer mask instead, so no infinities are ever formed.
//! [`Tape::decay_from_log`] evaluates the masked running sum and exponential
//! as one node.
//! Vector gates use one decay matrix per hidden dimension.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cell;
use crate::error::{QrnError, Result};
use crate::param::{ParamKind, ParamStore, Parameter};
use crate::tape::{Tape, Var, LOG_FLOOR};
use crate::tensor::{Scalar, Tensor};

/// Gates, candidates and optional reset gates for one sequence.
#[derive(Clone, Debug)]
pub struct ScanInputs<F> {
    /// `[T, g]`, `g` = 1 (scalar gates) or `d` (vector gates)
    pub z: Tensor<F>,
    /// `[T, d]`
    pub htilde: Tensor<F>,
    /// `[T, g]`
    pub r: Option<Tensor<F>>,
}

impl<F: Scalar> ScanInputs<F> {
    pub fn steps(&self) -> usize {
        self.htilde.rows()
    }

    pub fn hidden(&self) -> usize {
        self.htilde.cols()
    }

    fn validate(&self, gate_rows: usize, op: &'static str) -> Result<()> {
        let (t, d) = (self.htilde.rows(), self.htilde.cols());
        if !self.htilde.is_matrix() || self.z.shape() != [t, gate_rows] {
            return Err(QrnError::dim(op, self.z.shape(), self.htilde.shape()));
        }
        if gate_rows != 1 && gate_rows != d {
            return Err(QrnError::dim(op, self.z.shape(), self.htilde.shape()));
        }
        if let Some(r) = &self.r {
            if r.shape() != self.z.shape() {
                return Err(QrnError::dim(op, r.shape(), self.z.shape()));
            }
        }
        check_unit_interval(op, self.z.data())
    }
}

fn check_unit_interval<F: Scalar>(op: &'static str, z: &[F]) -> Result<()> {
    if let Some(bad) = z.iter().find(|v| !(**v >= F::zero() && **v <= F::one())) {
        return Err(QrnError::Domain {
            op,
            detail: format!("gate value {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

/// `T × T` lower-triangular matrix of accumulated `(1 − z)` products.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMatrix<F>(pub Tensor<F>);

impl<F: Scalar> DecayMatrix<F> {
    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn at(&self, t: usize, i: usize) -> F {
        self.0.at(t, i)
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }
}

/// Decay matrix of a `[T, 1]` gate column on the tape.
pub fn decay_on_tape<F: Scalar>(tape: &mut Tape<F>, z: Var) -> Result<Var> {
    let keep = tape.one_minus(z);
    let keep = tape.clamp_min(keep, F::from_f64(LOG_FLOOR));
    let b = tape.log(keep)?;
    tape.decay_from_log(b)
}

/// Builds the decay matrix for gates `z ∈ [0, 1]^T`.
pub fn build_decay_matrix<F: Scalar>(z: &[F]) -> Result<DecayMatrix<F>> {
    if z.is_empty() {
        return Err(QrnError::Input("empty gate sequence".into()));
    }
    check_unit_interval("build_decay_matrix", z)?;
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::matrix(z.len(), 1, z.to_vec())?);
    let d = decay_on_tape(&mut tape, zv)?;
    Ok(DecayMatrix(tape.value(d).clone()))
}

/// Parallel recurrence on the tape: gates `[T, g]`, candidates `[T, d]`
/// (already multiplied by any reset gate).
pub fn scan_on_tape<F: Scalar>(tape: &mut Tape<F>, z: Var, candidates: Var) -> Result<Var> {
    let (steps, d) = (tape.shape(candidates)[0], tape.shape(candidates)[1]);
    let g = tape.shape(z)[1];
    if tape.shape(z)[0] != steps || (g != 1 && g != d) {
        return Err(QrnError::dim("scan", tape.shape(z), tape.shape(candidates)));
    }
    if g == 1 {
        let decay = decay_on_tape(tape, z)?;
        let z_full = if d == 1 { z } else { tape.broadcast_cols(z, d)? };
        let weighted = tape.mul(z_full, candidates)?;
        return tape.lower_matmul(decay, weighted);
    }
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let zj = tape.col(z, j)?;
        let decay = decay_on_tape(tape, zj)?;
        let cj = tape.col(candidates, j)?;
        let weighted = tape.mul(zj, cj)?;
        cols.push(tape.lower_matmul(decay, weighted)?);
    }
    tape.concat_cols(&cols)
}

fn scan_pure<F: Scalar>(inputs: &ScanInputs<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let z = tape.constant(inputs.z.clone());
    let mut cand = tape.constant(inputs.htilde.clone());
    if let Some(r) = &inputs.r {
        let r = tape.constant(r.clone());
        cand = cell::apply_reset(&mut tape, r, cand)?;
    }
    let h = scan_on_tape(&mut tape, z, cand)?;
    Ok(tape.value(h).clone())
}

/// `H = D · (Z ∘ H̃)` for scalar gates (`z: [T, 1]`).
pub fn scan_scalar<F: Scalar>(inputs: &ScanInputs<F>) -> Result<Tensor<F>> {
    inputs.validate(1, "scan_scalar")?;
    scan_pure(inputs)
}

/// Per-dimension closed form for vector gates (`z: [T, d]`).
pub fn scan_vector<F: Scalar>(inputs: &ScanInputs<F>) -> Result<Tensor<F>> {
    inputs.validate(inputs.hidden(), "scan_vector")?;
    scan_pure(inputs)
}

/// Plain loop over the recurrence; the benchmark's correctness reference.
pub fn sequential_reference<F: Scalar>(inputs: &ScanInputs<F>) -> Result<Tensor<F>> {
    let g = inputs.z.cols();
    inputs.validate(g, "sequential_reference")?;
    let (steps, d) = (inputs.steps(), inputs.hidden());
    let mut out = Tensor::zeros(&[steps, d]);
    let mut h = vec![F::zero(); d];
    for t in 0..steps {
        for k in 0..d {
            let gk = if g == 1 { 0 } else { k };
            let z = inputs.z.at(t, gk);
            let r = inputs.r.as_ref().map_or(F::one(), |r| r.at(t, gk));
            h[k] = z * (r * inputs.htilde.at(t, k)) + (F::one() - z) * h[k];
            out.set(t, k, h[k]);
        }
    }
    Ok(out)
}

/// Wall-clock comparison of the two recurrence paths.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub steps: usize,
    pub hidden: usize,
    pub batch: usize,
    pub sequential_ms: f64,
    pub parallel_ms: f64,
    /// `sequential_ms / parallel_ms`; above 1 means the parallel path is faster.
    pub ratio: f64,
    pub max_abs_diff: f64,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "T={} d={} batch={} seq_ms={:.4} par_ms={:.4} ratio={:.4}",
            self.steps, self.hidden, self.batch, self.sequential_ms, self.parallel_ms, self.ratio
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times one training pass (forward and backward) of the recurrence over
/// `batch` random sequences through each path, after checking that both
/// paths produce the same states. Scalar gates, as in the default model.
pub fn benchmark_scan<F: Scalar>(
    steps: usize,
    hidden: usize,
    batch: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if steps == 0 || hidden == 0 || batch == 0 || repeats == 0 {
        return Err(QrnError::Input(format!(
            "benchmark sizes must be positive (T={steps} d={hidden} batch={batch} repeats={repeats})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<F>::new();
    let mut ids = Vec::with_capacity(batch);
    for b in 0..batch {
        let z = (0..steps).map(|_| F::from_f64(rng.random_range(0.01..0.99))).collect();
        let h = (0..steps * hidden).map(|_| F::from_f64(rng.random_range(-1.0..1.0))).collect();
        let zid = store.add(Parameter::new(format!("z{b}"), ParamKind::Weight, Tensor::matrix(steps, 1, z)?))?;
        let hid = store.add(Parameter::new(format!("h{b}"), ParamKind::Weight, Tensor::matrix(steps, hidden, h)?))?;
        ids.push((zid, hid));
    }

    let tolerance = match F::PRECISION {
        crate::tensor::Precision::F32 => 1e-4,
        crate::tensor::Precision::F64 => 1e-9,
    };
    let mut max_diff = 0.0f64;
    for &(zid, hid) in &ids {
        let inputs = ScanInputs {
            z: store.get(zid).value.clone(),
            htilde: store.get(hid).value.clone(),
            r: None,
        };
        let reference = sequential_reference(&inputs)?;
        for mode in [cell::ScanMode::Sequential, cell::ScanMode::Parallel] {
            let mut tape = Tape::new();
            let z = tape.constant(inputs.z.clone());
            let c = tape.constant(inputs.htilde.clone());
            let h = match mode {
                cell::ScanMode::Sequential => cell::recur_sequential(&mut tape, z, c)?,
                cell::ScanMode::Parallel => scan_on_tape(&mut tape, z, c)?,
            };
            max_diff = max_diff.max(tape.value(h).max_abs_diff(&reference)?.as_f64());
        }
    }
    if !(max_diff < tolerance) {
        return Err(QrnError::Numeric(format!(
            "scan paths disagree by {max_diff:e} (tolerance {tolerance:e}); benchmark aborted"
        )));
    }

    let mut time_path = |mode: cell::ScanMode| -> Result<f64> {
        let start = Instant::now();
        for &(zid, hid) in &ids {
            let mut tape = Tape::new();
            let z = tape.param(&store, zid);
            let c = tape.param(&store, hid);
            let h = match mode {
                cell::ScanMode::Sequential => cell::recur_sequential(&mut tape, z, c)?,
                cell::ScanMode::Parallel => scan_on_tape(&mut tape, z, c)?,
            };
            let loss = tape.sum(h);
            tape.backward(loss, &mut store)?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    // warm-up
    time_path(cell::ScanMode::Sequential)?;
    time_path(cell::ScanMode::Parallel)?;
    let mut seq = Vec::with_capacity(repeats);
    let mut par = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        seq.push(time_path(cell::ScanMode::Sequential)?);
        par.push(time_path(cell::ScanMode::Parallel)?);
    }
    let (sequential_ms, parallel_ms) = (median(seq), median(par));
    Ok(BenchReport {
        steps,
        hidden,
        batch,
        sequential_ms,
        parallel_ms,
        ratio: sequential_ms / parallel_ms,
        max_abs_diff: max_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_decay_is_one() {
        let d = build_decay_matrix(&[0.3f64]).unwrap();
        assert_eq!(d.tensor().data(), &[1.0]);
    }

    #[test]
    fn two_step_decay_hand_value() {
        let d = build_decay_matrix(&[0.5f64, 0.5]).unwrap();
        assert_eq!(d.tensor().data(), &[1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn saturated_gates_forget_history() {
        let d = build_decay_matrix(&[1.0f64, 1.0, 1.0]).unwrap();
        for t in 0..3 {
            for i in 0..3 {
                let v = d.at(t, i);
                if t == i {
                    assert_eq!(v, 1.0);
                } else {
                    assert!(v.abs() < 1e-7, "({t},{i}) = {v}");
                }
            }
        }
    }

    #[test]
    fn gates_outside_unit_interval_rejected() {
        assert!(matches!(
            build_decay_matrix(&[0.5f64, 1.5]),
            Err(QrnError::Domain { .. })
        ));
    }

    #[test]
    fn two_step_scan_hand_value() {
        let inputs = ScanInputs {
            z: Tensor::matrix(2, 1, vec![0.5f64, 0.5]).unwrap(),
            htilde: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            r: None,
        };
        let h = scan_scalar(&inputs).unwrap();
        assert_eq!(h.row_slice(1), &[0.25, 0.5]);
    }

    #[test]
    fn scalar_scan_rejects_vector_gates() {
        let inputs = ScanInputs {
            z: Tensor::full(&[2, 2], 0.5f64),
            htilde: Tensor::zeros(&[2, 2]),
            r: None,
        };
        assert!(matches!(scan_scalar(&inputs), Err(QrnError::Dimension { .. })));
        assert!(scan_vector(&inputs).is_ok());
    }

    #[test]
    fn report_line_format() {
        let r = BenchReport {
            steps: 100,
            hidden: 50,
            batch: 32,
            sequential_ms: 1.5,
            parallel_ms: 0.75,
            ratio: 2.0,
            max_abs_diff: 0.0,
        };
        assert_eq!(
            r.to_string(),
            "T=100 d=50 batch=32 seq_ms=1.5000 par_ms=0.7500 ratio=2.0000"
        );
    }

    #[test]
    fn benchmark_rejects_zero_sizes() {
        assert!(matches!(
            benchmark_scan::<f32>(0, 4, 1, 1, 0),
            Err(QrnError::Input(_))
        ));
    }
}
