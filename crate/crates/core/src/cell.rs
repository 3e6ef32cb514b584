//! The QRN unit and its sequential evaluation.
//!
//! Given sentence vectors `x_t` and local queries `q_t` the unit computes
//!
//! ```text
//! z_t = σ(W_z (x_t ∘ q_t) + b_z)          update gate
//! r_t = σ(W_r (x_t ∘ q_t) + b_r)          reset gate (optional)
//! h̃_t = tanh(W_h [x_t; q_t] + b_h)        candidate reduced query
//! h_t = z_t r_t h̃_t + (1 − z_t) h_{t−1}   with h_0 = 0
//! ```
//!
//! Gates and candidates only look at the current inputs, so they are
//! computed for all time steps in one batched product; only the final
//! interpolation is recurrent.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{QrnError, Result};
use crate::param::{ParamId, ParamKind, ParamStore, Parameter};
use crate::scan;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Architecture of the recurrent stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QrnConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub use_reset_gate: bool,
    pub vector_gates: bool,
    pub bidirectional: bool,
    pub forget_bias: f64,
    pub tie_weights_across_layers: bool,
}

impl Default for QrnConfig {
    fn default() -> Self {
        QrnConfig {
            layers: 2,
            hidden_size: 50,
            use_reset_gate: true,
            vector_gates: false,
            bidirectional: true,
            forget_bias: 2.5,
            tie_weights_across_layers: true,
        }
    }
}

impl QrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(QrnError::Config("layers must be at least 1".into()));
        }
        if self.hidden_size == 0 {
            return Err(QrnError::Config("hidden_size must be at least 1".into()));
        }
        if !self.forget_bias.is_finite() {
            return Err(QrnError::Config("forget_bias must be finite".into()));
        }
        Ok(())
    }

    /// 1 for scalar gates, `d` for vector gates.
    pub fn gate_rows(&self) -> usize {
        if self.vector_gates {
            self.hidden_size
        } else {
            1
        }
    }

    /// Number of distinct parameter sets in the stack.
    pub fn param_sets(&self) -> usize {
        if self.tie_weights_across_layers {
            1
        } else {
            self.layers
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// How the recurrence over time is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    /// One interpolation step per time step.
    #[default]
    Sequential,
    /// Closed-form masked matrix product over all time steps.
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = QrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ScanMode::Sequential),
            "parallel" => Ok(ScanMode::Parallel),
            other => Err(QrnError::Config(format!(
                "unknown scan mode `{other}` (expected sequential or parallel)"
            ))),
        }
    }
}

/// Handles to one layer's unit weights inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct QrnParams {
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_r: Option<ParamId>,
    pub b_r: Option<ParamId>,
}

/// Glorot/Xavier uniform matrix of shape `[fan_out, fan_in]`.
pub fn glorot_uniform<F: Scalar, R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limits");
    let data = (0..fan_out * fan_in).map(|_| F::from_f64(dist.sample(rng))).collect();
    Tensor::matrix(fan_out, fan_in, data).expect("shape")
}

impl QrnParams {
    /// Registers freshly initialized unit weights under `prefix`.
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        config: &QrnConfig,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.hidden_size;
        let g = config.gate_rows();
        let name = |s: &str| format!("{prefix}.{s}");
        let w_z = store.add(Parameter::new(name("w_z"), ParamKind::Weight, glorot_uniform(g, d, rng)))?;
        let b_z = store.add(Parameter::new(
            name("b_z"),
            ParamKind::Bias,
            Tensor::full(&[1, g], F::from_f64(config.forget_bias)),
        ))?;
        let w_h = store.add(Parameter::new(name("w_h"), ParamKind::Weight, glorot_uniform(d, 2 * d, rng)))?;
        let b_h = store.add(Parameter::new(name("b_h"), ParamKind::Bias, Tensor::zeros(&[1, d])))?;
        let (w_r, b_r) = if config.use_reset_gate {
            let w = store.add(Parameter::new(name("w_r"), ParamKind::Weight, glorot_uniform(g, d, rng)))?;
            let b = store.add(Parameter::new(name("b_r"), ParamKind::Bias, Tensor::zeros(&[1, g])))?;
            (Some(w), Some(b))
        } else {
            (None, None)
        };
        Ok(QrnParams { w_z, b_z, w_h, b_h, w_r, b_r })
    }

    pub fn bind<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> BoundParams {
        BoundParams {
            w_z: tape.param(store, self.w_z),
            b_z: tape.param(store, self.b_z),
            w_h: tape.param(store, self.w_h),
            b_h: tape.param(store, self.b_h),
            w_r: self.w_r.map(|id| tape.param(store, id)),
            b_r: self.b_r.map(|id| tape.param(store, id)),
        }
    }

    fn check_row<F: Scalar>(&self, store: &ParamStore<F>, op: &'static str, x: &Tensor<F>, q: &Tensor<F>) -> Result<()> {
        let d = store.get(self.b_h).value.cols();
        for t in [x, q] {
            if t.len() != d {
                return Err(QrnError::dim(op, &[d], t.shape()));
            }
        }
        Ok(())
    }

    fn eval<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        op: &'static str,
        x_t: &Tensor<F>,
        q_t: &Tensor<F>,
        f: impl FnOnce(&mut Tape<F>, &BoundParams, Var, Var) -> Result<Var>,
    ) -> Result<Tensor<F>> {
        self.check_row(store, op, x_t, q_t)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, store);
        let x = tape.constant(Tensor::row(x_t.data().to_vec()));
        let q = tape.constant(Tensor::row(q_t.data().to_vec()));
        let out = f(&mut tape, &p, x, q)?;
        Ok(tape.value(out).clone())
    }

    /// `σ(W_z (x_t ∘ q_t) + b_z)`, one value per gate row.
    pub fn update_gate<F: Scalar>(&self, store: &ParamStore<F>, x_t: &Tensor<F>, q_t: &Tensor<F>) -> Result<Tensor<F>> {
        self.eval(store, "update_gate", x_t, q_t, |tape, p, x, q| update_gate(tape, p, x, q))
    }

    /// `tanh(W_h [x_t; q_t] + b_h)`.
    pub fn reduce<F: Scalar>(&self, store: &ParamStore<F>, x_t: &Tensor<F>, q_t: &Tensor<F>) -> Result<Tensor<F>> {
        self.eval(store, "reduce", x_t, q_t, |tape, p, x, q| reduce(tape, p, x, q))
    }

    /// `σ(W_r (x_t ∘ q_t) + b_r)`; a configuration error without reset weights.
    pub fn reset_gate<F: Scalar>(&self, store: &ParamStore<F>, x_t: &Tensor<F>, q_t: &Tensor<F>) -> Result<Tensor<F>> {
        self.eval(store, "reset_gate", x_t, q_t, |tape, p, x, q| reset_gate(tape, p, x, q))
    }

    /// One recurrence step. The reset gate is applied only when the unit has
    /// reset weights and `is_last_layer` is false.
    pub fn step<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        h_prev: &Tensor<F>,
        x_t: &Tensor<F>,
        q_t: &Tensor<F>,
        is_last_layer: bool,
    ) -> Result<(Tensor<F>, StepGates<F>)> {
        self.check_row(store, "step", x_t, q_t)?;
        self.check_row(store, "step", h_prev, q_t)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, store);
        let h = tape.constant(Tensor::row(h_prev.data().to_vec()));
        let x = tape.constant(Tensor::row(x_t.data().to_vec()));
        let q = tape.constant(Tensor::row(q_t.data().to_vec()));
        let use_reset = self.w_r.is_some() && !is_last_layer;
        let (h_t, z, r) = step(&mut tape, &p, h, x, q, use_reset)?;
        let gates = StepGates {
            z: tape.value(z).clone(),
            r: r.map(|r| tape.value(r).clone()),
        };
        Ok((tape.value(h_t).clone(), gates))
    }

    /// Runs one layer over a `[T, d]` story with `[T, d]` local queries.
    pub fn run_layer<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
        q: &Tensor<F>,
        direction: Direction,
        mode: ScanMode,
        use_reset: bool,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, store);
        let xv = tape.constant(x.clone());
        let qv = tape.constant(q.clone());
        let out = run_layer(&mut tape, &p, xv, qv, direction, mode, use_reset)?;
        Ok(tape.value(out.h).clone())
    }
}

/// Gate values produced by a single step.
#[derive(Clone, Debug)]
pub struct StepGates<F> {
    pub z: Tensor<F>,
    pub r: Option<Tensor<F>>,
}

/// Unit weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub w_z: Var,
    pub b_z: Var,
    pub w_h: Var,
    pub b_h: Var,
    pub w_r: Option<Var>,
    pub b_r: Option<Var>,
}

fn check_pair<F: Scalar>(tape: &Tape<F>, op: &'static str, x: Var, q: Var) -> Result<()> {
    if tape.shape(x) != tape.shape(q) {
        return Err(QrnError::dim(op, tape.shape(x), tape.shape(q)));
    }
    Ok(())
}

/// Update gate for every row of `x`, `q`: `[T, gate_rows]`.
pub fn update_gate<F: Scalar>(tape: &mut Tape<F>, p: &BoundParams, x: Var, q: Var) -> Result<Var> {
    check_pair(tape, "update_gate", x, q)?;
    let xq = tape.mul(x, q)?;
    let pre = tape.matmul_t(xq, p.w_z)?;
    let pre = tape.add(pre, p.b_z)?;
    Ok(tape.sigmoid(pre))
}

pub fn reset_gate<F: Scalar>(tape: &mut Tape<F>, p: &BoundParams, x: Var, q: Var) -> Result<Var> {
    let (Some(w_r), Some(b_r)) = (p.w_r, p.b_r) else {
        return Err(QrnError::Config(
            "reset gate requested but the unit has no reset weights".into(),
        ));
    };
    check_pair(tape, "reset_gate", x, q)?;
    let xq = tape.mul(x, q)?;
    let pre = tape.matmul_t(xq, w_r)?;
    let pre = tape.add(pre, b_r)?;
    Ok(tape.sigmoid(pre))
}

/// Candidate reduced queries for every row: `[T, d]`.
pub fn reduce<F: Scalar>(tape: &mut Tape<F>, p: &BoundParams, x: Var, q: Var) -> Result<Var> {
    check_pair(tape, "reduce", x, q)?;
    let cat = tape.concat_cols(&[x, q])?;
    let pre = tape.matmul_t(cat, p.w_h)?;
    let pre = tape.add(pre, p.b_h)?;
    Ok(tape.tanh(pre))
}

/// `z ∘ c + (1 − z) ∘ h_prev`; a `[1, 1]` gate broadcasts over the row.
pub fn interpolate<F: Scalar>(tape: &mut Tape<F>, z: Var, candidate: Var, h_prev: Option<Var>) -> Result<Var> {
    let new = tape.mul(z, candidate)?;
    match h_prev {
        None => Ok(new),
        Some(h) => {
            let keep = tape.one_minus(z);
            let old = tape.mul(keep, h)?;
            tape.add(new, old)
        }
    }
}

/// Single-row step; returns `(h_t, z_t, r_t)`.
pub fn step<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    h_prev: Var,
    x_t: Var,
    q_t: Var,
    use_reset: bool,
) -> Result<(Var, Var, Option<Var>)> {
    check_pair(tape, "step", h_prev, x_t)?;
    let z = update_gate(tape, p, x_t, q_t)?;
    let mut cand = reduce(tape, p, x_t, q_t)?;
    let r = if use_reset {
        let r = reset_gate(tape, p, x_t, q_t)?;
        cand = tape.mul(r, cand)?;
        Some(r)
    } else {
        None
    };
    let h = interpolate(tape, z, cand, Some(h_prev))?;
    Ok((h, z, r))
}

/// Time-serial recurrence over precomputed gates `[T, g]` and (reset-scaled)
/// candidates `[T, d]`, starting from `h_0 = 0`.
pub fn recur_sequential<F: Scalar>(tape: &mut Tape<F>, z: Var, candidates: Var) -> Result<Var> {
    let steps = tape.shape(candidates)[0];
    if tape.shape(z)[0] != steps {
        return Err(QrnError::dim("recur_sequential", tape.shape(z), tape.shape(candidates)));
    }
    let mut rows = Vec::with_capacity(steps);
    let mut h: Option<Var> = None;
    for t in 0..steps {
        let z_t = tape.row(z, t)?;
        let c_t = tape.row(candidates, t)?;
        let h_t = interpolate(tape, z_t, c_t, h)?;
        rows.push(h_t);
        h = Some(h_t);
    }
    tape.stack_rows(&rows)
}

/// Outputs of one directional pass through a layer, indexed in story order.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub h: Var,
    pub z: Var,
    pub r: Option<Var>,
}

/// Multiplies reset gates into candidates, broadcasting scalar gates.
pub fn apply_reset<F: Scalar>(tape: &mut Tape<F>, r: Var, candidates: Var) -> Result<Var> {
    let d = tape.shape(candidates)[1];
    let r_full = if tape.shape(r)[1] == 1 && d != 1 {
        tape.broadcast_cols(r, d)?
    } else {
        r
    };
    tape.mul(r_full, candidates)
}

pub fn run_layer<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    x: Var,
    q: Var,
    direction: Direction,
    mode: ScanMode,
    use_reset: bool,
) -> Result<LayerOutput> {
    check_pair(tape, "run_layer", x, q)?;
    let (x, q) = match direction {
        Direction::Forward => (x, q),
        Direction::Backward => (tape.reverse_rows(x)?, tape.reverse_rows(q)?),
    };
    let z = update_gate(tape, p, x, q)?;
    let mut cand = reduce(tape, p, x, q)?;
    let r = if use_reset {
        let r = reset_gate(tape, p, x, q)?;
        cand = apply_reset(tape, r, cand)?;
        Some(r)
    } else {
        None
    };
    let h = match mode {
        ScanMode::Sequential => recur_sequential(tape, z, cand)?,
        ScanMode::Parallel => scan::scan_on_tape(tape, z, cand)?,
    };
    Ok(match direction {
        Direction::Forward => LayerOutput { h, z, r },
        Direction::Backward => LayerOutput {
            h: tape.reverse_rows(h)?,
            z: tape.reverse_rows(z)?,
            r: match r {
                Some(r) => Some(tape.reverse_rows(r)?),
                None => None,
            },
        },
    })
}

/// Per-layer passes of a stack evaluation.
#[derive(Clone, Debug)]
pub struct LayerPasses {
    pub forward: LayerOutput,
    pub backward: Option<LayerOutput>,
    /// Local queries handed to the next layer (the last layer's forward states).
    pub reduced: Var,
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `[1, d]` final-timestep state of the last layer.
    pub y_hat: Var,
    pub layers: Vec<LayerPasses>,
}

/// Runs the full stack: layer 1 sees the question at every step, later
/// layers see the previous layer's reduced queries (summed over directions
/// when bidirectional). The last layer runs forward only and without reset.
pub fn stack_forward<F: Scalar>(
    tape: &mut Tape<F>,
    config: &QrnConfig,
    params: &[BoundParams],
    x: Var,
    q: Var,
    mode: ScanMode,
) -> Result<StackOutput> {
    let steps = tape.shape(x)[0];
    if tape.shape(q) != [1, config.hidden_size] || tape.shape(x)[1] != config.hidden_size {
        return Err(QrnError::dim("stack_forward", tape.shape(x), tape.shape(q)));
    }
    if params.len() != config.param_sets() {
        return Err(QrnError::Config(format!(
            "expected {} parameter sets, got {}",
            config.param_sets(),
            params.len()
        )));
    }
    let copies = vec![q; steps];
    let mut local_q = tape.stack_rows(&copies)?;
    let mut layers = Vec::with_capacity(config.layers);
    for k in 0..config.layers {
        let p = &params[if config.tie_weights_across_layers { 0 } else { k }];
        let last = k + 1 == config.layers;
        let use_reset = config.use_reset_gate && !last;
        let forward = run_layer(tape, p, x, local_q, Direction::Forward, mode, use_reset)?;
        let (backward, reduced) = if config.bidirectional && !last {
            let bwd = run_layer(tape, p, x, local_q, Direction::Backward, mode, use_reset)?;
            let sum = tape.add(forward.h, bwd.h)?;
            (Some(bwd), sum)
        } else {
            (None, forward.h)
        };
        layers.push(LayerPasses { forward, backward, reduced });
        local_q = reduced;
    }
    let last = layers.last().expect("at least one layer");
    let y_hat = tape.row(last.forward.h, steps - 1)?;
    Ok(StackOutput { y_hat, layers })
}

/// Gate values of one directional pass, `[T][gate_rows]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionGates {
    pub z: Vec<Vec<f32>>,
    pub r: Option<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGates {
    pub forward: DirectionGates,
    pub backward: Option<DirectionGates>,
    /// Reduced queries `h_t` passed on by this layer, `[T][d]`.
    pub reduced: Vec<Vec<f32>>,
}

/// Recorded gate activity of one stack evaluation, in story order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub layers: Vec<LayerGates>,
}

fn rows_f32<F: Scalar>(t: &Tensor<F>) -> Vec<Vec<f32>> {
    (0..t.rows())
        .map(|r| t.row_slice(r).iter().map(|v| v.as_f64() as f32).collect())
        .collect()
}

impl GateTrace {
    pub fn from_stack<F: Scalar>(tape: &Tape<F>, out: &StackOutput) -> Self {
        let dir = |o: &LayerOutput| DirectionGates {
            z: rows_f32(tape.value(o.z)),
            r: o.r.map(|r| rows_f32(tape.value(r))),
        };
        GateTrace {
            layers: out
                .layers
                .iter()
                .map(|l| LayerGates {
                    forward: dir(&l.forward),
                    backward: l.backward.as_ref().map(dir),
                    reduced: rows_f32(tape.value(l.reduced)),
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, |l| l.forward.z.len())
    }

    /// Every recorded gate value, in no particular order.
    pub fn all_gates(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers.iter().flat_map(|l| {
            let dirs = std::iter::once(&l.forward).chain(l.backward.iter());
            dirs.flat_map(|d| {
                d.z.iter()
                    .flatten()
                    .chain(d.r.iter().flat_map(|r| r.iter().flatten()))
                    .copied()
            })
        })
    }
}
