//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation executed through it. Values are
//! computed eagerly; [`Tape::backward`] replays the record in reverse and
//! accumulates `∂loss/∂param` into the owning [`ParamStore`]. A tape is
//! built fresh for each forward pass and is single-threaded.

use crate::error::{QrnError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, trmm_lower, trmm_lower_grads, Scalar, Tensor};

/// Smallest value a logarithm input is clamped to.
pub const LOG_FLOOR: f64 = 1e-8;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a single element
    ScalarRhs,
    ScalarLhs,
    /// rhs is a `[1, n]` row applied to every row of lhs
    RowRhs,
    RowLhs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary(Binary, Var, Var, Bcast),
    MatMul { a: Var, b: Var, trans_b: bool },
    LowerMatMul(Var, Var),
    Transpose(Var),
    Affine { x: Var, scale: F },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    ClampMin { x: Var, min: F },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row { x: Var, index: usize },
    Col { x: Var, index: usize },
    ReverseRows(Var),
    BroadcastCols(Var),
    TriMask { x: Var, strict: bool },
    CumSumRows(Var),
    Decay(Var),
    Pick { x: Var, r: usize, c: usize },
    PositionEmbed { table: Var, sentences: Vec<Vec<usize>> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn two_d<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(QrnError::dim(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Position Encoder weight `l_{jk} = (1 - j/J) - (k/d)(1 - 2j/J)` with 1-based `j`, `k`.
pub fn position_weight(j: usize, k: usize, sentence_len: usize, dim: usize) -> f64 {
    let jj = j as f64 / sentence_len as f64;
    let kk = k as f64 / dim as f64;
    (1.0 - jj) - kk * (1.0 - 2.0 * jj)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter's current value as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = if ta.shape() == tb.shape() {
            Bcast::Same
        } else if tb.len() == 1 {
            Bcast::ScalarRhs
        } else if ta.len() == 1 {
            Bcast::ScalarLhs
        } else if ta.is_matrix() && tb.is_matrix() && tb.rows() == 1 && tb.cols() == ta.cols() {
            Bcast::RowRhs
        } else if ta.is_matrix() && tb.is_matrix() && ta.rows() == 1 && ta.cols() == tb.cols() {
            Bcast::RowLhs
        } else {
            return Err(QrnError::dim(name, ta.shape(), tb.shape()));
        };
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = match bc {
            Bcast::Same => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Bcast::ScalarRhs => {
                let s = tb.item();
                ta.map(|x| f(x, s))
            }
            Bcast::ScalarLhs => {
                let s = ta.item();
                tb.map(|y| f(s, y))
            }
            Bcast::RowRhs => {
                let c = ta.cols();
                let row = tb.data();
                let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, row[i % c])).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Bcast::RowLhs => {
                let c = tb.cols();
                let row = ta.data();
                let data = tb.data().iter().enumerate().map(|(i, &y)| f(row[i % c], y)).collect();
                Tensor::new(tb.shape().to_vec(), data)?
            }
        };
        Ok(self.push(value, Op::Binary(kind, a, b, bc), &[a, b]))
    }

    /// Element-wise sum; also scalar↔tensor and row-vector↔matrix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    /// Element-wise (Hadamard) product with the same broadcast rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = two_d("matmul", ta)?;
        let (br, bc) = two_d("matmul", tb)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(QrnError::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![F::zero(); m * n];
        if trans_b {
            gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        } else {
            gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true)
    }

    /// `tril(a) · b` for square `a`; entries above the diagonal of `a` are
    /// ignored and receive zero gradient.
    pub fn lower_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = two_d("lower_matmul", ta)?;
        let (br, n) = two_d("lower_matmul", tb)?;
        if m != k || k != br {
            return Err(QrnError::dim("lower_matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![F::zero(); m * n];
        trmm_lower(ta.data(), tb.data(), &mut out, m, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::LowerMatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        two_d("transpose", t)?;
        let value = t.transpose();
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let value = self.nodes[x.0].value.map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -F::one(), F::one())
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.affine(x, s, F::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(F::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    /// `eˣ`, with subnormal results flushed to zero. Long products of decay
    /// factors underflow routinely and subnormal arithmetic is very slow.
    pub fn exp(&mut self, x: Var) -> Var {
        let tiny = F::min_positive_value();
        let value = self.nodes[x.0].value.map(|v| {
            let e = v.exp();
            if e < tiny {
                F::zero()
            } else {
                e
            }
        });
        self.push(value, Op::Exp(x), &[x])
    }

    /// Natural logarithm. Non-positive inputs are a domain error; positive
    /// inputs below [`LOG_FLOOR`] are clamped to it.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if let Some(bad) = t.data().iter().find(|v| !(**v > F::zero())) {
            return Err(QrnError::Domain {
                op: "log",
                detail: format!("input {bad} is not strictly positive"),
            });
        }
        let floor = F::from_f64(LOG_FLOOR);
        let value = t.map(|v| v.max(floor).ln());
        Ok(self.push(value, Op::Log(x), &[x]))
    }

    pub fn clamp_min(&mut self, x: Var, min: F) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(min));
        self.push(value, Op::ClampMin { x, min }, &[x])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = two_d("softmax", t)?;
        let mut out = t.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = two_d("log_softmax", t)?;
        let mut out = t.data().to_vec();
        for i in 0..r {
            log_softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.nodes[x.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| QrnError::Contract("concat_cols of nothing".into()))?;
        let (r, _) = two_d("concat_cols", &self.nodes[first.0].value)?;
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (pr, pc) = two_d("concat_cols", t)?;
            if pr != r {
                return Err(QrnError::dim("concat_cols", self.shape(*first), t.shape()));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row_slice(i));
            }
        }
        let value = Tensor::matrix(r, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| QrnError::Contract("stack_rows of nothing".into()))?;
        let (_, c) = two_d("stack_rows", &self.nodes[first.0].value)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (pr, pc) = two_d("stack_rows", t)?;
            if pc != c {
                return Err(QrnError::dim("stack_rows", self.shape(*first), t.shape()));
            }
            rows += pr;
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, c, out)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec()), parts))
    }

    /// Row `index` as a `[1, cols]` tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, _) = two_d("row", t)?;
        if index >= r {
            return Err(QrnError::dim("row", t.shape(), &[index]));
        }
        let value = Tensor::row(t.row_slice(index).to_vec());
        Ok(self.push(value, Op::Row { x, index }, &[x]))
    }

    /// Column `index` as a `[rows, 1]` tensor.
    pub fn col(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = two_d("col", t)?;
        if index >= c {
            return Err(QrnError::dim("col", t.shape(), &[index]));
        }
        let data = (0..r).map(|i| t.data()[i * c + index]).collect();
        let value = Tensor::matrix(r, 1, data)?;
        Ok(self.push(value, Op::Col { x, index }, &[x]))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        two_d("reverse_rows", t)?;
        let value = t.reverse_rows();
        Ok(self.push(value, Op::ReverseRows(x), &[x]))
    }

    /// Tiles a `[rows, 1]` column across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = two_d("broadcast_cols", t)?;
        if c != 1 || cols == 0 {
            return Err(QrnError::dim("broadcast_cols", t.shape(), &[r, cols]));
        }
        let mut out = Vec::with_capacity(r * cols);
        for &v in t.data() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        let value = Tensor::matrix(r, cols, out)?;
        Ok(self.push(value, Op::BroadcastCols(x), &[x]))
    }

    /// Keeps the lower triangle (`strict` drops the diagonal too), zeroing the rest.
    pub fn tri_mask(&mut self, x: Var, strict: bool) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = two_d("tri_mask", t)?;
        let mut out = t.data().to_vec();
        zero_upper(&mut out, r, c, strict);
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::TriMask { x, strict }, &[x]))
    }

    /// Lower-triangular `[T, T]` matrix `D[t, i] = exp(Σ_{j=i+1..t} b[j])` from a
    /// `[T, 1]` column of log-decays `b`; zero above the diagonal.
    pub fn decay_from_log(&mut self, b: Var) -> Result<Var> {
        let t = &self.nodes[b.0].value;
        let (steps, c) = two_d("decay_from_log", t)?;
        if c != 1 {
            return Err(QrnError::dim("decay_from_log", t.shape(), &[steps, 1]));
        }
        // exp of a running sum, taken as a running product of exp(b[t]);
        // entries that would go subnormal are flushed to zero
        let tiny = F::min_positive_value();
        let mut out = vec![F::zero(); steps * steps];
        for (row, &bt) in t.data().iter().enumerate() {
            let keep = bt.exp();
            let (done, rest) = out.split_at_mut(row * steps);
            let cur = &mut rest[..steps];
            if row > 0 {
                let prev = &done[(row - 1) * steps..(row - 1) * steps + row];
                for (c, &p) in cur[..row].iter_mut().zip(prev) {
                    let v = p * keep;
                    *c = if v < tiny { F::zero() } else { v };
                }
            }
            cur[row] = F::one();
        }
        let value = Tensor::matrix(steps, steps, out)?;
        Ok(self.push(value, Op::Decay(b), &[b]))
    }

    /// Running sum down the rows: left-multiplication by a lower-triangular
    /// matrix of ones.
    pub fn cumsum_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = two_d("cumsum_rows", t)?;
        let mut out = t.data().to_vec();
        for i in 1..r {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] + out[(i - 1) * c + j];
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::CumSumRows(x), &[x]))
    }

    /// Entry `(r, c)` as a scalar.
    pub fn pick(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (tr, tc) = two_d("pick", t)?;
        if r >= tr || c >= tc {
            return Err(QrnError::dim("pick", t.shape(), &[r, c]));
        }
        let value = Tensor::scalar(t.at(r, c));
        Ok(self.push(value, Op::Pick { x, r, c }, &[x]))
    }

    /// Embeds each sentence with the `[d, V]` table and reduces it with the
    /// Position Encoder, producing a `[sentences, d]` matrix.
    pub fn position_embed(&mut self, table: Var, sentences: &[Vec<usize>]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let (d, v) = two_d("position_embed", t)?;
        if sentences.is_empty() {
            return Err(QrnError::Input("no sentences to encode".into()));
        }
        let mut out = vec![F::zero(); sentences.len() * d];
        for (s, words) in sentences.iter().enumerate() {
            if words.is_empty() {
                return Err(QrnError::Input(format!("sentence {s} has no tokens")));
            }
            if let Some(&w) = words.iter().find(|&&w| w >= v) {
                return Err(QrnError::dim("position_embed", t.shape(), &[w]));
            }
            let row = &mut out[s * d..(s + 1) * d];
            let len = words.len();
            for (j, &w) in words.iter().enumerate() {
                for (k, o) in row.iter_mut().enumerate() {
                    let l = F::from_f64(position_weight(j + 1, k + 1, len, d));
                    *o = *o + l * t.data()[k * v + w];
                }
            }
        }
        let value = Tensor::matrix(sentences.len(), d, out)?;
        Ok(self.push(
            value,
            Op::PositionEmbed {
                table,
                sentences: sentences.to_vec(),
            },
            &[table],
        ))
    }

    /// Reverse sweep from a scalar `loss`; parameter gradients are added
    /// into `store`. Unreached parameters are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        self.backward_scaled(loss, store, F::one())
    }

    /// As [`Tape::backward`], with the seed gradient set to `scale`.
    pub fn backward_scaled(&self, loss: Var, store: &mut ParamStore<F>, scale: F) -> Result<()> {
        let grads = self.gradients(loss, scale)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Some(pid)) = (g, self.nodes[i].param) {
                store.accumulate(pid, &g, F::one())?;
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every leaf, indexed by node.
    fn gradients(&self, loss: Var, seed: F) -> Result<Vec<Option<Tensor<F>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(QrnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), seed));
        let mut leaf_grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(leaf_grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = binary_grads(*kind, *bc, ta, tb, g);
                if self.needs(*a) {
                    add_grad(grads, *a, ga);
                }
                if self.needs(*b) {
                    add_grad(grads, *b, gb);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = out.cols();
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    if *trans_b {
                        gemm_nn(g.data(), tb.data(), &mut ga, m, n, k);
                    } else {
                        gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                    }
                    add_grad(grads, *a, Tensor::matrix(m, k, ga)?);
                }
                if self.needs(*b) {
                    let gb = if *trans_b {
                        let mut gb = vec![F::zero(); n * k];
                        gemm_tn(g.data(), ta.data(), &mut gb, m, n, k);
                        Tensor::matrix(n, k, gb)?
                    } else {
                        let mut gb = vec![F::zero(); k * n];
                        gemm_tn(ta.data(), g.data(), &mut gb, m, k, n);
                        Tensor::matrix(k, n, gb)?
                    };
                    add_grad(grads, *b, gb);
                }
            }
            Op::LowerMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (ta.rows(), tb.cols());
                let mut ga = self.needs(*a).then(|| vec![F::zero(); m * m]);
                let mut gb = self.needs(*b).then(|| vec![F::zero(); m * n]);
                trmm_lower_grads(
                    ta.data(),
                    tb.data(),
                    g.data(),
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                    m,
                    n,
                );
                if let Some(ga) = ga {
                    add_grad(grads, *a, Tensor::matrix(m, m, ga)?);
                }
                if let Some(gb) = gb {
                    add_grad(grads, *b, Tensor::matrix(m, n, gb)?);
                }
            }
            Op::Transpose(x) => add_grad(grads, *x, g.transpose()),
            Op::Affine { x, scale } => {
                let s = *scale;
                add_grad(grads, *x, g.map(|v| v * s));
            }
            Op::Sigmoid(x) => {
                let data = zip_map(g, out, |gv, y| gv * y * (F::one() - y));
                add_grad(grads, *x, data);
            }
            Op::Tanh(x) => {
                let data = zip_map(g, out, |gv, y| gv * (F::one() - y * y));
                add_grad(grads, *x, data);
            }
            Op::Exp(x) => add_grad(grads, *x, zip_map(g, out, |gv, y| gv * y)),
            Op::Log(x) => {
                let floor = F::from_f64(LOG_FLOOR);
                let data = zip_map(g, self.value(*x), |gv, v| {
                    if v < floor {
                        F::zero()
                    } else {
                        gv / v
                    }
                });
                add_grad(grads, *x, data);
            }
            Op::ClampMin { x, min } => {
                let m = *min;
                let data = zip_map(g, self.value(*x), |gv, v| if v < m { F::zero() } else { gv });
                add_grad(grads, *x, data);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = vec![F::zero(); out.len()];
                for r in 0..out.rows() {
                    let s = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: F = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                add_grad(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut gx = vec![F::zero(); out.len()];
                for r in 0..out.rows() {
                    let ls = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let total: F = gr.iter().copied().sum();
                    for j in 0..c {
                        gx[r * c + j] = gr[j] - ls[j].exp() * total;
                    }
                }
                add_grad(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::Sum(x) => {
                let s = g.item();
                add_grad(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(r * pc);
                        for row in 0..r {
                            gp.extend_from_slice(&g.row_slice(row)[offset..offset + pc]);
                        }
                        add_grad(grads, *p, Tensor::matrix(r, pc, gp)?);
                    }
                    offset += pc;
                }
            }
            Op::StackRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pr = self.value(*p).rows();
                    if self.needs(*p) {
                        let gp = g.data()[offset * c..(offset + pr) * c].to_vec();
                        add_grad(grads, *p, Tensor::matrix(pr, c, gp)?);
                    }
                    offset += pr;
                }
            }
            Op::Row { x, index } => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let gx = grad_slot(grads, *x, &shape);
                let dst = &mut gx.data_mut()[index * c..(index + 1) * c];
                for (d, &v) in dst.iter_mut().zip(g.data()) {
                    *d = *d + v;
                }
            }
            Op::Col { x, index } => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let gx = grad_slot(grads, *x, &shape);
                for (r, &v) in g.data().iter().enumerate() {
                    let d = &mut gx.data_mut()[r * c + index];
                    *d = *d + v;
                }
            }
            Op::ReverseRows(x) => add_grad(grads, *x, g.reverse_rows()),
            Op::BroadcastCols(x) => {
                let c = out.cols();
                let data = (0..out.rows())
                    .map(|r| g.row_slice(r).iter().copied().sum())
                    .collect();
                let _ = c;
                add_grad(grads, *x, Tensor::matrix(out.rows(), 1, data)?);
            }
            Op::TriMask { x, strict } => {
                let c = out.cols();
                let mut gx = g.data().to_vec();
                zero_upper(&mut gx, out.rows(), c, *strict);
                add_grad(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::CumSumRows(x) => {
                // adjoint of a prefix sum is a suffix sum
                let c = out.cols();
                let mut gx = g.data().to_vec();
                for r in (0..out.rows().saturating_sub(1)).rev() {
                    for j in 0..c {
                        gx[r * c + j] = gx[r * c + j] + gx[(r + 1) * c + j];
                    }
                }
                add_grad(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::Decay(b) => {
                // ∂/∂b[j] = Σ_{t ≥ j} Σ_{i < j} g[t, i] · D[t, i]
                let steps = out.rows();
                let mut gb = vec![F::zero(); steps];
                for t in 1..steps {
                    let (grow, drow) = (g.row_slice(t), out.row_slice(t));
                    let mut prefix = F::zero();
                    for j in 1..=t {
                        prefix = prefix + grow[j - 1] * drow[j - 1];
                        gb[j] = gb[j] + prefix;
                    }
                }
                add_grad(grads, *b, Tensor::matrix(steps, 1, gb)?);
            }
            Op::Pick { x, r, c } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                gx.set(*r, *c, g.item());
                add_grad(grads, *x, gx);
            }
            Op::PositionEmbed { table, sentences } => {
                let tt = self.value(*table);
                let (d, v) = (tt.rows(), tt.cols());
                let mut gt = Tensor::zeros(tt.shape());
                let gdata = gt.data_mut();
                for (s, words) in sentences.iter().enumerate() {
                    let grow = g.row_slice(s);
                    let len = words.len();
                    for (j, &w) in words.iter().enumerate() {
                        for (k, &gv) in grow.iter().enumerate() {
                            let l = F::from_f64(position_weight(j + 1, k + 1, len, d));
                            gdata[k * v + w] = gdata[k * v + w] + l * gv;
                        }
                    }
                }
                add_grad(grads, *table, gt);
            }
        }
        Ok(())
    }
}

fn add_grad<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Zeroes entries above the diagonal of a row-major `[r, c]` buffer,
/// and the diagonal itself when `strict`.
fn zero_upper<F: Scalar>(data: &mut [F], r: usize, c: usize, strict: bool) {
    for i in 0..r {
        let first = if strict { i } else { i + 1 }.min(c);
        data[i * c + first..(i + 1) * c].fill(F::zero());
    }
}

/// Gradient accumulator for `v`, created as zeros on first use.
fn grad_slot<'a, F: Scalar>(grads: &'a mut [Option<Tensor<F>>], v: Var, shape: &[usize]) -> &'a mut Tensor<F> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sums `g` (shaped like the broadcast output) down to `target`'s shape.
fn reduce_to<F: Scalar>(g: &Tensor<F>, target: &Tensor<F>, bc_is_scalar: bool) -> Tensor<F> {
    if bc_is_scalar {
        let s: F = g.data().iter().copied().sum();
        return Tensor::full(target.shape(), s);
    }
    let c = g.cols();
    let mut row = vec![F::zero(); c];
    for r in 0..g.rows() {
        for (acc, &v) in row.iter_mut().zip(g.row_slice(r)) {
            *acc = *acc + v;
        }
    }
    Tensor::new(target.shape().to_vec(), row).expect("row shape")
}

fn binary_grads<F: Scalar>(
    kind: Binary,
    bc: Bcast,
    ta: &Tensor<F>,
    tb: &Tensor<F>,
    g: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    // Element of the (possibly broadcast) operand that lines up with output index i.
    let pick = |t: &Tensor<F>, lhs: bool, i: usize| -> F {
        let broadcast = match bc {
            Bcast::Same => false,
            Bcast::ScalarRhs | Bcast::RowRhs => !lhs,
            Bcast::ScalarLhs | Bcast::RowLhs => lhs,
        };
        if !broadcast {
            t.data()[i]
        } else if t.len() == 1 {
            t.data()[0]
        } else {
            t.data()[i % t.len()]
        }
    };
    let n = g.len();
    let (mut ga, mut gb) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let gv = g.data()[i];
        match kind {
            Binary::Add => {
                ga.push(gv);
                gb.push(gv);
            }
            Binary::Sub => {
                ga.push(gv);
                gb.push(-gv);
            }
            Binary::Mul => {
                ga.push(gv * pick(tb, false, i));
                gb.push(gv * pick(ta, true, i));
            }
        }
    }
    let ga = Tensor::new(g.shape().to_vec(), ga).expect("grad shape");
    let gb = Tensor::new(g.shape().to_vec(), gb).expect("grad shape");
    let ga = match bc {
        Bcast::ScalarLhs => reduce_to(&ga, ta, true),
        Bcast::RowLhs => reduce_to(&ga, ta, false),
        _ => ga,
    };
    let gb = match bc {
        Bcast::ScalarRhs => reduce_to(&gb, tb, true),
        Bcast::RowRhs => reduce_to(&gb, tb, false),
        _ => gb,
    };
    (ga, gb)
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamKind, Parameter};

    fn store_with(values: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add(Parameter::new("w", ParamKind::Weight, Tensor::row(values)))
            .unwrap();
        (store, id)
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        let s = tape.sigmoid(z);
        let t = tape.tanh(z);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5]);
        assert_eq!(tape.value(t).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_of_forget_bias() {
        // 1 / (1 + e^{-2.5}) evaluated independently
        let expected = 1.0 / (1.0 + (-2.5f64).exp());
        assert!((expected - 0.9241).abs() < 5e-5);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(2.5));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item(), expected);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).gradient.data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let _w = tape.param(&store, id);
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.sum(c);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).gradient.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        assert!(matches!(
            tape.backward(w, &mut store),
            Err(QrnError::Contract(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        match tape.matmul(a, b) {
            Err(QrnError::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn log_rejects_non_positive_and_clamps_tiny() {
        let mut tape = Tape::<f64>::new();
        let bad = tape.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(tape.log(bad), Err(QrnError::Domain { .. })));
        let tiny = tape.constant(Tensor::row(vec![1e-20]));
        let l = tape.log(tiny).unwrap();
        assert_eq!(tape.value(l).item(), (1e-8f64).ln());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-100.0, 0.0, 100.0]]).unwrap(),
        );
        let s = tape.softmax(x).unwrap();
        for r in 0..2 {
            let total: f64 = tape.value(s).row_slice(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cumsum_matches_lower_ones_matmul() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
        );
        let ones = tape.constant(Tensor::full(&[3, 3], 1.0));
        let lower = tape.tri_mask(ones, false).unwrap();
        let via_matmul = tape.matmul(lower, x).unwrap();
        let via_cumsum = tape.cumsum_rows(x).unwrap();
        assert_eq!(tape.value(via_matmul), tape.value(via_cumsum));
    }

    #[test]
    fn row_broadcast_gradient_sums_over_rows() {
        let (mut store, id) = store_with(vec![1.0, 1.0]);
        let mut tape = Tape::new();
        let b = tape.param(&store, id);
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = tape.add(m, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).gradient.data(), &[2.0, 2.0]);
    }

    #[test]
    fn position_weight_single_word() {
        // l_{1k} = 0 - (k/2)(1 - 2) = k/2
        assert_eq!(position_weight(1, 1, 1, 2), 0.5);
        assert_eq!(position_weight(1, 2, 1, 2), 1.0);
    }
}
