//! Dense row-major tensors and the floating-point element trait.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{QrnError, Result};

/// Storage precision of a tensor or model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = QrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(QrnError::Config(format!(
                "unknown precision `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

/// Element type of every tensor: `f32` for training, `f64` for checks.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense tensor: a shape and a flat row-major buffer.
///
/// Every extent is positive and `shape.iter().product() == data.len()`.
/// Most operations work on rank-2 matrices; vectors are `[1, n]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(QrnError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(QrnError::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<F>) -> Self {
        assert!(!values.is_empty(), "row vector must be non-empty");
        Tensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(QrnError::dim("from_rows", &[c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(r, c, data)
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<F>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| F::from_f64(v)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(QrnError::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Result<F> {
        if self.shape != other.shape {
            return Err(QrnError::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum_squares(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Rows in reverse order.
    pub fn reverse_rows(&self) -> Self {
        let c = self.cols();
        let r = self.rows();
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..r).rev() {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }
}

/// `y += alpha * x` in fixed-width chunks, which vectorize without a long
/// scalar tail.
#[inline(always)]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    const LANES: usize = 8;
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &mut y[..n]);
    let mut ys = y.chunks_exact_mut(LANES);
    let mut xs = x.chunks_exact(LANES);
    for (cy, cx) in (&mut ys).zip(&mut xs) {
        for l in 0..LANES {
            cy[l] = cy[l] + alpha * cx[l];
        }
    }
    for (o, &v) in ys.into_remainder().iter_mut().zip(xs.remainder()) {
        *o = *o + alpha * v;
    }
}

macro_rules! dispatched_kernel {
    ($(#[$doc:meta])* $name:ident, $body:ident, $wide:ident) => {
        $(#[$doc])*
        pub(crate) fn $name<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    unsafe { $wide(a, b, out, m, k, n) };
                    return;
                }
            }
            $body(a, b, out, m, k, n)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $wide<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
            $body(a, b, out, m, k, n)
        }
    };
}

dispatched_kernel!(
    /// `out[m×n] += a[m×k] · b[k×n]`.
    gemm_nn, gemm_nn_body, gemm_nn_avx2
);
dispatched_kernel!(
    /// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
    gemm_nt, gemm_nt_body, gemm_nt_avx2
);
dispatched_kernel!(
    /// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
    gemm_tn, gemm_tn_body, gemm_tn_avx2
);

#[inline(always)]
fn gemm_nn_body<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            axpy(av, b_row, out_row);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
#[inline(always)]
fn gemm_nt_body<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    // transposing b first turns the inner loop into long contiguous row updates
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn_body(a, &bt, out, m, k, n)
}

#[inline(always)]
fn gemm_tn_body<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            axpy(av, b_row, out_row);
        }
    }
}

const BLOCK_ROWS: usize = 4;
const BLOCK_COLS: usize = 16;

/// Copies `src[rows×cols]` into a zero-padded `rows × ceil(cols/16)·16` buffer.
fn pad_cols<F: Scalar>(src: &[F], rows: usize, cols: usize) -> (Vec<F>, usize) {
    let width = cols.div_ceil(BLOCK_COLS) * BLOCK_COLS;
    let mut out = vec![F::zero(); rows * width];
    for r in 0..rows {
        out[r * width..r * width + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    (out, width)
}

/// Register-blocked product over a padded right operand `b[k × width]`:
/// for every output row `r < m` and 16-column block `c0`, accumulates
/// `Σ_{p ∈ span(r)} coef(r, p) · b[p, c0..c0+16]` and hands it to `emit`.
/// `coef` is only called inside `span`. Blocks starting past `col_limit(r0)`
/// (for the last row `r0` of a row block) are skipped.
#[inline(always)]
fn blocked_product<F: Scalar>(
    m: usize,
    width: usize,
    b: &[F],
    span: impl Fn(usize) -> (usize, usize),
    coef: impl Fn(usize, usize) -> F,
    col_limit: impl Fn(usize) -> usize,
    mut emit: impl FnMut(usize, usize, &[F; BLOCK_COLS]),
) {
    for r0 in (0..m).step_by(BLOCK_ROWS) {
        let rows = BLOCK_ROWS.min(m - r0);
        let spans: [(usize, usize); BLOCK_ROWS] =
            std::array::from_fn(|i| if i < rows { span(r0 + i) } else { (0, 0) });
        let lo = spans[..rows].iter().map(|s| s.0).min().unwrap_or(0);
        let hi = spans[..rows].iter().map(|s| s.1).max().unwrap_or(0);
        let common = (
            spans[..rows].iter().map(|s| s.0).max().unwrap_or(0),
            spans[..rows].iter().map(|s| s.1).min().unwrap_or(0),
        );
        let limit = col_limit(r0 + rows - 1).min(width);
        for c0 in (0..limit).step_by(BLOCK_COLS) {
            let mut acc = [[F::zero(); BLOCK_COLS]; BLOCK_ROWS];
            let block = |p: usize| -> &[F; BLOCK_COLS] {
                b[p * width + c0..p * width + c0 + BLOCK_COLS].try_into().expect("block")
            };
            let edge = |acc: &mut [[F; BLOCK_COLS]; BLOCK_ROWS], p: usize| {
                let bv = block(p);
                for (i, acc_row) in acc.iter_mut().enumerate() {
                    let (s, e) = spans[i];
                    let c = if p >= s && p < e { coef(r0 + i, p) } else { F::zero() };
                    for w in 0..BLOCK_COLS {
                        acc_row[w] = acc_row[w] + c * bv[w];
                    }
                }
            };
            // rows of a full block share the middle of their spans
            let (inner_lo, inner_hi) = if rows == BLOCK_ROWS { (common.0.max(lo), common.1.min(hi)) } else { (hi, hi) };
            if inner_lo < inner_hi {
                for p in lo..inner_lo {
                    edge(&mut acc, p);
                }
                for p in inner_lo..inner_hi {
                    let bv = block(p);
                    let cs: [F; BLOCK_ROWS] = std::array::from_fn(|i| coef(r0 + i, p));
                    for (acc_row, &c) in acc.iter_mut().zip(&cs) {
                        for w in 0..BLOCK_COLS {
                            acc_row[w] = acc_row[w] + c * bv[w];
                        }
                    }
                }
                for p in inner_hi..hi {
                    edge(&mut acc, p);
                }
            } else {
                for p in lo..hi {
                    edge(&mut acc, p);
                }
            }
            for (i, acc_row) in acc.iter().take(rows).enumerate() {
                emit(r0 + i, c0, acc_row);
            }
        }
    }
}

// `out[m×n] += tril(a[m×m]) · b[m×n]`; entries of `a` above the diagonal are ignored.
#[inline(always)]
fn trmm_lower_body<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize) {
    let (bp, width) = pad_cols(b, m, n);
    blocked_product(
        m,
        width,
        &bp,
        |t| (0, t + 1),
        |t, i| a[t * m + i],
        |_| width,
        |t, c0, acc| {
            let end = (c0 + BLOCK_COLS).min(n);
            for (o, &v) in out[t * n + c0..t * n + end].iter_mut().zip(acc) {
                *o = *o + v;
            }
        },
    );
}

// Gradients of `trmm_lower`: `ga += tril(g · bᵀ)`, `gb += tril(a)ᵀ · g`.
#[inline(always)]
fn trmm_lower_grads_body<F: Scalar>(
    a: &[F],
    b: &[F],
    g: &[F],
    ga: Option<&mut [F]>,
    gb: Option<&mut [F]>,
    m: usize,
    n: usize,
) {
    if let Some(ga) = ga {
        // ga[t, i] = g[t, :] · b[i, :] for i ≤ t, as a product with bᵀ
        let width = m.div_ceil(BLOCK_COLS) * BLOCK_COLS;
        let mut btp = vec![F::zero(); n * width];
        for i in 0..m {
            for p in 0..n {
                btp[p * width + i] = b[i * n + p];
            }
        }
        blocked_product(
            m,
            width,
            &btp,
            |_| (0, n),
            |t, p| g[t * n + p],
            |t| t + 1,
            |t, c0, acc| {
                let end = (c0 + BLOCK_COLS).min(t + 1);
                if c0 < end {
                    for (o, &v) in ga[t * m + c0..t * m + end].iter_mut().zip(acc) {
                        *o = *o + v;
                    }
                }
            },
        );
    }
    if let Some(gb) = gb {
        let (gp, width) = pad_cols(g, m, n);
        blocked_product(
            m,
            width,
            &gp,
            |i| (i, m),
            |i, t| a[t * m + i],
            |_| width,
            |i, c0, acc| {
                let end = (c0 + BLOCK_COLS).min(n);
                for (o, &v) in gb[i * n + c0..i * n + end].iter_mut().zip(acc) {
                    *o = *o + v;
                }
            },
        );
    }
}

pub(crate) fn trmm_lower<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn wide<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize) {
            trmm_lower_body(a, b, out, m, n)
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { wide(a, b, out, m, n) };
            return;
        }
    }
    trmm_lower_body(a, b, out, m, n)
}

pub(crate) fn trmm_lower_grads<F: Scalar>(
    a: &[F],
    b: &[F],
    g: &[F],
    ga: Option<&mut [F]>,
    gb: Option<&mut [F]>,
    m: usize,
    n: usize,
) {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn wide<F: Scalar>(
            a: &[F],
            b: &[F],
            g: &[F],
            ga: Option<&mut [F]>,
            gb: Option<&mut [F]>,
            m: usize,
            n: usize,
        ) {
            trmm_lower_grads_body(a, b, g, ga, gb, m, n)
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { wide(a, b, g, ga, gb, m, n) };
            return;
        }
    }
    trmm_lower_grads_body(a, b, g, ga, gb, m, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn triangular_kernels_agree_with_naive_loops() {
        for (m, n) in [(1, 1), (3, 17), (16, 16), (21, 5), (37, 50)] {
            let val = |i: usize, salt: usize| ((i * 7919 + salt * 104729) % 1009) as f64 / 1009.0 - 0.5;
            let a: Vec<f64> = (0..m * m).map(|i| val(i, 1)).collect();
            let b: Vec<f64> = (0..m * n).map(|i| val(i, 2)).collect();
            let g: Vec<f64> = (0..m * n).map(|i| val(i, 3)).collect();
            let mut out = vec![0.0; m * n];
            let mut ga = vec![0.0; m * m];
            let mut gb = vec![0.0; m * n];
            trmm_lower(&a, &b, &mut out, m, n);
            trmm_lower_grads(&a, &b, &g, Some(&mut ga), Some(&mut gb), m, n);
            for t in 0..m {
                for c in 0..n {
                    let fwd: f64 = (0..=t).map(|i| a[t * m + i] * b[i * n + c]).sum();
                    assert!((out[t * n + c] - fwd).abs() < 1e-12);
                    let back: f64 = (t..m).map(|r| a[r * m + t] * g[r * n + c]).sum();
                    assert!((gb[t * n + c] - back).abs() < 1e-12);
                }
                for i in 0..m {
                    let expect = if i <= t { (0..n).map(|p| g[t * n + p] * b[i * n + p]).sum() } else { 0.0 };
                    assert!((ga[t * m + i] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut nn = [0.0f64; 4];
        gemm_nn(&a, &b, &mut nn, 2, 3, 2);
        assert_eq!(nn, [58.0, 64.0, 139.0, 154.0]);

        let bt = Tensor::<f64>::matrix(3, 2, b.to_vec()).unwrap().transpose();
        let mut nt = [0.0f64; 4];
        gemm_nt(&a, bt.data(), &mut nt, 2, 3, 2);
        assert_eq!(nt, nn);

        let at = Tensor::<f64>::matrix(2, 3, a.to_vec()).unwrap().transpose();
        let mut tn = [0.0f64; 4];
        gemm_tn(at.data(), &b, &mut tn, 3, 2, 2);
        assert_eq!(tn, nn);
    }

    #[test]
    fn reverse_rows_is_an_involution() {
        let t = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(t.reverse_rows().row_slice(0), &[5.0, 6.0]);
        assert_eq!(t.reverse_rows().reverse_rows(), t);
    }
}
