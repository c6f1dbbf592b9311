//! Dense row-major `f32` tensors and the handful of kernels the forward pass needs.
//!
//! Storage is always 32-bit; every reduction (matmul, softmax, normalization)
//! accumulates in 64-bit and rounds once on store.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by rounding 64-bit values.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) + f64::from(b)) as f32)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    /// Copies out the entries whose index along `axis` is listed in `indices`, in that order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::IndexOutOfRange { index: bad, width: extent });
        }
        if indices.is_empty() {
            return Err(Error::Dimension(format!("empty selection on axis {axis}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &i in indices {
                let start = base + i * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor::new(shape, data)
    }

    /// Zeroes the entries whose index along `axis` is listed in `indices`.
    pub fn zero_along(&mut self, axis: usize, indices: &[usize]) {
        let extent = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        for o in 0..outer {
            for &i in indices {
                let start = (o * extent + i) * inner;
                self.data[start..start + inner].fill(0.0);
            }
        }
    }
}

/// `C = A·B` over 64-bit operands; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the extents asserted above keep every strided access inside `a` and `b`,
    // and `c` is a fresh dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn round_store(shape: Vec<usize>, acc: Vec<f64>) -> Tensor {
    Tensor { shape, data: acc.into_iter().map(|v| v as f32).collect() }
}

/// `a[M×K] · b[K×P]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm_f64(m, k, p, &a.to_f64(), k, 1, &b.to_f64(), p, 1);
    Ok(round_store(vec![m, p], c))
}

/// `a[M×K] · b[P×K]ᵀ`, the shape of every projection (`W` stores one output filter per row).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (p, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm_f64(m, k, p, &a.to_f64(), k, 1, &b.to_f64(), 1, k);
    Ok(round_store(vec![m, p], c))
}

/// `x[N×in] · w[out×in]ᵀ + bias[out]`, bias added in 64-bit before rounding.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    let (out, k2) = w.dims2()?;
    if k != k2 || bias.numel() != out {
        return Err(Error::Dimension(format!(
            "linear: x {:?}, w {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            bias.shape()
        )));
    }
    let mut c = gemm_f64(n, k, out, &x.to_f64(), k, 1, &w.to_f64(), 1, k);
    for row in c.chunks_exact_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += f64::from(b);
        }
    }
    Ok(round_store(vec![n, out], c))
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, p) = a.dims2()?;
    let mut out = Vec::with_capacity(a.numel());
    for row in a.data().chunks_exact(p) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise layer normalization whose statistics cover only the `active` channels.
///
/// Channels outside `active` are written as zero, so a model whose residual
/// channels were zeroed behaves like one whose channels were removed.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, active: &[usize]) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Dimension(format!(
            "layer_norm: x {:?}, gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    if active.is_empty() {
        return Err(Error::InvalidPlan("layer norm over an empty channel set".into()));
    }
    if let Some(&bad) = active.iter().find(|&&c| c >= d) {
        return Err(Error::IndexOutOfRange { index: bad, width: d });
    }
    let count = active.len() as f64;
    let mut out = vec![0.0f32; x.numel()];
    for (row, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = active.iter().map(|&c| f64::from(row[c])).sum::<f64>() / count;
        let var = active
            .iter()
            .map(|&c| (f64::from(row[c]) - mean).powi(2))
            .sum::<f64>()
            / count;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for &c in active {
            let norm = (f64::from(row[c]) - mean) * inv;
            dst[c] = (norm * f64::from(gamma.data[c]) + f64::from(beta.data[c])) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Exact GELU, `x·Φ(x)` via the error function.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            (0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))) as f32
        })
        .collect();
    Tensor { shape: x.shape.clone(), data }
}
