//! Square SVD by one-sided (Hestenes) Jacobi rotations, plus the similarity
//! measures the importance criteria are built from.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 60;
const ROTATION_TOL: f64 = 1e-12;
const ZERO_NORM: f64 = 1e-12;

/// Singular triplets of a square matrix. Column `j` of `u`/`v` pairs with `s[j]`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f32>,
    pub v: Tensor,
}

/// 64-bit SVD with singular vectors stored as columns (`u[j]` is the j-th left vector).
#[derive(Debug, Clone)]
pub struct Svd64 {
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub v: Vec<Vec<f64>>,
}

impl Svd64 {
    pub fn n(&self) -> usize {
        self.s.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// SVD of a row-major `n×n` matrix.
pub fn svd64(a: &[f64], n: usize) -> Result<Svd64> {
    if n == 0 || a.len() != n * n {
        return Err(Error::Dimension(format!(
            "svd expects a non-empty square matrix, got {} values for n = {n}",
            a.len()
        )));
    }
    // Columns of A, orthogonalized in place; V accumulates the rotations.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        // Squared column norms, refreshed every sweep and updated in closed form per rotation.
        let mut sq: Vec<f64> = w.iter().map(|col| dot(col, col)).collect();
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (sq[p], sq[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
                sq[p] = (alpha - t * gamma).max(0.0);
                sq[q] = beta + t * gamma;
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = w.iter().map(|col| norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));

    let s: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let mut v: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    let null_floor = s[0] * n as f64 * f64::EPSILON;

    let mut u: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (rank, &j) in order.iter().enumerate() {
        if s[rank] > null_floor && s[rank] > 0.0 {
            u.push(w[j].iter().map(|x| x / s[rank]).collect());
        } else {
            u.push(vec![0.0; n]);
            pending.push(rank);
        }
    }
    complete_basis(&mut u, &pending);

    for j in 0..n {
        let lead = u[j]
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &x)| if x.abs() > best.1.abs() { (i, x) } else { best });
        if lead.1 < 0.0 {
            u[j].iter_mut().for_each(|x| *x = -*x);
            v[j].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(Svd64 { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the columns listed in `pending` with unit vectors orthogonal to every other column.
fn complete_basis(u: &mut [Vec<f64>], pending: &[usize]) {
    let n = u.len();
    let mut filled: Vec<bool> = (0..n).map(|j| !pending.contains(&j)).collect();
    let mut candidate = 0;
    for &j in pending {
        while candidate < n {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against everything already in the basis.
            for _ in 0..2 {
                for (k, col) in u.iter().enumerate() {
                    if filled[k] {
                        let proj = dot(&e, col);
                        e.iter_mut().zip(col).for_each(|(x, c)| *x -= proj * c);
                    }
                }
            }
            let len = norm(&e);
            if len > 0.5 {
                u[j] = e.iter().map(|x| x / len).collect();
                filled[j] = true;
                break;
            }
        }
    }
}

pub fn svd(a: &Tensor) -> Result<SvdResult> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(Error::Dimension(format!("svd expects a square matrix, got {:?}", a.shape())));
    }
    let dec = svd64(&a.to_f64(), r)?;
    let to_tensor = |cols: &[Vec<f64>]| {
        let mut data = vec![0.0f32; r * r];
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                data[i * r + j] = x as f32;
            }
        }
        Tensor::new(vec![r, r], data)
    };
    Ok(SvdResult {
        u: to_tensor(&dec.u)?,
        s: dec.s.iter().map(|&x| x as f32).collect(),
        v: to_tensor(&dec.v)?,
    })
}

/// Cosine between two equally sized vectors; 0 when either has (near) zero norm.
pub fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Frobenius inner product over the product of Frobenius norms.
pub fn cosine_flat(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "cosine_flat: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(cosine64(&a.to_f64(), &b.to_f64()))
}

/// `sigma · u vᵀ`.
pub fn rank1(sigma: f64, u: &[f32], v: &[f32]) -> Tensor {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &ui in u {
        for &vj in v {
            data.push((sigma * f64::from(ui) * f64::from(vj)) as f32);
        }
    }
    Tensor::new(vec![u.len(), v.len()], data).expect("rank1 of empty vectors")
}
