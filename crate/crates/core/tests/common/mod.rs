//! Straight-line 64-bit importance oracle built from raw weights.
#![allow(dead_code)]

use snp_core::model::{names, ModelBundle};
use snp_core::Tensor;

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn rows64(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    f64s(t).chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn lin(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (w, b) = (rows64(w), f64s(b));
    x.iter().map(|row| w.iter().zip(&b).map(|(wr, bo)| bo + dot(row, wr)).collect()).collect()
}

/// Block-0 normalized tokens.
pub fn block0_input(m: &ModelBundle, img: &Tensor) -> Vec<Vec<f64>> {
    let cfg = m.config();
    let (p, g, c, s) = (cfg.patch_size, cfg.grid(), cfg.in_channels, cfg.image_size);
    let px = f64s(img);
    let mut patches = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::new();
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        v.push(px[(ch * s + gy * p + dy) * s + gx * p + dx]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let emb = lin(&patches, m.get(names::PATCH_W).unwrap(), m.get(names::PATCH_B).unwrap());
    let pos = rows64(m.get(names::POS).unwrap());
    let mut x = vec![f64s(m.get(names::CLS).unwrap())];
    x.extend(emb);
    let (gamma, beta) = (f64s(m.get(&names::norm1_w(0)).unwrap()), f64s(m.get(&names::norm1_b(0)).unwrap()));
    x.iter()
        .zip(&pos)
        .map(|(row, p)| {
            let row: Vec<f64> = row.iter().zip(p).map(|(a, b)| a + b).collect();
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

/// Cyclic two-sided Jacobi; eigenvectors returned by descending eigenvalue.
pub fn sym_eigen(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        let all: f64 = a.iter().flatten().map(|x| x * x).sum();
        if off <= 1e-30 * all {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
                for row in v.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    order.iter().map(|&j| v.iter().map(|row| row[j]).collect()).collect()
}

pub fn oracle_qk(m: &ModelBundle, imgs: &[Tensor], block: usize, head: usize, r: usize) -> Vec<f64> {
    assert_eq!(block, 0);
    let scale = m.config().blocks[0].attn_scale;
    let mut total = vec![0.0; m.config().blocks[0].qk_dim];
    for img in imgs {
        let x = block0_input(m, img);
        let q = lin(&x, m.get(&names::q_w(0, head)).unwrap(), m.get(&names::q_b(0, head)).unwrap());
        let k = lin(&x, m.get(&names::k_w(0, head)).unwrap(), m.get(&names::k_b(0, head)).unwrap());
        let n = q.len();
        let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| scale * dot(&q[i], &k[j])).collect()).collect();
        let aat: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(&a[i], &a[j])).collect()).collect();
        let col = |j: usize| -> Vec<f64> { a.iter().map(|r| r[j]).collect() };
        let ata: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(&col(i), &col(j))).collect()).collect();
        let (us, vs) = (sym_eigen(aat), sym_eigen(ata));
        for (f, acc) in total.iter_mut().enumerate() {
            let c: Vec<f64> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| scale * q[a][f] * k[b][f]).collect();
            for j in 0..r {
                let uv: Vec<f64> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| us[j][a] * vs[j][b]).collect();
                *acc += cos(&c, &uv).abs();
            }
        }
    }
    total.iter().map(|t| t / imgs.len() as f64).collect()
}

pub fn oracle_diversity(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter()
        .map(|a| rows.iter().map(|b| 1.0 - cos(a, b).abs()).sum::<f64>() - (1.0 - cos(a, a).abs()))
        .collect()
}
