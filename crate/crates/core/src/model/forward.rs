use crate::error::{Error, Result};
use crate::tensor::{self, gemm_f64, Tensor};

use super::{names, ModelBundle};

/// Intermediate attention tensors of one head for one input.
#[derive(Debug, Clone)]
pub struct HeadCapture {
    pub q: Tensor,
    pub k: Tensor,
    /// Pre-softmax scores, `attn_scale · Q Kᵀ`.
    pub scores: Tensor,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockCapture {
    pub attn_scale: f64,
    pub heads: Vec<HeadCapture>,
}

#[derive(Debug, Clone)]
pub struct AttentionCapture {
    pub blocks: Vec<BlockCapture>,
}

impl AttentionCapture {
    pub fn head(&self, block: usize, head: usize) -> Result<&HeadCapture> {
        self.blocks
            .get(block)
            .and_then(|b| b.heads.get(head))
            .ok_or_else(|| Error::Dimension(format!("no capture for block {block} head {head}")))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub capture: Option<AttentionCapture>,
}

/// Counts multiply-accumulates as the pass runs.
struct Pass {
    capture: bool,
    macs: u64,
}

impl Pass {
    fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, k) = x.dims2()?;
        self.macs += (n * k * w.shape()[0]) as u64;
        tensor::linear(x, w, b)
    }

    fn scores(&mut self, q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
        let (n, dq) = q.dims2()?;
        self.macs += (n * n * dq) as u64;
        let acc = gemm_f64(n, dq, n, &q.to_f64(), dq, 1, &k.to_f64(), 1, dq);
        let scaled: Vec<f64> = acc.into_iter().map(|v| v * scale).collect();
        Tensor::from_f64(&[n, n], &scaled)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2()?;
        self.macs += (m * k * b.shape()[1]) as u64;
        tensor::matmul(a, b)
    }
}

/// Flattens a `C×H×W` image into one row per patch, ordered channel, row, column.
fn patchify(image: &Tensor, channels: usize, size: usize, patch: usize) -> Result<Tensor> {
    if image.shape() != [channels, size, size] {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match model input [{channels}, {size}, {size}]",
            image.shape()
        )));
    }
    let grid = size / patch;
    let px = image.data();
    let mut rows = Vec::with_capacity(grid * grid * channels * patch * patch);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..channels {
                for dy in 0..patch {
                    let start = (c * size + gy * patch + dy) * size + gx * patch;
                    rows.extend_from_slice(&px[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, channels * patch * patch], rows)
}

fn run(model: &ModelBundle, image: &Tensor, pass: &mut Pass) -> Result<ForwardOutput> {
    let cfg = model.config();
    let d = cfg.embed_dim;
    let active = cfg.active_channels();
    let t = |name: &str| model.get(name);

    let patches = patchify(image, cfg.in_channels, cfg.image_size, cfg.patch_size)?;
    let embedded = pass.linear(&patches, t(names::PATCH_W)?, t(names::PATCH_B)?)?;
    let mut tokens = Vec::with_capacity(cfg.tokens() * d);
    tokens.extend_from_slice(t(names::CLS)?.data());
    tokens.extend_from_slice(embedded.data());
    let mut x = Tensor::new(vec![cfg.tokens(), d], tokens)?.add(t(names::POS)?)?;

    let mut captured = Vec::new();
    for (b, blk) in cfg.blocks.iter().enumerate() {
        let h = tensor::layer_norm(&x, t(&names::norm1_w(b))?, t(&names::norm1_b(b))?, &active)?;
        let n = cfg.tokens();
        let width = blk.heads * blk.v_dim;
        let mut concat = vec![0.0f32; n * width];
        let mut heads = Vec::new();
        for head in 0..blk.heads {
            let q = pass.linear(&h, t(&names::q_w(b, head))?, t(&names::q_b(b, head))?)?;
            let k = pass.linear(&h, t(&names::k_w(b, head))?, t(&names::k_b(b, head))?)?;
            let v = pass.linear(&h, t(&names::v_w(b, head))?, t(&names::v_b(b, head))?)?;
            let scores = pass.scores(&q, &k, blk.attn_scale)?;
            let probs = tensor::softmax_rows(&scores)?;
            let ctx = pass.matmul(&probs, &v)?;
            for (row, src) in ctx.data().chunks_exact(blk.v_dim).enumerate() {
                let dst = row * width + head * blk.v_dim;
                concat[dst..dst + blk.v_dim].copy_from_slice(src);
            }
            if pass.capture {
                heads.push(HeadCapture { q, k, scores, probs });
            }
        }
        let concat = Tensor::new(vec![n, width], concat)?;
        let attn = pass.linear(&concat, t(&names::proj_w(b))?, t(&names::proj_b(b))?)?;
        x = x.add(&attn)?;

        let h = tensor::layer_norm(&x, t(&names::norm2_w(b))?, t(&names::norm2_b(b))?, &active)?;
        let hidden = tensor::gelu(&pass.linear(&h, t(&names::fc1_w(b))?, t(&names::fc1_b(b))?)?);
        let mlp = pass.linear(&hidden, t(&names::fc2_w(b))?, t(&names::fc2_b(b))?)?;
        x = x.add(&mlp)?;
        if !x.is_finite() {
            return Err(Error::Numeric { block: b });
        }
        if pass.capture {
            captured.push(BlockCapture { attn_scale: blk.attn_scale, heads });
        }
    }

    let x = tensor::layer_norm(&x, t(names::NORM_W)?, t(names::NORM_B)?, &active)?;
    let cls = Tensor::new(vec![1, d], x.row(0).to_vec())?;
    let logits = pass
        .linear(&cls, t(names::HEAD_W)?, t(names::HEAD_B)?)?
        .reshape(&[cfg.num_classes])?;
    Ok(ForwardOutput {
        logits,
        capture: pass.capture.then_some(AttentionCapture { blocks: captured }),
    })
}

/// Runs the pre-norm ViT on one `C×H×W` image.
pub fn forward(model: &ModelBundle, image: &Tensor, capture: bool) -> Result<ForwardOutput> {
    run(model, image, &mut Pass { capture, macs: 0 })
}

/// Logits together with the number of multiply-accumulates actually executed.
pub fn forward_counting(model: &ModelBundle, image: &Tensor) -> Result<(Tensor, u64)> {
    let mut pass = Pass { capture: false, macs: 0 };
    let out = run(model, image, &mut pass)?;
    Ok((out.logits, pass.macs))
}

/// The rank-1 term `scale · Q_i K_iᵀ` that filter pair `i` adds to a head's scores.
pub fn qk_filter_contribution(
    capture: &AttentionCapture,
    block: usize,
    head: usize,
    filter: usize,
) -> Result<Tensor> {
    let hc = capture.head(block, head)?;
    let scale = capture.blocks[block].attn_scale;
    let (n, dq) = hc.q.dims2()?;
    if filter >= dq {
        return Err(Error::IndexOutOfRange { index: filter, width: dq });
    }
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        let qr = f64::from(hc.q.at(r, filter)) * scale;
        for c in 0..n {
            out.push(qr * f64::from(hc.k.at(c, filter)));
        }
    }
    Tensor::from_f64(&[n, n], &out)
}

/// Head-averaged, identity-augmented attention chained from the first block to the last.
pub fn attention_rollout(capture: &AttentionCapture) -> Result<Tensor> {
    let first = capture
        .blocks
        .first()
        .and_then(|b| b.heads.first())
        .ok_or_else(|| Error::Dimension("empty attention capture".into()))?;
    let (n, _) = first.probs.dims2()?;
    let mut rollout: Option<Vec<f64>> = None;
    for block in &capture.blocks {
        let mut a = vec![0.0f64; n * n];
        for head in &block.heads {
            for (acc, &p) in a.iter_mut().zip(head.probs.data()) {
                *acc += f64::from(p);
            }
        }
        let heads = block.heads.len() as f64;
        for (i, row) in a.chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v /= heads);
            row[i] += 1.0;
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        rollout = Some(match rollout {
            None => a,
            Some(prev) => gemm_f64(n, n, n, &a, n, 1, &prev, n, 1),
        });
    }
    Tensor::from_f64(&[n, n], &rollout.unwrap_or_default())
}
