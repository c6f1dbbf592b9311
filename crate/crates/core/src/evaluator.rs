//! Cost accounting, attention preservation, latency and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::canonical_json;
use crate::linalg::cosine_flat;
use crate::model::{forward, synth_calibration, AttentionCapture, ModelBundle, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

/// Elementwise work outside the multiply-accumulate totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxOps {
    pub softmax: u64,
    pub layer_norm: u64,
    pub gelu: u64,
}

/// One multiply-accumulate counts as one FLOP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub breakdown: Vec<CostEntry>,
    pub aux: AuxOps,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<RatioReport>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.breakdown.iter().map(|e| e.name.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(out, "{:<width$}  {:>15}  {:>12}", "layer", "flops", "params");
        for e in &self.breakdown {
            let _ = writeln!(out, "{:<width$}  {:>15}  {:>12}", e.name, e.flops, e.params);
        }
        let _ = writeln!(out, "{:<width$}  {:>15}  {:>12}", "total", self.flops, self.params);
        let _ = writeln!(
            out,
            "{:.3} GFLOPs, {:.3} M params (aux: softmax {}, layer_norm {}, gelu {})",
            self.gflops(),
            self.mparams(),
            self.aux.softmax,
            self.aux.layer_norm,
            self.aux.gelu
        );
        out
    }
}

/// Closed-form FLOPs and parameter counts for `config`.
pub fn count_costs(config: &ModelConfig) -> CostReport {
    let shapes = config.expected_shapes();
    let params_of = |pred: &dyn Fn(&str) -> bool| -> u64 {
        shapes
            .iter()
            .filter(|(name, _)| pred(name))
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    };
    let n = config.tokens() as u64;
    let d = config.embed_dim as u64;
    let patches = config.num_patches() as u64;
    let ln_width = config.active_channels().len() as u64;

    let mut breakdown = vec![
        CostEntry {
            name: "patch_embed".into(),
            flops: patches * config.patch_dim() as u64 * d,
            params: params_of(&|s| s.starts_with("patch_embed.")),
        },
        CostEntry {
            name: "embeddings".into(),
            flops: 0,
            params: params_of(&|s| s == "cls_token" || s == "pos_embed"),
        },
    ];
    let mut aux = AuxOps::default();
    for (b, blk) in config.blocks.iter().enumerate() {
        let (h, dq, dv, ffn) =
            (blk.heads as u64, blk.qk_dim as u64, blk.v_dim as u64, blk.ffn_hidden as u64);
        let attn = h * (n * d * (2 * dq + dv) + n * n * dq + n * n * dv) + n * (h * dv) * d;
        let prefix = format!("blocks.{b}.");
        breakdown.push(CostEntry {
            name: format!("blocks.{b}.attn"),
            flops: attn,
            params: params_of(&|s| {
                s.strip_prefix(&prefix).is_some_and(|r| r.starts_with("attn.") || r.starts_with("norm1."))
            }),
        });
        breakdown.push(CostEntry {
            name: format!("blocks.{b}.mlp"),
            flops: 2 * n * d * ffn,
            params: params_of(&|s| {
                s.strip_prefix(&prefix).is_some_and(|r| r.starts_with("mlp.") || r.starts_with("norm2."))
            }),
        });
        aux.softmax += h * n * n;
        aux.layer_norm += 2 * n * ln_width;
        aux.gelu += n * ffn;
    }
    aux.layer_norm += ln_width;
    breakdown.push(CostEntry {
        name: "head".into(),
        flops: d * config.num_classes as u64,
        params: params_of(&|s| s.starts_with("head.") || s.starts_with("norm.")),
    });
    CostReport {
        flops: breakdown.iter().map(|e| e.flops).sum(),
        params: breakdown.iter().map(|e| e.params).sum(),
        breakdown,
        aux,
        ratios: None,
    }
}

/// `count_costs(pruned)` with per-group ratios against `original` attached.
pub fn count_costs_against(pruned: &ModelConfig, original: &ModelConfig) -> Result<CostReport> {
    let mut report = count_costs(pruned);
    report.ratios = Some(ratio_report(original, pruned)?);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRatio {
    pub block: usize,
    pub heads: f64,
    pub qk: f64,
    pub v: f64,
    pub ffn: f64,
}

/// Fractions of neurons removed. Head-level ratios count whole removed heads as removed neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub blocks: Vec<BlockRatio>,
    pub embed: f64,
    pub msa: f64,
    pub ffn: f64,
    pub overall: f64,
}

impl RatioReport {
    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>5}  {:>7}  {:>7}  {:>7}  {:>7}\n", "block", "heads", "qk", "v", "ffn");
        for r in &self.blocks {
            let _ = writeln!(
                out,
                "{:>5}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}",
                r.block, r.heads, r.qk, r.v, r.ffn
            );
        }
        let _ = writeln!(
            out,
            "embed {:.4}  msa {:.4}  ffn {:.4}  overall {:.4}",
            self.embed, self.msa, self.ffn, self.overall
        );
        out
    }
}

fn removed(kept: usize, total: usize) -> f64 {
    1.0 - kept as f64 / total as f64
}

pub fn ratio_report(original: &ModelConfig, pruned: &ModelConfig) -> Result<RatioReport> {
    if original.depth() != pruned.depth() {
        return Err(Error::Dimension(format!(
            "depth {} vs {}",
            original.depth(),
            pruned.depth()
        )));
    }
    let wider = |what: &str, a: usize, b: usize| -> Result<()> {
        if b > a {
            return Err(Error::Dimension(format!("pruned {what} {b} exceeds original {a}")));
        }
        Ok(())
    };
    wider("embed_dim", original.embed_dim, pruned.embed_dim)?;
    let mut blocks = Vec::new();
    let (mut msa_kept, mut msa_total, mut ffn_kept, mut ffn_total) = (0usize, 0usize, 0usize, 0usize);
    for (b, (o, p)) in original.blocks.iter().zip(&pruned.blocks).enumerate() {
        wider("heads", o.heads, p.heads)?;
        wider("qk_dim", o.qk_dim, p.qk_dim)?;
        wider("v_dim", o.v_dim, p.v_dim)?;
        wider("ffn_hidden", o.ffn_hidden, p.ffn_hidden)?;
        let qk = (p.heads * p.qk_dim, o.heads * o.qk_dim);
        let v = (p.heads * p.v_dim, o.heads * o.v_dim);
        blocks.push(BlockRatio {
            block: b,
            heads: removed(p.heads, o.heads),
            qk: removed(qk.0, qk.1),
            v: removed(v.0, v.1),
            ffn: removed(p.ffn_hidden, o.ffn_hidden),
        });
        msa_kept += 2 * qk.0 + v.0;
        msa_total += 2 * qk.1 + v.1;
        ffn_kept += p.ffn_hidden;
        ffn_total += o.ffn_hidden;
    }
    Ok(RatioReport {
        blocks,
        embed: removed(pruned.embed_dim, original.embed_dim),
        msa: removed(msa_kept, msa_total),
        ffn: removed(ffn_kept, ffn_total),
        overall: removed(
            msa_kept + ffn_kept + pruned.embed_dim,
            msa_total + ffn_total + original.embed_dim,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// `per_head[b][h]`, averaged over images.
    pub per_head: Vec<Vec<f64>>,
    pub mean: f64,
}

/// Mean |cosine| between post-softmax maps of matching heads, image by image.
pub fn attention_similarity(orig: &[AttentionCapture], other: &[AttentionCapture]) -> Result<SimilarityReport> {
    if orig.len() != other.len() || orig.is_empty() {
        return Err(Error::Dimension(format!(
            "capture counts {} and {} must match and be non-zero",
            orig.len(),
            other.len()
        )));
    }
    let mut per_head: Vec<Vec<f64>> = Vec::new();
    for (a, b) in orig.iter().zip(other) {
        if a.blocks.len() != b.blocks.len() {
            return Err(Error::Dimension(format!(
                "block counts {} and {} differ",
                a.blocks.len(),
                b.blocks.len()
            )));
        }
        if per_head.is_empty() {
            per_head = a.blocks.iter().map(|blk| vec![0.0; blk.heads.len()]).collect();
        }
        for (bi, (ba, bb)) in a.blocks.iter().zip(&b.blocks).enumerate() {
            if ba.heads.len() != bb.heads.len() || ba.heads.len() != per_head[bi].len() {
                return Err(Error::Dimension(format!("head counts differ in block {bi}")));
            }
            for (hi, (ha, hb)) in ba.heads.iter().zip(&bb.heads).enumerate() {
                if ha.probs.shape() != hb.probs.shape() {
                    return Err(Error::Dimension(format!(
                        "attention maps {:?} and {:?} differ in block {bi} head {hi}",
                        ha.probs.shape(),
                        hb.probs.shape()
                    )));
                }
                per_head[bi][hi] += cosine_flat(&ha.probs, &hb.probs)?.abs();
            }
        }
    }
    let images = orig.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for row in &mut per_head {
        for v in row.iter_mut() {
            *v /= images;
            total += *v;
            count += 1;
        }
    }
    Ok(SimilarityReport { per_head, mean: total / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub runs: usize,
    pub batch: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
}

impl BenchReport {
    pub fn from_samples(warmup: usize, batch: usize, samples_ms: Vec<f64>) -> Self {
        let runs = samples_ms.len();
        let mean = samples_ms.iter().sum::<f64>() / runs as f64;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / runs as f64;
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if runs % 2 == 1 {
            sorted[runs / 2]
        } else {
            (sorted[runs / 2 - 1] + sorted[runs / 2]) / 2.0
        };
        Self { warmup, runs, batch, samples_ms, mean_ms: mean, median_ms: median, stddev_ms: var.sqrt() }
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn to_text(&self) -> String {
        format!(
            "runs {}  warmup {}  batch {}\nmean {:.3} ms  median {:.3} ms  stddev {:.3} ms\n",
            self.runs, self.warmup, self.batch, self.mean_ms, self.median_ms, self.stddev_ms
        )
    }
}

/// Times single-threaded forward passes over a fixed random batch.
///
/// The caller must keep other work off the machine while this runs.
pub fn bench(model: &ModelBundle, runs: usize, warmup: usize, batch: usize) -> Result<BenchReport> {
    if runs == 0 || batch == 0 {
        return Err(Error::Argument("bench needs at least one run and one image".into()));
    }
    let cfg = model.config();
    let images = synth_calibration(batch, cfg.in_channels, cfg.image_size, cfg.image_size, 0);
    let pass = || -> Result<()> {
        for img in &images.images {
            std::hint::black_box(forward(model, img, false)?);
        }
        Ok(())
    };
    for _ in 0..warmup {
        pass()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        pass()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport::from_samples(warmup, batch, samples))
}

/// Class-token rollout row over the patches, as a `grid×grid` map.
pub fn rollout_map(rollout: &Tensor, grid: usize) -> Result<Tensor> {
    let (n, _) = rollout.dims2()?;
    if n != grid * grid + 1 {
        return Err(Error::Dimension(format!("rollout of {n} tokens does not fit a {grid}×{grid} grid")));
    }
    Tensor::new(vec![grid, grid], rollout.row(0)[1..].to_vec())
}

/// 8-bit binary PGM with min-max normalization; a constant map renders black.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = f64::from(hi) - f64::from(lo);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((f64::from(v) - f64::from(lo)) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// One line per row, comma separated, shortest round-trip float text.
pub fn csv_string(map: &Tensor) -> Result<String> {
    let (_, w) = map.dims2()?;
    let mut out = String::new();
    for row in map.data().chunks_exact(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Breakdown entries keyed by name.
pub fn breakdown_map(report: &CostReport) -> BTreeMap<&str, &CostEntry> {
    report.breakdown.iter().map(|e| (e.name.as_str(), e)).collect()
}
