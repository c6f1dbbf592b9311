//! Filter importance scores.
//!
//! Query/key pairs are scored by how strongly their rank-1 share of the
//! attention scores lines up with the leading singular components of those
//! scores. Value filters are scored by their dissimilarity to every value
//! filter in the block, across heads; FFN and residual-stream filters use the
//! same dissimilarity within a layer, summed over all residual producers.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_groups, canonical_json, GroupKey, GroupKind};
use crate::linalg::{svd64, Svd64};
use crate::model::{forward, names, AttentionCapture, ModelBundle};
use crate::tensor::{gemm_f64, Tensor};

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Snp,
    L2,
    Gm,
    Reverse,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Snp => "snp",
            Criterion::L2 => "l2",
            Criterion::Gm => "gm",
            Criterion::Reverse => "reverse",
        }
    }

    /// Whether the criterion needs attention captures from calibration images.
    pub fn needs_captures(self) -> bool {
        matches!(self, Criterion::Snp | Criterion::Reverse)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snp" => Ok(Criterion::Snp),
            "l2" => Ok(Criterion::L2),
            "gm" => Ok(Criterion::Gm),
            "reverse" | "reverse_snp" => Ok(Criterion::Reverse),
            other => Err(Error::Argument(format!(
                "unknown criterion {other:?}; expected snp, l2, gm or reverse"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGroup {
    pub kind: GroupKind,
    pub block: Option<usize>,
    pub head: Option<usize>,
    pub scores: Vec<f64>,
}

impl ScoreGroup {
    pub fn key(&self) -> GroupKey {
        GroupKey { kind: self.kind, block: self.block, head: self.head }
    }

    fn new(key: GroupKey, scores: Vec<f64>) -> Self {
        Self { kind: key.kind, block: key.block, head: key.head, scores }
    }
}

/// One score per filter of every group, plus how the scores were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub fingerprint: String,
    pub criterion: String,
    /// Singular components compared against; only set for attention-based criteria.
    pub r: Option<usize>,
    pub images: usize,
    pub reduction: String,
    pub groups: Vec<ScoreGroup>,
}

impl ImportanceTable {
    pub fn scores(&self, key: GroupKey) -> Option<&[f64]> {
        self.groups.iter().find(|g| g.key() == key).map(|g| g.scores.as_slice())
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Re-keys head-level groups after whole heads were removed.
    /// `head_keep[b]` lists the surviving original head indices of block `b`.
    pub fn after_head_prune(&self, head_keep: &[Vec<usize>], fingerprint: &str) -> Result<Self> {
        let mut groups = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            match (g.kind, g.block, g.head) {
                (GroupKind::QkPair | GroupKind::Value, Some(b), Some(h)) => {
                    let keep = head_keep.get(b).ok_or_else(|| {
                        Error::InvalidPlan(format!("no head keep-list for block {b}"))
                    })?;
                    if let Some(new_h) = keep.iter().position(|&k| k == h) {
                        groups.push(ScoreGroup { head: Some(new_h), ..g.clone() });
                    }
                }
                _ => groups.push(g.clone()),
            }
        }
        Ok(Self { fingerprint: fingerprint.to_string(), groups, ..self.clone() })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    let (rows, _) = t.dims2().expect("capture tensors are matrices");
    (0..rows).map(|r| f64::from(t.at(r, c))).collect()
}

/// Per-filter scores of one head for one calibration image.
fn qk_scores_single(capture: &AttentionCapture, block: usize, head: usize, r: usize) -> Result<Vec<f64>> {
    let hc = capture.head(block, head)?;
    let (n, dq) = hc.q.dims2()?;
    if r == 0 || r > n {
        return Err(Error::Argument(format!("rank budget r = {r} outside [1, {n}]")));
    }
    let scale = capture.blocks[block].attn_scale;
    let Svd64 { u, s, v } = svd64(&hc.scores.to_f64(), n)?;
    let mut out = Vec::with_capacity(dq);
    for i in 0..dq {
        let qi = column(&hc.q, i);
        let ki = column(&hc.k, i);
        // ‖scale·q kᵀ‖_F = scale·‖q‖·‖k‖
        let contribution_norm = scale * norm(&qi) * norm(&ki);
        if contribution_norm < ZERO_NORM {
            out.push(0.0);
            continue;
        }
        let mut total = 0.0;
        for j in 0..r {
            let component_norm = s[j] * norm(&u[j]) * norm(&v[j]);
            if component_norm < ZERO_NORM {
                continue;
            }
            // ⟨q kᵀ, u vᵀ⟩_F = (q·u)(k·v)
            let qu: f64 = qi.iter().zip(&u[j]).map(|(a, b)| a * b).sum();
            let kv: f64 = ki.iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            let inner = scale * s[j] * qu * kv;
            total += (inner / (contribution_norm * component_norm)).abs().min(1.0);
        }
        out.push(total);
    }
    Ok(out)
}

/// Attention-preservation score of every query/key filter pair of one head,
/// averaged over the captures in order.
pub fn qk_importance(captures: &[AttentionCapture], block: usize, head: usize, r: usize) -> Result<Vec<f64>> {
    if captures.is_empty() {
        return Err(Error::Argument("empty calibration set".into()));
    }
    let per_image = captures
        .iter()
        .map(|c| qk_scores_single(c, block, head, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_in_order(&per_image))
}

fn mean_in_order(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// Σ over the other rows of (1 − |cos(row, other)|). The self term is exactly 0.
fn dissimilarity(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut unit = vec![0.0; n * d];
    let mut live = vec![false; n];
    for (i, row) in rows.iter().enumerate() {
        let len = norm(row);
        if len >= ZERO_NORM {
            live[i] = true;
            for (dst, x) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
                *dst = x / len;
            }
        }
    }
    let gram = gemm_f64(n, d, n, &unit, d, 1, &unit, 1, d);
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&l| l != i)
                .map(|l| {
                    let c = if live[i] && live[l] { gram[i * n + l].abs().min(1.0) } else { 0.0 };
                    1.0 - c
                })
                .sum()
        })
        .collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2().expect("weights are matrices");
    (0..r).map(|i| t.row(i).iter().map(|&x| f64::from(x)).collect()).collect()
}

/// Inter-head redundancy scores of every value filter in `block`, one vector per head.
pub fn value_importance(model: &ModelBundle, block: usize) -> Result<Vec<Vec<f64>>> {
    let blk = model
        .config()
        .blocks
        .get(block)
        .ok_or_else(|| Error::Argument(format!("block {block} out of range")))?;
    let mut rows = Vec::with_capacity(blk.heads * blk.v_dim);
    for h in 0..blk.heads {
        rows.extend(rows_of(model.get(&names::v_w(block, h))?));
    }
    let scores = dissimilarity(&rows);
    Ok(scores.chunks(blk.v_dim).map(<[f64]>::to_vec).collect())
}

/// Dissimilarity of each output filter (row) of `w` to the other filters of the same layer.
pub fn layer_diversity_importance(w: &Tensor) -> Result<Vec<f64>> {
    w.dims2()?;
    Ok(dissimilarity(&rows_of(w)))
}

/// Element-wise sum of per-producer residual scores.
pub fn residual_aggregate(per_layer: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_layer
        .first()
        .ok_or_else(|| Error::Argument("no residual producers".into()))?;
    let mut acc = vec![0.0; first.len()];
    for (i, layer) in per_layer.iter().enumerate() {
        if layer.len() != acc.len() {
            return Err(Error::Dimension(format!(
                "producer {i} has {} scores, expected {}",
                layer.len(),
                acc.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(layer) {
            *a += v;
        }
    }
    Ok(acc)
}

/// Weight tensors whose rows write into the residual stream.
pub fn residual_producers(model: &ModelBundle) -> Vec<String> {
    let mut out = vec![names::PATCH_W.to_string()];
    for b in 0..model.config().depth() {
        out.push(names::proj_w(b));
        out.push(names::fc2_w(b));
    }
    out
}

/// Sum of the value-filter scores of each head.
pub fn head_importance(model: &ModelBundle, block: usize) -> Result<Vec<f64>> {
    Ok(value_importance(model, block)?.iter().map(|h| h.iter().sum()).collect())
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    rows_of(t).iter().map(|r| norm(r)).collect()
}

fn add(a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.into_iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Runs every calibration image through the model and scores every group under `criterion`.
///
/// `r` defaults to the token count. Per-image work may run on the rayon pool;
/// the image mean is always reduced in input order.
pub fn importance_table(
    model: &ModelBundle,
    images: &[Tensor],
    criterion: Criterion,
    r: Option<usize>,
) -> Result<ImportanceTable> {
    let cfg = model.config();
    let tokens = cfg.tokens();
    let rank = r.unwrap_or(tokens);
    if rank == 0 || rank > tokens {
        return Err(Error::Argument(format!("rank budget r = {rank} outside [1, {tokens}]")));
    }
    let groups = build_groups(cfg);

    let qk_keys: Vec<GroupKey> = groups
        .iter()
        .filter(|g| g.key.kind == GroupKind::QkPair)
        .map(|g| g.key)
        .collect();
    let attention_scores: Option<Vec<Vec<f64>>> = if criterion.needs_captures() {
        if images.is_empty() {
            return Err(Error::Argument("empty calibration set".into()));
        }
        let per_image = images
            .par_iter()
            .map(|img| {
                let capture = forward(model, img, true)?.capture.expect("capture requested");
                qk_keys
                    .iter()
                    .map(|k| qk_scores_single(&capture, k.block.unwrap(), k.head.unwrap(), rank))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Some(
            (0..qk_keys.len())
                .map(|g| {
                    let rows: Vec<Vec<f64>> = per_image.iter().map(|img| img[g].clone()).collect();
                    mean_in_order(&rows)
                })
                .collect(),
        )
    } else {
        None
    };

    let mut value_cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; cfg.depth()];
    let mut out = Vec::with_capacity(groups.len());
    for group in &groups {
        let key = group.key;
        let scores = match key.kind {
            GroupKind::QkPair => {
                let (b, h) = (key.block.unwrap(), key.head.unwrap());
                let q = model.get(&names::q_w(b, h))?;
                let k = model.get(&names::k_w(b, h))?;
                match criterion {
                    Criterion::Snp | Criterion::Reverse => {
                        let idx = qk_keys.iter().position(|&x| x == key).expect("qk key listed");
                        let s = attention_scores.as_ref().expect("captures computed")[idx].clone();
                        if criterion == Criterion::Reverse {
                            s.into_iter().map(|x| -x).collect()
                        } else {
                            s
                        }
                    }
                    Criterion::L2 => add(row_norms(q), row_norms(k)),
                    Criterion::Gm => add(layer_diversity_importance(q)?, layer_diversity_importance(k)?),
                }
            }
            GroupKind::Value => {
                let (b, h) = (key.block.unwrap(), key.head.unwrap());
                let v = model.get(&names::v_w(b, h))?;
                match criterion {
                    Criterion::Snp | Criterion::Reverse => {
                        if value_cache[b].is_none() {
                            value_cache[b] = Some(value_importance(model, b)?);
                        }
                        value_cache[b].as_ref().unwrap()[h].clone()
                    }
                    Criterion::L2 => row_norms(v),
                    Criterion::Gm => layer_diversity_importance(v)?,
                }
            }
            GroupKind::FfnHidden => {
                let fc1 = model.get(&names::fc1_w(key.block.unwrap()))?;
                match criterion {
                    Criterion::L2 => row_norms(fc1),
                    _ => layer_diversity_importance(fc1)?,
                }
            }
            GroupKind::EmbedResidual => {
                let per_layer = residual_producers(model)
                    .iter()
                    .map(|name| {
                        let w = model.get(name)?;
                        match criterion {
                            Criterion::L2 => Ok(row_norms(w)),
                            _ => layer_diversity_importance(w),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                residual_aggregate(&per_layer)?
            }
        };
        out.push(ScoreGroup::new(key, scores));
    }

    Ok(ImportanceTable {
        fingerprint: model.fingerprint(),
        criterion: criterion.name().to_string(),
        r: criterion.needs_captures().then_some(rank),
        images: if criterion.needs_captures() { images.len() } else { 0 },
        reduction: "mean".into(),
        groups: out,
    })
}
