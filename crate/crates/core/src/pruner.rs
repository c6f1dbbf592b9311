//! Plans from importance tables, physical slicing, and the zero-mask oracle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_groups, validate_plan, GroupKey, GroupKind, PlanGroup, PrunePlan};
use crate::importance::{head_importance, ImportanceTable};
use crate::model::{names, ModelBundle};
use crate::tensor::Tensor;

/// Ratio overrides for one block; unset fields fall back to the global ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockRatios {
    pub qk: Option<f64>,
    pub v: Option<f64>,
    pub ffn: Option<f64>,
}

/// Fraction of filters to drop from each kind of group, each in `[0, 1)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioSpec {
    pub qk: f64,
    pub v: f64,
    pub ffn: f64,
    pub embed: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_block: BTreeMap<usize, BlockRatios>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<f64>,
}

impl RatioSpec {
    pub fn uniform(qk: f64, v: f64, ffn: f64, embed: f64) -> Self {
        Self { qk, v, ffn, embed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![("qk", self.qk), ("v", self.v), ("ffn", self.ffn), ("embed", self.embed)];
        if let Some(h) = self.heads {
            all.push(("heads", h));
        }
        for o in self.per_block.values() {
            all.extend(o.qk.map(|r| ("qk", r)));
            all.extend(o.v.map(|r| ("v", r)));
            all.extend(o.ffn.map(|r| ("ffn", r)));
        }
        for (name, r) in all {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Argument(format!("{name} ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn ratio_for(&self, key: GroupKey) -> f64 {
        let o = key.block.and_then(|b| self.per_block.get(&b));
        match key.kind {
            GroupKind::QkPair => o.and_then(|o| o.qk).unwrap_or(self.qk),
            GroupKind::Value => o.and_then(|o| o.v).unwrap_or(self.v),
            GroupKind::FfnHidden => o.and_then(|o| o.ffn).unwrap_or(self.ffn),
            GroupKind::EmbedResidual => self.embed,
        }
    }
}

/// `floor(ratio · width)`, tolerant of binary representation error in `ratio`.
pub fn drop_count(ratio: f64, width: usize) -> usize {
    (ratio * width as f64 + 1e-9).floor() as usize
}

/// Indices to keep after dropping the `drop` lowest scores. On equal scores the lower index stays.
pub fn select_keep(scores: &[f64], drop: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut keep: Vec<usize> = order[drop.min(order.len())..].to_vec();
    keep.sort_unstable();
    keep
}

/// Drops the lowest-scoring filters of every group.
pub fn make_plan(table: &ImportanceTable, ratios: &RatioSpec, model: &ModelBundle) -> Result<PrunePlan> {
    ratios.validate()?;
    let fingerprint = model.fingerprint();
    if table.fingerprint != fingerprint {
        return Err(Error::StalePlan { plan: table.fingerprint.clone(), model: fingerprint });
    }
    let groups = build_groups(model.config());
    if table.groups.len() != groups.len() {
        return Err(Error::InvalidPlan(format!(
            "importance table has {} groups, model has {}",
            table.groups.len(),
            groups.len()
        )));
    }
    let mut out = Vec::with_capacity(groups.len());
    for g in &groups {
        let scores = table
            .scores(g.key)
            .ok_or_else(|| Error::InvalidPlan(format!("importance table lacks group {}", g.key)))?;
        if scores.len() != g.width {
            return Err(Error::InvalidPlan(format!(
                "group {} has width {} but {} scores",
                g.key,
                g.width,
                scores.len()
            )));
        }
        let drop = drop_count(ratios.ratio_for(g.key), g.width);
        if drop >= g.width {
            return Err(Error::InvalidPlan(format!("ratio leaves zero filters in group {}", g.key)));
        }
        out.push(PlanGroup {
            kind: g.key.kind,
            block: g.key.block,
            head: g.key.head,
            keep: select_keep(scores, drop),
        });
    }
    Ok(PrunePlan {
        fingerprint,
        criterion: table.criterion.clone(),
        head_keep: None,
        groups: out,
    })
}

fn require_valid(plan: &PrunePlan, model: &ModelBundle) -> Result<()> {
    let violations = validate_plan(plan, model)?;
    if violations.is_empty() {
        return Ok(());
    }
    let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
    Err(Error::InvalidPlan(text.join("; ")))
}

/// Surviving head indices per block after dropping the `floor(ratio·H)` lowest-scoring heads.
pub fn select_heads(head_scores: &[Vec<f64>], ratio: f64) -> Result<Vec<Vec<usize>>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Argument(format!("head ratio {ratio} outside [0, 1)")));
    }
    head_scores
        .iter()
        .enumerate()
        .map(|(b, scores)| {
            let drop = drop_count(ratio, scores.len());
            if drop >= scores.len() {
                return Err(Error::InvalidPlan(format!("all heads of block {b} would be removed")));
            }
            Ok(select_keep(scores, drop))
        })
        .collect()
}

/// Deletes every head not listed in `head_keep`, renumbering survivors from 0.
pub fn remove_heads(model: &ModelBundle, head_keep: &[Vec<usize>]) -> Result<ModelBundle> {
    let config = crate::graph::config_after_heads(model.config(), head_keep)?;
    let (_, mut tensors) = model.clone().into_parts();
    for (b, keep) in head_keep.iter().enumerate() {
        let blk = &model.config().blocks[b];
        let per_head = [names::q_w, names::q_b, names::k_w, names::k_b, names::v_w, names::v_b];
        let mut moved = Vec::new();
        for h in 0..blk.heads {
            for name_of in per_head {
                let t = tensors.remove(&name_of(b, h)).expect("validated model");
                if let Some(new_h) = keep.iter().position(|&k| k == h) {
                    moved.push((name_of(b, new_h), t));
                }
            }
        }
        tensors.extend(moved);
        let cols: Vec<usize> = keep
            .iter()
            .flat_map(|&h| h * blk.v_dim..(h + 1) * blk.v_dim)
            .collect();
        let proj = tensors[&names::proj_w(b)].select(1, &cols)?;
        tensors.insert(names::proj_w(b), proj);
    }
    ModelBundle::new(config, tensors)
}

/// Removes the `floor(ratio·H)` lowest-scoring heads of each block.
pub fn head_prune(model: &ModelBundle, head_scores: &[Vec<f64>], ratio: f64) -> Result<ModelBundle> {
    if head_scores.len() != model.config().depth() {
        return Err(Error::Argument(format!(
            "head scores cover {} blocks, model has {}",
            head_scores.len(),
            model.config().depth()
        )));
    }
    remove_heads(model, &select_heads(head_scores, ratio)?)
}

/// Head removal by value-redundancy head scores, then neuron-level plans on the surviving heads.
/// The returned plan applies to `model` itself.
pub fn make_plan_with_heads(
    table: &ImportanceTable,
    ratios: &RatioSpec,
    model: &ModelBundle,
) -> Result<PrunePlan> {
    let Some(head_ratio) = ratios.heads else {
        return make_plan(table, ratios, model);
    };
    let scores = (0..model.config().depth())
        .map(|b| head_importance(model, b))
        .collect::<Result<Vec<_>>>()?;
    let head_keep = select_heads(&scores, head_ratio)?;
    let reduced = remove_heads(model, &head_keep)?;
    let reduced_table = table.after_head_prune(&head_keep, &reduced.fingerprint())?;
    let mut plan = make_plan(&reduced_table, ratios, &reduced)?;
    plan.fingerprint = model.fingerprint();
    plan.head_keep = Some(head_keep);
    Ok(plan)
}

/// Physically removes every dropped filter; attention scales stay as they were.
pub fn apply_plan(model: &ModelBundle, plan: &PrunePlan) -> Result<ModelBundle> {
    require_valid(plan, model)?;
    let base = match &plan.head_keep {
        Some(keep) => remove_heads(model, keep)?,
        None => model.clone(),
    };
    let groups = build_groups(base.config());
    let mut segments: BTreeMap<(String, usize), Vec<(usize, &[usize])>> = BTreeMap::new();
    for g in &groups {
        let keep = &plan.group(g.key).expect("validated plan covers every group").keep;
        for m in &g.members {
            segments
                .entry((m.tensor.clone(), m.axis))
                .or_default()
                .push((m.offset, keep.as_slice()));
        }
    }

    let (mut config, mut tensors) = base.clone().into_parts();
    for ((name, axis), mut segs) in segments {
        segs.sort_by_key(|s| s.0);
        let indices: Vec<usize> = segs
            .iter()
            .flat_map(|(offset, keep)| keep.iter().map(move |&i| offset + i))
            .collect();
        let sliced = tensors[&name].select(axis, &indices)?;
        tensors.insert(name, sliced);
    }

    let keep_len = |key: GroupKey| plan.group(key).map_or(0, |g| g.keep.len());
    for (b, blk) in config.blocks.iter_mut().enumerate() {
        blk.qk_dim = keep_len(GroupKey::qk(b, 0));
        blk.v_dim = keep_len(GroupKey::value(b, 0));
        blk.ffn_hidden = keep_len(GroupKey::ffn(b));
    }
    let embed_keep = &plan.group(GroupKey::embed()).expect("validated").keep;
    config.embed_dim = embed_keep.len();
    if let Some(active) = &config.residual_active {
        let remapped: Vec<usize> = embed_keep
            .iter()
            .enumerate()
            .filter(|(_, c)| active.contains(c))
            .map(|(i, _)| i)
            .collect();
        config.residual_active = Some(remapped);
    }
    ModelBundle::new(config, tensors)
}

fn dropped(keep: &[usize], width: usize) -> Vec<usize> {
    (0..width).filter(|i| keep.binary_search(i).is_err()).collect()
}

/// Zero-mask simulation of `plan` at the original shapes.
///
/// Dropped filters have their producing rows and biases zeroed; a dropped
/// residual channel is additionally excluded from every layer norm. Removed
/// heads have their query/key/value weights and biases zeroed.
pub fn apply_mask(model: &ModelBundle, plan: &PrunePlan) -> Result<ModelBundle> {
    require_valid(plan, model)?;
    let (mut config, mut tensors) = model.clone().into_parts();
    let original_groups = build_groups(&config);
    let head_keep = plan.head_keep.clone();

    if let Some(keep) = &head_keep {
        for (b, kept) in keep.iter().enumerate() {
            for h in dropped(kept, config.blocks[b].heads) {
                let per_head = [names::q_w, names::q_b, names::k_w, names::k_b, names::v_w, names::v_b];
                for name_of in per_head {
                    let t: &mut Tensor = tensors.get_mut(&name_of(b, h)).expect("validated model");
                    t.data_mut().fill(0.0);
                }
            }
        }
    }

    for pg in &plan.groups {
        // Map head indices of the head-pruned layout back to the original heads.
        let mut key = pg.key();
        if let (Some(keep), Some(b), Some(h)) = (&head_keep, key.block, key.head) {
            key.head = Some(keep[b][h]);
        }
        let group = original_groups
            .iter()
            .find(|g| g.key == key)
            .ok_or_else(|| Error::InvalidPlan(format!("group {key} not in model")))?;
        let gone = dropped(&pg.keep, group.width);
        if gone.is_empty() {
            continue;
        }
        for m in group.members.iter().filter(|m| m.role.is_producer()) {
            let idx: Vec<usize> = gone.iter().map(|&i| m.offset + i).collect();
            tensors.get_mut(&m.tensor).expect("validated model").zero_along(m.axis, &idx);
        }
        if key.kind == GroupKind::EmbedResidual {
            let active = match &config.residual_active {
                Some(prev) => pg.keep.iter().copied().filter(|c| prev.contains(c)).collect(),
                None => pg.keep.clone(),
            };
            config.residual_active = Some(active);
        }
    }
    ModelBundle::new(config, tensors)
}
