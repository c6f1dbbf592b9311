//! Prunable groups of a ViT and the coupling constraints between them.
//!
//! A group is a set of tensor axes that must lose the same filter indices.
//! Query/key rows of one head form a group, as do value rows of one head with
//! the matching out-projection columns, the FFN hidden units of one block, and
//! every axis that touches the shared residual stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, ModelBundle, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroupKind {
    QkPair,
    Value,
    FfnHidden,
    EmbedResidual,
}

/// Identifies one group: `block`/`head` are present where the kind needs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub kind: GroupKind,
    pub block: Option<usize>,
    pub head: Option<usize>,
}

impl GroupKey {
    pub fn qk(block: usize, head: usize) -> Self {
        Self { kind: GroupKind::QkPair, block: Some(block), head: Some(head) }
    }
    pub fn value(block: usize, head: usize) -> Self {
        Self { kind: GroupKind::Value, block: Some(block), head: Some(head) }
    }
    pub fn ffn(block: usize) -> Self {
        Self { kind: GroupKind::FfnHidden, block: Some(block), head: None }
    }
    pub fn embed() -> Self {
        Self { kind: GroupKind::EmbedResidual, block: None, head: None }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(b) = self.block {
            write!(f, "[block {b}")?;
            if let Some(h) = self.head {
                write!(f, ", head {h}")?;
            }
            write!(f, "]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberRole {
    /// Output filters of a linear layer (weight rows).
    OutputRows,
    Bias,
    /// Inputs of a linear layer fed by the group's filters.
    InputColumns,
    /// Embedding channels added directly into the residual stream.
    Channels,
    /// Layer-norm scale or shift.
    NormParams,
}

impl MemberRole {
    /// Roles that produce the group's activations; zeroing them silences a filter.
    pub fn is_producer(self) -> bool {
        matches!(self, MemberRole::OutputRows | MemberRole::Bias | MemberRole::Channels)
    }
}

/// One tensor axis in a group. Filter `i` lives at index `offset + i` along `axis`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub tensor: String,
    pub axis: usize,
    pub offset: usize,
    pub role: MemberRole,
}

impl Member {
    fn new(tensor: impl Into<String>, axis: usize, role: MemberRole) -> Self {
        Self { tensor: tensor.into(), axis, offset: 0, role }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneGroup {
    pub key: GroupKey,
    pub width: usize,
    pub members: Vec<Member>,
}

/// All prunable groups, block by block (QK pairs, values, FFN), then the residual group.
pub fn build_groups(config: &ModelConfig) -> Vec<PruneGroup> {
    use MemberRole::*;
    let mut groups = Vec::new();
    for (b, blk) in config.blocks.iter().enumerate() {
        for h in 0..blk.heads {
            groups.push(PruneGroup {
                key: GroupKey::qk(b, h),
                width: blk.qk_dim,
                members: vec![
                    Member::new(names::q_w(b, h), 0, OutputRows),
                    Member::new(names::q_b(b, h), 0, Bias),
                    Member::new(names::k_w(b, h), 0, OutputRows),
                    Member::new(names::k_b(b, h), 0, Bias),
                ],
            });
        }
        for h in 0..blk.heads {
            groups.push(PruneGroup {
                key: GroupKey::value(b, h),
                width: blk.v_dim,
                members: vec![
                    Member::new(names::v_w(b, h), 0, OutputRows),
                    Member::new(names::v_b(b, h), 0, Bias),
                    Member { offset: h * blk.v_dim, ..Member::new(names::proj_w(b), 1, InputColumns) },
                ],
            });
        }
        groups.push(PruneGroup {
            key: GroupKey::ffn(b),
            width: blk.ffn_hidden,
            members: vec![
                Member::new(names::fc1_w(b), 0, OutputRows),
                Member::new(names::fc1_b(b), 0, Bias),
                Member::new(names::fc2_w(b), 1, InputColumns),
            ],
        });
    }

    let mut residual = vec![
        Member::new(names::PATCH_W, 0, OutputRows),
        Member::new(names::PATCH_B, 0, Bias),
        Member::new(names::CLS, 0, Channels),
        Member::new(names::POS, 1, Channels),
    ];
    for (b, blk) in config.blocks.iter().enumerate() {
        residual.push(Member::new(names::norm1_w(b), 0, NormParams));
        residual.push(Member::new(names::norm1_b(b), 0, NormParams));
        for h in 0..blk.heads {
            residual.push(Member::new(names::q_w(b, h), 1, InputColumns));
            residual.push(Member::new(names::k_w(b, h), 1, InputColumns));
            residual.push(Member::new(names::v_w(b, h), 1, InputColumns));
        }
        residual.push(Member::new(names::proj_w(b), 0, OutputRows));
        residual.push(Member::new(names::proj_b(b), 0, Bias));
        residual.push(Member::new(names::norm2_w(b), 0, NormParams));
        residual.push(Member::new(names::norm2_b(b), 0, NormParams));
        residual.push(Member::new(names::fc1_w(b), 1, InputColumns));
        residual.push(Member::new(names::fc2_w(b), 0, OutputRows));
        residual.push(Member::new(names::fc2_b(b), 0, Bias));
    }
    residual.push(Member::new(names::NORM_W, 0, NormParams));
    residual.push(Member::new(names::NORM_B, 0, NormParams));
    residual.push(Member::new(names::HEAD_W, 1, InputColumns));
    groups.push(PruneGroup { key: GroupKey::embed(), width: config.embed_dim, members: residual });
    groups
}

/// Keep-set for one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub kind: GroupKind,
    pub block: Option<usize>,
    pub head: Option<usize>,
    pub keep: Vec<usize>,
}

impl PlanGroup {
    pub fn key(&self) -> GroupKey {
        GroupKey { kind: self.kind, block: self.block, head: self.head }
    }
}

/// Which filters of every group survive pruning.
///
/// When `head_keep` is set, whole heads are removed first (surviving heads
/// renumbered from 0) and `groups` refers to the head-pruned layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub fingerprint: String,
    pub criterion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_keep: Option<Vec<Vec<usize>>>,
    pub groups: Vec<PlanGroup>,
}

impl PrunePlan {
    /// Keeps every filter of every group.
    pub fn keep_all(config: &ModelConfig, fingerprint: &str) -> Self {
        Self {
            fingerprint: fingerprint.to_string(),
            criterion: "none".into(),
            head_keep: None,
            groups: build_groups(config)
                .into_iter()
                .map(|g| PlanGroup {
                    kind: g.key.kind,
                    block: g.key.block,
                    head: g.key.head,
                    keep: (0..g.width).collect(),
                })
                .collect(),
        }
    }

    pub fn group(&self, key: GroupKey) -> Option<&PlanGroup> {
        self.groups.iter().find(|g| g.key() == key)
    }

    pub fn group_mut(&mut self, key: GroupKey) -> Option<&mut PlanGroup> {
        self.groups.iter_mut().find(|g| g.key() == key)
    }

    /// Pretty JSON with sorted keys.
    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The layout the neuron-level groups refer to.
    pub fn pruned_head_config(&self, config: &ModelConfig) -> Result<ModelConfig> {
        match &self.head_keep {
            None => Ok(config.clone()),
            Some(keep) => config_after_heads(config, keep),
        }
    }

    /// `self` followed by `next`, where `next` indexes the model `self` produces.
    /// Neither plan may remove heads.
    pub fn compose(&self, next: &PrunePlan) -> Result<PrunePlan> {
        if self.head_keep.is_some() || next.head_keep.is_some() {
            return Err(Error::InvalidPlan("cannot compose plans that remove heads".into()));
        }
        let mut out = self.clone();
        for g in &mut out.groups {
            let later = next.group(g.key()).ok_or_else(|| {
                Error::InvalidPlan(format!("group {} missing from second plan", g.key()))
            })?;
            g.keep = later
                .keep
                .iter()
                .map(|&i| {
                    g.keep.get(i).copied().ok_or(Error::IndexOutOfRange { index: i, width: g.keep.len() })
                })
                .collect::<Result<_>>()?;
        }
        out.criterion = format!("{}+{}", self.criterion, next.criterion);
        Ok(out)
    }
}

pub(crate) fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("plain data serializes");
    serde_json::to_string_pretty(&v).expect("plain data serializes")
}

/// Config with only the listed heads per block.
pub fn config_after_heads(config: &ModelConfig, head_keep: &[Vec<usize>]) -> Result<ModelConfig> {
    if head_keep.len() != config.depth() {
        return Err(Error::InvalidPlan(format!(
            "head keep-list covers {} blocks, model has {}",
            head_keep.len(),
            config.depth()
        )));
    }
    let mut out = config.clone();
    for (b, keep) in head_keep.iter().enumerate() {
        let heads = config.blocks[b].heads;
        if keep.is_empty() {
            return Err(Error::InvalidPlan(format!("block {b} keeps no heads")));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&h| h >= heads) {
            return Err(Error::InvalidPlan(format!(
                "block {b} head keep-list {keep:?} is not strictly increasing within [0, {heads})"
            )));
        }
        out.blocks[b].heads = keep.len();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingGroup(GroupKey),
    DuplicateGroup(GroupKey),
    UnknownGroup(GroupKey),
    EmptyKeep(GroupKey),
    OutOfBounds { group: GroupKey, index: usize, width: usize },
    NotStrictlyIncreasing(GroupKey),
    NonUniformHeads { kind: GroupKind, block: usize, counts: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingGroup(g) => write!(f, "group {g} missing from plan"),
            Violation::DuplicateGroup(g) => write!(f, "group {g} listed more than once"),
            Violation::UnknownGroup(g) => write!(f, "group {g} does not exist in the model"),
            Violation::EmptyKeep(g) => write!(f, "group {g} keeps no filters"),
            Violation::OutOfBounds { group, index, width } => {
                write!(f, "group {group} keeps index {index} outside width {width}")
            }
            Violation::NotStrictlyIncreasing(g) => {
                write!(f, "group {g} keep-list is not strictly increasing (duplicates or unsorted)")
            }
            Violation::NonUniformHeads { kind, block, counts } => write!(
                f,
                "{kind:?} keep-counts differ across heads of block {block}: {counts:?}"
            ),
        }
    }
}

/// Structural checks of a plan against a group list. An empty result means the plan applies.
pub fn check_plan(plan: &PrunePlan, groups: &[PruneGroup]) -> Vec<Violation> {
    let mut out = Vec::new();
    let widths: BTreeMap<GroupKey, usize> = groups.iter().map(|g| (g.key, g.width)).collect();
    let mut seen = BTreeSet::new();
    for pg in &plan.groups {
        let key = pg.key();
        if !seen.insert(key) {
            out.push(Violation::DuplicateGroup(key));
            continue;
        }
        let Some(&width) = widths.get(&key) else {
            out.push(Violation::UnknownGroup(key));
            continue;
        };
        if pg.keep.is_empty() {
            out.push(Violation::EmptyKeep(key));
        }
        if let Some(&index) = pg.keep.iter().find(|&&i| i >= width) {
            out.push(Violation::OutOfBounds { group: key, index, width });
        }
        if pg.keep.windows(2).any(|w| w[0] >= w[1]) {
            out.push(Violation::NotStrictlyIncreasing(key));
        }
    }
    for g in groups {
        if !seen.contains(&g.key) {
            out.push(Violation::MissingGroup(g.key));
        }
    }

    let mut counts: BTreeMap<(GroupKind, usize), Vec<usize>> = BTreeMap::new();
    for pg in &plan.groups {
        if let (GroupKind::QkPair | GroupKind::Value, Some(b)) = (pg.kind, pg.block) {
            counts.entry((pg.kind, b)).or_default().push(pg.keep.len());
        }
    }
    for ((kind, block), c) in counts {
        if c.windows(2).any(|w| w[0] != w[1]) {
            out.push(Violation::NonUniformHeads { kind, block, counts: c });
        }
    }
    out
}

/// Fingerprint, head-removal and structural checks of `plan` against `model`.
pub fn validate_plan(plan: &PrunePlan, model: &ModelBundle) -> Result<Vec<Violation>> {
    let fingerprint = model.fingerprint();
    if plan.fingerprint != fingerprint {
        return Err(Error::StalePlan { plan: plan.fingerprint.clone(), model: fingerprint });
    }
    let config = plan.pruned_head_config(model.config())?;
    Ok(check_plan(plan, &build_groups(&config)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_model, ModelConfig};

    fn tiny(depth: usize, heads: usize) -> ModelConfig {
        ModelConfig::uniform(8, 4, 3, 16, depth, heads, 8, 32, 4)
    }

    #[test]
    fn group_counts() {
        assert_eq!(build_groups(&tiny(1, 2)).len(), 6);
        let deit = ModelConfig::uniform(224, 16, 3, 192, 12, 3, 64, 768, 1000);
        let groups = build_groups(&deit);
        let count = |k| groups.iter().filter(|g| g.key.kind == k).count();
        assert_eq!(count(GroupKind::QkPair), 36);
        assert_eq!(count(GroupKind::Value), 36);
        assert_eq!(count(GroupKind::FfnHidden), 12);
        assert_eq!(count(GroupKind::EmbedResidual), 1);
        assert_eq!(groups.len(), 85);
    }

    #[test]
    fn residual_members_match_hand_enumeration() {
        let groups = build_groups(&tiny(1, 2));
        let embed = groups.iter().find(|g| g.key.kind == GroupKind::EmbedResidual).unwrap();
        let mut got: Vec<(String, usize)> =
            embed.members.iter().map(|m| (m.tensor.clone(), m.axis)).collect();
        got.sort();
        let mut want: Vec<(String, usize)> = [
            ("patch_embed.weight", 0),
            ("patch_embed.bias", 0),
            ("cls_token", 0),
            ("pos_embed", 1),
            ("blocks.0.norm1.weight", 0),
            ("blocks.0.norm1.bias", 0),
            ("blocks.0.attn.heads.0.q.weight", 1),
            ("blocks.0.attn.heads.0.k.weight", 1),
            ("blocks.0.attn.heads.0.v.weight", 1),
            ("blocks.0.attn.heads.1.q.weight", 1),
            ("blocks.0.attn.heads.1.k.weight", 1),
            ("blocks.0.attn.heads.1.v.weight", 1),
            ("blocks.0.attn.proj.weight", 0),
            ("blocks.0.attn.proj.bias", 0),
            ("blocks.0.norm2.weight", 0),
            ("blocks.0.norm2.bias", 0),
            ("blocks.0.mlp.fc1.weight", 1),
            ("blocks.0.mlp.fc2.weight", 0),
            ("blocks.0.mlp.fc2.bias", 0),
            ("norm.weight", 0),
            ("norm.bias", 0),
            ("head.weight", 1),
        ]
        .iter()
        .map(|(n, a)| (n.to_string(), *a))
        .collect();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(embed.members.len(), 4 + (4 + 3 * 2 + 2 + 1 + 2) + 2 + 1);
    }

    #[test]
    fn members_partition_the_prunable_axes() {
        let cfg = tiny(2, 3);
        let shapes = cfg.expected_shapes();
        let mut claimed: BTreeMap<(String, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for g in build_groups(&cfg) {
            for m in &g.members {
                let extent = shapes[&m.tensor][m.axis];
                assert!(m.offset + g.width <= extent, "{} overruns {}", g.key, m.tensor);
                claimed
                    .entry((m.tensor.clone(), m.axis))
                    .or_default()
                    .push((m.offset, m.offset + g.width));
            }
        }
        for ((tensor, axis), mut ranges) in claimed {
            ranges.sort();
            assert_eq!(ranges.first().unwrap().0, 0);
            assert_eq!(ranges.last().unwrap().1, shapes[&tensor][axis], "{tensor}:{axis}");
            for w in ranges.windows(2) {
                assert_eq!(w[0].1, w[1].0, "{tensor}:{axis} overlaps or gaps");
            }
        }
    }

    #[test]
    fn keep_all_plan_is_valid() {
        let model = synth_model(&tiny(2, 2), 1);
        let plan = PrunePlan::keep_all(model.config(), &model.fingerprint());
        assert!(validate_plan(&plan, &model).unwrap().is_empty());
    }

    #[test]
    fn non_uniform_head_counts_are_rejected() {
        let model = synth_model(&tiny(1, 2), 1);
        let mut plan = PrunePlan::keep_all(model.config(), &model.fingerprint());
        plan.group_mut(GroupKey::qk(0, 0)).unwrap().keep = (0..5).collect();
        plan.group_mut(GroupKey::qk(0, 1)).unwrap().keep = (0..6).collect();
        let v = validate_plan(&plan, &model).unwrap();
        assert_eq!(
            v,
            vec![Violation::NonUniformHeads { kind: GroupKind::QkPair, block: 0, counts: vec![5, 6] }]
        );
    }

    #[test]
    fn bounds_duplicates_and_missing_groups() {
        let model = synth_model(&tiny(1, 2), 1);
        let mut plan = PrunePlan::keep_all(model.config(), &model.fingerprint());
        plan.group_mut(GroupKey::ffn(0)).unwrap().keep = vec![0, 32];
        plan.group_mut(GroupKey::embed()).unwrap().keep = vec![1, 1, 2];
        plan.groups.retain(|g| g.key() != GroupKey::value(0, 1));
        let v = check_plan(&plan, &build_groups(model.config()));
        assert!(v.contains(&Violation::OutOfBounds { group: GroupKey::ffn(0), index: 32, width: 32 }));
        assert!(v.contains(&Violation::NotStrictlyIncreasing(GroupKey::embed())));
        assert!(v.contains(&Violation::MissingGroup(GroupKey::value(0, 1))));
    }

    #[test]
    fn stale_fingerprint_is_an_error() {
        let model = synth_model(&tiny(1, 2), 1);
        let plan = PrunePlan::keep_all(model.config(), "deadbeef");
        assert!(matches!(validate_plan(&plan, &model), Err(Error::StalePlan { .. })));
    }

    #[test]
    fn plan_json_round_trips() {
        let model = synth_model(&tiny(1, 2), 1);
        let plan = PrunePlan::keep_all(model.config(), &model.fingerprint());
        let text = plan.to_json();
        let back = PrunePlan::from_json(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_json(), text);
        let first = text.find("\"criterion\"").unwrap();
        assert!(first < text.find("\"fingerprint\"").unwrap());
    }
}
