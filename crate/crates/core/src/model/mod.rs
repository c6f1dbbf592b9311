//! ViT architecture description, the weight container, and its file formats.

mod forward;
mod io;
mod synth;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{
    attention_rollout, forward, forward_counting, qk_filter_contribution, AttentionCapture,
    BlockCapture, ForwardOutput, HeadCapture,
};
pub use io::{
    load_calibration, load_model, model_from_bytes, model_to_bytes, save_calibration, save_model,
    CalibrationSet,
};
pub use synth::{preset, synth_calibration, synth_model, PRESETS};

/// Per-block attention and FFN widths. Heads within a block share `qk_dim` and `v_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub heads: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
    pub ffn_hidden: usize,
    /// Fixed at `1/sqrt(qk_dim)` of the unpruned model and carried through pruning.
    pub attn_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockConfig>,
    /// Residual channels that take part in layer normalization. `None` means all.
    /// Only mask-simulated models set this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_active: Option<Vec<usize>>,
}

impl ModelConfig {
    /// A uniform ViT: every block has `heads` heads of width `head_dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        image_size: usize,
        patch_size: usize,
        in_channels: usize,
        embed_dim: usize,
        depth: usize,
        heads: usize,
        head_dim: usize,
        ffn_hidden: usize,
        num_classes: usize,
    ) -> Self {
        let block = BlockConfig {
            heads,
            qk_dim: head_dim,
            v_dim: head_dim,
            ffn_hidden,
            attn_scale: 1.0 / (head_dim as f64).sqrt(),
        };
        Self {
            image_size,
            patch_size,
            in_channels,
            embed_dim,
            num_classes,
            blocks: vec![block; depth],
            residual_active: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn active_channels(&self) -> Vec<usize> {
        self.residual_active.clone().unwrap_or_else(|| (0..self.embed_dim).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Shape(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return fail("channel, embedding and class counts must be positive".into());
        }
        if self.blocks.is_empty() {
            return fail("model has no blocks".into());
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.heads == 0 || block.qk_dim == 0 || block.v_dim == 0 || block.ffn_hidden == 0 {
                return fail(format!("block {b} has a zero width: {block:?}"));
            }
            if !(block.attn_scale.is_finite() && block.attn_scale > 0.0) {
                return fail(format!("block {b} attention scale {} is invalid", block.attn_scale));
            }
        }
        if let Some(active) = &self.residual_active {
            if active.is_empty()
                || active.windows(2).any(|w| w[0] >= w[1])
                || active.iter().any(|&c| c >= self.embed_dim)
            {
                return fail("residual active set must be non-empty, sorted and in range".into());
            }
        }
        Ok(())
    }

    /// Every tensor the model must carry, with its shape, in name order.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.embed_dim;
        let mut shapes = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        put(names::PATCH_W.into(), vec![d, self.patch_dim()]);
        put(names::PATCH_B.into(), vec![d]);
        put(names::CLS.into(), vec![d]);
        put(names::POS.into(), vec![self.tokens(), d]);
        for (b, blk) in self.blocks.iter().enumerate() {
            put(names::norm1_w(b), vec![d]);
            put(names::norm1_b(b), vec![d]);
            for h in 0..blk.heads {
                put(names::q_w(b, h), vec![blk.qk_dim, d]);
                put(names::q_b(b, h), vec![blk.qk_dim]);
                put(names::k_w(b, h), vec![blk.qk_dim, d]);
                put(names::k_b(b, h), vec![blk.qk_dim]);
                put(names::v_w(b, h), vec![blk.v_dim, d]);
                put(names::v_b(b, h), vec![blk.v_dim]);
            }
            put(names::proj_w(b), vec![d, blk.heads * blk.v_dim]);
            put(names::proj_b(b), vec![d]);
            put(names::norm2_w(b), vec![d]);
            put(names::norm2_b(b), vec![d]);
            put(names::fc1_w(b), vec![blk.ffn_hidden, d]);
            put(names::fc1_b(b), vec![blk.ffn_hidden]);
            put(names::fc2_w(b), vec![d, blk.ffn_hidden]);
            put(names::fc2_b(b), vec![d]);
        }
        put(names::NORM_W.into(), vec![d]);
        put(names::NORM_B.into(), vec![d]);
        put(names::HEAD_W.into(), vec![self.num_classes, d]);
        put(names::HEAD_B.into(), vec![self.num_classes]);
        shapes
    }

    pub fn param_count(&self) -> u64 {
        self.expected_shapes()
            .values()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Tensor naming scheme shared by every module that touches weights.
pub mod names {
    pub const PATCH_W: &str = "patch_embed.weight";
    pub const PATCH_B: &str = "patch_embed.bias";
    pub const CLS: &str = "cls_token";
    pub const POS: &str = "pos_embed";
    pub const NORM_W: &str = "norm.weight";
    pub const NORM_B: &str = "norm.bias";
    pub const HEAD_W: &str = "head.weight";
    pub const HEAD_B: &str = "head.bias";

    pub fn norm1_w(b: usize) -> String {
        format!("blocks.{b}.norm1.weight")
    }
    pub fn norm1_b(b: usize) -> String {
        format!("blocks.{b}.norm1.bias")
    }
    pub fn norm2_w(b: usize) -> String {
        format!("blocks.{b}.norm2.weight")
    }
    pub fn norm2_b(b: usize) -> String {
        format!("blocks.{b}.norm2.bias")
    }
    pub fn q_w(b: usize, h: usize) -> String {
        format!("blocks.{b}.attn.heads.{h}.q.weight")
    }
    pub fn q_b(b: usize, h: usize) -> String {
        format!("blocks.{b}.attn.heads.{h}.q.bias")
    }
    pub fn k_w(b: usize, h: usize) -> String {
        format!("blocks.{b}.attn.heads.{h}.k.weight")
    }
    pub fn k_b(b: usize, h: usize) -> String {
        format!("blocks.{b}.attn.heads.{h}.k.bias")
    }
    pub fn v_w(b: usize, h: usize) -> String {
        format!("blocks.{b}.attn.heads.{h}.v.weight")
    }
    pub fn v_b(b: usize, h: usize) -> String {
        format!("blocks.{b}.attn.heads.{h}.v.bias")
    }
    pub fn proj_w(b: usize) -> String {
        format!("blocks.{b}.attn.proj.weight")
    }
    pub fn proj_b(b: usize) -> String {
        format!("blocks.{b}.attn.proj.bias")
    }
    pub fn fc1_w(b: usize) -> String {
        format!("blocks.{b}.mlp.fc1.weight")
    }
    pub fn fc1_b(b: usize) -> String {
        format!("blocks.{b}.mlp.fc1.bias")
    }
    pub fn fc2_w(b: usize) -> String {
        format!("blocks.{b}.mlp.fc2.weight")
    }
    pub fn fc2_b(b: usize) -> String {
        format!("blocks.{b}.mlp.fc2.bias")
    }
}

/// A configuration together with every weight tensor it names.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    /// Serialized file header, built on first use.
    header: OnceLock<Vec<u8>>,
}

impl PartialEq for ModelBundle {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl ModelBundle {
    /// Checks that `tensors` holds exactly the tensors `config` calls for, at the right shapes.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.expected_shapes();
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Shape(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "tensor {name} has shape {:?}, config requires {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Shape(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, tensors, header: OnceLock::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_parts(self) -> (ModelConfig, BTreeMap<String, Tensor>) {
        (self.config, self.tensors)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))
    }

    pub fn param_count(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    /// Hex SHA-256 of the serialized file header, which carries a digest of every payload.
    pub fn fingerprint(&self) -> String {
        io::fingerprint(self.header())
    }

    fn header(&self) -> &[u8] {
        self.header.get_or_init(|| io::header_bytes(self))
    }
}
