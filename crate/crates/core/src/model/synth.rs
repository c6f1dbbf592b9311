//! Seeded random-weight models and calibration images for desk-scale runs.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::io::CalibrationSet;
use super::{ModelBundle, ModelConfig};

pub const PRESETS: [&str; 4] = ["tiny-desk", "deit-tiny", "deit-small", "deit-base"];

const INIT_STD: f64 = 0.02;

pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "tiny-desk" => ModelConfig::uniform(16, 4, 3, 32, 2, 2, 16, 64, 10),
        "deit-tiny" => ModelConfig::uniform(224, 16, 3, 192, 12, 3, 64, 768, 1000),
        "deit-small" => ModelConfig::uniform(224, 16, 3, 384, 12, 6, 64, 1536, 1000),
        "deit-base" => ModelConfig::uniform(224, 16, 3, 768, 12, 12, 64, 3072, 1000),
        other => {
            return Err(Error::Argument(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Draws every weight and bias from N(0, 0.02) in tensor-name order.
/// Layer-norm scales start at 1 and shifts at 0.
pub fn synth_model(config: &ModelConfig, seed: u64) -> ModelBundle {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = config
        .expected_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let numel: usize = shape.iter().product();
            let is_norm = name.contains("norm");
            let data: Vec<f32> = if is_norm && name.ends_with(".weight") {
                vec![1.0; numel]
            } else if is_norm {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            let tensor = Tensor::new(shape, data).expect("shape from config");
            (name, tensor)
        })
        .collect();
    ModelBundle::new(config.clone(), tensors).expect("synthesized model matches its config")
}

/// Standard-normal images.
pub fn synth_calibration(
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> CalibrationSet {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let images = (0..count)
        .map(|_| {
            let data = (0..channels * height * width)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            Tensor::new(vec![channels, height, width], data).expect("positive extents")
        })
        .collect();
    CalibrationSet::new(channels, height, width, images).expect("uniform image shapes")
}
