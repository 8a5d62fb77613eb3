//! Parameter and multiply-count accounting.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::params::{ParamKind, ParamStore};

/// Output resolution at which per-block multiply counts are reported.
pub const REPORT_OUTPUT: (usize, usize) = (720, 1280);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCount {
    pub block: String,
    pub params: usize,
    /// Multiplies for one forward pass producing a `REPORT_OUTPUT` image.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub blocks: Vec<BlockCount>,
    pub total_params: usize,
    pub total_flops: u64,
    pub output_height: usize,
    pub output_width: usize,
}

impl ParamBreakdown {
    pub fn get(&self, block: &str) -> Option<&BlockCount> {
        self.blocks.iter().find(|b| b.block == block)
    }
}

/// Closed-form multiply count of one group-wise attention layer's two
/// matrix products (`QQᵀ` and `A·V`): `(2/K)·(Σ M_k²)·H·W·C`. Projection
/// convolutions are not included.
pub fn gmsa_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let sum_m2: usize = cfg.window_sizes.iter().map(|m| m * m).sum();
    2 * (sum_m2 * h * w * cfg.group_channels()) as u64
}

fn block_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match (first, parts.next()) {
        ("elab", Some(i)) => format!("elab.{i}"),
        _ => first.to_string(),
    }
}

pub(super) fn breakdown(cfg: &ModelConfig, params: &ParamStore) -> ParamBreakdown {
    let (oh, ow) = REPORT_OUTPUT;
    let (h, w) = (oh.div_ceil(cfg.scale), ow.div_ceil(cfg.scale));
    let mut blocks: Vec<BlockCount> = Vec::new();
    for (name, kind, value) in params.iter() {
        if kind != ParamKind::Trainable {
            continue;
        }
        let block = block_of(name);
        if blocks.last().map(|b| &b.block) != Some(&block) {
            blocks.push(BlockCount {
                block: block.clone(),
                params: 0,
                flops: 0,
            });
        }
        let entry = blocks.last_mut().expect("pushed above");
        entry.params += value.len();
        if name.ends_with(".weight") && value.shape().len() == 4 {
            let pixels = if name.contains(".se.") {
                1
            } else if name.starts_with("upsample.1") {
                4 * h * w
            } else {
                h * w
            };
            entry.flops += (value.len() * pixels) as u64;
        }
    }
    for (i, b) in blocks.iter_mut().filter(|b| b.block.starts_with("elab.")).enumerate() {
        let full = gmsa_flops(cfg, h, w);
        b.flops += if cfg.owns_attention(i) { full } else { full / 2 };
    }
    ParamBreakdown {
        total_params: blocks.iter().map(|b| b.params).sum(),
        total_flops: blocks.iter().map(|b| b.flops).sum(),
        blocks,
        output_height: oh,
        output_width: ow,
    }
}
