use serde::{Deserialize, Serialize};

use crate::autograd::SHIFT_GROUPS;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_elab: usize,
    pub channels: usize,
    /// One attention window size per channel group.
    pub window_sizes: Vec<usize>,
    pub scale: usize,
    /// Hidden width of the shift-conv feed-forward, as a multiple of `channels`.
    pub shiftconv_expansion: f64,
    pub mbconv_expansion: f64,
    pub se_reduction: usize,
    pub deform_groups: usize,
    /// Blocks `i` with `i % period != 0` reuse the previous block's attention
    /// maps and carry no query/key projection.
    pub attn_share_period: usize,
    pub use_mbconv: bool,
    pub use_deform: bool,
    /// Bottleneck width of the deformable block.
    pub deform_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_elab: 10,
            channels: 60,
            window_sizes: vec![4, 8, 16],
            scale: 2,
            shiftconv_expansion: 5.0,
            mbconv_expansion: 4.0,
            se_reduction: 16,
            deform_groups: 1,
            attn_share_period: 1,
            use_mbconv: true,
            use_deform: true,
            deform_width: 28,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            n_elab: 2,
            channels: 10,
            window_sizes: vec![2, 4],
            shiftconv_expansion: 2.0,
            deform_width: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let k = self.window_sizes.len();
        if k == 0 {
            return fail("window_sizes must not be empty".into());
        }
        if self.channels == 0 || !self.channels.is_multiple_of(k) {
            return fail(format!(
                "channels ({}) must be a positive multiple of the window-group count ({k})",
                self.channels
            ));
        }
        if !self.channels.is_multiple_of(SHIFT_GROUPS) {
            return fail(format!(
                "channels ({}) must be divisible by the {SHIFT_GROUPS} shift groups",
                self.channels
            ));
        }
        if let Some(m) = self.window_sizes.iter().find(|&&m| m < 2) {
            return fail(format!("window size {m} is below the minimum of 2"));
        }
        if !matches!(self.scale, 2..=4) {
            return fail(format!("scale {} is not one of 2, 3, 4", self.scale));
        }
        if !(self.shiftconv_expansion > 0.0 && self.mbconv_expansion > 0.0) {
            return fail("expansion ratios must be positive".into());
        }
        if self.se_reduction == 0 || self.attn_share_period == 0 {
            return fail("se_reduction and attn_share_period must be at least 1".into());
        }
        if self.use_deform
            && (self.deform_groups == 0 || self.deform_width == 0 || !self.deform_width.is_multiple_of(self.deform_groups))
        {
            return fail(format!(
                "deform_width ({}) must be a positive multiple of deform_groups ({})",
                self.deform_width, self.deform_groups
            ));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.window_sizes.len()
    }

    /// Channels per attention group.
    pub fn group_channels(&self) -> usize {
        self.channels / self.groups()
    }

    /// Feed-forward hidden width, rounded up to a multiple of the shift groups.
    pub fn ffn_hidden(&self) -> usize {
        let raw = (self.shiftconv_expansion * self.channels as f64).ceil() as usize;
        raw.div_ceil(SHIFT_GROUPS) * SHIFT_GROUPS
    }

    pub fn mbconv_hidden(&self) -> usize {
        (self.mbconv_expansion * self.channels as f64).ceil() as usize
    }

    /// Squeeze-and-excitation bottleneck width.
    pub fn se_hidden(&self) -> usize {
        self.mbconv_hidden().div_ceil(self.se_reduction).max(1)
    }

    /// Spatial multiple that attention inputs are padded to.
    pub fn window_lcm(&self) -> usize {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        self.window_sizes.iter().fold(1, |l, &m| l / gcd(l, m) * m)
    }

    pub fn owns_attention(&self, block: usize) -> bool {
        block.is_multiple_of(self.attn_share_period)
    }
}
