//! The super-resolution network: shallow 3×3 feature extraction, a deep path
//! of MBConv → ELAB stack → deformable block → 3×3 convolution, and
//! sub-pixel reconstruction of the deep features plus the shallow skip.

mod accounting;
pub mod blocks;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use accounting::{gmsa_flops, BlockCount, ParamBreakdown};
pub use blocks::{Ctx, Mode};
pub use config::ModelConfig;

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// Shape, and optionally the values, of one named intermediate feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub values: Option<Tensor>,
}

/// Intermediate features in forward order: `i_local`, `i_mbconv` (when
/// enabled), `i_1..i_N`, `i_deform` (when enabled), `i_deep`, `i_rhq`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub features: Vec<FeatureDescriptor>,
}

impl ForwardTrace {
    pub fn get(&self, name: &str) -> Option<&FeatureDescriptor> {
        self.features.iter().find(|f| f.name == name)
    }

    fn push(&mut self, name: impl Into<String>, v: &Var, retain: bool) {
        self.features.push(FeatureDescriptor {
            name: name.into(),
            shape: v.shape().to_vec(),
            values: retain.then(|| v.value().clone()),
        });
    }
}

pub struct ForwardOutput {
    pub output: Var,
    pub trace: ForwardTrace,
    /// Train-mode batch statistics, to be folded in with
    /// [`SrModel::update_running_stats`].
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrModel {
    config: ModelConfig,
    params: ParamStore,
}

impl SrModel {
    /// Freshly initialized network; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Self::layout(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps stored parameters, checking names, kinds and shapes against the
    /// architecture the config describes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::layout(&config, 0)?;
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "parameter set has {} entries, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for ((en, ek, ev), (gn, gk, gv)) in expected.iter().zip(params.iter()) {
            if en != gn || ek != gk || ev.shape() != gv.shape() {
                return Err(Error::Format(format!(
                    "parameter {gn:?} {:?} does not match expected {en:?} {:?}",
                    gv.shape(),
                    ev.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    fn layout(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = cfg.channels;
        blocks::init_shallow(&mut s, &mut rng, "head", c)?;
        if cfg.use_mbconv {
            blocks::init_mbconv(&mut s, &mut rng, "mbconv", cfg)?;
        }
        for i in 0..cfg.n_elab {
            blocks::init_elab(&mut s, &mut rng, &format!("elab.{i}"), cfg, cfg.owns_attention(i))?;
        }
        if cfg.use_deform {
            blocks::init_deform(&mut s, &mut rng, "deform", cfg)?;
        }
        s.init_conv(&mut rng, "body_tail", [c, c, 3, 3], true)?;
        blocks::init_reconstruct(&mut s, &mut rng, "upsample", c, cfg.scale)?;
        Ok(s)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Runs the network on `x[N, 3, H, W]`, returning `[N, 3, sH, sW]`.
    /// Eval mode clamps the output to `[0, 1]` (and detaches it).
    pub fn forward(&self, tape: &Tape, bound: &Bound, x: &Var, mode: Mode, retain: bool) -> ForwardOutput {
        let cfg = &self.config;
        let ctx = Ctx::new(tape, bound, mode);
        let mut trace = ForwardTrace::default();

        let local = blocks::shallow_extract(&ctx, "head", x);
        trace.push("i_local", &local, retain);
        let mut feat = local.clone();
        if cfg.use_mbconv {
            feat = blocks::mbconv_forward(&ctx, "mbconv", &feat);
            trace.push("i_mbconv", &feat, retain);
        }
        let mut maps: Vec<Var> = Vec::new();
        for i in 0..cfg.n_elab {
            let (y, m) = blocks::elab_forward(&ctx, &format!("elab.{i}"), &feat, &cfg.window_sizes, Some(&maps));
            feat = y;
            maps = m;
            trace.push(format!("i_{}", i + 1), &feat, retain);
        }
        if cfg.use_deform {
            feat = blocks::deform_forward(&ctx, "deform", &feat, cfg.deform_groups);
            trace.push("i_deform", &feat, retain);
        }
        let deep = ctx.conv3x3("body_tail", &feat, 1);
        trace.push("i_deep", &deep, retain);
        let fused = tape.add(&deep, &local);
        let mut out = blocks::reconstruct(&ctx, "upsample", &fused, cfg.scale);
        if mode == Mode::Eval {
            out = tape.constant(out.value().map(|v| v.clamp(0.0, 1.0)));
        }
        trace.push("i_rhq", &out, retain);
        ForwardOutput {
            output: out,
            trace,
            bn_stats: ctx.take_bn_stats(),
        }
    }

    /// Single-image forward pass without gradient recording.
    pub fn model_forward(&self, image: &Image, mode: Mode, retain: bool) -> Result<(Image, ForwardTrace)> {
        if image.channels() != 3 {
            return Err(crate::error::invalid!("network input must have 3 channels, got {}", image.channels()));
        }
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let x = tape.constant(image.to_tensor());
        let out = self.forward(&tape, &bound, &x, mode, retain);
        Ok((Image::from_tensor(out.output.value(), 0)?, out.trace))
    }

    /// Eval-mode super-resolution of one image.
    pub fn infer(&self, image: &Image) -> Result<Image> {
        Ok(self.model_forward(image, Mode::Eval, false)?.0)
    }

    /// Folds train-mode batch statistics into the running buffers:
    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)], momentum: f64) {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self
                    .params
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .unwrap_or_else(|| panic!("missing buffer {prefix}.{suffix}"));
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }

    /// Trainable-scalar count grouped by block.
    pub fn count_parameters(&self) -> ParamBreakdown {
        accounting::breakdown(&self.config, &self.params)
    }

    /// Names of every trainable tensor.
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, k, _)| *k == ParamKind::Trainable)
            .map(|(n, _, _)| n)
    }
}

#[cfg(test)]
mod tests;
