//! Per-image adaptation: fine-tune a pre-trained model on an (LR, LR_son)
//! pair synthesized with the image's own blur kernel, then super-resolve with
//! a median geometric self-ensemble and iterative back-projection.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::degradation::{
    degrade, degrade_linear, resize_bicubic_to, BlurKernel, SubsampleMode, Subsampling,
};
use crate::error::{invalid, Error, Result};
use crate::image::{Dihedral, Image};
use crate::kernel_estim::{bicubic_equivalent_kernel, KernelEstimate};
use crate::metrics::evaluate_pair;
use crate::model::{Mode, SrModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Gradient updates spent by a ZSSR-style per-image training run.
pub const ZSSR_BASELINE_UPDATES: usize = 3000;

/// How to read the schedule sentence "start with β0, change to β1 when the
/// iteration is not larger than 4, and keep β2 until the end".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleReading {
    /// β0 for iteration 1, β1 until `switch_b − 1`, β2 afterwards.
    #[default]
    ChangeAfterFirst,
    /// β0 until `switch_b − 1`, β1 at `switch_b`, β2 afterwards.
    HoldFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSchedule {
    pub rates: [f64; 3],
    pub switch_a: usize,
    pub switch_b: usize,
    pub total_iterations: usize,
    pub reading: ScheduleReading,
}

impl Default for FineTuneSchedule {
    fn default() -> Self {
        Self {
            rates: [2e-2, 1e-2, 5e-3],
            switch_a: 2,
            switch_b: 5,
            total_iterations: 10,
            reading: ScheduleReading::ChangeAfterFirst,
        }
    }
}

impl FineTuneSchedule {
    /// The same rates stretched over the update budget of ZSSR-style
    /// per-image training.
    pub fn zssr_baseline() -> Self {
        Self {
            total_iterations: ZSSR_BASELINE_UPDATES,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [b0, b1, b2] = self.rates;
        if !(b0 > b1 && b1 > b2 && b2 > 0.0) {
            return Err(Error::Config(format!("rates must satisfy β0 > β1 > β2 > 0, got {:?}", self.rates)));
        }
        // an empty schedule is a valid no-op, so only order the switches
        if !(1 <= self.switch_a && self.switch_a < self.switch_b) {
            return Err(Error::Config(format!(
                "switch points must satisfy 1 ≤ switch_a < switch_b, got {} and {}",
                self.switch_a, self.switch_b
            )));
        }
        Ok(())
    }
}

/// Learning rate of the 1-based `iteration`.
pub fn schedule_rate(iteration: usize, schedule: &FineTuneSchedule) -> Result<f64> {
    if iteration == 0 || iteration > schedule.total_iterations {
        return Err(invalid!(
            "iteration {iteration} is outside 1..={}",
            schedule.total_iterations
        ));
    }
    let [b0, b1, b2] = schedule.rates;
    let rate = match schedule.reading {
        ScheduleReading::ChangeAfterFirst if iteration < schedule.switch_a => b0,
        ScheduleReading::ChangeAfterFirst if iteration < schedule.switch_b => b1,
        ScheduleReading::HoldFirst if iteration < schedule.switch_b => b0,
        ScheduleReading::HoldFirst if iteration == schedule.switch_b => b1,
        _ => b2,
    };
    Ok(rate)
}

/// `(parent, son)`: the LR image and its own degradation by `kernel` with
/// direct `scale`× subsampling. The son is the training input, the parent
/// the target.
pub fn synthesize_pair(lr: &Image, kernel: &BlurKernel, scale: usize) -> Result<(Image, Image)> {
    let son = degrade(lr, kernel, Subsampling::direct(scale))?;
    Ok((lr.clone(), son))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSource {
    Estimated,
    /// The estimator was not confident; the bicubic-equivalent kernel is used.
    BicubicFallback,
    /// Supplied in memory by the caller.
    Supplied,
    /// Read from a kernel file.
    File,
    /// A named analytic scenario kernel.
    Scenario,
}

/// The kernel to adapt with: the estimate when confident, otherwise the
/// bicubic-equivalent kernel of the same size.
pub fn choose_kernel(estimate: &KernelEstimate, scale: usize) -> Result<(BlurKernel, KernelSource)> {
    if estimate.confident {
        Ok((estimate.kernel.clone(), KernelSource::Estimated))
    } else {
        Ok((bicubic_equivalent_kernel(scale, estimate.kernel.size())?, KernelSource::BicubicFallback))
    }
}

#[derive(Clone, Debug)]
pub struct AdaptJob {
    pub lr_image: Image,
    pub kernel: BlurKernel,
    pub kernel_source: KernelSource,
    pub kernel_confident: bool,
    pub base_checkpoint: Checkpoint,
    pub schedule: FineTuneSchedule,
    pub ensemble: bool,
    pub backprojection_iters: usize,
    /// Predict the difference to bicubic upsampling instead of the image.
    pub residual_head: bool,
}

impl AdaptJob {
    /// A job with the default schedule, ensemble on and 8 back-projections.
    pub fn new(lr_image: Image, kernel: BlurKernel, kernel_source: KernelSource, base_checkpoint: Checkpoint) -> Self {
        Self {
            lr_image,
            kernel,
            kernel_source,
            kernel_confident: kernel_source != KernelSource::BicubicFallback,
            base_checkpoint,
            schedule: FineTuneSchedule::default(),
            ensemble: true,
            backprojection_iters: 8,
            residual_head: false,
        }
    }

    pub fn scale(&self) -> usize {
        self.base_checkpoint.model_config.scale
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.kernel.check_invariants()?;
        if self.lr_image.channels() != 3 {
            return Err(invalid!("LR image must have 3 channels, got {}", self.lr_image.channels()));
        }
        let s = self.scale();
        let (h, w) = self.lr_image.dims();
        if h < 2 * s || w < 2 * s {
            return Err(invalid!("LR image {h}x{w} is too small to synthesize a ×{s} training pair"));
        }
        Ok(())
    }
}

/// Anything that maps an image to its `scale`× super-resolution.
pub trait Upscaler {
    fn upscale(&self, image: &Image) -> Result<Image>;
}

impl Upscaler for SrModel {
    fn upscale(&self, image: &Image) -> Result<Image> {
        self.infer(image)
    }
}

/// A model used as a residual over bicubic upsampling.
pub struct ResidualUpscaler<'a>(pub &'a SrModel);

impl Upscaler for ResidualUpscaler<'_> {
    fn upscale(&self, image: &Image) -> Result<Image> {
        let (out, _) = self.0.model_forward(image, Mode::Adapt, false)?;
        let up = bicubic_up(image, self.0.scale())?;
        out.zip_map(&up, |a, b| (a + b).clamp(0.0, 1.0))
    }
}

fn bicubic_up(image: &Image, scale: usize) -> Result<Image> {
    resize_bicubic_to(image, image.height() * scale, image.width() * scale, scale as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FineTuneStatus {
    Completed,
    /// The loss went non-finite; the base model is returned unchanged.
    Aborted { iteration: usize, reason: String },
}

pub struct FineTuneOutcome {
    pub model: SrModel,
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Loss after the last update (equal to the initial loss when none ran).
    pub final_loss: f64,
    pub gradient_updates: usize,
    pub status: FineTuneStatus,
}

/// L1 between the model on `son` (cropped to the parent's dims) and `parent`.
fn pair_loss(model: &SrModel, son: &Tensor, parent: &Tensor, residual: Option<&Tensor>) -> f64 {
    let tape = Tape::inference();
    let bound = model.params().bind(&tape);
    pair_loss_var(&tape, model, &bound, son, parent, residual).item()
}

fn pair_loss_var(
    tape: &Tape,
    model: &SrModel,
    bound: &crate::params::Bound,
    son: &Tensor,
    parent: &Tensor,
    residual: Option<&Tensor>,
) -> crate::autograd::Var {
    let out = model.forward(tape, bound, &tape.constant(son.clone()), Mode::Adapt, false).output;
    let (_, _, h, w) = parent.dims4();
    let mut pred = tape.crop(&out, 0, 0, h, w);
    if let Some(r) = residual {
        pred = tape.add(&pred, &tape.constant(r.clone()));
    }
    tape.l1_loss(&pred, &tape.constant(parent.clone()))
}

/// Runs `schedule.total_iterations` ADAM updates of L1(model(son), parent)
/// with batch-norm statistics frozen. The base checkpoint is not modified.
pub fn fine_tune(job: &AdaptJob) -> Result<FineTuneOutcome> {
    job.validate()?;
    let base = job.base_checkpoint.model()?;
    let scale = base.scale();
    let (parent, son) = synthesize_pair(&job.lr_image, &job.kernel, scale)?;
    let (son_t, parent_t) = (son.to_tensor(), parent.to_tensor());
    let residual = if job.residual_head {
        let (h, w) = parent.dims();
        Some(bicubic_up(&son, scale)?.crop(0, 0, h, w)?.to_tensor())
    } else {
        None
    };

    let mut model = base.clone();
    let mut adam = Adam::new(model.params(), AdamConfig::default());
    let mut losses = Vec::with_capacity(job.schedule.total_iterations);
    for it in 1..=job.schedule.total_iterations {
        let rate = schedule_rate(it, &job.schedule)?;
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let loss = pair_loss_var(&tape, &model, &bound, &son_t, &parent_t, residual.as_ref());
        let value = loss.item();
        let abort = |losses: Vec<f64>, reason: String| FineTuneOutcome {
            model: base.clone(),
            final_loss: f64::NAN,
            gradient_updates: it - 1,
            losses,
            status: FineTuneStatus::Aborted { iteration: it, reason },
        };
        if !value.is_finite() {
            return Ok(abort(losses, format!("loss is {value}")));
        }
        losses.push(value);
        let mut grads = tape.backward(&loss);
        let grads = bound.gradients(&mut grads);
        drop(bound);
        if let Err(e) = adam.step(model.params_mut(), &grads, rate) {
            losses.pop();
            return Ok(abort(losses, e.to_string()));
        }
    }
    let final_loss = pair_loss(&model, &son_t, &parent_t, residual.as_ref());
    Ok(FineTuneOutcome {
        model,
        gradient_updates: losses.len(),
        losses,
        final_loss,
        status: FineTuneStatus::Completed,
    })
}

/// Median of eight values: the mean of the 4th and 5th order statistics.
pub fn median8(mut v: [f64; 8]) -> f64 {
    v.sort_by(f64::total_cmp);
    0.5 * (v[3] + v[4])
}

/// Upscales the 8 dihedral transforms of `image`, maps each result back and
/// passes it through `refine`, then takes the per-pixel median.
pub fn geometric_ensemble_with(
    upscaler: &impl Upscaler,
    image: &Image,
    mut refine: impl FnMut(Image) -> Result<Image>,
) -> Result<Image> {
    let mut branches = Vec::with_capacity(8);
    for t in Dihedral::all() {
        let out = upscaler.upscale(&t.apply(image))?;
        branches.push(refine(t.inverse().apply(&out))?);
    }
    for b in &branches[1..] {
        branches[0].check_same_shape(b)?;
    }
    let mut out = branches[0].clone();
    for (p, v) in out.data_mut().iter_mut().enumerate() {
        *v = median8(std::array::from_fn(|k| branches[k].data()[p]));
    }
    Ok(out)
}

pub fn geometric_ensemble(upscaler: &impl Upscaler, image: &Image) -> Result<Image> {
    geometric_ensemble_with(upscaler, image, Ok)
}

/// Iterative back-projection, also returning `‖lr − degrade(srₜ)‖₂` before
/// each iteration and after the last one.
pub fn back_project_traced(
    sr: &Image,
    lr: &Image,
    kernel: &BlurKernel,
    mode: SubsampleMode,
    iters: usize,
) -> Result<(Image, Vec<f64>)> {
    let scale = if sr.height() >= lr.height() {
        (sr.height() as f64 / lr.height() as f64).round() as usize
    } else {
        0
    };
    let sub = Subsampling::new(mode, scale.max(1))?;
    if scale == 0 || sub.output_dims(sr.height(), sr.width()) != lr.dims() || sr.channels() != lr.channels() {
        return Err(invalid!(
            "SR image {}x{}x{} does not degrade to the LR dims {}x{}x{}",
            sr.channels(),
            sr.height(),
            sr.width(),
            lr.channels(),
            lr.height(),
            lr.width()
        ));
    }
    let mut cur = sr.clone();
    let mut norms = Vec::with_capacity(iters + 1);
    for it in 0..=iters {
        let residual = lr.zip_map(&degrade_linear(&cur, kernel, sub)?, |a, b| a - b)?;
        norms.push(residual.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        if it == iters {
            break;
        }
        let up = resize_bicubic_to(&residual, cur.height(), cur.width(), scale as f64)?;
        cur = cur.zip_map(&up, |a, b| a + b)?;
    }
    if iters > 0 {
        cur = cur.clamped();
    }
    Ok((cur, norms))
}

/// `srₜ₊₁ = srₜ + U(lr − degrade(srₜ))` with bicubic `U`, clamped to
/// `[0, 1]` after the last iteration.
pub fn back_project(sr: &Image, lr: &Image, kernel: &BlurKernel, mode: SubsampleMode, iters: usize) -> Result<Image> {
    Ok(back_project_traced(sr, lr, kernel, mode, iters)?.0)
}

/// Machine-readable record of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub kernel_source: KernelSource,
    pub kernel_confident: bool,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub gradient_updates: usize,
    pub fine_tune: FineTuneStatus,
    pub ensemble: bool,
    pub backprojection_iters: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Kept apart so that reruns can be compared without it.
    pub timing: Timing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
}

impl AdaptReport {
    /// Fills PSNR/SSIM (Y channel, `scale`-pixel border shaved).
    pub fn score(&mut self, sr: &Image, gt: &Image, scale: usize) -> Result<()> {
        let (p, s) = evaluate_pair(sr, gt, scale)?;
        self.psnr = Some(p);
        self.ssim = Some(s);
        Ok(())
    }
}

pub struct AdaptOutcome {
    pub image: Image,
    pub model: SrModel,
    pub report: AdaptReport,
}

#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let t = std::time::Instant::now();
    move || t.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

/// Fine-tune, then super-resolve the job's image: with the ensemble, each
/// of the 8 branches is back-projected before the median and the median is
/// back-projected again; without it, one forward pass is back-projected.
pub fn super_resolve(job: &AdaptJob) -> Result<AdaptOutcome> {
    let elapsed = stopwatch();
    let tuned = fine_tune(job)?;
    let model = tuned.model;
    let lr = &job.lr_image;
    let bp = |img: Image| back_project(&img, lr, &job.kernel, SubsampleMode::Direct, job.backprojection_iters);
    let image = match (job.ensemble, job.residual_head) {
        (true, false) => bp(geometric_ensemble_with(&model, lr, bp)?)?,
        (true, true) => bp(geometric_ensemble_with(&ResidualUpscaler(&model), lr, bp)?)?,
        (false, false) => bp(model.upscale(lr)?)?,
        (false, true) => bp(ResidualUpscaler(&model).upscale(lr)?)?,
    };
    let report = AdaptReport {
        kernel_source: job.kernel_source,
        kernel_confident: job.kernel_confident,
        losses: tuned.losses,
        final_loss: tuned.final_loss,
        gradient_updates: tuned.gradient_updates,
        fine_tune: tuned.status,
        ensemble: job.ensemble,
        backprojection_iters: job.backprojection_iters,
        psnr: None,
        ssim: None,
        timing: Timing { wall_time_s: elapsed() },
    };
    Ok(AdaptOutcome { image, model, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::TrainMeta;
    use crate::degradation::{scenario_kernel, Scenario};
    use crate::model::ModelConfig;

    fn tiny_job(lr: Image, kernel: BlurKernel) -> AdaptJob {
        let model = SrModel::new(ModelConfig::tiny(), 3).unwrap();
        let ckpt = Checkpoint::from_model(&model, None, TrainMeta::default());
        AdaptJob::new(lr, kernel, KernelSource::Supplied, ckpt)
    }

    #[test]
    fn schedule_values() {
        let s = FineTuneSchedule::default();
        let rates: Vec<f64> = (1..=10).map(|i| schedule_rate(i, &s).unwrap()).collect();
        assert_eq!(rates, [2e-2, 1e-2, 1e-2, 1e-2, 5e-3, 5e-3, 5e-3, 5e-3, 5e-3, 5e-3]);
        assert!(schedule_rate(0, &s).is_err() && schedule_rate(11, &s).is_err());
        let alt = FineTuneSchedule {
            reading: ScheduleReading::HoldFirst,
            ..s
        };
        let rates: Vec<f64> = (1..=6).map(|i| schedule_rate(i, &alt).unwrap()).collect();
        assert_eq!(rates, [2e-2, 2e-2, 2e-2, 2e-2, 1e-2, 5e-3]);
    }

    #[test]
    fn schedule_validation() {
        let bad = FineTuneSchedule {
            rates: [1e-2, 2e-2, 5e-3],
            ..FineTuneSchedule::default()
        };
        assert!(bad.validate().is_err());
        let bad = FineTuneSchedule {
            switch_a: 5,
            ..FineTuneSchedule::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn son_of_delta_kernel_is_decimation() {
        let lr = crate::synth::dead_leaves(9, 7, 1).unwrap();
        let (parent, son) = synthesize_pair(&lr, &BlurKernel::delta(1).unwrap(), 2).unwrap();
        assert_eq!(parent, lr);
        assert_eq!(son.dims(), (5, 4));
        for c in 0..3 {
            for i in 0..5 {
                for j in 0..4 {
                    assert_eq!(son.get(c, i, j), lr.get(c, 2 * i, 2 * j));
                }
            }
        }
    }

    #[test]
    fn zero_iterations_keep_the_model() {
        let lr = crate::synth::dead_leaves(12, 12, 2).unwrap();
        let mut job = tiny_job(lr.clone(), BlurKernel::isotropic_gaussian(1.0, 7).unwrap());
        job.schedule.total_iterations = 0;
        let out = fine_tune(&job).unwrap();
        assert_eq!(out.gradient_updates, 0);
        assert!(out.model.params().bit_equal(job.base_checkpoint.model().unwrap().params()));

        job.ensemble = false;
        job.backprojection_iters = 0;
        let sr = super_resolve(&job).unwrap();
        assert_eq!(sr.image, job.base_checkpoint.model().unwrap().infer(&lr).unwrap());
        assert_eq!(sr.image.dims(), (24, 24));
    }

    #[test]
    fn fine_tune_counts_updates_and_leaves_base_alone() {
        let lr = crate::synth::dead_leaves(12, 10, 4).unwrap();
        let job = tiny_job(lr, BlurKernel::isotropic_gaussian(1.0, 7).unwrap());
        let before = job.base_checkpoint.parameters.clone();
        let out = fine_tune(&job).unwrap();
        assert_eq!(out.gradient_updates, 10);
        assert_eq!(out.losses.len(), 10);
        assert!(job.base_checkpoint.parameters.bit_equal(&before));
        assert!(!out.model.params().bit_equal(&before));
        assert_eq!(out.status, FineTuneStatus::Completed);
    }

    #[test]
    fn residual_head_runs() {
        let lr = crate::synth::dead_leaves(12, 12, 6).unwrap();
        let mut job = tiny_job(lr, BlurKernel::isotropic_gaussian(1.0, 7).unwrap());
        job.residual_head = true;
        job.ensemble = false;
        let out = super_resolve(&job).unwrap();
        assert_eq!(out.image.dims(), (24, 24));
        assert!(out.report.final_loss.is_finite());
    }

    #[test]
    fn median_of_eight() {
        assert_eq!(median8([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 11.0]), 1.0);
        assert_eq!(median8([8.0, 1.0, 7.0, 2.0, 6.0, 3.0, 5.0, 4.0]), 4.5);
    }

    struct Nearest;
    impl Upscaler for Nearest {
        fn upscale(&self, image: &Image) -> Result<Image> {
            Image::from_fn(image.channels(), image.height() * 2, image.width() * 2, |c, i, j| {
                image.get(c, i / 2, j / 2)
            })
        }
    }

    #[test]
    fn ensemble_of_equivariant_upscaler_is_its_output() {
        let img = crate::synth::dead_leaves(6, 5, 8).unwrap();
        assert_eq!(geometric_ensemble(&Nearest, &img).unwrap(), Nearest.upscale(&img).unwrap());
    }

    /// Adds 10 to the output of one transformed branch.
    struct OneOutlier(std::cell::Cell<usize>);
    impl Upscaler for OneOutlier {
        fn upscale(&self, image: &Image) -> Result<Image> {
            let n = self.0.get();
            self.0.set(n + 1);
            let out = Nearest.upscale(image)?;
            Ok(if n == 5 { out.map(|v| v + 10.0) } else { out })
        }
    }

    #[test]
    fn ensemble_median_ignores_one_outlier() {
        let img = Image::filled(3, 4, 4, 0.25).unwrap();
        let out = geometric_ensemble(&OneOutlier(0.into()), &img).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn ensemble_commutes_with_dihedral_transforms() {
        let model = SrModel::new(ModelConfig::tiny(), 9).unwrap();
        let img = crate::synth::dead_leaves(8, 8, 1).unwrap();
        let base = geometric_ensemble(&model, &img).unwrap();
        for t in [Dihedral { rotations: 1, flip: false }, Dihedral { rotations: 2, flip: true }, Dihedral { rotations: 0, flip: true }] {
            let lhs = geometric_ensemble(&model, &t.apply(&img)).unwrap();
            let rhs = t.apply(&base);
            let diff = lhs.data().iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{t:?}: {diff}");
        }
    }

    #[test]
    fn back_projection_fixed_point_and_identity() {
        let (k, sub) = Scenario::DirectIso20.kernel();
        let sr = crate::synth::dead_leaves(32, 32, 3).unwrap();
        let lr = degrade_linear(&sr, &k, sub).unwrap();
        let out = back_project(&sr, &lr, &k, SubsampleMode::Direct, 5).unwrap();
        assert!(out.data().iter().zip(sr.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let other = sr.map(|v| 1.0 - v);
        assert_eq!(back_project(&other, &lr, &k, SubsampleMode::Direct, 0).unwrap(), other);
        assert!(back_project(&sr.crop(0, 0, 30, 32).unwrap(), &lr, &k, SubsampleMode::Direct, 1).is_err());
    }

    #[test]
    fn back_projection_reduces_residual() {
        for name in ["g_d_0.2", "g_d_2.0", "g_d_ani"] {
            let (k, sub) = scenario_kernel(name).unwrap();
            let hr = crate::synth::dead_leaves(32, 32, 5).unwrap();
            let lr = degrade(&hr, &k, sub).unwrap();
            let start = bicubic_up(&lr, 2).unwrap();
            let (_, norms) = back_project_traced(&start, &lr, &k, SubsampleMode::Direct, 8).unwrap();
            assert!(norms.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{name}: {norms:?}");
        }
    }
}
