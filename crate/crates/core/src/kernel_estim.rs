//! Blind blur-kernel estimation from a single LR image with an internal GAN.
//!
//! A deep linear generator (valid convolutions, no activations, stride 2 in
//! the last layer) learns to downscale crops of the image so that a
//! fully-convolutional patch discriminator cannot tell its output from crops
//! of the image itself. Because the generator is linear and shift-invariant,
//! it is equivalent to one blur kernel followed by decimation; that kernel is
//! the estimate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Tape, Var};
use crate::degradation::{keys_cubic, BlurKernel, ESTIMATED_KERNEL_SIZE};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::metrics::rgb_to_ycbcr_y;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Discriminator loss of a chance-level discriminator under the least-squares
/// objective (all outputs 0.5).
const CHANCE_D_LOSS: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerWeights {
    pub sum_to_one: f64,
    pub boundary: f64,
    pub sparsity: f64,
    pub centered: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            sum_to_one: 0.5,
            boundary: 0.5,
            sparsity: 0.0,
            centered: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub scale: usize,
    /// Spatial size of each generator layer; the layer count is the depth.
    pub generator_kernels: Vec<usize>,
    pub generator_channels: usize,
    pub kernel_size: usize,
    /// Receptive field of the discriminator's first layer.
    pub disc_patch: usize,
    pub disc_channels: usize,
    /// Total discriminator layers (first + 1×1 hidden + output).
    pub disc_depth: usize,
    /// Side of the crops fed to the generator.
    pub crop_size: usize,
    /// Crops per adversarial step.
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Iterations during which the kernel is also pulled toward the
    /// bicubic-equivalent kernel. The generator already starts there, so
    /// this only matters with a large `init_noise`.
    pub bicubic_warmup: usize,
    pub bicubic_weight: f64,
    /// Scale of the random generator weights around the bicubic start.
    pub init_noise: f64,
    pub regularizer_weights: RegularizerWeights,
    /// The estimate is confident once the discriminator loss departs from
    /// chance by more than this.
    pub confidence_margin: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            generator_kernels: vec![7, 5, 3, 1, 1],
            generator_channels: 32,
            kernel_size: ESTIMATED_KERNEL_SIZE,
            disc_patch: 7,
            disc_channels: 32,
            disc_depth: 7,
            crop_size: 64,
            batch_size: 1,
            iterations: 300,
            learning_rate: 3e-4,
            bicubic_warmup: 0,
            bicubic_weight: 5.0,
            init_noise: 0.1,
            regularizer_weights: RegularizerWeights::default(),
            confidence_margin: 0.05,
        }
    }
}

impl EstimatorConfig {
    /// Side of the generator's receptive field.
    pub fn receptive_field(&self) -> usize {
        self.generator_kernels.iter().map(|k| k - 1).sum::<usize>() + 1
    }

    /// Side of the generator output for one crop.
    pub fn generator_output(&self) -> usize {
        (self.crop_size + 1 - self.receptive_field()).div_ceil(self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.generator_kernels.is_empty() || self.generator_kernels.iter().any(|k| k % 2 == 0) {
            return fail("generator layers need odd kernel sizes".into());
        }
        if self.receptive_field() < self.kernel_size {
            return fail(format!(
                "generator receptive field {} is smaller than kernel_size {}",
                self.receptive_field(),
                self.kernel_size
            ));
        }
        if self.scale < 1 || self.generator_channels == 0 || self.disc_channels == 0 || self.disc_depth < 2 {
            return fail("scale, channel counts and disc_depth (≥ 2) must be positive".into());
        }
        if self.crop_size < self.receptive_field() || self.generator_output() < self.disc_patch {
            return fail(format!(
                "crop_size {} leaves a generator output smaller than the discriminator patch {}",
                self.crop_size, self.disc_patch
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// generator

/// Registers generator weights `g.{i}.weight` (no biases). Channel 0 of
/// the first layer holds the bicubic-equivalent kernel and every later layer
/// passes channel 0 through with a centered impulse, so the chain starts as a
/// bicubic downscaler; the remaining weights are fan-in-scaled noise times
/// `init_noise`, which breaks the symmetry between channels.
pub fn init_generator(cfg: &EstimatorConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    let n = cfg.generator_kernels.len();
    for (i, &k) in cfg.generator_kernels.iter().enumerate() {
        let cin = if i == 0 { 1 } else { cfg.generator_channels };
        let cout = if i + 1 == n { 1 } else { cfg.generator_channels };
        let name = format!("g.{i}");
        s.init_conv(rng, &name, [cout, cin, k, k], false)?;
        let w = s.get_mut(&format!("{name}.weight")).expect("just inserted");
        *w = w.map(|v| v * cfg.init_noise);
        let c = k / 2;
        if i == 0 {
            let prior = bicubic_equivalent_kernel(cfg.scale, k)?;
            for y in 0..k {
                for x in 0..k {
                    w.set4(0, 0, y, x, prior.at(y, x));
                }
            }
        } else {
            w.set4(0, 0, c, c, 1.0);
        }
    }
    Ok(s)
}

/// Generator forward on `x[N, 1, H, W]`; the last layer strides by `stride`.
pub fn generator_forward(tape: &Tape, g: &Bound, x: &Var, layers: usize, stride: usize) -> Var {
    let mut h = x.clone();
    for i in 0..layers {
        let spec = ConvSpec {
            stride: if i + 1 == layers { stride } else { 1 },
            ..ConvSpec::default()
        };
        h = tape.conv2d(&h, g.var(&format!("g.{i}.weight")), None, spec);
    }
    h
}

/// The generator's impulse response at stride 1, center-cropped to
/// `kernel_size` (unnormalized, differentiable).
fn effective_kernel_var(tape: &Tape, g: &Bound, layers: usize, receptive: usize, kernel_size: usize) -> Var {
    let side = 2 * receptive - 1;
    let mut impulse = Tensor::zeros(&[1, 1, side, side]);
    impulse.set4(0, 0, receptive - 1, receptive - 1, 1.0);
    let response = generator_forward(tape, g, &tape.constant(impulse), layers, 1);
    let off = (receptive - kernel_size) / 2;
    tape.crop(&response, off, off, kernel_size, kernel_size)
}

fn check_linear_generator(store: &ParamStore) -> Result<usize> {
    let mut layers = 0;
    let mut prev_out = 1;
    for (name, kind, v) in store.iter() {
        let expected = format!("g.{layers}.weight");
        if kind != ParamKind::Trainable || name != expected || v.shape().len() != 4 || v.shape()[1] != prev_out {
            return Err(Error::Contract(format!(
                "{name:?} is not part of a bias-free linear convolution chain"
            )));
        }
        prev_out = v.shape()[0];
        layers += 1;
    }
    if layers == 0 || prev_out != 1 {
        return Err(Error::Contract("generator must map one channel to one channel".into()));
    }
    Ok(layers)
}

/// Collapses a linear generator into one blur kernel: the impulse response
/// at stride 1, center-cropped to `kernel_size`, negatives clipped and
/// normalized to unit sum. The impulse response of a correlation chain is
/// the kernel of the equivalent true convolution, so no flip is needed.
pub fn effective_kernel(generator: &ParamStore, kernel_size: usize) -> Result<BlurKernel> {
    let layers = check_linear_generator(generator)?;
    let receptive: usize = generator.iter().map(|(_, _, v)| v.shape()[2] - 1).sum::<usize>() + 1;
    if kernel_size > receptive || kernel_size.is_multiple_of(2) {
        return Err(invalid!("kernel_size {kernel_size} must be odd and at most the receptive field {receptive}"));
    }
    let tape = Tape::inference();
    let g = generator.bind_frozen(&tape);
    let k = effective_kernel_var(&tape, &g, layers, receptive, kernel_size);
    BlurKernel::from_estimate(kernel_size, k.value().data())
}

// ---------------------------------------------------------------------------
// kernel regularizers

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelPenalties {
    /// `(Σk − 1)²`
    pub sum_to_one: f64,
    /// `Σ |k| ⊙ m` with `m` zero in the core and growing toward the edges.
    pub boundary: f64,
    /// `Σ |k|^0.5`
    pub sparsity: f64,
    /// Squared distance of the centroid from the center cell.
    pub centered: f64,
}

/// Boundary mask: zero on the central `(size − 4)²` block, elsewhere
/// `30·(1 − exp(−r²/(2·size²)))`, so mass in the outer two-pixel ring is
/// penalized more the farther it sits from the center.
pub fn boundary_mask(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let core = (size / 2).saturating_sub(2);
    (0..size * size)
        .map(|p| {
            let (i, j) = (p / size, p % size);
            let inside = i.abs_diff(size / 2) <= core && j.abs_diff(size / 2) <= core;
            if inside {
                0.0
            } else {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                30.0 * (1.0 - (-r2 / (2.0 * (size * size) as f64)).exp())
            }
        })
        .collect()
}

/// Differentiable penalties of a `[1, 1, K, K]` kernel.
fn penalties_var(tape: &Tape, k: &Var) -> [Var; 4] {
    let size = k.shape()[3];
    let shape = k.shape().to_vec();
    let c = (size / 2) as f64;
    let konst = |f: &dyn Fn(usize, usize) -> f64| {
        let data = (0..size * size).map(|p| f(p / size, p % size)).collect();
        tape.constant(Tensor::from_vec(&shape, data).expect("kernel shape"))
    };
    let scalar = |v: f64| tape.constant(Tensor::scalar(v));

    let total = tape.sum(k);
    let d = tape.sub(&total, &scalar(1.0));
    let sum_to_one = tape.mul(&d, &d);

    let mask = tape.constant(Tensor::from_vec(&shape, boundary_mask(size)).expect("kernel shape"));
    let boundary = tape.sum(&tape.mul(&tape.abs_pow(k, 1.0), &mask));

    let sparsity = tape.sum(&tape.abs_pow(k, 0.5));

    let rows = konst(&|i, _| i as f64);
    let cols = konst(&|_, j| j as f64);
    let cy = tape.div(&tape.sum(&tape.mul(k, &rows)), &total);
    let cx = tape.div(&tape.sum(&tape.mul(k, &cols)), &total);
    let dy = tape.sub(&cy, &scalar(c));
    let dx = tape.sub(&cx, &scalar(c));
    let centered = tape.add(&tape.mul(&dy, &dy), &tape.mul(&dx, &dx));
    [sum_to_one, boundary, sparsity, centered]
}

/// Evaluates the four kernel penalties on a square grid.
pub fn kernel_regularizers(values: &[f64], size: usize) -> Result<KernelPenalties> {
    if values.len() != size * size || size == 0 {
        return Err(invalid!("kernel grid of {} values is not {size}×{size}", values.len()));
    }
    let tape = Tape::inference();
    let k = tape.constant(Tensor::from_vec(&[1, 1, size, size], values.to_vec())?);
    let [a, b, c, d] = penalties_var(&tape, &k);
    Ok(KernelPenalties {
        sum_to_one: a.item(),
        boundary: b.item(),
        sparsity: c.item(),
        centered: d.item(),
    })
}

/// The centered anti-aliasing kernel of bicubic `1/scale` downscaling:
/// `keys(x/s)·keys(y/s)` on the integer grid, normalized.
pub fn bicubic_equivalent_kernel(scale: usize, size: usize) -> Result<BlurKernel> {
    if size.is_multiple_of(2) || scale == 0 {
        return Err(invalid!("bicubic-equivalent kernel needs odd size and positive scale"));
    }
    let c = (size / 2) as f64;
    let s = scale as f64;
    let values = (0..size * size)
        .map(|p| keys_cubic(((p / size) as f64 - c) / s) * keys_cubic(((p % size) as f64 - c) / s))
        .map(|v| v.max(0.0))
        .collect();
    BlurKernel::from_grid(size, values, crate::degradation::KernelProvenance::Estimated)
}

// ---------------------------------------------------------------------------
// discriminator

fn init_discriminator(cfg: &EstimatorConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    let c = cfg.disc_channels;
    s.init_conv(rng, "d.0", [c, 1, cfg.disc_patch, cfg.disc_patch], true)?;
    for i in 1..cfg.disc_depth - 1 {
        s.init_conv(rng, &format!("d.{i}"), [c, c, 1, 1], true)?;
        s.insert(format!("d.{i}.bn.weight"), Tensor::full(&[c], 1.0), ParamKind::Trainable)?;
        s.insert(format!("d.{i}.bn.bias"), Tensor::zeros(&[c]), ParamKind::Trainable)?;
    }
    s.init_conv(rng, "d.out", [1, c, 1, 1], true)?;
    Ok(s)
}

/// Per-patch probability map that the input is a real crop.
fn discriminator_forward(tape: &Tape, d: &Bound, x: &Var, depth: usize) -> Var {
    let conv = |x: &Var, name: &str| {
        tape.conv2d(x, d.var(&format!("{name}.weight")), Some(d.var(&format!("{name}.bias"))), ConvSpec::default())
    };
    let mut h = conv(x, "d.0");
    for i in 1..depth - 1 {
        let name = format!("d.{i}");
        let z = conv(&h, &name);
        let (n, _) = tape.batch_norm_train(&z, d.var(&format!("{name}.bn.weight")), d.var(&format!("{name}.bn.bias")));
        h = tape.relu(&n);
    }
    tape.sigmoid(&conv(&h, "d.out"))
}

// ---------------------------------------------------------------------------
// estimation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub kernel: BlurKernel,
    /// False when the discriminator never departed from chance, i.e. the
    /// adversarial signal carried no information.
    pub confident: bool,
    pub iterations: usize,
    pub seed: u64,
    pub d_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
}

/// Metadata stored next to an estimated kernel file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub schema_version: u32,
    pub seed: u64,
    pub iterations: usize,
    pub confident: bool,
    pub kernel_size: usize,
    pub final_d_loss: Option<f64>,
    pub final_g_loss: Option<f64>,
}

impl KernelEstimate {
    pub fn sidecar(&self) -> KernelSidecar {
        KernelSidecar {
            schema_version: 1,
            seed: self.seed,
            iterations: self.iterations,
            confident: self.confident,
            kernel_size: self.kernel.size(),
            final_d_loss: self.d_losses.last().copied(),
            final_g_loss: self.g_losses.last().copied(),
        }
    }

    /// Writes the kernel text file and `<path>.json` metadata beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.kernel.save(path)?;
        let meta_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.sidecar()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
    }
}

pub fn sidecar_path(kernel_path: &Path) -> std::path::PathBuf {
    let mut s = kernel_path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Crop origins drawn with probability proportional to the local gradient
/// magnitude at the crop center (plus a small floor), favouring textured
/// regions where the patch statistics carry information.
struct CropSampler {
    h: usize,
    w: usize,
    weights: Vec<f64>,
}

impl CropSampler {
    fn new(gray: &[f64], h: usize, w: usize) -> Self {
        let at = |i: usize, j: usize| gray[i.min(h - 1) * w + j.min(w - 1)];
        let mut weights = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let gx = at(i, j + 1) - at(i, j.saturating_sub(1));
                let gy = at(i + 1, j) - at(i.saturating_sub(1), j);
                weights[i * w + j] = (gx * gx + gy * gy).sqrt();
            }
        }
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        weights.iter_mut().for_each(|v| *v += 0.1 * mean + 1e-12);
        Self { h, w, weights }
    }

    /// Top-left corner of a `size × size` crop.
    fn sample(&self, rng: &mut ChaCha8Rng, size: usize) -> (usize, usize) {
        let (rows, cols) = (self.h - size + 1, self.w - size + 1);
        let center = size / 2;
        let weight = |p: usize| self.weights[(p / cols + center) * self.w + p % cols + center];
        let total: f64 = (0..rows * cols).map(weight).sum();
        let mut target = rng.random::<f64>() * total;
        for p in 0..rows * cols {
            target -= weight(p);
            if target <= 0.0 {
                return (p / cols, p % cols);
            }
        }
        (rows - 1, cols - 1)
    }
}

/// `count` gradient-weighted crops stacked into `[count, 1, size, size]`.
fn sample_crops(sampler: &CropSampler, gray: &[f64], rng: &mut ChaCha8Rng, size: usize, count: usize) -> Tensor {
    let mut data = Vec::with_capacity(count * size * size);
    for _ in 0..count {
        let (top, left) = sampler.sample(rng, size);
        for i in top..top + size {
            data.extend_from_slice(&gray[i * sampler.w + left..i * sampler.w + left + size]);
        }
    }
    Tensor::from_vec(&[count, 1, size, size], data).expect("crop shape")
}

/// Per-iteration progress; `kernel` is the raw (unnormalized) kernel the
/// generator step was evaluated with.
pub struct IterationRecord<'a> {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub kernel: &'a [f64],
}

/// Estimates the blur kernel that, followed by `scale`× decimation, best
/// maps the image's patch distribution onto itself one scale down.
pub fn estimate_kernel(lr: &Image, cfg: &EstimatorConfig, seed: u64) -> Result<KernelEstimate> {
    estimate_kernel_observed(lr, cfg, seed, |_| {})
}

pub fn estimate_kernel_observed(
    lr: &Image,
    cfg: &EstimatorConfig,
    seed: u64,
    mut observer: impl FnMut(&IterationRecord),
) -> Result<KernelEstimate> {
    cfg.validate()?;
    let min_side = cfg.crop_size.max(32);
    if lr.height() < min_side || lr.width() < min_side {
        return Err(invalid!(
            "image {}x{} is too small for kernel estimation (needs at least {min_side}x{min_side})",
            lr.height(),
            lr.width()
        ));
    }
    let gray = match lr.channels() {
        3 => rgb_to_ycbcr_y(lr)?,
        _ => lr.clone(),
    };
    let (h, w) = gray.dims();
    let px = gray.data();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / px.len() as f64;
    if var < 1e-10 {
        return Err(Error::IllPosed("the image is constant, so it has no patch statistics to match".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g_store = init_generator(cfg, &mut rng)?;
    let mut d_store = init_discriminator(cfg, &mut rng)?;
    let adam_cfg = AdamConfig {
        beta1: 0.5,
        ..AdamConfig::default()
    };
    let mut g_opt = Adam::new(&g_store, adam_cfg);
    let mut d_opt = Adam::new(&d_store, adam_cfg);
    let sampler = CropSampler::new(px, h, w);
    let layers = cfg.generator_kernels.len();
    let receptive = cfg.receptive_field();
    let out_side = cfg.generator_output();
    let bicubic = bicubic_equivalent_kernel(cfg.scale, cfg.kernel_size)?;
    let bicubic_t = Tensor::from_vec(&[1, 1, cfg.kernel_size, cfg.kernel_size], bicubic.values().to_vec())?;
    let rw = cfg.regularizer_weights;

    let mut d_losses = Vec::with_capacity(cfg.iterations);
    let mut g_losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let g_in = sample_crops(&sampler, px, &mut rng, cfg.crop_size, cfg.batch_size);
        let real = sample_crops(&sampler, px, &mut rng, out_side, cfg.batch_size);

        // generator step
        let tape = Tape::new();
        let gb = g_store.bind(&tape);
        let db = d_store.bind_frozen(&tape);
        let fake = generator_forward(&tape, &gb, &tape.constant(g_in), layers, cfg.scale);
        let adversarial = tape.mse_to_const(&discriminator_forward(&tape, &db, &fake, cfg.disc_depth), 1.0);
        let k = effective_kernel_var(&tape, &gb, layers, receptive, cfg.kernel_size);
        let [p_sum, p_bound, p_sparse, p_center] = penalties_var(&tape, &k);
        let mut terms = vec![
            (&adversarial, 1.0),
            (&p_sum, rw.sum_to_one),
            (&p_bound, rw.boundary),
            (&p_sparse, rw.sparsity),
            (&p_center, rw.centered),
        ];
        let prior;
        if it < cfg.bicubic_warmup {
            let diff = tape.sub(&k, &tape.constant(bicubic_t.clone()));
            prior = tape.sum(&tape.mul(&diff, &diff));
            terms.push((&prior, cfg.bicubic_weight));
        }
        let g_loss = tape.weighted_sum(&terms);
        if !g_loss.item().is_finite() {
            return Err(Error::NonFinite(format!("generator loss at iteration {}", it + 1)));
        }
        let mut grads = tape.backward(&g_loss);
        let grads = gb.gradients(&mut grads);
        let fake_value = fake.value().clone();
        let kernel_values = k.value().data().to_vec();
        g_losses.push(g_loss.item());
        drop((gb, db));
        g_opt.step(&mut g_store, &grads, cfg.learning_rate)?;

        // discriminator step on the pre-update generator output
        let tape = Tape::new();
        let db = d_store.bind(&tape);
        let d_real = discriminator_forward(&tape, &db, &tape.constant(real), cfg.disc_depth);
        let d_fake = discriminator_forward(&tape, &db, &tape.constant(fake_value), cfg.disc_depth);
        let real_loss = tape.mse_to_const(&d_real, 1.0);
        let fake_loss = tape.mse_to_const(&d_fake, 0.0);
        let d_loss = tape.weighted_sum(&[(&real_loss, 0.5), (&fake_loss, 0.5)]);
        if !d_loss.item().is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at iteration {}", it + 1)));
        }
        let mut grads = tape.backward(&d_loss);
        let grads = db.gradients(&mut grads);
        d_losses.push(d_loss.item());
        observer(&IterationRecord {
            iteration: it + 1,
            d_loss: d_loss.item(),
            g_loss: g_losses[it],
            kernel: &kernel_values,
        });
        drop(db);
        d_opt.step(&mut d_store, &grads, cfg.learning_rate)?;
    }

    let confident = d_losses.iter().any(|l| (l - CHANCE_D_LOSS).abs() > cfg.confidence_margin);
    Ok(KernelEstimate {
        kernel: effective_kernel(&g_store, cfg.kernel_size)?,
        confident,
        iterations: cfg.iterations,
        seed,
        d_losses,
        g_losses,
    })
}

/// Pearson correlation of two equally sized grids.
pub fn normalized_cross_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid!("correlation needs equal non-empty grids ({} vs {})", a.len(), b.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    Ok(sab / (saa * sbb).sqrt().max(1e-300))
}

/// Correlation of two kernels after center-cropping both to the smaller size.
pub fn kernel_correlation(a: &BlurKernel, b: &BlurKernel) -> Result<f64> {
    let size = a.size().min(b.size());
    normalized_cross_correlation(a.resized(size)?.values(), b.resized(size)?.values())
}
