//! Pre-training on an external image set with bicubic LR/HR patch pairs and an
//! L1 objective.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::degradation::bicubic_resize;
use crate::error::{invalid, Error, Result};
use crate::image::{Dihedral, Image};
use crate::model::{Mode, ModelConfig, SrModel, BN_MOMENTUM};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Images are kept decoded in memory while the set holds at most this many
/// samples in total; larger sets are re-read from disk on every draw.
const CACHE_LIMIT_SAMPLES: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size_hr: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub scale: usize,
    pub augment: bool,
    /// Patches in the fixed held-out batch used to judge progress.
    pub heldout_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 4,
            patch_size_hr: 96,
            total_steps: 1000,
            seed: 0,
            scale: 2,
            augment: true,
            heldout_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.patch_size_hr == 0 || !self.patch_size_hr.is_multiple_of(self.scale) {
            return Err(Error::Config(format!(
                "patch_size_hr ({}) must be a positive multiple of scale ({})",
                self.patch_size_hr, self.scale
            )));
        }
        if self.batch_size == 0 || self.heldout_size == 0 {
            return Err(Error::Config("batch_size and heldout_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A directory of RGB PNGs in lexicographic filename order.
#[derive(Clone, Debug)]
pub struct Dataset {
    files: Vec<PathBuf>,
    dims: Vec<(usize, usize)>,
    cache: Option<Vec<Image>>,
    id: String,
}

/// Lists `*.png` under `path` (non-recursive), validating that each decodes
/// to three channels.
pub fn ingest_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        let is_png = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && p.is_file() {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Error::Ingestion(format!("no PNG images in {}", path.display())));
    }
    let mut images = Vec::with_capacity(files.len());
    let mut total = 0usize;
    for f in &files {
        let img = Image::load_png(f)?;
        if img.channels() != 3 {
            return Err(Error::Image {
                path: f.clone(),
                message: format!("expected an RGB image, found {} channel(s)", img.channels()),
            });
        }
        total += img.data().len();
        images.push(img);
    }
    let dims = images.iter().map(Image::dims).collect();
    let mut hasher = Sha256::new();
    for f in &files {
        hasher.update(f.file_name().expect("listed files have names").as_encoded_bytes());
        hasher.update(b"\n");
    }
    Ok(Dataset {
        id: hex::encode(hasher.finalize()),
        cache: (total <= CACHE_LIMIT_SAMPLES).then_some(images),
        files,
        dims,
    })
}

impl Dataset {
    /// In-memory set, for tests and programmatic use. The id hashes the names.
    pub fn from_images(named: Vec<(String, Image)>) -> Result<Self> {
        if named.is_empty() {
            return Err(Error::Ingestion("empty image set".into()));
        }
        let mut hasher = Sha256::new();
        for (n, img) in &named {
            if img.channels() != 3 {
                return Err(Error::Ingestion(format!("{n}: expected an RGB image")));
            }
            hasher.update(n.as_bytes());
            hasher.update(b"\n");
        }
        Ok(Self {
            files: named.iter().map(|(n, _)| PathBuf::from(n)).collect(),
            dims: named.iter().map(|(_, i)| i.dims()).collect(),
            cache: Some(named.into_iter().map(|(_, i)| i).collect()),
            id: hex::encode(hasher.finalize()),
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Hex SHA-256 of the ordered filename list.
    pub fn id(&self) -> &str {
        &self.id
    }

    fn image(&self, i: usize) -> Result<Image> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => Image::load_png(&self.files[i]),
        }
    }
}

/// Draws one `(lr, hr)` patch pair: a uniformly chosen image large enough for
/// the patch, a uniform crop, an optional dihedral transform, and a bicubic
/// `1/scale` downscale for the LR side.
pub fn sample_pair(dataset: &Dataset, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<(Image, Image)> {
    let p = cfg.patch_size_hr;
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.dims[i].0 >= p && dataset.dims[i].1 >= p)
        .collect();
    if eligible.is_empty() {
        return Err(invalid!("no image is at least {p}x{p}"));
    }
    let idx = eligible[rng.random_range(0..eligible.len())];
    let (h, w) = dataset.dims[idx];
    let (top, left) = (rng.random_range(0..=h - p), rng.random_range(0..=w - p));
    let transform = if cfg.augment {
        Dihedral::all()[rng.random_range(0..8)]
    } else {
        Dihedral::IDENTITY
    };
    let hr = dataset.image(idx)?.crop(top, left, p, p)?.transformed(transform);
    let lr = bicubic_resize(&hr, 1.0 / cfg.scale as f64)?;
    Ok((lr, hr))
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(invalid!("l1_loss shapes differ: {:?} vs {:?}", pred.shape(), target.shape()));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

fn stack(images: &[Image]) -> Result<Tensor> {
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

fn sample_batch(dataset: &Dataset, rng: &mut ChaCha8Rng, cfg: &TrainConfig, n: usize) -> Result<(Tensor, Tensor)> {
    let pairs = (0..n).map(|_| sample_pair(dataset, rng, cfg)).collect::<Result<Vec<_>>>()?;
    let (lr, hr): (Vec<Image>, Vec<Image>) = pairs.into_iter().unzip();
    Ok((stack(&lr)?, stack(&hr)?))
}

/// L1 of the model (running batch-norm statistics, unclamped) on a batch.
pub fn batch_l1(model: &SrModel, lr: &Tensor, hr: &Tensor) -> Result<f64> {
    let tape = Tape::inference();
    let bound = model.params().bind(&tape);
    let out = model.forward(&tape, &bound, &tape.constant(lr.clone()), Mode::Adapt, false);
    l1_loss(out.output.value(), hr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

impl LossRecord {
    /// The loss-log line format.
    pub fn to_line(&self) -> String {
        format!("step {} loss {}", self.step, self.loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PretrainStatus {
    Completed,
    /// Loss or a gradient went non-finite at `step`; the checkpoint holds the
    /// state before that step.
    Diverged { step: u64, reason: String },
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub status: PretrainStatus,
    pub losses: Vec<LossRecord>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

/// Runs `total_steps` of sample → forward → L1 → backward → ADAM, calling
/// `on_record` after each step. The held-out batch is drawn from a generator
/// independent of the training stream.
pub fn pretrain(
    dataset: &Dataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if model_config.scale != cfg.scale {
        return Err(Error::Config(format!(
            "model scale {} differs from training scale {}",
            model_config.scale, cfg.scale
        )));
    }
    let mut model = SrModel::new(model_config.clone(), cfg.seed)?;
    let mut adam = Adam::new(model.params(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut heldout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0f4_e1d0_u64);
    let (hold_lr, hold_hr) = sample_batch(dataset, &mut heldout_rng, cfg, cfg.heldout_size)?;
    let heldout_initial = batch_l1(&model, &hold_lr, &hold_hr)?;

    let mut losses = Vec::new();
    let mut status = PretrainStatus::Completed;
    let mut steps_done = 0;
    for step in 1..=cfg.total_steps {
        let (lr, hr) = sample_batch(dataset, &mut rng, cfg, cfg.batch_size)?;
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let out = model.forward(&tape, &bound, &tape.constant(lr), Mode::Train, false);
        let loss = tape.l1_loss(&out.output, &tape.constant(hr));
        let value = loss.item();
        if !value.is_finite() {
            status = PretrainStatus::Diverged {
                step,
                reason: format!("loss is {value}"),
            };
            break;
        }
        let mut grads = tape.backward(&loss);
        let grads = bound.gradients(&mut grads);
        drop(bound);
        if let Err(e) = adam.step(model.params_mut(), &grads, cfg.learning_rate) {
            status = PretrainStatus::Diverged {
                step,
                reason: e.to_string(),
            };
            break;
        }
        model.update_running_stats(&out.bn_stats, BN_MOMENTUM);
        steps_done = step;
        let record = LossRecord { step, loss: value };
        on_record(&record);
        losses.push(record);
    }
    let heldout_final = batch_l1(&model, &hold_lr, &hold_hr)?;
    let meta = TrainMeta {
        steps_completed: steps_done,
        seed: cfg.seed,
        dataset_id: dataset.id().to_string(),
    };
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::from_model(&model, Some(adam), meta),
        status,
        losses,
        heldout_initial,
        heldout_final,
    })
}
