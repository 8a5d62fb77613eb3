//! Subcommand implementations. Each returns `Ok(true)` when every per-file
//! operation succeeded, `Ok(false)` when some failed (already reported on
//! stderr), and `Err` when the command could not run at all.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use s2r_core::adapt::{choose_kernel, geometric_ensemble, super_resolve, AdaptJob, AdaptReport, KernelSource, Timing};
use s2r_core::checkpoint::Checkpoint;
use s2r_core::degradation::{degrade, BlurKernel, Scenario, SubsampleMode, Subsampling};
use s2r_core::image::Image;
use s2r_core::kernel_estim::estimate_kernel;
use s2r_core::metrics::{evaluate_pair, EvalReport, ImageScore};
use s2r_core::model::SrModel;
use s2r_core::train::{ingest_dataset, pretrain, PretrainStatus};

use crate::config::RunConfig;

/// Schema version of the JSON reports written by `pretrain` and `sr`.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const KERNEL_FILE: &str = "kernel.txt";
pub const CHECKPOINT_FILE: &str = "model.s2r";
pub const LOSS_LOG: &str = "loss.log";
pub const PRETRAIN_REPORT: &str = "pretrain_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.with_context(|| format!("reading directory {}", dir.display()))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// A single PNG, or every PNG in a directory. Empty input is an error.
fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    let files = if input.is_dir() {
        list_pngs(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        bail!("input {} does not exist", input.display());
    };
    if files.is_empty() {
        bail!("no PNG images in {}", input.display());
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs `op` on every file, reporting failures on stderr. Returns whether
/// all succeeded.
fn for_each_file(files: &[PathBuf], mut op: impl FnMut(&Path) -> Result<()>) -> bool {
    let mut failures = 0;
    for f in files {
        if let Err(e) = op(f) {
            eprintln!("{}: {e:#}", f.display());
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} of {} file(s) failed", files.len());
    }
    failures == 0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SubsampleArg {
    Direct,
    Bicubic,
}

impl From<SubsampleArg> for SubsampleMode {
    fn from(a: SubsampleArg) -> Self {
        match a {
            SubsampleArg::Direct => SubsampleMode::Direct,
            SubsampleArg::Bicubic => SubsampleMode::Bicubic,
        }
    }
}

// ---------------------------------------------------------------------------
// degrade

#[derive(Args, Debug)]
pub struct DegradeArgs {
    /// Directory of HR PNG images.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for the LR images and the kernel file.
    #[arg(long)]
    pub output: PathBuf,
    /// Named blur scenario: g_d_0.2, g_d_2.0, g_d_ani or g_b_1.3.
    #[arg(long, conflicts_with = "kernel", required_unless_present = "kernel")]
    pub scenario: Option<String>,
    /// Kernel file in the KERNEL v1 text format.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Downscaling factor. Defaults to the scenario's, or 2 with --kernel.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Subsampling after the blur. Defaults to the scenario's, or direct.
    #[arg(long, value_enum)]
    pub subsample: Option<SubsampleArg>,
}

pub fn degrade_cmd(args: &DegradeArgs) -> Result<bool> {
    let (kernel, default_sub) = match (&args.scenario, &args.kernel) {
        (Some(name), _) => name.parse::<Scenario>()?.kernel(),
        (None, Some(path)) => (BlurKernel::load(path)?, Subsampling::direct(2)),
        (None, None) => bail!("one of --scenario or --kernel is required"),
    };
    let sub = Subsampling::new(
        args.subsample.map_or(default_sub.mode, Into::into),
        args.scale.unwrap_or(default_sub.scale),
    )?;
    let files = list_inputs(&args.input)?;
    create_dir(&args.output)?;
    kernel.save(args.output.join(KERNEL_FILE))?;
    Ok(for_each_file(&files, |f| {
        let lr = degrade(&Image::load_png(f)?, &kernel, sub)?;
        lr.save_png(args.output.join(file_name(f)))?;
        Ok(())
    }))
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of HR training PNGs (overrides paths.dataset).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory (overrides paths.checkpoints).
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Overrides train.total_steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct PretrainReport {
    schema_version: u32,
    status: String,
    steps_completed: u64,
    dataset_id: String,
    heldout_l1_initial: f64,
    heldout_l1_final: f64,
    final_loss: Option<f64>,
}

pub fn pretrain_cmd(args: &PretrainArgs) -> Result<bool> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(d) = &args.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    if let Some(c) = &args.checkpoints {
        cfg.paths.checkpoints = Some(c.clone());
    }
    if let Some(s) = args.steps {
        cfg.train.total_steps = s;
    }
    cfg.resolve_seed(args.seed)?;
    let dataset_path = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| anyhow!("no dataset given (use --dataset or paths.dataset)"))?;
    if !dataset_path.is_dir() {
        bail!("dataset directory {} does not exist", dataset_path.display());
    }
    let out_dir = cfg.paths.checkpoints.clone().unwrap_or_else(|| PathBuf::from("checkpoints"));
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dataset = ingest_dataset(&dataset_path)?;
    create_dir(&out_dir)?;
    cfg.persist(&out_dir)?;

    let log_path = out_dir.join(LOSS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let outcome = pretrain(&dataset, &cfg.model, &cfg.train, |rec| {
        if log_err.is_none() {
            log_err = writeln!(log, "{}", rec.to_line()).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush().with_context(|| format!("writing {}", log_path.display()))?;

    outcome.checkpoint.save(out_dir.join(CHECKPOINT_FILE))?;
    let (status, ok) = match &outcome.status {
        PretrainStatus::Completed => ("completed".to_string(), true),
        PretrainStatus::Diverged { step, reason } => (format!("diverged at step {step}: {reason}"), false),
    };
    write_json(
        &out_dir.join(PRETRAIN_REPORT),
        &PretrainReport {
            schema_version: REPORT_SCHEMA_VERSION,
            status: status.clone(),
            steps_completed: outcome.checkpoint.train_meta.steps_completed,
            dataset_id: dataset.id().to_string(),
            heldout_l1_initial: outcome.heldout_initial,
            heldout_l1_final: outcome.heldout_final,
            final_loss: outcome.losses.last().map(|r| r.loss),
        },
    )?;
    println!(
        "{status}: {} steps, held-out L1 {:.4} -> {:.4}, checkpoint {}",
        outcome.checkpoint.train_meta.steps_completed,
        outcome.heldout_initial,
        outcome.heldout_final,
        out_dir.join(CHECKPOINT_FILE).display()
    );
    if !ok {
        eprintln!("training diverged; the checkpoint holds the last finite state");
    }
    Ok(ok)
}

// ---------------------------------------------------------------------------
// estimate-kernel

#[derive(Args, Debug)]
pub struct EstimateKernelArgs {
    /// LR PNG image.
    #[arg(long)]
    pub input: PathBuf,
    /// Kernel file to write; metadata goes to `<output>.json`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides adapt.estimator.iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Overrides adapt.estimator.scale.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn estimate_kernel_cmd(args: &EstimateKernelArgs) -> Result<bool> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    cfg.resolve_seed(args.seed)?;
    let est_cfg = &mut cfg.adapt.estimator;
    if let Some(n) = args.iterations {
        est_cfg.iterations = n;
    }
    if let Some(s) = args.scale {
        est_cfg.scale = s;
    }
    let lr = Image::load_png(&args.input)?;
    let est = estimate_kernel(&lr, est_cfg, cfg.seed)?;
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    est.save(&args.output)?;
    println!(
        "kernel {}x{} written to {} (confident: {})",
        est.kernel.size(),
        est.kernel.size(),
        args.output.display(),
        est.confident
    );
    Ok(true)
}

// ---------------------------------------------------------------------------
// sr

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SrMode {
    /// Plain forward pass of the pretrained model.
    Ideal,
    /// Kernel → fast fine-tune → ensemble and back-projection.
    Blind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Estimate,
    File,
    Scenario,
}

#[derive(Args, Debug)]
pub struct SrArgs {
    /// LR PNG image or directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory (overrides paths.outputs).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "blind")]
    pub mode: SrMode,
    /// Where the blind-mode kernel comes from.
    #[arg(long, value_enum, default_value = "estimate")]
    pub kernel: KernelArg,
    /// Kernel file for --kernel file.
    #[arg(long)]
    pub kernel_file: Option<PathBuf>,
    /// Scenario name for --kernel scenario.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Expected scale; must match the checkpoint.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Ground-truth HR image or directory (matched by file name) for scoring.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Disable the 8-transform median ensemble.
    #[arg(long)]
    pub no_ensemble: bool,
    /// Overrides adapt.backprojection_iters.
    #[arg(long)]
    pub backprojection_iters: Option<usize>,
    /// Overrides adapt.schedule.total_iterations.
    #[arg(long)]
    pub fine_tune_iters: Option<usize>,
    /// Overrides adapt.estimator.iterations.
    #[arg(long)]
    pub estimator_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct SrReport {
    schema_version: u32,
    image_id: String,
    mode: SrMode,
    scale: usize,
    output_height: usize,
    output_width: usize,
    ensemble: bool,
    psnr: Option<f64>,
    ssim: Option<f64>,
    /// Blind mode only.
    adapt: Option<AdaptReport>,
    /// Kept apart so that reruns can be compared without it.
    timing: Timing,
}

pub fn sr_cmd(args: &SrArgs) -> Result<bool> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    cfg.resolve_seed(args.seed)?;
    if args.no_ensemble {
        cfg.adapt.ensemble = false;
    }
    if let Some(n) = args.backprojection_iters {
        cfg.adapt.backprojection_iters = n;
    }
    if let Some(n) = args.fine_tune_iters {
        cfg.adapt.schedule.total_iterations = n;
    }
    if let Some(n) = args.estimator_iters {
        cfg.adapt.estimator.iterations = n;
    }
    if let Some(o) = &args.output {
        cfg.paths.outputs = Some(o.clone());
    }
    let out_dir = cfg.paths.outputs.clone().unwrap_or_else(|| PathBuf::from("sr"));

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let scale = ckpt.model_config.scale;
    if let Some(s) = args.scale.filter(|&s| s != scale) {
        bail!("requested scale {s} does not match the checkpoint's scale {scale}");
    }
    cfg.model = ckpt.model_config.clone();
    cfg.adapt.estimator.scale = scale;
    cfg.adapt.schedule.validate()?;

    // file and scenario kernels are shared by every image
    let shared_kernel = match (args.mode, args.kernel) {
        (SrMode::Blind, KernelArg::File) => {
            let path = args.kernel_file.as_ref().ok_or_else(|| anyhow!("--kernel file needs --kernel-file"))?;
            Some((BlurKernel::load(path)?, KernelSource::File))
        }
        (SrMode::Blind, KernelArg::Scenario) => {
            let name = args.scenario.as_ref().ok_or_else(|| anyhow!("--kernel scenario needs --scenario"))?;
            let scenario: Scenario = name.parse()?;
            let (k, sub) = scenario.kernel();
            if sub.scale != scale {
                bail!("scenario {name} is a x{} degradation but the checkpoint is x{scale}", sub.scale);
            }
            Some((k, KernelSource::Scenario))
        }
        _ => None,
    };

    let files = list_inputs(&args.input)?;
    let model = ckpt.model()?;
    create_dir(&out_dir)?;
    cfg.persist(&out_dir)?;

    Ok(for_each_file(&files, |f| {
        let started = Instant::now();
        let lr = Image::load_png(f)?;
        let (image, adapt) = match args.mode {
            SrMode::Ideal if cfg.adapt.ensemble => (geometric_ensemble(&model, &lr)?, None),
            SrMode::Ideal => (model.infer(&lr)?, None),
            SrMode::Blind => {
                let (kernel, source) = match &shared_kernel {
                    Some(k) => k.clone(),
                    None => choose_kernel(&estimate_kernel(&lr, &cfg.adapt.estimator, cfg.seed)?, scale)?,
                };
                let mut job = AdaptJob::new(lr.clone(), kernel, source, ckpt.clone());
                job.schedule = cfg.adapt.schedule.clone();
                job.ensemble = cfg.adapt.ensemble;
                job.backprojection_iters = cfg.adapt.backprojection_iters;
                job.residual_head = cfg.adapt.residual_head;
                let out = super_resolve(&job)?;
                (out.image, Some(out.report))
            }
        };
        let mut report = SrReport {
            schema_version: REPORT_SCHEMA_VERSION,
            image_id: file_name(f),
            mode: args.mode,
            scale,
            output_height: image.height(),
            output_width: image.width(),
            ensemble: cfg.adapt.ensemble,
            psnr: None,
            ssim: None,
            adapt,
            timing: Timing { wall_time_s: 0.0 },
        };
        if let Some(gt) = &args.gt {
            let gt_path = if gt.is_dir() { gt.join(file_name(f)) } else { gt.clone() };
            let gt_img = Image::load_png(&gt_path)?;
            let (p, s) = evaluate_pair(&image, &gt_img, scale)?;
            report.psnr = Some(p);
            report.ssim = Some(s);
            if let Some(a) = report.adapt.as_mut() {
                a.psnr = Some(p);
                a.ssim = Some(s);
            }
        }
        image.save_png(out_dir.join(file_name(f)))?;
        report.timing.wall_time_s = started.elapsed().as_secs_f64();
        write_json(&out_dir.join(format!("{}.report.json", file_stem(f))), &report)?;
        let score = report.psnr.map(|p| format!(", PSNR {p:.2} dB")).unwrap_or_default();
        println!("{} -> {}x{}{score}", file_name(f), image.height(), image.width());
        Ok(())
    }))
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of super-resolved PNGs.
    #[arg(long)]
    pub sr: PathBuf,
    /// Directory of ground-truth PNGs with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Border width (in pixels) shaved before scoring.
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    /// Report path. Defaults to eval_report.json inside the SR directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn eval_cmd(args: &EvalArgs) -> Result<bool> {
    let names = |dir: &Path| -> Result<Vec<String>> { Ok(list_pngs(dir)?.iter().map(|p| file_name(p)).collect()) };
    let (sr_names, gt_names) = (names(&args.sr)?, names(&args.gt)?);
    if sr_names.is_empty() || gt_names.is_empty() {
        bail!(
            "nothing to evaluate: {} SR and {} GT image(s)",
            sr_names.len(),
            gt_names.len()
        );
    }
    let unmatched: Vec<&String> = sr_names
        .iter()
        .filter(|n| !gt_names.contains(n))
        .chain(gt_names.iter().filter(|n| !sr_names.contains(n)))
        .collect();
    if !unmatched.is_empty() {
        let list: Vec<&str> = unmatched.iter().map(|s| s.as_str()).collect();
        bail!("unmatched files: {}", list.join(", "));
    }

    let files: Vec<PathBuf> = sr_names.iter().map(|n| args.sr.join(n)).collect();
    let mut scores = Vec::new();
    let ok = for_each_file(&files, |f| {
        let name = file_name(f);
        let (psnr_db, ssim) = evaluate_pair(&Image::load_png(f)?, &Image::load_png(args.gt.join(&name))?, args.scale)?;
        scores.push(ImageScore { image_id: name, psnr_db, ssim });
        Ok(())
    });
    let report = EvalReport::new(scores, args.scale);
    let path = args.report.clone().unwrap_or_else(|| args.sr.join(EVAL_REPORT));
    write_json(&path, &report)?;
    print!("{}", report.render_table());
    Ok(ok)
}

// ---------------------------------------------------------------------------
// report-params

#[derive(Args, Debug)]
pub struct ReportParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Drop the MBConv blocks.
    #[arg(long)]
    pub no_mbconv: bool,
    /// Drop the deformable-convolution block.
    #[arg(long)]
    pub no_deform: bool,
    /// Print the breakdown as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub fn report_params_cmd(args: &ReportParamsArgs) -> Result<bool> {
    let mut cfg = RunConfig::load(args.config.as_deref())?.model;
    if args.no_mbconv {
        cfg.use_mbconv = false;
    }
    if args.no_deform {
        cfg.use_deform = false;
    }
    let b = SrModel::new(cfg, 0)?.count_parameters();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&b)?);
        return Ok(true);
    }
    let width = b.blocks.iter().map(|x| x.block.len()).max().unwrap_or(0).max(5);
    println!("{:<width$}  {:>10}  {:>16}", "block", "params", "mults");
    for x in &b.blocks {
        println!("{:<width$}  {:>10}  {:>16}", x.block, x.params, x.flops);
    }
    println!("{:<width$}  {:>10}  {:>16}", "total", b.total_params, b.total_flops);
    println!("multiplies counted for a {}x{} output", b.output_width, b.output_height);
    Ok(true)
}
