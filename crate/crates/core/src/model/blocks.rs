//! Building blocks of the network. Each block has an `init_*` that registers
//! its parameters under a name prefix and a forward function that reads them
//! back from a [`Ctx`].

use std::cell::RefCell;

use rand::Rng;

use super::config::ModelConfig;
use crate::autograd::{BatchStats, ConvSpec, Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// How batch norm and the output clamp behave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated afterwards.
    Train,
    /// Running statistics, gradients still flow (per-image fine-tuning).
    Adapt,
    /// Running statistics and output clamped to `[0, 1]`.
    Eval,
}

/// Everything a block's forward pass needs.
pub struct Ctx<'a, 'p> {
    pub tape: &'a Tape,
    pub params: &'a Bound<'p>,
    pub mode: Mode,
    bn_stats: RefCell<Vec<(String, BatchStats)>>,
}

impl<'a, 'p> Ctx<'a, 'p> {
    pub fn new(tape: &'a Tape, params: &'a Bound<'p>, mode: Mode) -> Self {
        Self {
            tape,
            params,
            mode,
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, name: &str) -> &Var {
        self.params.var(name)
    }

    /// Batch statistics gathered by train-mode batch norms, keyed by prefix.
    pub fn take_bn_stats(&self) -> Vec<(String, BatchStats)> {
        self.bn_stats.take()
    }

    fn conv(&self, prefix: &str, x: &Var, groups: usize) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.params.try_var(&format!("{prefix}.bias"));
        self.tape.conv2d(x, w, b, ConvSpec { groups, ..ConvSpec::default() })
    }

    pub fn conv1x1(&self, prefix: &str, x: &Var) -> Var {
        self.conv(prefix, x, 1)
    }

    /// 3×3 convolution on a reflect-padded input ("same" output size).
    pub fn conv3x3(&self, prefix: &str, x: &Var, groups: usize) -> Var {
        let padded = self.tape.pad_reflect(x, (1, 1, 1, 1));
        self.conv(prefix, &padded, groups)
    }

    pub fn batch_norm(&self, prefix: &str, x: &Var) -> Var {
        let gamma = self.param(&format!("{prefix}.weight"));
        let beta = self.param(&format!("{prefix}.bias"));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta);
                self.bn_stats.borrow_mut().push((prefix.to_string(), stats));
                y
            }
            Mode::Adapt | Mode::Eval => {
                let store = self.params.store();
                let mean = store.expect(&format!("{prefix}.running_mean"));
                let var = store.expect(&format!("{prefix}.running_var"));
                self.tape.batch_norm_fixed(x, gamma, beta, mean.data(), var.data())
            }
        }
    }
}

pub fn init_shallow(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, c: usize) -> Result<()> {
    store.init_conv(rng, prefix, [c, 3, 3, 3], true)
}

/// Single 3×3 convolution from RGB to `C` feature channels.
pub fn shallow_extract(ctx: &Ctx, prefix: &str, x: &Var) -> Var {
    ctx.conv3x3(prefix, x, 1)
}

pub fn init_shift_conv(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cin: usize, cout: usize) -> Result<()> {
    store.init_conv(rng, prefix, [cout, cin, 1, 1], true)
}

/// Five-way one-pixel channel-group shift followed by a 1×1 convolution.
pub fn shift_conv(ctx: &Ctx, prefix: &str, x: &Var) -> Var {
    let shifted = ctx.tape.shift_groups(x);
    ctx.conv1x1(prefix, &shifted)
}

pub fn init_gmsa(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, c: usize, own_qk: bool) -> Result<()> {
    if own_qk {
        store.init_conv(rng, &format!("{prefix}.qk"), [c, c, 1, 1], true)?;
    }
    store.init_conv(rng, &format!("{prefix}.value"), [c, c, 1, 1], true)?;
    store.init_conv(rng, &format!("{prefix}.proj"), [c, c, 1, 1], true)
}

/// Group-wise multi-scale window self-attention.
///
/// Channels are split into one group per window size; each group attends
/// within non-overlapping windows of its own size. Queries and keys share one
/// projection. The projected features are reflect-padded to a multiple of the
/// window sizes' lcm and cropped back afterwards. When the block has no query
/// projection, `shared` supplies attention maps computed by an earlier block.
/// Returns the output and the maps used.
pub fn gmsa(ctx: &Ctx, prefix: &str, x: &Var, windows: &[usize], shared: Option<&[Var]>) -> (Var, Vec<Var>) {
    let t = ctx.tape;
    let (_, c, h, w) = x.value().dims4();
    let d = c / windows.len();
    let lcm = windows.iter().fold(1, |l, &m| lcm(l, m));
    let pads = (0, h.next_multiple_of(lcm) - h, 0, w.next_multiple_of(lcm) - w);

    let v = t.pad_reflect(&ctx.conv1x1(&format!("{prefix}.value"), x), pads);
    let maps: Vec<Var> = match ctx.params.try_var(&format!("{prefix}.qk.weight")) {
        Some(_) => {
            let qk = t.pad_reflect(&ctx.conv1x1(&format!("{prefix}.qk"), x), pads);
            windows
                .iter()
                .enumerate()
                .map(|(g, &m)| t.window_attention_map(&t.slice_channels(&qk, g * d, d), m))
                .collect()
        }
        None => shared
            .unwrap_or_else(|| panic!("{prefix} has no query projection and no shared maps"))
            .to_vec(),
    };
    let outs: Vec<Var> = windows
        .iter()
        .enumerate()
        .map(|(g, &m)| t.window_attention_apply(&maps[g], &t.slice_channels(&v, g * d, d), m))
        .collect();
    let joined = t.crop(&t.concat_channels(&outs), 0, 0, h, w);
    (ctx.conv1x1(&format!("{prefix}.proj"), &joined), maps)
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

pub fn init_elab(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &ModelConfig, own_qk: bool) -> Result<()> {
    let c = cfg.channels;
    store.init_batch_norm(&format!("{prefix}.norm1"), c)?;
    init_gmsa(store, rng, &format!("{prefix}.attn"), c, own_qk)?;
    store.init_batch_norm(&format!("{prefix}.norm2"), c)?;
    init_shift_conv(store, rng, &format!("{prefix}.ffn.shift1"), c, cfg.ffn_hidden())?;
    init_shift_conv(store, rng, &format!("{prefix}.ffn.shift2"), cfg.ffn_hidden(), c)
}

/// `y = x + GMSA(BN(x))`, then `y + FFN(BN(y))` with a shift-conv → ReLU →
/// shift-conv feed-forward.
pub fn elab_forward(ctx: &Ctx, prefix: &str, x: &Var, windows: &[usize], shared: Option<&[Var]>) -> (Var, Vec<Var>) {
    let t = ctx.tape;
    let n1 = ctx.batch_norm(&format!("{prefix}.norm1"), x);
    let (a, maps) = gmsa(ctx, &format!("{prefix}.attn"), &n1, windows, shared);
    let y = t.add(x, &a);
    let n2 = ctx.batch_norm(&format!("{prefix}.norm2"), &y);
    let hidden = t.relu(&shift_conv(ctx, &format!("{prefix}.ffn.shift1"), &n2));
    let f = shift_conv(ctx, &format!("{prefix}.ffn.shift2"), &hidden);
    (t.add(&y, &f), maps)
}

pub fn init_mbconv(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let (c, h, s) = (cfg.channels, cfg.mbconv_hidden(), cfg.se_hidden());
    store.init_conv(rng, &format!("{prefix}.expand"), [h, c, 1, 1], true)?;
    store.init_conv(rng, &format!("{prefix}.depthwise"), [h, 1, 3, 3], true)?;
    store.init_conv(rng, &format!("{prefix}.se.reduce"), [s, h, 1, 1], true)?;
    store.init_conv(rng, &format!("{prefix}.se.expand"), [h, s, 1, 1], true)?;
    store.init_conv(rng, &format!("{prefix}.project"), [c, h, 1, 1], true)
}

/// Inverted residual: expand 1×1 → ReLU → depthwise 3×3 → ReLU →
/// squeeze-and-excitation gate → project 1×1, plus the skip.
pub fn mbconv_forward(ctx: &Ctx, prefix: &str, x: &Var) -> Var {
    let t = ctx.tape;
    let e = t.relu(&ctx.conv1x1(&format!("{prefix}.expand"), x));
    let hidden = e.shape()[1];
    let dw = t.relu(&ctx.conv3x3(&format!("{prefix}.depthwise"), &e, hidden));
    let pooled = t.global_avg_pool(&dw);
    let squeezed = t.relu(&ctx.conv1x1(&format!("{prefix}.se.reduce"), &pooled));
    let gate = t.sigmoid(&ctx.conv1x1(&format!("{prefix}.se.expand"), &squeezed));
    let gated = t.mul_channels(&dw, &gate);
    t.add(x, &ctx.conv1x1(&format!("{prefix}.project"), &gated))
}

pub fn init_deform(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let (c, d, g) = (cfg.channels, cfg.deform_width, cfg.deform_groups);
    store.init_conv(rng, &format!("{prefix}.reduce"), [d, c, 1, 1], true)?;
    // zero offsets: the block starts out as a standard 3×3 convolution
    store.insert(format!("{prefix}.offset.weight"), Tensor::zeros(&[18 * g, d, 3, 3]), ParamKind::Trainable)?;
    store.insert(format!("{prefix}.offset.bias"), Tensor::zeros(&[18 * g]), ParamKind::Trainable)?;
    store.init_conv(rng, &format!("{prefix}.conv"), [d, d, 3, 3], true)?;
    store.init_conv(rng, &format!("{prefix}.expand"), [c, d, 1, 1], true)
}

/// Bottlenecked deformable 3×3 convolution with a skip: reduce 1×1 →
/// offsets from a 3×3 convolution → deformable 3×3 → expand 1×1.
pub fn deform_forward(ctx: &Ctx, prefix: &str, x: &Var, groups: usize) -> Var {
    let t = ctx.tape;
    let r = ctx.conv1x1(&format!("{prefix}.reduce"), x);
    let offsets = ctx.conv3x3(&format!("{prefix}.offset"), &r, 1);
    let d = t.deform_conv2d(
        &r,
        &offsets,
        ctx.param(&format!("{prefix}.conv.weight")),
        ctx.params.try_var(&format!("{prefix}.conv.bias")),
        groups,
    );
    t.add(x, &ctx.conv1x1(&format!("{prefix}.expand"), &d))
}

pub fn init_reconstruct(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, c: usize, scale: usize) -> Result<()> {
    if scale == 4 {
        store.init_conv(rng, &format!("{prefix}.0"), [4 * c, c, 3, 3], true)?;
        store.init_conv(rng, &format!("{prefix}.1"), [12, c, 3, 3], true)
    } else {
        store.init_conv(rng, &format!("{prefix}.0"), [3 * scale * scale, c, 3, 3], true)
    }
}

/// Sub-pixel reconstruction: 3×3 convolution then pixel shuffle; scale 4 runs
/// two ×2 stages.
pub fn reconstruct(ctx: &Ctx, prefix: &str, x: &Var, scale: usize) -> Var {
    let t = ctx.tape;
    if scale == 4 {
        let mid = t.pixel_shuffle(&ctx.conv3x3(&format!("{prefix}.0"), x, 1), 2);
        t.pixel_shuffle(&ctx.conv3x3(&format!("{prefix}.1"), &mid, 1), 2)
    } else {
        t.pixel_shuffle(&ctx.conv3x3(&format!("{prefix}.0"), x, 1), scale)
    }
}
