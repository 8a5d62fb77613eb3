//! Brute-force loop oracles and fixtures shared by the integration tests.
//! Everything here is written directly from the definitions, without calling
//! the library routine it checks.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2r_core::checkpoint::Checkpoint;
use s2r_core::degradation::{keys_cubic, BlurKernel};
use s2r_core::image::Image;
use s2r_core::model::ModelConfig;
use s2r_core::params::ParamStore;
use s2r_core::train::{pretrain, Dataset, TrainConfig};
use s2r_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    Image::from_planar(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mirror without repeating the edge sample: `… 2 1 | 0 1 2 …`.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// True convolution with reflect padding, then keeping every `s`-th pixel,
/// then clamping to `[0, 1]`.
pub fn degrade_direct_oracle(img: &Image, k: &BlurKernel, s: usize) -> Image {
    let (h, w) = img.dims();
    let ks = k.size() as isize;
    let r = ks / 2;
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = Image::zeros(img.channels(), oh, ow).unwrap();
    for c in 0..img.channels() {
        for oi in 0..oh {
            for oj in 0..ow {
                let (i, j) = ((oi * s) as isize, (oj * s) as isize);
                let mut acc = 0.0;
                for u in 0..ks {
                    for v in 0..ks {
                        // convolution: k(u, v) multiplies x(i − (u − r), j − (v − r))
                        let si = reflect(i - (u - r), h);
                        let sj = reflect(j - (v - r), w);
                        acc += k.at(u as usize, v as usize) * img.get(c, si, sj);
                    }
                }
                out.set(c, oi, oj, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Symmetric extension with the edge sample repeated: `… 1 0 | 0 1 …`.
fn mirror_edge(j: isize, n: usize) -> usize {
    let n = n as isize;
    let m = j.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Keys (a = −0.5) resampling by `scale`, evaluating the weight of
/// every input sample within a generous radius of each output center.
pub fn bicubic_oracle(img: &Image, out_h: usize, out_w: usize, scale: f64) -> Image {
    let weights = |n_in: usize, i: usize| -> Vec<(usize, f64)> {
        let center = (i as f64 + 0.5) / scale - 0.5;
        let stretch = scale.min(1.0);
        let radius = (2.0 / stretch).ceil() as isize + 2;
        let mut taps = Vec::new();
        for j in (center.floor() as isize - radius)..=(center.floor() as isize + radius) {
            let wgt = stretch * keys_cubic(stretch * (center - j as f64));
            if wgt != 0.0 {
                taps.push((mirror_edge(j, n_in), wgt));
            }
        }
        let total: f64 = taps.iter().map(|t| t.1).sum();
        taps.iter().map(|&(j, w)| (j, w / total)).collect()
    };
    let (h, w) = img.dims();
    Image::from_fn(img.channels(), out_h, out_w, |c, i, j| {
        let mut acc = 0.0;
        for (si, wi) in weights(h, i) {
            for &(sj, wj) in &weights(w, j) {
                acc += wi * wj * img.get(c, si, sj);
            }
        }
        acc
    })
    .unwrap()
}

pub fn psnr_oracle(a: &Image, b: &Image, range: f64) -> f64 {
    let n = a.data().len() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (range * range / mse).log10()).min(99.0)
    }
}

/// Mean SSIM over every fully contained 11×11 window with 2-D Gaussian
/// weights (σ = 1.5), each window evaluated with its own nested loops.
pub fn ssim_oracle(a: &Image, b: &Image, range: f64) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut g = [[0.0; N]; N];
    let mut total = 0.0;
    for (u, row) in g.iter_mut().enumerate() {
        for (v, val) in row.iter_mut().enumerate() {
            let (dy, dx) = (u as f64 - 5.0, v as f64 - 5.0);
            *val = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *val;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let (h, w) = a.dims();
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=h - N {
        for j in 0..=w - N {
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..N {
                for v in 0..N {
                    let wt = g[u][v] / total;
                    mx += wt * a.get(0, i + u, j + v);
                    my += wt * b.get(0, i + u, j + v);
                }
            }
            let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
            for u in 0..N {
                for v in 0..N {
                    let wt = g[u][v] / total;
                    let (x, y) = (a.get(0, i + u, j + v) - mx, b.get(0, i + u, j + v) - my);
                    sx += wt * x * x;
                    sy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// `y[o, p] = b[o] + Σᵢ w[o, i] · x[i, p]` for one batch item.
pub fn conv1x1_oracle(w: &Tensor, b: &Tensor, x: &[f64], hw: usize) -> Vec<f64> {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        for p in 0..hw {
            let mut s = b.data()[o];
            for i in 0..ci {
                s += w.data()[o * ci + i] * x[i * hw + p];
            }
            out[o * hw + p] = s;
        }
    }
    out
}

/// Materializes the five one-pixel group shifts (left, right, up, down,
/// still; zero fill) and applies the 1×1 projection.
pub fn shift_conv_oracle(w: &Tensor, b: &Tensor, x: &Tensor) -> Vec<f64> {
    let (_, c, h, wd) = x.dims4();
    let reads = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0), (0, 0)];
    let group = c / 5;
    let mut shifted = vec![0.0; c * h * wd];
    for ch in 0..c {
        let (dy, dx) = reads[(ch / group).min(4)];
        for i in 0..h as isize {
            for j in 0..wd as isize {
                let (si, sj) = (i + dy, j + dx);
                if (0..h as isize).contains(&si) && (0..wd as isize).contains(&sj) {
                    shifted[ch * h * wd + (i * wd as isize + j) as usize] = x.at4(0, ch, si as usize, sj as usize);
                }
            }
        }
    }
    conv1x1_oracle(w, b, &shifted, h * wd)
}

/// Window self-attention with explicit loops: reflect padding (bottom and
/// right) to the lcm of the window sizes, shared query/key projection,
/// softmax(q·k/√d) per window, crop, output projection.
pub fn gmsa_oracle(s: &ParamStore, prefix: &str, x: &Tensor, windows: &[usize]) -> Vec<f64> {
    let (_, c, h, w) = x.dims4();
    let d = c / windows.len();
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    let l = windows.iter().fold(1, |acc, &m| acc / gcd(acc, m) * m);
    let (hp, wp) = (h.div_ceil(l) * l, w.div_ceil(l) * l);
    let mut xp = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for i in 0..hp {
            for j in 0..wp {
                xp[ch * hp * wp + i * wp + j] = x.at4(0, ch, reflect(i as isize, h), reflect(j as isize, w));
            }
        }
    }
    let p = |n: &str| s.expect(&format!("{prefix}.{n}"));
    let q = conv1x1_oracle(p("qk.weight"), p("qk.bias"), &xp, hp * wp);
    let v = conv1x1_oracle(p("value.weight"), p("value.bias"), &xp, hp * wp);
    let mut att = vec![0.0; c * hp * wp];
    for (g, &m) in windows.iter().enumerate() {
        for wi in 0..hp / m {
            for wj in 0..wp / m {
                let px: Vec<usize> = (0..m * m).map(|t| (wi * m + t / m) * wp + wj * m + t % m).collect();
                for &a in &px {
                    let logits: Vec<f64> = px
                        .iter()
                        .map(|&b| {
                            (0..d).map(|k| q[(g * d + k) * hp * wp + a] * q[(g * d + k) * hp * wp + b]).sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                    for k in 0..d {
                        att[(g * d + k) * hp * wp + a] = px
                            .iter()
                            .zip(&logits)
                            .map(|(&b, lg)| (lg - mx).exp() / z * v[(g * d + k) * hp * wp + b])
                            .sum();
                    }
                }
            }
        }
    }
    let mut cropped = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                cropped[ch * h * w + i * w + j] = att[ch * hp * wp + i * wp + j];
            }
        }
    }
    conv1x1_oracle(p("proj.weight"), p("proj.bias"), &cropped, h * w)
}

/// Deformable 3×3-style convolution by direct bilinear sampling; samples
/// outside the input contribute zero. Offsets hold `(dy, dx)` per deform
/// group and tap.
pub fn deform_conv_oracle(x: &Tensor, off: &Tensor, w: &Tensor, b: &Tensor, groups: usize) -> Vec<f64> {
    let (_, cin, h, wd) = x.dims4();
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let read = |ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.at4(0, ci, y as usize, xx as usize)
        }
    };
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    let dg = ci / (cin / groups);
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let tap = ki * kw + kj;
                            let oy = off.at4(0, 2 * (dg * kh * kw + tap), i, j);
                            let ox = off.at4(0, 2 * (dg * kh * kw + tap) + 1, i, j);
                            let py = i as f64 + ki as f64 - (kh / 2) as f64 + oy;
                            let px = j as f64 + kj as f64 - (kw / 2) as f64 + ox;
                            let (y0, x0) = (py.floor(), px.floor());
                            let (ly, lx) = (py - y0, px - x0);
                            let (y0, x0) = (y0 as isize, x0 as isize);
                            let val = (1.0 - ly) * (1.0 - lx) * read(ci, y0, x0)
                                + (1.0 - ly) * lx * read(ci, y0, x0 + 1)
                                + ly * (1.0 - lx) * read(ci, y0 + 1, x0)
                                + ly * lx * read(ci, y0 + 1, x0 + 1);
                            acc += w.data()[((co * cin + ci) * kh + ki) * kw + kj] * val;
                        }
                    }
                }
                out[(co * h + i) * wd + j] = acc;
            }
        }
    }
    out
}

/// Five synthetic textures used as a stand-in training set.
pub fn synthetic_dataset(seed: u64, side: usize) -> Dataset {
    let images = (0..5)
        .map(|i| (format!("{i:02}.png"), s2r_core::synth::dead_leaves(side, side, seed + i).unwrap()))
        .collect();
    Dataset::from_images(images).unwrap()
}

/// A tiny model pre-trained for `steps` on the synthetic set.
pub fn tiny_checkpoint(steps: u64) -> Checkpoint {
    let ds = synthetic_dataset(100, 96);
    let cfg = TrainConfig {
        total_steps: steps,
        patch_size_hr: 32,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    pretrain(&ds, &ModelConfig::tiny(), &cfg, |_| {}).unwrap().checkpoint
}
