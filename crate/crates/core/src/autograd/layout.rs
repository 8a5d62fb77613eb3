//! Index-only ops: padding, cropping, channel slicing, spatial shifts and
//! pixel shuffle. Their backward passes are the adjoint scatters.

use super::{Tape, Var};
use crate::tensor::{reflect_index, Tensor};

/// Spatial shift directions of the five shift-conv channel groups.
pub const SHIFT_GROUPS: usize = 5;

/// `(dh, dw)` such that output `(i, j)` reads input `(i + dh, j + dw)`.
const SHIFTS: [(isize, isize); SHIFT_GROUPS] = [(0, 1), (0, -1), (1, 0), (-1, 0), (0, 0)];

pub(crate) fn shift_groups_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let g = c / SHIFT_GROUPS;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let (dh, dw) = SHIFTS[(ch / g).min(SHIFT_GROUPS - 1)];
            let base = (b * c + ch) * h * w;
            for i in 0..h {
                let si = i as isize + dh;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize + dw;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    out.data_mut()[base + i * w + j] =
                        x.data()[base + si as usize * w + sj as usize];
                }
            }
        }
    }
    out
}

fn shift_groups_adjoint(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4();
    let gs = c / SHIFT_GROUPS;
    let mut dx = Tensor::zeros(g.shape());
    for b in 0..n {
        for ch in 0..c {
            let (dh, dw) = SHIFTS[(ch / gs).min(SHIFT_GROUPS - 1)];
            let base = (b * c + ch) * h * w;
            for i in 0..h {
                let si = i as isize + dh;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize + dw;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    dx.data_mut()[base + si as usize * w + sj as usize] +=
                        g.data()[base + i * w + j];
                }
            }
        }
    }
    dx
}

pub(crate) fn pixel_shuffle_forward(x: &Tensor, s: usize) -> Tensor {
    let (n, cs2, h, w) = x.dims4();
    let c = cs2 / (s * s);
    let mut out = Tensor::zeros(&[n, c, h * s, w * s]);
    for b in 0..n {
        for ci in 0..c {
            for di in 0..s {
                for dj in 0..s {
                    let src_c = ci * s * s + di * s + dj;
                    for i in 0..h {
                        for j in 0..w {
                            let v = x.at4(b, src_c, i, j);
                            out.set4(b, ci, s * i + di, s * j + dj, v);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle_forward`].
pub(crate) fn pixel_unshuffle_forward(x: &Tensor, s: usize) -> Tensor {
    let (n, c, hs, ws) = x.dims4();
    let (h, w) = (hs / s, ws / s);
    let mut out = Tensor::zeros(&[n, c * s * s, h, w]);
    for b in 0..n {
        for ci in 0..c {
            for di in 0..s {
                for dj in 0..s {
                    let dst_c = ci * s * s + di * s + dj;
                    for i in 0..h {
                        for j in 0..w {
                            let v = x.at4(b, ci, s * i + di, s * j + dj);
                            out.set4(b, dst_c, i, j, v);
                        }
                    }
                }
            }
        }
    }
    out
}

impl Tape {
    /// Reflect padding (no edge repetition) by `(top, bottom, left, right)`.
    pub fn pad_reflect(&self, x: &Var, pads: (usize, usize, usize, usize)) -> Var {
        let (top, bottom, left, right) = pads;
        if pads == (0, 0, 0, 0) {
            return x.clone();
        }
        let (n, c, h, w) = x.value.dims4();
        let (hp, wp) = (h + top + bottom, w + left + right);
        let rows: Vec<usize> = (0..hp).map(|i| reflect_index(i as isize - top as isize, h)).collect();
        let cols: Vec<usize> = (0..wp).map(|j| reflect_index(j as isize - left as isize, w)).collect();
        let mut out = Tensor::zeros(&[n, c, hp, wp]);
        for (plane_out, plane_in) in out
            .data_mut()
            .chunks_mut(hp * wp)
            .zip(x.value.data().chunks(h * w))
        {
            for (i, &ri) in rows.iter().enumerate() {
                for (j, &cj) in cols.iter().enumerate() {
                    plane_out[i * wp + j] = plane_in[ri * w + cj];
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.record(out, &[x], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for (plane_in, plane_g) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(hp * wp)) {
                for (i, &ri) in rows.iter().enumerate() {
                    for (j, &cj) in cols.iter().enumerate() {
                        plane_in[ri * w + cj] += plane_g[i * wp + j];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Spatial crop `[top..top+h, left..left+w]`.
    pub fn crop(&self, x: &Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let (n, c, hh, ww) = x.value.dims4();
        assert!(top + h <= hh && left + w <= ww, "crop out of bounds");
        if (top, left, h, w) == (0, 0, hh, ww) {
            return x.clone();
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for (po, pi) in out.data_mut().chunks_mut(h * w).zip(x.value.data().chunks(hh * ww)) {
            for i in 0..h {
                po[i * w..(i + 1) * w]
                    .copy_from_slice(&pi[(top + i) * ww + left..(top + i) * ww + left + w]);
            }
        }
        let in_shape = x.shape().to_vec();
        self.record(out, &[x], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for (pi, po) in dx.data_mut().chunks_mut(hh * ww).zip(g.data().chunks(h * w)) {
                for i in 0..h {
                    pi[(top + i) * ww + left..(top + i) * ww + left + w]
                        .copy_from_slice(&po[i * w..(i + 1) * w]);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&self, x: &Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = x.value.dims4();
        assert!(start + len <= c, "channel slice out of bounds");
        if start == 0 && len == c {
            return x.clone();
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for b in 0..n {
            let src = &x.value.data()[(b * c + start) * plane..(b * c + start + len) * plane];
            out.data_mut()[b * len * plane..(b + 1) * len * plane].copy_from_slice(src);
        }
        let in_shape = x.shape().to_vec();
        self.record(out, &[x], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for b in 0..n {
                dx.data_mut()[(b * c + start) * plane..(b * c + start + len) * plane]
                    .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
            }
            vec![Some(dx)]
        })
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let (n, _, h, w) = parts[0].value.dims4();
        let plane = h * w;
        let widths: Vec<usize> = parts.iter().map(|p| p.value.dims4().1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        let mut offset = 0;
        for (p, &cw) in parts.iter().zip(&widths) {
            assert_eq!(p.value.dims4().2, h);
            assert_eq!(p.value.dims4().3, w);
            for b in 0..n {
                out.data_mut()[(b * total + offset) * plane..(b * total + offset + cw) * plane]
                    .copy_from_slice(&p.value.data()[b * cw * plane..(b + 1) * cw * plane]);
            }
            offset += cw;
        }
        let refs: Vec<&Var> = parts.iter().collect();
        self.record(out, &refs, move |g| {
            let mut offset = 0;
            widths
                .iter()
                .map(|&cw| {
                    let mut d = Tensor::zeros(&[n, cw, h, w]);
                    for b in 0..n {
                        d.data_mut()[b * cw * plane..(b + 1) * cw * plane].copy_from_slice(
                            &g.data()[(b * total + offset) * plane..(b * total + offset + cw) * plane],
                        );
                    }
                    offset += cw;
                    Some(d)
                })
                .collect()
        })
    }

    /// Five-way channel-group shift (left, right, up, down, identity) with zero
    /// fill. A trailing remainder of channels joins the identity group.
    pub fn shift_groups(&self, x: &Var) -> Var {
        let c = x.value.dims4().1;
        assert!(c >= SHIFT_GROUPS, "shift needs at least {SHIFT_GROUPS} channels");
        let out = shift_groups_forward(x.value());
        self.record(out, &[x], |g| vec![Some(shift_groups_adjoint(g))])
    }

    pub fn pixel_shuffle(&self, x: &Var, s: usize) -> Var {
        let c = x.value.dims4().1;
        assert!(c.is_multiple_of(s * s), "pixel shuffle channel count {c} not divisible by {}", s * s);
        let out = pixel_shuffle_forward(x.value(), s);
        self.record(out, &[x], move |g| vec![Some(pixel_unshuffle_forward(g, s))])
    }

    pub fn global_avg_pool(&self, x: &Var) -> Var {
        let (n, c, h, w) = x.value.dims4();
        let hw = h * w;
        let data: Vec<f64> = x.value.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::from_vec(&[n, c, 1, 1], data).expect("pool shape");
        self.record(out, &[x], move |g| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (plane, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                plane.fill(gv / hw as f64);
            }
            vec![Some(dx)]
        })
    }
}
