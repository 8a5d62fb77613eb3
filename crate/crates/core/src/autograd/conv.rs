//! Grouped 2-D convolution (cross-correlation) via im2col + GEMM.

use super::{Tape, Var};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    /// Zero padding on every side.
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> Self {
        let (n, cin, h, w) = x.dims4();
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin/groups, kh, kw]");
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert!(spec.groups >= 1 && cin % spec.groups == 0 && cout % spec.groups == 0);
        assert_eq!(cin / spec.groups, cin_g, "conv input channels mismatch");
        let hp = h + 2 * spec.padding;
        let wp = w + 2 * spec.padding;
        assert!(hp >= kh && wp >= kw, "conv kernel larger than padded input");
        Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
            cin_g,
            cout_g: cout / spec.groups,
            spec,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Input planes of group `g` in batch item `b`.
    fn group_input<'a>(&self, x: &'a [f64], b: usize, g: usize) -> &'a [f64] {
        let plane = self.h * self.w;
        let start = (b * self.cin + g * self.cin_g) * plane;
        &x[start..start + self.cin_g * plane]
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let (p, pad, s) = (self.p(), self.spec.padding as isize, self.spec.stride);
        for ci in 0..self.cin_g {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * s + ki) as isize - pad;
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * s + kj) as isize - pad;
                            *d = if iw < 0 || iw >= self.w as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (p, pad, s) = (self.p(), self.spec.padding as isize, self.spec.stride);
        for ci in 0..self.cin_g {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * s + ki) as isize - pad;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, v) in src.iter().enumerate() {
                            let iw = (ow * s + kj) as isize - pad;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Tensor {
    let geo = Geometry::new(x, weight, spec);
    let (k, p) = (geo.k(), geo.p());
    let mut out = Tensor::zeros(&[geo.n, geo.cout, geo.ho, geo.wo]);
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..geo.n {
        for g in 0..spec.groups {
            let input = geo.group_input(x.data(), b, g);
            let cols_ref: &[f64] = if geo.is_pointwise() {
                input
            } else {
                geo.im2col(input, &mut cols);
                &cols
            };
            let w_g = &weight.data()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
            let o_start = (b * geo.cout + g * geo.cout_g) * p;
            let o = &mut out.data_mut()[o_start..o_start + geo.cout_g * p];
            gemm(geo.cout_g, k, p, w_g, false, cols_ref, false, 0.0, o);
        }
    }
    if let Some(bias) = bias {
        assert_eq!(bias.len(), geo.cout, "conv bias length mismatch");
        for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = bias.data()[i % geo.cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    spec: ConvSpec,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let geo = Geometry::new(x, weight, spec);
    let (k, p) = (geo.k(), geo.p());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[geo.cout]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = vec![0.0; k * p];
    let plane = geo.h * geo.w;
    for b in 0..geo.n {
        for g in 0..spec.groups {
            let input = geo.group_input(x.data(), b, g);
            let cols_ref: &[f64] = if geo.is_pointwise() {
                input
            } else {
                geo.im2col(input, &mut cols);
                &cols
            };
            let o_start = (b * geo.cout + g * geo.cout_g) * p;
            let go = &grad.data()[o_start..o_start + geo.cout_g * p];
            let dw_g = &mut dw.data_mut()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
            gemm(geo.cout_g, p, k, go, false, cols_ref, true, 1.0, dw_g);
            for co in 0..geo.cout_g {
                db.data_mut()[g * geo.cout_g + co] += go[co * p..(co + 1) * p].iter().sum::<f64>();
            }
            if let Some(dx) = dx.as_mut() {
                let w_g = &weight.data()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
                let start = (b * geo.cin + g * geo.cin_g) * plane;
                let dx_g = &mut dx.data_mut()[start..start + geo.cin_g * plane];
                if geo.is_pointwise() {
                    gemm(k, geo.cout_g, p, w_g, true, go, false, 1.0, dx_g);
                } else {
                    gemm(k, geo.cout_g, p, w_g, true, go, false, 0.0, &mut dcols);
                    geo.col2im(&dcols, dx_g);
                }
            }
        }
    }
    (dx, dw, db)
}

impl Tape {
    pub fn conv2d(&self, x: &Var, weight: &Var, bias: Option<&Var>, spec: ConvSpec) -> Var {
        let out = conv2d_forward(x.value(), weight.value(), bias.map(|b| b.value()), spec);
        let (xv, wv) = (x.value.clone(), weight.value.clone());
        let want_dx = x.is_tracked();
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.record(out, &parents, move |g| {
            let (dx, dw, db) = conv2d_backward(&xv, &wv, g, spec, want_dx);
            let mut v = vec![dx, Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        })
    }
}
