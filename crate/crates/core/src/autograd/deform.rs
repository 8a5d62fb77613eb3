//! Deformable convolution: a stride-1 "same" convolution whose taps sample
//! the input at learned fractional offsets with bilinear interpolation.
//!
//! Offsets are `[N, 2·kh·kw·G, H, W]` with `(dy, dx)` pairs per deform group
//! `G` and kernel tap. Samples outside the input read as zero.

use super::{Tape, Var};
use crate::tensor::{gemm, Tensor};

struct Sample {
    /// `(flat index, weight)` of up to four in-bounds corners.
    corners: [(usize, f64); 4],
    count: usize,
    dy: f64,
    dx: f64,
    value: f64,
}

/// Bilinear read of `plane[h×w]` at `(py, px)`, with partial derivatives.
fn bilinear(plane: &[f64], h: usize, w: usize, py: f64, px: f64) -> Sample {
    let mut s = Sample {
        corners: [(0, 0.0); 4],
        count: 0,
        dy: 0.0,
        dx: 0.0,
        value: 0.0,
    };
    if py <= -1.0 || py >= h as f64 || px <= -1.0 || px >= w as f64 {
        return s;
    }
    let (y0, x0) = (py.floor(), px.floor());
    let (ly, lx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |y: isize, x: isize| -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
    };
    let taps = [
        (at(y0, x0), (1.0 - ly) * (1.0 - lx)),
        (at(y0, x0 + 1), (1.0 - ly) * lx),
        (at(y0 + 1, x0), ly * (1.0 - lx)),
        (at(y0 + 1, x0 + 1), ly * lx),
    ];
    let v = |i: usize| taps[i].0.map_or(0.0, |k| plane[k]);
    let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
    s.value = taps[0].1 * v00 + taps[1].1 * v01 + taps[2].1 * v10 + taps[3].1 * v11;
    s.dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    s.dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    for (idx, wgt) in taps {
        if let Some(idx) = idx {
            s.corners[s.count] = (idx, wgt);
            s.count += 1;
        }
    }
    s
}

#[derive(Clone, Copy)]
struct Geo {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    groups: usize,
}

impl Geo {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn sample_pos(&self, off: &[f64], b: usize, ci: usize, tap: usize, i: usize, j: usize) -> (f64, f64) {
        let plane = self.h * self.w;
        let dg = ci / (self.cin / self.groups);
        let oc = 2 * (dg * self.taps() + tap);
        let c_total = 2 * self.taps() * self.groups;
        let oy = off[(b * c_total + oc) * plane + i * self.w + j];
        let ox = off[(b * c_total + oc + 1) * plane + i * self.w + j];
        let (ki, kj) = (tap / self.kw, tap % self.kw);
        (
            i as f64 + ki as f64 - (self.kh / 2) as f64 + oy,
            j as f64 + kj as f64 - (self.kw / 2) as f64 + ox,
        )
    }

    /// Sampled columns `[cin·taps, H·W]` for batch item `b`.
    fn columns(&self, x: &[f64], off: &[f64], b: usize, cols: &mut [f64]) {
        let plane = self.h * self.w;
        for ci in 0..self.cin {
            let src = &x[(b * self.cin + ci) * plane..(b * self.cin + ci + 1) * plane];
            for tap in 0..self.taps() {
                let row = (ci * self.taps() + tap) * plane;
                for i in 0..self.h {
                    for j in 0..self.w {
                        let (py, px) = self.sample_pos(off, b, ci, tap, i, j);
                        cols[row + i * self.w + j] = bilinear(src, self.h, self.w, py, px).value;
                    }
                }
            }
        }
    }
}

pub(crate) fn deform_conv2d_forward(
    x: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    groups: usize,
) -> Tensor {
    let geo = geometry(x, offsets, weight, groups);
    let (k, p) = (geo.cin * geo.taps(), geo.h * geo.w);
    let mut out = Tensor::zeros(&[geo.n, geo.cout, geo.h, geo.w]);
    let mut cols = vec![0.0; k * p];
    for b in 0..geo.n {
        geo.columns(x.data(), offsets.data(), b, &mut cols);
        let o = &mut out.data_mut()[b * geo.cout * p..(b + 1) * geo.cout * p];
        gemm(geo.cout, k, p, weight.data(), false, &cols, false, 0.0, o);
        if let Some(bias) = bias {
            for (co, plane) in o.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias.data()[co]);
            }
        }
    }
    out
}

fn geometry(x: &Tensor, offsets: &Tensor, weight: &Tensor, groups: usize) -> Geo {
    let (n, cin, h, w) = x.dims4();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4);
    assert_eq!(ws[1], cin, "deform conv weight/input channel mismatch");
    assert!(ws[2] % 2 == 1 && ws[3] % 2 == 1, "deform conv needs odd kernel");
    assert!(groups >= 1 && cin % groups == 0);
    let geo = Geo {
        n,
        cin,
        h,
        w,
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        groups,
    };
    assert_eq!(
        offsets.shape(),
        &[n, 2 * geo.taps() * groups, h, w],
        "offset tensor shape mismatch"
    );
    geo
}

impl Tape {
    pub fn deform_conv2d(
        &self,
        x: &Var,
        offsets: &Var,
        weight: &Var,
        bias: Option<&Var>,
        groups: usize,
    ) -> Var {
        // integer sample offsets are fixed, so the bilinear cell follows floor(offset)
        self.note_branches(offsets.value().data().iter().map(|v| v.floor() as i64));
        let out = deform_conv2d_forward(x.value(), offsets.value(), weight.value(), bias.map(|b| b.value()), groups);
        let (xv, ov, wv) = (x.value.clone(), offsets.value.clone(), weight.value.clone());
        let mut parents = vec![x, offsets, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.record(out, &parents, move |g| {
            let geo = geometry(&xv, &ov, &wv, groups);
            let (k, p, taps) = (geo.cin * geo.taps(), geo.h * geo.w, geo.taps());
            let mut dx = Tensor::zeros(xv.shape());
            let mut doff = Tensor::zeros(ov.shape());
            let mut dw = Tensor::zeros(wv.shape());
            let mut db = Tensor::zeros(&[geo.cout]);
            let mut cols = vec![0.0; k * p];
            let mut dcols = vec![0.0; k * p];
            let c_off = 2 * taps * geo.groups;
            for b in 0..geo.n {
                let go = &g.data()[b * geo.cout * p..(b + 1) * geo.cout * p];
                geo.columns(xv.data(), ov.data(), b, &mut cols);
                gemm(geo.cout, p, k, go, false, &cols, true, 1.0, dw.data_mut());
                for (co, plane) in go.chunks(p).enumerate() {
                    db.data_mut()[co] += plane.iter().sum::<f64>();
                }
                gemm(k, geo.cout, p, wv.data(), true, go, false, 0.0, &mut dcols);
                for ci in 0..geo.cin {
                    let src = &xv.data()[(b * geo.cin + ci) * p..(b * geo.cin + ci + 1) * p];
                    let dg = ci / (geo.cin / geo.groups);
                    for tap in 0..taps {
                        let row = (ci * taps + tap) * p;
                        let oc = 2 * (dg * taps + tap);
                        for i in 0..geo.h {
                            for j in 0..geo.w {
                                let gcol = dcols[row + i * geo.w + j];
                                if gcol == 0.0 {
                                    continue;
                                }
                                let (py, px) = geo.sample_pos(ov.data(), b, ci, tap, i, j);
                                let s = bilinear(src, geo.h, geo.w, py, px);
                                let dxp = &mut dx.data_mut()[(b * geo.cin + ci) * p..(b * geo.cin + ci + 1) * p];
                                for &(idx, wgt) in &s.corners[..s.count] {
                                    dxp[idx] += wgt * gcol;
                                }
                                let o = doff.data_mut();
                                o[(b * c_off + oc) * p + i * geo.w + j] += s.dy * gcol;
                                o[(b * c_off + oc + 1) * p + i * geo.w + j] += s.dx * gcol;
                            }
                        }
                    }
                }
            }
            let mut v = vec![Some(dx), Some(doff), Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        })
    }
}
