//! Non-overlapping window self-attention with a shared query/key
//! projection.
//!
//! Attention is split into two ops so that maps can be reused across blocks:
//! [`Tape::window_attention_map`] computes `softmax(Q Qᵀ / √d)` per window and
//! [`Tape::window_attention_apply`] multiplies it into the values.

use super::{Tape, Var};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy)]
struct Windows {
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    m: usize,
}

impl Windows {
    fn new(x: &Tensor, m: usize) -> Self {
        let (n, d, h, w) = x.dims4();
        assert!(
            m >= 1 && h % m == 0 && w % m == 0,
            "window {m} does not tile {h}x{w}; pad first"
        );
        Self { n, d, h, w, m }
    }

    fn per_item(&self) -> usize {
        (self.h / self.m) * (self.w / self.m)
    }

    fn tokens(&self) -> usize {
        self.m * self.m
    }

    /// Copies window `win` of batch item `b` into token-major `buf[n_tok × d]`.
    fn gather(&self, x: &[f64], b: usize, win: usize, buf: &mut [f64]) {
        let (wi, wj) = (win / (self.w / self.m), win % (self.w / self.m));
        let plane = self.h * self.w;
        for ch in 0..self.d {
            let base = (b * self.d + ch) * plane;
            for ti in 0..self.m {
                let row = (wi * self.m + ti) * self.w + wj * self.m;
                for tj in 0..self.m {
                    buf[(ti * self.m + tj) * self.d + ch] = x[base + row + tj];
                }
            }
        }
    }

    fn scatter_add(&self, buf: &[f64], b: usize, win: usize, x: &mut [f64]) {
        let (wi, wj) = (win / (self.w / self.m), win % (self.w / self.m));
        let plane = self.h * self.w;
        for ch in 0..self.d {
            let base = (b * self.d + ch) * plane;
            for ti in 0..self.m {
                let row = (wi * self.m + ti) * self.w + wj * self.m;
                for tj in 0..self.m {
                    x[base + row + tj] += buf[(ti * self.m + tj) * self.d + ch];
                }
            }
        }
    }
}

impl Tape {
    /// Row-softmax attention maps `[N, windows, M², M²]` from shared
    /// query/key features `qk[N, d, H, W]`; `H`, `W` must be multiples of `m`.
    pub fn window_attention_map(&self, qk: &Var, m: usize) -> Var {
        let geo = Windows::new(qk.value(), m);
        let (nt, d, nw) = (geo.tokens(), geo.d, geo.per_item());
        let scale = 1.0 / (d as f64).sqrt();
        let mut maps = Tensor::zeros(&[geo.n, nw, nt, nt]);
        let mut q = vec![0.0; nt * d];
        for b in 0..geo.n {
            for win in 0..nw {
                geo.gather(qk.value().data(), b, win, &mut q);
                let a = &mut maps.data_mut()[(b * nw + win) * nt * nt..(b * nw + win + 1) * nt * nt];
                gemm(nt, d, nt, &q, false, &q, true, 0.0, a);
                for row in a.chunks_mut(nt) {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v * scale));
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v * scale - mx).exp();
                        s += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        self.count_attention_mults((geo.n * nw * nt * nt * d) as u64);
        let qv = qk.value.clone();
        let av = maps.clone();
        self.record(maps, &[qk], move |g| {
            let mut dqk = Tensor::zeros(qv.shape());
            let mut q = vec![0.0; nt * d];
            let mut ds = vec![0.0; nt * nt];
            let mut dq = vec![0.0; nt * d];
            for b in 0..geo.n {
                for win in 0..nw {
                    let off = (b * nw + win) * nt * nt;
                    let a = &av.data()[off..off + nt * nt];
                    let da = &g.data()[off..off + nt * nt];
                    for r in 0..nt {
                        let row = r * nt..(r + 1) * nt;
                        let dot: f64 = a[row.clone()].iter().zip(&da[row.clone()]).map(|(x, y)| x * y).sum();
                        for i in row {
                            ds[i] = a[i] * (da[i] - dot);
                        }
                    }
                    // symmetrize: Q feeds both sides of Q Qᵀ
                    for r in 0..nt {
                        for c in r..nt {
                            let s = (ds[r * nt + c] + ds[c * nt + r]) * scale;
                            ds[r * nt + c] = s;
                            ds[c * nt + r] = s;
                        }
                    }
                    geo.gather(qv.data(), b, win, &mut q);
                    gemm(nt, nt, d, &ds, false, &q, false, 0.0, &mut dq);
                    geo.scatter_add(&dq, b, win, dqk.data_mut());
                }
            }
            vec![Some(dqk)]
        })
    }

    /// Applies maps from [`Tape::window_attention_map`] to `v[N, d, H, W]`.
    pub fn window_attention_apply(&self, maps: &Var, v: &Var, m: usize) -> Var {
        let geo = Windows::new(v.value(), m);
        let (nt, d, nw) = (geo.tokens(), geo.d, geo.per_item());
        assert_eq!(maps.shape(), &[geo.n, nw, nt, nt], "attention map shape mismatch");
        let mut out = Tensor::zeros(v.shape());
        let mut vb = vec![0.0; nt * d];
        let mut ob = vec![0.0; nt * d];
        for b in 0..geo.n {
            for win in 0..nw {
                let off = (b * nw + win) * nt * nt;
                geo.gather(v.value().data(), b, win, &mut vb);
                gemm(nt, nt, d, &maps.value().data()[off..off + nt * nt], false, &vb, false, 0.0, &mut ob);
                geo.scatter_add(&ob, b, win, out.data_mut());
            }
        }
        self.count_attention_mults((geo.n * nw * nt * nt * d) as u64);
        let (av, vv) = (maps.value.clone(), v.value.clone());
        self.record(out, &[maps, v], move |g| {
            let mut dmaps = Tensor::zeros(av.shape());
            let mut dv = Tensor::zeros(vv.shape());
            let mut vb = vec![0.0; nt * d];
            let mut gb = vec![0.0; nt * d];
            let mut dvb = vec![0.0; nt * d];
            for b in 0..geo.n {
                for win in 0..nw {
                    let off = (b * nw + win) * nt * nt;
                    geo.gather(vv.data(), b, win, &mut vb);
                    geo.gather(g.data(), b, win, &mut gb);
                    gemm(nt, d, nt, &gb, false, &vb, true, 0.0, &mut dmaps.data_mut()[off..off + nt * nt]);
                    gemm(nt, nt, d, &av.data()[off..off + nt * nt], true, &gb, false, 0.0, &mut dvb);
                    geo.scatter_add(&dvb, b, win, dv.data_mut());
                }
            }
            vec![Some(dmaps), Some(dv)]
        })
    }
}
