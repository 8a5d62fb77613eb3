use super::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

impl Tape {
    /// Batch normalization over `(N, H, W)` using the batch's own statistics.
    pub fn batch_norm_train(&self, x: &Var, gamma: &Var, beta: &Var) -> (Var, BatchStats) {
        let (n, c, h, w) = x.value.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = x.value.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut v = 0.0;
            for b in 0..n {
                v += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|x| (x - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = v / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let (gm, bt) = (gamma.value.data()[ch], beta.value.data()[ch]);
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gm * xh + bt;
                }
            }
        }
        let stats = BatchStats {
            mean,
            var: var
                .iter()
                .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                .collect(),
        };
        let gv = gamma.value.clone();
        let var = self.record(out, &[x, gamma, beta], move |g| {
            let mut dx = Tensor::zeros(g.shape());
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let (mut sg, mut sgx) = (0.0, 0.0);
                for b in 0..n {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        sg += g.data()[i];
                        sgx += g.data()[i] * xhat.data()[i];
                    }
                }
                dgamma[ch] = sgx;
                dbeta[ch] = sg;
                let k = gv.data()[ch] * inv_std[ch] / m;
                for b in 0..n {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dx.data_mut()[i] = k * (m * g.data()[i] - sg - xhat.data()[i] * sgx);
                    }
                }
            }
            vec![
                Some(dx),
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        });
        (var, stats)
    }

    /// Batch normalization with fixed statistics; gradients still reach
    /// `gamma` and `beta`.
    pub fn batch_norm_fixed(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Var {
        let (n, c, h, w) = x.value.dims4();
        let hw = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mean = running_mean.to_vec();
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let (gm, bt) = (gamma.value.data()[ch], beta.value.data()[ch]);
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    out.data_mut()[i] = gm * (x.value.data()[i] - mean[ch]) * inv_std[ch] + bt;
                }
            }
        }
        let (xv, gv) = (x.value.clone(), gamma.value.clone());
        self.record(out, &[x, gamma, beta], move |g| {
            let mut dx = Tensor::zeros(g.shape());
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let k = gv.data()[ch] * inv_std[ch];
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        let gi = g.data()[i];
                        dx.data_mut()[i] = k * gi;
                        dgamma[ch] += gi * (xv.data()[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gi;
                    }
                }
            }
            vec![
                Some(dx),
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        })
    }
}
