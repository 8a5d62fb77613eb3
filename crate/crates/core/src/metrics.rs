//! Y-channel PSNR/SSIM evaluation.
//!
//! Both metrics run on the BT.601 studio-range luma plane with a border of
//! `scale` pixels removed from every side.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{ColorSpace, Image};

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255` on `[0, 1]` inputs.
pub fn rgb_to_ycbcr_y(image: &Image) -> Result<Image> {
    if image.channels() != 3 || image.colorspace() != ColorSpace::Rgb {
        return Err(invalid!("luma conversion needs an RGB image"));
    }
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let y = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)
        .collect();
    Ok(Image::from_planar(1, image.height(), image.width(), y)?.with_colorspace(ColorSpace::YcbcrY))
}

fn check_pair(reference: &Image, test: &Image) -> Result<()> {
    if reference.channels() != 1 || test.channels() != 1 {
        return Err(invalid!("metrics need single-channel images"));
    }
    reference.check_same_shape(test)
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Image, test: &Image, data_range: f64) -> Result<f64> {
    check_pair(reference, test)?;
    let mse = reference.mse(test)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering of a plane.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            tmp[i * ow + j] = (0..SSIM_WINDOW).map(|k| win[k] * src[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|k| win[k] * tmp[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows (σ = 1.5).
pub fn ssim(reference: &Image, test: &Image, data_range: f64) -> Result<f64> {
    check_pair(reference, test)?;
    let (h, w) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let win = gaussian_window();
    let (x, y) = (reference.data(), test.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mu_x = filter_valid(x, h, w, &win);
    let mu_y = filter_valid(y, h, w, &win);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &win);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &win);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &win);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = xx[i] - mx * mx;
            let sy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn to_luma(image: &Image) -> Result<Image> {
    match image.channels() {
        3 => rgb_to_ycbcr_y(image),
        _ => Ok(image.clone()),
    }
}

/// Y-channel `(psnr_db, ssim)` of an SR output against ground truth. The
/// ground truth is trimmed to the SR dimensions first, then `scale` pixels
/// are cropped from every border of both.
pub fn evaluate_pair(sr: &Image, gt: &Image, scale: usize) -> Result<(f64, f64)> {
    let (h, w) = sr.dims();
    if gt.height() < h || gt.width() < w || sr.channels() != gt.channels() {
        return Err(invalid!(
            "ground truth {}x{}x{} cannot be matched to SR output {}x{h}x{w}",
            gt.channels(),
            gt.height(),
            gt.width(),
            sr.channels()
        ));
    }
    if h <= 2 * scale || w <= 2 * scale {
        return Err(invalid!("{h}x{w} image leaves nothing after a {scale}-pixel border crop"));
    }
    let gt = gt.crop(0, 0, h, w)?;
    let crop = |img: &Image| img.crop(scale, scale, h - 2 * scale, w - 2 * scale);
    let y_sr = crop(&to_luma(sr)?)?;
    let y_gt = crop(&to_luma(&gt)?)?;
    Ok((psnr(&y_gt, &y_sr, 1.0)?, ssim(&y_gt, &y_sr, 1.0)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub border_crop: usize,
    pub channel: String,
    pub data_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub per_image: Vec<ImageScore>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    pub const SCHEMA_VERSION: u32 = 1;

    /// Aggregates scores, sorted by image id.
    pub fn new(mut per_image: Vec<ImageScore>, scale: usize) -> Self {
        per_image.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let n = per_image.len().max(1) as f64;
        let mean_psnr_db = per_image.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self {
            schema_version: Self::SCHEMA_VERSION,
            per_image,
            mean_psnr_db,
            mean_ssim,
            protocol: EvalProtocol {
                border_crop: scale,
                channel: "Y".into(),
                data_range: 1.0,
            },
        }
    }

    /// Plain-text grid: one row per image plus the mean.
    pub fn render_table(&self) -> String {
        let width = self
            .per_image
            .iter()
            .map(|s| s.image_id.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>7}\n", "image", "PSNR(dB)", "SSIM");
        for s in &self.per_image {
            out.push_str(&format!("{:<width$}  {:>9.2}  {:>7.4}\n", s.image_id, s.psnr_db, s.ssim));
        }
        out.push_str(&format!(
            "{:<width$}  {:>9.2}  {:>7.4}\n",
            "mean", self.mean_psnr_db, self.mean_ssim
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_fn(1, h, w, |_, i, j| f(i, j)).unwrap()
    }

    #[test]
    fn luma_of_black_white_gray() {
        let black = Image::filled(3, 1, 1, 0.0).unwrap();
        let white = Image::filled(3, 1, 1, 1.0).unwrap();
        assert!((rgb_to_ycbcr_y(&black).unwrap().data()[0] - 16.0 / 255.0).abs() < 1e-12);
        assert!((rgb_to_ycbcr_y(&white).unwrap().data()[0] - 235.0 / 255.0).abs() < 1e-12);
        for g in [0.1, 0.37, 0.8] {
            let y = rgb_to_ycbcr_y(&Image::filled(3, 1, 1, g).unwrap()).unwrap().data()[0];
            assert!((y - (219.0 * g + 16.0) / 255.0).abs() < 1e-12);
        }
        assert!(rgb_to_ycbcr_y(&Image::filled(1, 2, 2, 0.0).unwrap()).is_err());
    }

    #[test]
    fn psnr_known_values() {
        let a = gray(4, 4, |_, _| 0.0);
        let b = gray(4, 4, |_, _| 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &gray(4, 5, |_, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_basic_properties() {
        let a = gray(16, 16, |i, j| ((i * 7 + j * 3) % 13) as f64 / 13.0);
        let b = gray(16, 16, |i, j| ((i * 5 + j * 11) % 17) as f64 / 17.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let ab = ssim(&a, &b, 1.0).unwrap();
        assert!((ab - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        assert!(ab < 1.0);
        assert!(ssim(&gray(10, 16, |_, _| 0.0), &gray(10, 16, |_, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn evaluate_pair_identical_and_crop() {
        let gt = Image::from_fn(3, 64, 64, |c, i, j| ((c + i * j) % 29) as f64 / 29.0).unwrap();
        assert_eq!(evaluate_pair(&gt, &gt, 2).unwrap().0, PSNR_CAP_DB);
        assert!((evaluate_pair(&gt, &gt, 2).unwrap().1 - 1.0).abs() < 1e-9);
        // an error confined to the 2-pixel border is invisible
        let mut sr = gt.clone();
        for c in 0..3 {
            for k in 0..64 {
                sr.set(c, 0, k, 0.0);
                sr.set(c, 1, k, 0.0);
                sr.set(c, k, 63, 1.0);
            }
        }
        assert_eq!(evaluate_pair(&sr, &gt, 2).unwrap().0, PSNR_CAP_DB);
        sr.set(0, 2, 2, 1.0 - sr.get(0, 2, 2));
        assert!(evaluate_pair(&sr, &gt, 2).unwrap().0 < PSNR_CAP_DB);
    }

    #[test]
    fn report_means() {
        let r = EvalReport::new(
            vec![
                ImageScore { image_id: "b".into(), psnr_db: 30.0, ssim: 0.9 },
                ImageScore { image_id: "a".into(), psnr_db: 20.0, ssim: 0.5 },
            ],
            2,
        );
        assert_eq!(r.per_image[0].image_id, "a");
        assert!((r.mean_psnr_db - 25.0).abs() < 1e-12);
        assert!((r.mean_ssim - 0.7).abs() < 1e-12);
        assert!(r.render_table().contains("mean"));
    }
}
