//! Browser bindings for three operations of the degradation model:
//! blur-and-downscale with a chosen kernel, bicubic upscaling refined by
//! back-projection against that kernel, and a heatmap of the kernel itself.
//!
//! Images cross the boundary as RGBA bytes (canvas `ImageData` layout).

use wasm_bindgen::prelude::*;

use s2r_core::adapt::back_project;
use s2r_core::degradation::{degrade, resize_bicubic_to, BlurKernel, Scenario, SubsampleMode, Subsampling};
use s2r_core::image::Image;
use s2r_core::metrics::evaluate_pair;
use s2r_core::synth::dead_leaves;

/// An RGBA image.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(constructor)]
    pub fn new(width: usize, height: usize, rgba: Vec<u8>) -> Result<Frame, JsError> {
        Frame::checked(width, height, rgba).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Frame {
    fn checked(width: usize, height: usize, rgba: Vec<u8>) -> Result<Frame, String> {
        if width == 0 || height == 0 || rgba.len() != width * height * 4 {
            return Err(format!("{} bytes do not make a {width}x{height} RGBA image", rgba.len()));
        }
        Ok(Frame { width, height, rgba })
    }

    fn to_image(&self) -> Result<Image, String> {
        let w = self.width;
        Image::from_fn(3, self.height, w, |c, i, j| self.rgba[(i * w + j) * 4 + c] as f64 / 255.0).map_err(err)
    }

    fn from_image(img: &Image) -> Frame {
        let (h, w) = img.dims();
        let mut rgba = vec![255u8; h * w * 4];
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    let v = img.get(c.min(img.channels() - 1), i, j);
                    rgba[(i * w + j) * 4 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Frame { width: w, height: h, rgba }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// A blur kernel plus the subsampling that goes with it.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct Kernel {
    kernel: BlurKernel,
    bicubic: bool,
}

#[wasm_bindgen]
impl Kernel {
    /// One of the named benchmark scenarios (g_d_0.2, g_d_2.0, g_d_ani, g_b_1.3).
    pub fn scenario(name: &str) -> Result<Kernel, JsError> {
        js(Kernel::from_scenario(name))
    }

    /// Anisotropic Gaussian with eigenvalues `lambda1`, `lambda2` and
    /// rotation `theta` (radians).
    pub fn gaussian(lambda1: f64, lambda2: f64, theta: f64, size: usize, bicubic: bool) -> Result<Kernel, JsError> {
        js(BlurKernel::anisotropic_gaussian(lambda1, lambda2, theta, size)
            .map(|kernel| Kernel { kernel, bicubic })
            .map_err(err))
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.kernel.size()
    }

    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.kernel.values().to_vec()
    }

    /// The kernel in the KERNEL v1 text format.
    pub fn text(&self) -> String {
        self.kernel.to_text()
    }

    /// Heatmap with `cell`×`cell` pixels per tap, scaled to the largest tap.
    pub fn heatmap(&self, cell: usize) -> Frame {
        heatmap(&self.kernel, cell.max(1))
    }
}

impl Kernel {
    fn from_scenario(name: &str) -> Result<Kernel, String> {
        let (kernel, sub) = name.parse::<Scenario>().map_err(err)?.kernel();
        Ok(Kernel { kernel, bicubic: sub.mode == SubsampleMode::Bicubic })
    }

    fn subsampling(&self, scale: usize) -> Result<Subsampling, String> {
        let mode = if self.bicubic { SubsampleMode::Bicubic } else { SubsampleMode::Direct };
        Subsampling::new(mode, scale).map_err(err)
    }
}

fn heatmap(kernel: &BlurKernel, cell: usize) -> Frame {
    let n = kernel.size();
    let peak = kernel.values().iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let side = n * cell;
    let mut rgba = vec![255u8; side * side * 4];
    for y in 0..side {
        for x in 0..side {
            let t = kernel.at(y / cell, x / cell) / peak;
            let px = &mut rgba[(y * side + x) * 4..][..3];
            // black → red → yellow → white
            px[0] = (255.0 * (3.0 * t).min(1.0)) as u8;
            px[1] = (255.0 * (3.0 * t - 1.0).clamp(0.0, 1.0)) as u8;
            px[2] = (255.0 * (3.0 * t - 2.0).clamp(0.0, 1.0)) as u8;
        }
    }
    Frame { width: side, height: side, rgba }
}

/// A seeded dead-leaves texture, a stand-in for a natural photograph.
#[wasm_bindgen]
pub fn synthetic_image(width: usize, height: usize, seed: u32) -> Result<Frame, JsError> {
    js(dead_leaves(height, width, seed as u64).map(|img| Frame::from_image(&img)).map_err(err))
}

/// Blurs `hr` with the kernel and subsamples by `scale`.
#[wasm_bindgen]
pub fn degrade_frame(hr: &Frame, kernel: &Kernel, scale: usize) -> Result<Frame, JsError> {
    js(degrade_impl(hr, kernel, scale))
}

fn degrade_impl(hr: &Frame, kernel: &Kernel, scale: usize) -> Result<Frame, String> {
    let lr = degrade(&hr.to_image()?, &kernel.kernel, kernel.subsampling(scale)?).map_err(err)?;
    Ok(Frame::from_image(&lr))
}

/// Bicubic ×`scale` upscaling of `lr` to `out_width`×`out_height` (each
/// within one factor of `scale` times the input), followed by
/// `iters` back-projection steps that pull the result toward consistency
/// with `lr` under the kernel.
#[wasm_bindgen]
pub fn upscale_frame(lr: &Frame, kernel: &Kernel, scale: usize, out_width: usize, out_height: usize, iters: usize) -> Result<Frame, JsError> {
    js(upscale_impl(lr, kernel, scale, out_width, out_height, iters))
}

fn upscale_impl(lr: &Frame, kernel: &Kernel, scale: usize, out_width: usize, out_height: usize, iters: usize) -> Result<Frame, String> {
    let img = lr.to_image()?;
    if scale < 1 || out_width.div_ceil(scale) != lr.width || out_height.div_ceil(scale) != lr.height {
        return Err(format!(
            "{out_width}x{out_height} is not a x{scale} upscaling of {}x{}",
            lr.width, lr.height
        ));
    }
    let up = resize_bicubic_to(&img, out_height, out_width, scale as f64).map_err(err)?;
    let mode = if kernel.bicubic { SubsampleMode::Bicubic } else { SubsampleMode::Direct };
    let out = back_project(&up, &img, &kernel.kernel, mode, iters).map_err(err)?;
    Ok(Frame::from_image(&out.clamped()))
}

/// Y-channel PSNR of `test` against `reference`, shaving a `border`-pixel
/// frame first.
#[wasm_bindgen]
pub fn psnr_y(reference: &Frame, test: &Frame, border: usize) -> Result<f64, JsError> {
    js(score(reference, test, border).map(|(p, _)| p))
}

/// Y-channel SSIM, same conventions as [`psnr_y`].
#[wasm_bindgen]
pub fn ssim_y(reference: &Frame, test: &Frame, border: usize) -> Result<f64, JsError> {
    js(score(reference, test, border).map(|(_, s)| s))
}

fn score(reference: &Frame, test: &Frame, border: usize) -> Result<(f64, f64), String> {
    evaluate_pair(&test.to_image()?, &reference.to_image()?, border).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize) -> Frame {
        Frame::from_image(&dead_leaves(h, w, 3).unwrap())
    }

    #[test]
    fn frames_round_trip_through_images() {
        let f = texture(9, 7);
        assert_eq!(Frame::from_image(&f.to_image().unwrap()), f);
        assert!(Frame::checked(3, 3, vec![0; 35]).is_err());
    }

    #[test]
    fn degrade_shrinks_by_the_scale() {
        let k = Kernel::from_scenario("g_d_2.0").unwrap();
        let lr = degrade_impl(&texture(30, 21), &k, 3).unwrap();
        assert_eq!((lr.width, lr.height), (10, 7));
    }

    #[test]
    fn back_projection_beats_plain_bicubic() {
        let k = Kernel::from_scenario("g_d_2.0").unwrap();
        let hr = texture(64, 64);
        let lr = degrade_impl(&hr, &k, 2).unwrap();
        let plain = upscale_impl(&lr, &k, 2, 64, 64, 0).unwrap();
        let refined = upscale_impl(&lr, &k, 2, 64, 64, 8).unwrap();
        let (p0, _) = score(&hr, &plain, 2).unwrap();
        let (p1, _) = score(&hr, &refined, 2).unwrap();
        assert!(p1 > p0, "{p1} <= {p0}");
        assert!(upscale_impl(&lr, &k, 2, 66, 64, 0).is_err());
    }

    #[test]
    fn heatmap_peaks_at_the_kernel_maximum() {
        let k = Kernel::from_scenario("g_d_2.0").unwrap();
        let n = k.kernel.size();
        let map = heatmap(&k.kernel, 4);
        assert_eq!(map.width, 4 * n);
        let centre = ((n / 2 * 4) * map.width + n / 2 * 4) * 4;
        assert_eq!(&map.rgba[centre..centre + 4], &[255, 255, 255, 255]);
    }
}
