//! Planar floating-point images and 8-bit PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Rgb,
    Gray,
    /// Luma plane of BT.601 YCbCr.
    YcbcrY,
}

/// `channels × height × width` samples, nominally in `[0, 1]`, stored
/// plane by plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    colorspace: ColorSpace,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_planar(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_planar(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds an image from planar data. Three channels are tagged RGB, one
    /// channel gray.
    pub fn from_planar(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(invalid!("image must have 1 or 3 channels, got {channels}"));
        }
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive, got {height}x{width}"));
        }
        if data.len() != channels * height * width {
            return Err(invalid!(
                "expected {} samples for {channels}x{height}x{width}, got {}",
                channels * height * width,
                data.len()
            ));
        }
        let colorspace = if channels == 3 { ColorSpace::Rgb } else { ColorSpace::Gray };
        Ok(Self {
            channels,
            height,
            width,
            colorspace,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self::from_planar(channels, height, width, data)
    }

    pub fn with_colorspace(mut self, colorspace: ColorSpace) -> Self {
        self.colorspace = colorspace;
        self
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        })
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(invalid!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.channels,
                self.height,
                self.width,
                other.channels,
                other.height,
                other.width
            ));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Sub-image `[top..top+h, left..left+w]`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(invalid!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height,
                self.width
            ));
        }
        let mut out = Self::zeros(self.channels, h, w)?.with_colorspace(self.colorspace);
        for c in 0..self.channels {
            for i in 0..h {
                for j in 0..w {
                    out.set(c, i, j, self.get(c, top + i, left + j));
                }
            }
        }
        Ok(out)
    }

    /// `[1, C, H, W]` tensor view of the samples.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("image dims")
    }

    /// Batch item `index` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("expected NCHW tensor, got {:?}", t.shape())));
        }
        let (_, c, h, w) = t.dims4();
        let n = c * h * w;
        Self::from_planar(c, h, w, t.data()[index * n..(index + 1) * n].to_vec())
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / self.data.len() as f64)
    }

    /// Loads an 8-bit PNG; samples become `v / 255`. Gray-alpha and RGBA
    /// lose their alpha plane.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Self::from_planar(1, h as usize, w as usize, data)
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.as_raw();
            Self::from_fn(3, h, w, |c, i, j| raw[(i * w + j) * 3 + c] as f64 / 255.0)
        }
    }

    /// Saves as 8-bit PNG, quantizing with `round(clamp(v) · 255)`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height, self.width);
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let result = if self.channels == 3 {
            let mut raw = vec![0u8; h * w * 3];
            for i in 0..h {
                for j in 0..w {
                    for c in 0..3 {
                        raw[(i * w + j) * 3 + c] = q(self.get(c, i, j));
                    }
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, raw).map(|b| b.save(path))
        } else {
            let raw = self.data.iter().map(|&v| q(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, raw).map(|b| b.save(path))
        };
        match result {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            None => Err(Error::Image {
                path: path.to_path_buf(),
                message: "buffer size mismatch".into(),
            }),
        }
    }

    pub fn transformed(&self, t: Dihedral) -> Self {
        t.apply(self)
    }
}

/// One of the eight symmetries of the square: a horizontal flip (applied
/// first, if set) followed by `rotations` quarter turns counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rotations: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        rotations: 0,
        flip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = Dihedral {
                rotations: (k % 4) as u8,
                flip: k >= 4,
            };
        }
        out
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            // (R^k F)^-1 = F R^-k = R^k F
            self
        } else {
            Dihedral {
                rotations: (4 - self.rotations % 4) % 4,
                flip: false,
            }
        }
    }

    pub fn apply(self, img: &Image) -> Image {
        let mut out = if self.flip { flip_horizontal(img) } else { img.clone() };
        for _ in 0..self.rotations % 4 {
            out = rotate_ccw(&out);
        }
        out
    }

    pub fn compose(self, then: Dihedral) -> Dihedral {
        // find by action on a probe; the group is tiny
        let probe = Image::from_fn(1, 2, 3, |_, i, j| (i * 3 + j) as f64).expect("probe");
        let target = then.apply(&self.apply(&probe));
        Dihedral::all()
            .into_iter()
            .find(|d| d.apply(&probe) == target)
            .expect("dihedral group is closed")
    }
}

fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = img.dims();
    let mut out = img.clone();
    for c in 0..img.channels() {
        for i in 0..h {
            for j in 0..w {
                out.set(c, i, j, img.get(c, i, w - 1 - j));
            }
        }
    }
    out
}

fn rotate_ccw(img: &Image) -> Image {
    let (h, w) = img.dims();
    let mut out = Image::zeros(img.channels(), w, h)
        .expect("dims")
        .with_colorspace(img.colorspace());
    for c in 0..img.channels() {
        for i in 0..w {
            for j in 0..h {
                out.set(c, i, j, img.get(c, j, w - 1 - i));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(3, 4, 5, |c, i, j| (c * 100 + i * 10 + j) as f64).unwrap()
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let img = Image::from_fn(1, 2, 3, |_, i, j| (i * 3 + j) as f64).unwrap();
        // [[0,1,2],[3,4,5]] turned CCW -> [[2,5],[1,4],[0,3]]
        let r = Dihedral { rotations: 1, flip: false }.apply(&img);
        assert_eq!(r.dims(), (3, 2));
        assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
        let f = Dihedral { rotations: 0, flip: true }.apply(&img);
        assert_eq!(f.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn inverses_undo() {
        let img = ramp();
        for d in Dihedral::all() {
            assert_eq!(d.inverse().apply(&d.apply(&img)), img, "{d:?}");
        }
    }

    #[test]
    fn group_is_closed_and_distinct() {
        let img = ramp();
        let outs: Vec<Image> = Dihedral::all().iter().map(|d| d.apply(&img)).collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(outs[a], outs[b]);
            }
        }
        for a in Dihedral::all() {
            for b in Dihedral::all() {
                let c = a.compose(b);
                assert_eq!(c.apply(&img), b.apply(&a.apply(&img)));
            }
        }
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_fn(3, 3, 4, |c, i, j| ((c + i * 4 + j) as f64 / 20.0).min(1.0)).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.dims(), (3, 4));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*b, (a * 255.0).round() / 255.0);
        }
    }

    #[test]
    fn rejects_bad_channel_counts() {
        assert!(Image::zeros(2, 4, 4).is_err());
        assert!(Image::zeros(3, 0, 4).is_err());
    }
}
