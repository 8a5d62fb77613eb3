//! Procedural test images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;

/// Dead-leaves image: opaque disks with power-law radii (density `∝ r⁻³`,
/// `r ∈ [1, max(h, w)/4]`) and random colors stacked until the canvas is
/// covered. The model has scale-invariant edge statistics, which makes it a
/// convenient stand-in for natural texture.
pub fn dead_leaves(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(3, height, width, 0.5)?;
    let mut covered = vec![false; height * width];
    let mut remaining = height * width;
    let r_min = 1.0f64;
    let r_max = (height.max(width) as f64 / 4.0).max(2.0);
    // front-to-back: a pixel keeps the first disk that covers it
    let mut attempts = 0usize;
    while remaining > 0 && attempts < 200_000 {
        attempts += 1;
        // inverse CDF of p(r) ∝ r⁻³ on [r_min, r_max]
        let u: f64 = rng.random();
        let a = r_min.powi(-2);
        let b = r_max.powi(-2);
        let r = (a - u * (a - b)).powf(-0.5);
        let cy = rng.random_range(-r..height as f64 + r);
        let cx = rng.random_range(-r..width as f64 + r);
        let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let (i0, i1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(height));
        let (j0, j1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(width));
        for i in i0..i1 {
            for j in j0..j1 {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r && !covered[i * width + j] {
                    covered[i * width + j] = true;
                    remaining -= 1;
                    for (c, v) in color.iter().enumerate() {
                        img.set(c, i, j, *v);
                    }
                }
            }
        }
    }
    Ok(img)
}
