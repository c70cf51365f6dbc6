use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::filter::gaussian_blur;
use crate::raster::{BinaryMask, Image};
use crate::rng::RngStream;

use super::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub blur_p: f64,
    pub blur_sigma: f64,
    pub rotate_p: f64,
    /// Any angle with nearest-neighbour resampling instead of quarter turns.
    pub arbitrary_rotation: bool,
    pub sharpen_p: f64,
    /// Unsharp-mask gain: `x + amount·(x − blur(x))`.
    pub sharpen_amount: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur_p: 0.3,
            blur_sigma: 1.0,
            rotate_p: 0.3,
            arbitrary_rotation: false,
            sharpen_p: 0.3,
            sharpen_amount: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            blur_p: 0.0,
            rotate_p: 0.0,
            sharpen_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("blur_p", self.blur_p), ("rotate_p", self.rotate_p), ("sharpen_p", self.sharpen_p)] {
            ensure!((0.0..=1.0).contains(&p), Config, "augment.{name} must lie in [0, 1]");
        }
        ensure!(self.blur_sigma > 0.0, Config, "augment.blur_sigma must be positive");
        ensure!(self.sharpen_amount >= 0.0, Config, "augment.sharpen_amount must be non-negative");
        Ok(())
    }
}

fn per_plane(image: &Image, f: impl Fn(&[f64]) -> Vec<f64>) -> Image {
    let mut out = image.clone();
    for c in 0..image.channels() {
        out.set_plane(c, &f(&image.plane(c)));
    }
    out.clamp_unit();
    out
}

/// Rotates by `quarters`·90° counter-clockwise (in image coordinates, y down).
pub fn rotate_quarter(image: &Image, mask: &BinaryMask, quarters: usize) -> (Image, BinaryMask) {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let q = quarters % 4;
    let (nw, nh) = if q % 2 == 1 { (h, w) } else { (w, h) };
    // Source pixel for each destination pixel.
    let src = |x: usize, y: usize| match q {
        0 => (x, y),
        1 => (w - 1 - y, x),
        2 => (w - 1 - x, h - 1 - y),
        _ => (y, h - 1 - x),
    };
    let mut data = vec![0.0f32; nw * nh * c];
    let mut mdata = vec![0u8; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let (sx, sy) = src(x, y);
            data[(y * nw + x) * c..][..c].copy_from_slice(image.pixel(sx, sy));
            mdata[y * nw + x] = mask.get(sx, sy) as u8;
        }
    }
    (
        Image::new(nw, nh, c, data).expect("rotated size"),
        BinaryMask::new(nw, nh, mdata).expect("rotated size"),
    )
}

/// Nearest-neighbour rotation about the centre; uncovered pixels take the
/// nearest edge colour in the image and background in the mask.
fn rotate_any(image: &Image, mask: &BinaryMask, angle: f64) -> (Image, BinaryMask) {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let (ca, sa) = (angle.cos(), angle.sin());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = image.clone();
    let mut m = BinaryMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = (ca * dx + sa * dy + cx).floor();
            let sy = (-sa * dx + ca * dy + cy).floor();
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            let (ix, iy) = (
                sx.clamp(0.0, w as f64 - 1.0) as usize,
                sy.clamp(0.0, h as f64 - 1.0) as usize,
            );
            out.pixel_mut(x, y)[..c].copy_from_slice(image.pixel(ix, iy));
            m.set(x, y, inside && mask.get(ix, iy));
        }
    }
    (out, m)
}

/// Blur, rotation and sharpening, each with its own probability and in that order.
/// Rotation moves image and mask together; the filters touch the image only.
pub fn augment(image: &Image, mask: &BinaryMask, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<(Image, BinaryMask)> {
    ensure!(
        image.width() == mask.width() && image.height() == mask.height(),
        Input,
        "image and mask sizes differ"
    );
    let (w, h) = (image.width(), image.height());
    let mut img = image.clone();
    let mut m = mask.clone();
    if rng.bernoulli(cfg.blur_p) {
        img = per_plane(&img, |p| gaussian_blur(p, w, h, cfg.blur_sigma));
    }
    if rng.bernoulli(cfg.rotate_p) {
        (img, m) = if cfg.arbitrary_rotation {
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            rotate_any(&img, &m, angle)
        } else {
            let q = rng.int_in(1, 3);
            rotate_quarter(&img, &m, q)
        };
    }
    if rng.bernoulli(cfg.sharpen_p) {
        let (w, h) = (img.width(), img.height());
        img = per_plane(&img, |p| {
            let b = gaussian_blur(p, w, h, 1.0);
            p.iter()
                .zip(&b)
                .map(|(&x, &bx)| x + cfg.sharpen_amount * (x - bx))
                .collect()
        });
    }
    Ok((img, m))
}

pub fn augment_sample(s: &Sample, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<Sample> {
    let (image, mask) = augment(&s.image, &s.mask, cfg, rng)?;
    Ok(Sample {
        image,
        mask,
        label: s.label,
    })
}
