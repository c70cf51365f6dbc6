use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::ClassLabel;
use crate::error::{ensure, Result};
use crate::filter::gaussian_blur;
use crate::raster::{BinaryMask, Image};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: BinaryMask,
    pub label: ClassLabel,
}

/// Generator settings. Lengths are fractions of the image side unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Inclusive range of lesions per image; `[0, 0]` yields healthy images.
    pub lesion_count: [usize; 2],
    /// Major semi-axis range.
    pub semi_axis: [f64; 2],
    /// Minor/major axis ratio range.
    pub aspect: [f64; 2],
    /// Maximum radial boundary perturbation (relative).
    pub perturbation: f64,
    /// Lesion centres are drawn from this central band.
    pub center_band: [f64; 2],
    pub skin_color: [f64; 3],
    pub skin_jitter: f64,
    pub skin_variation: f64,
    pub lesion_color: [f64; 3],
    pub lesion_jitter: f64,
    pub lesion_texture: f64,
    pub pixel_noise: f64,
    pub hair_rate: f64,
    pub bubble_rate: f64,
    /// Not read from config documents; the caller sets it.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            lesion_count: [1, 1],
            semi_axis: [0.12, 0.25],
            aspect: [0.6, 1.0],
            perturbation: 0.15,
            center_band: [0.3, 0.7],
            skin_color: [0.86, 0.68, 0.58],
            skin_jitter: 0.04,
            skin_variation: 0.02,
            lesion_color: [0.45, 0.28, 0.20],
            lesion_jitter: 0.05,
            lesion_texture: 0.04,
            pixel_noise: 0.02,
            hair_rate: 0.3,
            bubble_rate: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_size >= 4, Config, "synth.image_size must be at least 4");
        ensure!(
            self.lesion_count[0] <= self.lesion_count[1],
            Config,
            "synth.lesion_count must be an ordered range"
        );
        for (name, r) in [
            ("semi_axis", self.semi_axis),
            ("aspect", self.aspect),
            ("center_band", self.center_band),
        ] {
            ensure!(
                r[0] > 0.0 && r[0] <= r[1],
                Config,
                "synth.{name} must be a positive ordered range"
            );
        }
        ensure!(self.aspect[1] <= 1.0, Config, "synth.aspect must not exceed 1");
        ensure!(self.center_band[1] <= 1.0, Config, "synth.center_band must lie in (0, 1]");
        ensure!(
            (0.0..1.0).contains(&self.perturbation),
            Config,
            "synth.perturbation must lie in [0, 1)"
        );
        ensure!(
            self.semi_axis[1] * (1.0 + self.perturbation) <= 0.5,
            Config,
            "synth.semi_axis {:?} makes lesions larger than the image",
            self.semi_axis
        );
        for (name, r) in [("hair_rate", self.hair_rate), ("bubble_rate", self.bubble_rate)] {
            ensure!((0.0..=1.0).contains(&r), Config, "synth.{name} must lie in [0, 1]");
        }
        for (name, v) in [
            ("skin_jitter", self.skin_jitter),
            ("skin_variation", self.skin_variation),
            ("lesion_jitter", self.lesion_jitter),
            ("lesion_texture", self.lesion_texture),
            ("pixel_noise", self.pixel_noise),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), Config, "synth.{name} must be non-negative");
        }
        Ok(())
    }
}

/// `count` samples; sample `i` uses substream `i` of the spec seed.
pub fn synthesize(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample>> {
    ensure!(count >= 1, Input, "sample count must be at least 1");
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| synthesize_one(spec, i as u64))
        .collect()
}

/// Zero-mean unit-variance smooth random field.
fn smooth_field(rng: &mut RngStream, s: usize, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = rng.normal_vec(s * s);
    let f = gaussian_blur(&raw, s, s, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64)
        .sqrt()
        .max(1e-12);
    f.into_iter().map(|v| (v - mean) / sd).collect()
}

pub fn synthesize_one(spec: &SyntheticSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = RngStream::substream(spec.seed, index);
    let mut planes = vec![vec![0.0; s * s]; 3];

    let skin: Vec<f64> = spec
        .skin_color
        .iter()
        .map(|&c| c + spec.skin_jitter * rng.normal())
        .collect();
    let grad: Vec<[f64; 2]> = (0..3).map(|_| [0.05 * rng.normal(), 0.05 * rng.normal()]).collect();
    let low = smooth_field(&mut rng, s, 6.0);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((x as f64 + 0.5 - sf / 2.0) / sf, (y as f64 + 0.5 - sf / 2.0) / sf);
            for c in 0..3 {
                planes[c][y * s + x] =
                    skin[c] + grad[c][0] * u + grad[c][1] * v + spec.skin_variation * low[y * s + x];
            }
        }
    }

    let lesions = rng.int_in(spec.lesion_count[0], spec.lesion_count[1]);
    let mut mask = BinaryMask::zeros(s, s);
    for _ in 0..lesions {
        let cx = rng.uniform(spec.center_band[0] * sf, spec.center_band[1] * sf);
        let cy = rng.uniform(spec.center_band[0] * sf, spec.center_band[1] * sf);
        let a = rng.uniform(spec.semi_axis[0] * sf, spec.semi_axis[1] * sf);
        let b = a * rng.uniform(spec.aspect[0], spec.aspect[1]);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let amp = rng.uniform(0.0, spec.perturbation);
        let lobes = rng.int_in(3, 6) as f64;
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let color: Vec<f64> = spec
            .lesion_color
            .iter()
            .map(|&c| c + spec.lesion_jitter * rng.normal())
            .collect();
        let texture = smooth_field(&mut rng, s, 2.0);
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = dx * ct + dy * st;
                let v = -dx * st + dy * ct;
                let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                let ang = v.atan2(u);
                if r <= 1.0 + amp * (lobes * ang + phase).sin() {
                    mask.set(x, y, true);
                    for c in 0..3 {
                        planes[c][y * s + x] = color[c] + spec.lesion_texture * texture[y * s + x];
                    }
                }
            }
        }
    }

    if rng.bernoulli(spec.hair_rate) {
        let n = rng.int_in(1, 3);
        for _ in 0..n {
            draw_hair(&mut planes, s, &mut rng);
        }
    }
    if rng.bernoulli(spec.bubble_rate) {
        let n = rng.int_in(1, 2);
        for _ in 0..n {
            draw_bubble(&mut planes, s, &mut rng);
        }
    }

    let mut data = vec![0.0f32; s * s * 3];
    for i in 0..s * s {
        for c in 0..3 {
            let v = planes[c][i] + spec.pixel_noise * rng.normal();
            data[i * 3 + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let label = if lesions > 0 {
        ClassLabel::Unhealthy
    } else {
        ClassLabel::Healthy
    };
    Ok(Sample {
        image: Image::new(s, s, 3, data)?,
        mask,
        label,
    })
}

/// Dark quadratic Bézier stroke about one pixel wide.
fn draw_hair(planes: &mut [Vec<f64>], s: usize, rng: &mut RngStream) {
    let sf = s as f64;
    let p0 = [rng.uniform(0.0, sf), rng.uniform(0.0, sf)];
    let p2 = [rng.uniform(0.0, sf), rng.uniform(0.0, sf)];
    let p1 = [rng.uniform(0.0, sf), rng.uniform(0.0, sf)];
    let shade = rng.uniform(0.08, 0.25);
    let steps = 4 * s;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let m = 1.0 - t;
        let x = m * m * p0[0] + 2.0 * m * t * p1[0] + t * t * p2[0];
        let y = m * m * p0[1] + 2.0 * m * t * p1[1] + t * t * p2[1];
        let (xi, yi) = (x.floor() as isize, y.floor() as isize);
        if xi >= 0 && yi >= 0 && (xi as usize) < s && (yi as usize) < s {
            let i = yi as usize * s + xi as usize;
            for (c, p) in planes.iter_mut().enumerate() {
                p[i] = shade * [1.0, 0.8, 0.65][c];
            }
        }
    }
}

/// Translucent bright disc with a highlight rim.
fn draw_bubble(planes: &mut [Vec<f64>], s: usize, rng: &mut RngStream) {
    let sf = s as f64;
    let (cx, cy) = (rng.uniform(0.0, sf), rng.uniform(0.0, sf));
    let r = rng.uniform(0.03 * sf, 0.08 * sf).max(1.5);
    for y in 0..s {
        for x in 0..s {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let alpha = if d <= r - 1.0 {
                0.25
            } else if d <= r {
                0.7
            } else {
                continue;
            };
            for p in planes.iter_mut() {
                let i = y * s + x;
                p[i] = p[i] * (1.0 - alpha) + 0.97 * alpha;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_spec(r: f64) -> SyntheticSpec {
        SyntheticSpec {
            lesion_count: [1, 1],
            semi_axis: [r, r],
            aspect: [1.0, 1.0],
            perturbation: 0.0,
            hair_rate: 0.0,
            bubble_rate: 0.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn circular_lesion_area_matches_disc() {
        let spec = circle_spec(0.2);
        let r = 0.2 * 64.0;
        for i in 0..5 {
            let s = synthesize_one(&spec, i).unwrap();
            let area = s.mask.area() as f64;
            let disc = std::f64::consts::PI * r * r;
            assert!((area - disc).abs() / disc < 0.05, "{area} vs {disc}");
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = SyntheticSpec::default();
        assert_eq!(synthesize(&spec, 3).unwrap(), synthesize(&spec, 3).unwrap());
    }

    #[test]
    fn zero_lesions_are_healthy() {
        let spec = SyntheticSpec {
            lesion_count: [0, 0],
            ..SyntheticSpec::default()
        };
        for s in synthesize(&spec, 4).unwrap() {
            assert_eq!(s.label, ClassLabel::Healthy);
            assert!(s.mask.is_empty());
        }
    }

    #[test]
    fn oversized_lesion_is_rejected() {
        let spec = SyntheticSpec {
            semi_axis: [0.3, 0.6],
            ..SyntheticSpec::default()
        };
        assert!(matches!(synthesize(&spec, 1), Err(crate::Error::Config(_))));
        assert!(synthesize(&SyntheticSpec::default(), 0).is_err());
    }

    #[test]
    fn distractors_stay_out_of_the_mask() {
        let with = SyntheticSpec {
            hair_rate: 1.0,
            bubble_rate: 1.0,
            ..SyntheticSpec::default()
        };
        let without = SyntheticSpec {
            hair_rate: 0.0,
            bubble_rate: 0.0,
            ..SyntheticSpec::default()
        };
        // Distractors are drawn after the lesion, so the masks coincide.
        for i in 0..5 {
            let a = synthesize_one(&with, i).unwrap();
            let b = synthesize_one(&without, i).unwrap();
            assert_eq!(a.mask, b.mask);
            assert_ne!(a.image, b.image);
        }
    }
}
