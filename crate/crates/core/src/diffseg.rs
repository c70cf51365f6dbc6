//! Noise-difference maps, thresholding, and multi-timestep mask ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, predict_noise, to_model_input, ClassLabel, ConditionalModel, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::filter::gaussian_blur;
use crate::nn::Tensor4;
use crate::raster::{BinaryMask, Image, RealMap};
use crate::rng::RngStream;

/// Per-pixel difference between the two conditional noise predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    pub values: RealMap,
    pub timestep: usize,
}

impl DiffMap {
    /// Gaussian-smoothed copy (edge-clamped, normalised taps).
    pub fn smoothed(&self, sigma: f64) -> DiffMap {
        let (w, h) = (self.values.width(), self.values.height());
        let data = gaussian_blur(self.values.data(), w, h, sigma);
        DiffMap {
            values: RealMap::new(w, h, data).expect("same size"),
            timestep: self.timestep,
        }
    }

    /// Values rescaled to `[0, 1]` by their own range; `None` when constant.
    pub fn normalized(&self) -> Option<Vec<f64>> {
        let (lo, hi) = self.values.min_max();
        if hi - lo > 0.0 {
            Some(self.values.data().iter().map(|v| (v - lo) / (hi - lo)).collect())
        } else {
            None
        }
    }
}

/// Channel-mean absolute difference of two `[1, C, H, W]` predictions.
pub fn channel_mean_abs_diff(a: &Tensor4<f32>, b: &Tensor4<f32>) -> Result<RealMap> {
    ensure!(
        a.shape() == b.shape() && a.batch() == 1,
        Input,
        "predictions must share a single-item shape"
    );
    let [_, c, h, w] = a.shape();
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        let (pa, pb) = (&a.data()[ch * h * w..][..h * w], &b.data()[ch * h * w..][..h * w]);
        for ((o, &x), &y) in out.iter_mut().zip(pa).zip(pb) {
            *o += (x as f64 - y as f64).abs();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    RealMap::new(w, h, out)
}

/// One ε draw, one `x_t`, both labels evaluated on that same `x_t`.
pub fn noise_difference(
    model: &ConditionalModel,
    image: &Image,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<DiffMap> {
    schedule.alphabar(t)?;
    let x0 = to_model_input(image);
    let eps = Tensor4::new(x0.shape(), rng.normal_vec(x0.data().len()))?;
    let xt = forward_noise(&x0, t, schedule, &eps)?;
    let healthy = predict_noise(model, &xt, ClassLabel::Healthy, t, schedule)?;
    let unhealthy = predict_noise(model, &xt, ClassLabel::Unhealthy, t, schedule)?;
    if !healthy.is_finite() || !unhealthy.is_finite() {
        return Err(Error::Model("model produced non-finite noise predictions".into()));
    }
    Ok(DiffMap {
        values: channel_mean_abs_diff(&healthy, &unhealthy)?,
        timestep: t,
    })
}

/// Threshold selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Threshold {
    Fixed(f64),
    /// Otsu's between-class-variance maximiser over 256 bins.
    Otsu,
    /// The given quantile of the map's own values.
    Quantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarizePolicy {
    pub threshold: Threshold,
    /// Min-max rescale before thresholding.
    pub normalize: bool,
}

impl Default for BinarizePolicy {
    fn default() -> Self {
        Self {
            threshold: Threshold::Fixed(0.5),
            normalize: true,
        }
    }
}

impl BinarizePolicy {
    pub fn validate(&self) -> Result<()> {
        match self.threshold {
            Threshold::Fixed(d) => {
                ensure!(d.is_finite(), Config, "delta must be finite");
                if self.normalize {
                    ensure!((0.0..=1.0).contains(&d), Config, "delta {d} must lie in [0, 1] when normalising");
                }
            }
            Threshold::Quantile(q) => {
                ensure!((0.0..=1.0).contains(&q), Config, "quantile {q} must lie in [0, 1]")
            }
            Threshold::Otsu => {}
        }
        Ok(())
    }
}

/// Otsu threshold of `values` using 256 equal bins over their range.
/// Returns the lower edge of the first bin assigned to the upper class. Splits
/// tying for the best score (an empty gap between modes) resolve to the middle
/// of the tied range.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return lo;
    }
    let bins = 256;
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0usize; bins];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut first, mut last) = (-1.0, 1, 1);
    for k in 1..bins {
        w0 += hist[k - 1] as f64;
        sum0 += (k - 1) as f64 * hist[k - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            (first, last) = (k, k);
        } else if between == best {
            last = k;
        }
    }
    lo + (first + last) as f64 / 2.0 * width
}

/// Lower order statistic at rank `floor(q·(n−1))`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((q * (v.len() - 1) as f64).floor() as usize).min(v.len() - 1)]
}

/// A thresholded map together with the threshold actually applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Binarized {
    pub mask: BinaryMask,
    pub delta: f64,
}

/// Pixel is foreground iff its (optionally normalised) value is `≥ δ`.
/// A constant map under normalisation yields an empty mask and a warning.
pub fn binarize(d: &DiffMap, policy: &BinarizePolicy) -> Result<Binarized> {
    policy.validate()?;
    let (w, h) = (d.values.width(), d.values.height());
    let values = if policy.normalize {
        match d.normalized() {
            Some(v) => v,
            None => {
                log::warn!("difference map at t={} is constant; emitting an empty mask", d.timestep);
                let delta = match policy.threshold {
                    Threshold::Fixed(x) => x,
                    _ => f64::NAN,
                };
                return Ok(Binarized {
                    mask: BinaryMask::zeros(w, h),
                    delta,
                });
            }
        }
    } else {
        d.values.data().to_vec()
    };
    let delta = match policy.threshold {
        Threshold::Fixed(x) => x,
        Threshold::Otsu => otsu_threshold(&values),
        Threshold::Quantile(q) => quantile(&values, q),
    };
    let data = values.iter().map(|&v| (v >= delta) as u8).collect();
    Ok(Binarized {
        mask: BinaryMask::new(w, h, data)?,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub timestep: usize,
    pub mask: BinaryMask,
    pub delta: f64,
}

/// Masks of one image from distinct, increasing timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEnsemble {
    pub image_id: String,
    members: Vec<EnsembleMember>,
}

impl MaskEnsemble {
    pub fn new(image_id: impl Into<String>, members: Vec<EnsembleMember>) -> Result<Self> {
        ensure!(!members.is_empty(), Input, "an ensemble needs at least one mask");
        for pair in members.windows(2) {
            ensure!(
                pair[0].timestep < pair[1].timestep,
                Input,
                "ensemble timesteps must be strictly increasing ({} then {})",
                pair[0].timestep,
                pair[1].timestep
            );
            ensure!(
                pair[0].mask.same_shape(&pair[1].mask),
                Input,
                "ensemble masks differ in shape"
            );
        }
        Ok(Self {
            image_id: image_id.into(),
            members,
        })
    }

    /// Wraps bare masks, numbering them as timesteps `1..=N`.
    pub fn from_masks(image_id: impl Into<String>, masks: Vec<BinaryMask>) -> Result<Self> {
        let members = masks
            .into_iter()
            .enumerate()
            .map(|(i, mask)| EnsembleMember {
                timestep: i + 1,
                mask,
                delta: f64::NAN,
            })
            .collect();
        Self::new(image_id, members)
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn masks(&self) -> Vec<&BinaryMask> {
        self.members.iter().map(|m| &m.mask).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.timestep).collect()
    }
}

/// Options for ensemble generation beyond the threshold rule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnsembleOptions {
    pub policy: BinarizePolicy,
    /// Gaussian σ applied to each difference map before thresholding.
    pub smooth_sigma: Option<f64>,
}

/// `60, 70, …, 150`.
pub fn default_timesteps() -> Vec<usize> {
    (60..=150).step_by(10).collect()
}

/// One member per timestep. Timestep `t` draws its noise from
/// `RngStream::substream(seed, t)`, so members are independent of evaluation order.
pub fn generate_ensemble(
    model: &ConditionalModel,
    image: &Image,
    image_id: &str,
    timesteps: &[usize],
    opts: &EnsembleOptions,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(MaskEnsemble, Vec<DiffMap>)> {
    ensure!(!timesteps.is_empty(), Input, "timestep list is empty");
    for pair in timesteps.windows(2) {
        ensure!(
            pair[0] < pair[1],
            Input,
            "timesteps must be distinct and increasing, got {} before {}",
            pair[0],
            pair[1]
        );
    }
    for &t in timesteps {
        ensure!(
            (1..=schedule.len()).contains(&t),
            Input,
            "timestep {t} outside the schedule range 1..={}",
            schedule.len()
        );
    }
    opts.policy.validate()?;
    let results: Vec<Result<(EnsembleMember, DiffMap)>> = timesteps
        .par_iter()
        .map(|&t| {
            let mut rng = RngStream::substream(seed, t as u64);
            let mut d = noise_difference(model, image, t, schedule, &mut rng)?;
            if let Some(s) = opts.smooth_sigma {
                d = d.smoothed(s);
            }
            let b = binarize(&d, &opts.policy)?;
            Ok((
                EnsembleMember {
                    timestep: t,
                    mask: b.mask,
                    delta: b.delta,
                },
                d,
            ))
        })
        .collect();
    let mut members = Vec::with_capacity(results.len());
    let mut maps = Vec::with_capacity(results.len());
    for r in results {
        let (m, d) = r?;
        members.push(m);
        maps.push(d);
    }
    Ok((MaskEnsemble::new(image_id, members)?, maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>) -> DiffMap {
        let n = values.len();
        DiffMap {
            values: RealMap::new(n, 1, values).unwrap(),
            timestep: 1,
        }
    }

    #[test]
    fn boundary_value_is_foreground() {
        let p = BinarizePolicy {
            threshold: Threshold::Fixed(0.5),
            normalize: false,
        };
        assert_eq!(binarize(&map(vec![0.0, 0.5, 1.0]), &p).unwrap().mask.data(), &[0, 1, 1]);
    }

    #[test]
    fn zero_map_gives_empty_mask() {
        for normalize in [false, true] {
            let p = BinarizePolicy {
                threshold: Threshold::Fixed(0.3),
                normalize,
            };
            assert!(binarize(&map(vec![0.0; 6]), &p).unwrap().mask.is_empty());
        }
    }

    #[test]
    fn channel_mean_rule() {
        let a = Tensor4::new([1, 3, 1, 1], vec![0.3f32, 0.0, 0.0]).unwrap();
        let b = Tensor4::new([1, 3, 1, 1], vec![0.0f32; 3]).unwrap();
        let d = channel_mean_abs_diff(&a, &b).unwrap();
        assert!((d.data()[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn delta_out_of_range_is_config_error() {
        let p = BinarizePolicy {
            threshold: Threshold::Fixed(1.5),
            normalize: true,
        };
        assert!(matches!(binarize(&map(vec![0.0, 1.0]), &p), Err(Error::Config(_))));
    }

    #[test]
    fn ensemble_rejects_unordered_timesteps() {
        let m = BinaryMask::zeros(2, 2);
        let mk = |t| EnsembleMember {
            timestep: t,
            mask: m.clone(),
            delta: 0.5,
        };
        assert!(MaskEnsemble::new("a", vec![mk(60), mk(60)]).is_err());
        assert!(MaskEnsemble::new("a", vec![mk(70), mk(60)]).is_err());
        assert!(MaskEnsemble::new("a", vec![]).is_err());
        assert_eq!(MaskEnsemble::new("a", vec![mk(60), mk(70)]).unwrap().len(), 2);
    }

    #[test]
    fn default_list_has_ten_steps() {
        let t = default_timesteps();
        assert_eq!(t.len(), 10);
        assert_eq!((t[0], t[9]), (60, 150));
    }
}
