//! Multi-output refinement: CRF-refine random ensemble subsets, average,
//! binarize per iteration, then average the iteration masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densecrf::{mean_field_fast, mean_field_naive, unary_from_diffmap, CrfParams};
use crate::diffseg::{DiffMap, MaskEnsemble};
use crate::error::{ensure, Result};
use crate::raster::{BinaryMask, Image, RealMap};
use crate::rng::RngStream;

/// Which mean-field implementation refines each member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrfPath {
    #[default]
    Fast,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Sampling iterations K.
    pub iterations: usize,
    /// Subset size m.
    pub subset_size: usize,
    /// Threshold applied to each iteration's averaged soft mask.
    pub threshold: f64,
    /// Threshold applied to the mean of the iteration masks.
    pub final_threshold: f64,
    /// Probability clamp for CRF unaries.
    pub unary_eps: f64,
    pub crf_path: CrfPath,
    /// Not read from config documents; the caller sets it.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            subset_size: 4,
            threshold: 0.5,
            final_threshold: 0.5,
            unary_eps: 1e-6,
            crf_path: CrfPath::Fast,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, Config, "refine.iterations must be at least 1");
        ensure!(self.subset_size >= 1, Config, "refine.subset_size must be at least 1");
        for (name, t) in [("threshold", self.threshold), ("final_threshold", self.final_threshold)] {
            ensure!((0.0..=1.0).contains(&t), Config, "refine.{name} must lie in [0, 1], got {t}");
        }
        ensure!(
            self.unary_eps > 0.0 && self.unary_eps < 0.5,
            Config,
            "refine.unary_eps must lie in (0, 0.5)"
        );
        Ok(())
    }
}

/// One sampling round.
#[derive(Debug, Clone, Serialize)]
pub struct RefineIteration {
    /// Ensemble indices of the sampled members, in draw order.
    pub subset: Vec<usize>,
    pub timesteps: Vec<usize>,
    #[serde(skip)]
    pub soft: RealMap,
    #[serde(skip)]
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub final_mask: BinaryMask,
    /// Mean of the iteration masks before the final threshold.
    pub final_soft: RealMap,
    pub iterations: Vec<RefineIteration>,
}

/// Pixel is foreground iff `soft ≥ threshold`.
pub fn majority_binarize(soft: &RealMap, threshold: f64) -> BinaryMask {
    let data = soft.data().iter().map(|&v| (v >= threshold) as u8).collect();
    BinaryMask::new(soft.width(), soft.height(), data).expect("sized from map")
}

fn mean_maps(maps: &[RealMap]) -> RealMap {
    let mut out = RealMap::zeros(maps[0].width(), maps[0].height());
    for m in maps {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    let n = maps.len() as f64;
    out.data_mut().iter_mut().for_each(|o| *o /= n);
    out
}

/// Refines `ensemble` against `image`. `diffmaps[i]` supplies the unary for member `i`.
/// Round `k` samples its subset with `RngStream::substream(cfg.seed, k)`.
pub fn refine_ensemble(
    ensemble: &MaskEnsemble,
    image: &Image,
    diffmaps: &[DiffMap],
    crf: &CrfParams,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    crf.validate()?;
    let n = ensemble.len();
    ensure!(
        diffmaps.len() == n,
        Input,
        "{} difference maps for {} ensemble members",
        diffmaps.len(),
        n
    );
    ensure!(
        cfg.subset_size <= n,
        Config,
        "refine.subset_size {} exceeds ensemble size {n}",
        cfg.subset_size
    );
    for (m, d) in ensemble.members().iter().zip(diffmaps) {
        ensure!(
            d.values.width() == image.width() && d.values.height() == image.height(),
            Input,
            "difference map size differs from the image"
        );
        ensure!(
            m.timestep == d.timestep,
            Input,
            "difference map timestep {} does not match member timestep {}",
            d.timestep,
            m.timestep
        );
    }
    let mut iterations = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let mut rng = RngStream::substream(cfg.seed, k as u64);
        let subset = rng.sample_indices(n, cfg.subset_size);
        let refined = subset
            .par_iter()
            .map(|&i| {
                let unary = unary_from_diffmap(&diffmaps[i], cfg.unary_eps)?;
                let q = match cfg.crf_path {
                    CrfPath::Fast => mean_field_fast(&unary, image, crf)?,
                    CrfPath::Naive => mean_field_naive(&unary, image, crf)?,
                };
                Ok(q.lesion())
            })
            .collect::<Result<Vec<_>>>()?;
        let soft = mean_maps(&refined);
        let mask = majority_binarize(&soft, cfg.threshold);
        let timesteps = subset.iter().map(|&i| ensemble.members()[i].timestep).collect();
        iterations.push(RefineIteration {
            subset,
            timesteps,
            soft,
            mask,
        });
    }
    let final_soft = mean_maps(&iterations.iter().map(|it| it.mask.to_real()).collect::<Vec<_>>());
    let final_mask = majority_binarize(&final_soft, cfg.final_threshold);
    Ok(RefineOutcome {
        final_mask,
        final_soft,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_boundary_conventions() {
        let half = RealMap::new(2, 2, vec![0.5; 4]).unwrap();
        assert_eq!(majority_binarize(&half, 0.5).area(), 4);
        let r = RealMap::new(3, 1, vec![0.0, 0.2, 1.0]).unwrap();
        assert_eq!(majority_binarize(&r, 0.0).area(), 3);
    }

    #[test]
    fn config_bounds() {
        assert!(RefineConfig::default().validate().is_ok());
        let bad = RefineConfig {
            subset_size: 0,
            ..RefineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RefineConfig {
            threshold: 1.5,
            ..RefineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
