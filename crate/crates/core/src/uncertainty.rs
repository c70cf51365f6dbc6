//! Ensemble statistics: coherence (mean), ambiguity (variance), and GED.

use rayon::prelude::*;
use serde::Serialize;

use crate::diffseg::MaskEnsemble;
use crate::error::{ensure, Result};
use crate::raster::{BinaryMask, RealMap};

fn check_masks(masks: &[&BinaryMask]) -> Result<()> {
    ensure!(!masks.is_empty(), Input, "ensemble is empty");
    ensure!(
        masks.iter().all(|m| m.same_shape(masks[0])),
        Input,
        "ensemble masks differ in shape"
    );
    Ok(())
}

/// Pixelwise mean of the masks.
pub fn coherence(masks: &[&BinaryMask]) -> Result<RealMap> {
    check_masks(masks)?;
    let (w, h) = (masks[0].width(), masks[0].height());
    let n = masks.len() as f64;
    let mut sum = vec![0usize; w * h];
    for m in masks {
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            *s += v as usize;
        }
    }
    RealMap::new(w, h, sum.into_iter().map(|s| s as f64 / n).collect())
}

/// Pixelwise population variance (divisor `N`).
pub fn ambiguity(masks: &[&BinaryMask]) -> Result<RealMap> {
    let mean = coherence(masks)?;
    let n = masks.len() as f64;
    let mut acc = vec![0.0; mean.data().len()];
    for m in masks {
        for ((a, &v), &mu) in acc.iter_mut().zip(m.data()).zip(mean.data()) {
            *a += (v as f64 - mu).powi(2);
        }
    }
    RealMap::new(mean.width(), mean.height(), acc.into_iter().map(|a| a / n).collect())
}

/// `sqrt(Σ(p−q)² / (w·h))`.
pub fn normalized_distance(p: &BinaryMask, q: &BinaryMask) -> Result<f64> {
    ensure!(p.same_shape(q), Input, "masks differ in shape");
    let diff = p.data().iter().zip(q.data()).filter(|(a, b)| a != b).count();
    Ok((diff as f64 / (p.width() * p.height()) as f64).sqrt())
}

/// `(2/N²)·Σ_{i<j} d(y_i,y_j) − (1/N²)·Σ_i d(y_i,y_i) − (1/N²)·Σ_j d(y_j,y_j)`.
pub fn ged(masks: &[&BinaryMask]) -> Result<f64> {
    check_masks(masks)?;
    let n = masks.len();
    ensure!(n >= 2, Input, "GED needs at least two masks, got {n}");
    let cross: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| normalized_distance(masks[i], masks[j]).expect("shapes checked"))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let selfs: f64 = masks
        .iter()
        .map(|m| normalized_distance(m, m).expect("same mask"))
        .sum();
    let n2 = (n * n) as f64;
    Ok(2.0 / n2 * cross - selfs / n2 - selfs / n2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    #[serde(skip)]
    pub coherence: RealMap,
    #[serde(skip)]
    pub ambiguity: RealMap,
    /// `None` for single-mask ensembles, where GED is undefined.
    pub ged: Option<f64>,
    pub n: usize,
}

pub fn report(y: &MaskEnsemble) -> Result<UncertaintyReport> {
    let masks = y.masks();
    let ged = if masks.len() >= 2 {
        Some(ged(&masks)?)
    } else {
        None
    };
    Ok(UncertaintyReport {
        coherence: coherence(&masks)?,
        ambiguity: ambiguity(&masks)?,
        ged,
        n: masks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize, phase: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x + y + phase) % 2 == 0)
    }

    #[test]
    fn complementary_pair() {
        let (a, b) = (checker(4, 4, 0), checker(4, 4, 1));
        assert_eq!(normalized_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(ged(&[&a, &b]).unwrap(), 0.5);
        assert!(coherence(&[&a, &b]).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(ambiguity(&[&a, &b]).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn quarter_difference_is_half() {
        let a = BinaryMask::zeros(4, 4);
        let b = BinaryMask::from_fn(4, 4, |x, _| x == 0);
        assert_eq!(normalized_distance(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn single_member_report() {
        let m = checker(3, 3, 0);
        let y = MaskEnsemble::from_masks("x", vec![m.clone()]).unwrap();
        let r = report(&y).unwrap();
        assert_eq!(r.coherence, m.to_real());
        assert!(r.ambiguity.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.ged, None);
        assert!(ged(&[&m]).is_err());
    }

    #[test]
    fn errors_on_empty_or_mismatched() {
        assert!(coherence(&[]).is_err());
        let (a, b) = (BinaryMask::zeros(2, 2), BinaryMask::zeros(3, 2));
        assert!(normalized_distance(&a, &b).is_err());
        assert!(ambiguity(&[&a, &b]).is_err());
    }
}
