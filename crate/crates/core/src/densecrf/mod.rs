//! Fully connected two-label CRF: energy, unaries, and mean-field inference.
//!
//! Pairwise potentials are Potts-weighted sums of an appearance kernel over
//! position and RGB (0–255) and a smoothness kernel over position.

mod fast;
mod naive;

use serde::{Deserialize, Serialize};

use crate::diffseg::DiffMap;
use crate::error::{ensure, Result};
use crate::raster::{BinaryMask, Image, RealMap};

pub use fast::{mean_field_fast, mean_field_fast_with, GridPlan, DEFAULT_NODE_BUDGET};
pub use naive::{mean_field_naive, mean_field_naive_with, NAIVE_MAX_PIXELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    /// Appearance spatial bandwidth (pixels).
    pub theta_alpha: f64,
    /// Appearance colour bandwidth (0–255 units).
    pub theta_beta: f64,
    /// Smoothness spatial bandwidth (pixels).
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Stop once the largest marginal change falls below this.
    pub tol: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w1: 3.0,
            w2: 1.0,
            theta_alpha: 30.0,
            theta_beta: 10.0,
            theta_gamma: 3.0,
            iterations: 10,
            tol: 1e-4,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.w1 >= 0.0 && self.w2 >= 0.0,
            Config,
            "crf.w1 and crf.w2 must be non-negative"
        );
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            ensure!(v > 0.0 && v.is_finite(), Config, "crf.{name} must be positive");
        }
        ensure!(self.iterations >= 1, Config, "crf.iterations must be at least 1");
        ensure!(self.tol >= 0.0, Config, "crf.tol must be non-negative");
        Ok(())
    }
}

pub const BACKGROUND: usize = 0;
pub const LESION: usize = 1;

/// Potts compatibility: 1 when labels differ.
pub fn potts(a: usize, b: usize) -> u8 {
    (a != b) as u8
}

/// Per-pixel `[ψ(background), ψ(lesion)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    pub width: usize,
    pub height: usize,
    pub psi: Vec<[f64; 2]>,
}

/// Per-pixel `[Q(background), Q(lesion)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    pub width: usize,
    pub height: usize,
    pub q: Vec<[f64; 2]>,
}

impl MarginalField {
    pub fn lesion(&self) -> RealMap {
        RealMap::new(self.width, self.height, self.q.iter().map(|q| q[LESION]).collect())
            .expect("sized from field")
    }

    /// Label with the larger marginal; ties go to lesion.
    pub fn argmax(&self) -> BinaryMask {
        let data = self.q.iter().map(|q| (q[LESION] >= q[BACKGROUND]) as u8).collect();
        BinaryMask::new(self.width, self.height, data).expect("sized from field")
    }

    pub fn max_abs_diff(&self, other: &MarginalField) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max)
    }
}

impl UnaryField {
    pub fn new(width: usize, height: usize, psi: Vec<[f64; 2]>) -> Result<Self> {
        ensure!(psi.len() == width * height, Input, "unary size mismatch");
        ensure!(
            psi.iter().all(|p| p[0].is_finite() && p[1].is_finite()),
            Input,
            "unary potentials must be finite"
        );
        Ok(Self { width, height, psi })
    }

    /// `ψ = −log P` from lesion probabilities clamped to `[eps, 1−eps]`.
    pub fn from_probabilities(width: usize, height: usize, p_lesion: &[f64], eps: f64) -> Result<Self> {
        ensure!(
            eps > 0.0 && eps < 0.5,
            Config,
            "probability clamp must lie in (0, 0.5), got {eps}"
        );
        let psi = p_lesion
            .iter()
            .map(|&p| {
                let p = p.clamp(eps, 1.0 - eps);
                [-(1.0 - p).ln(), -p.ln()]
            })
            .collect();
        Self::new(width, height, psi)
    }

    /// Per-pixel `softmax(−ψ)`.
    pub fn softmax(&self) -> MarginalField {
        MarginalField {
            width: self.width,
            height: self.height,
            q: self.psi.iter().map(|p| normalize([-p[0], -p[1]])).collect(),
        }
    }

    /// Labeling minimising the unary term alone (ties to lesion).
    pub fn argmin(&self) -> BinaryMask {
        let data = self.psi.iter().map(|p| (p[LESION] <= p[BACKGROUND]) as u8).collect();
        BinaryMask::new(self.width, self.height, data).expect("sized from field")
    }
}

pub(crate) fn normalize(e: [f64; 2]) -> [f64; 2] {
    let m = e[0].max(e[1]);
    let (a, b) = ((e[0] - m).exp(), (e[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

/// Lesion probability from a difference map's own min-max range.
/// A constant map yields 0.5 everywhere with a warning.
pub fn unary_from_diffmap(d: &DiffMap, eps_clamp: f64) -> Result<UnaryField> {
    let d = &d.values;
    let (lo, hi) = d.min_max();
    let p: Vec<f64> = if hi - lo > 0.0 {
        d.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        log::warn!("constant difference map; using uniform unaries");
        vec![0.5; d.data().len()]
    };
    UnaryField::from_probabilities(d.width(), d.height(), &p, eps_clamp)
}

/// Pixel coordinates and RGB (0–255) used by the pairwise kernels.
#[derive(Debug, Clone)]
pub struct Features {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
}

impl Features {
    pub fn from_image(image: &Image) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            rgb: (0..image.pixel_count()).map(|i| image.rgb255(i)).collect(),
        }
    }

    pub fn pos(&self, i: usize) -> (f64, f64) {
        ((i % self.width) as f64, (i / self.width) as f64)
    }
}

/// `k(i,j) = w1·exp(−|Δp|²/2θα² − |ΔI|²/2θβ²) + w2·exp(−|Δp|²/2θγ²)`.
pub fn pairwise_kernel(pi: (f64, f64), pj: (f64, f64), ii: [f64; 3], ij: [f64; 3], params: &CrfParams) -> f64 {
    let dp = (pi.0 - pj.0).powi(2) + (pi.1 - pj.1).powi(2);
    let dc = (0..3).map(|c| (ii[c] - ij[c]).powi(2)).sum::<f64>();
    let a = params.theta_alpha;
    let b = params.theta_beta;
    let g = params.theta_gamma;
    params.w1 * (-dp / (2.0 * a * a) - dc / (2.0 * b * b)).exp() + params.w2 * (-dp / (2.0 * g * g)).exp()
}

fn check_shapes(unary: &UnaryField, image: &Image) -> Result<()> {
    ensure!(
        unary.width == image.width() && unary.height == image.height(),
        Input,
        "unary is {}x{} but image is {}x{}",
        unary.width,
        unary.height,
        image.width(),
        image.height()
    );
    Ok(())
}

/// Exact `E(x) = Σ ψ_i(x_i) + Σ_{i<j} μ(x_i,x_j)·k(i,j)`; quadratic in pixel count.
pub fn energy(labeling: &BinaryMask, unary: &UnaryField, image: &Image, params: &CrfParams) -> Result<f64> {
    check_shapes(unary, image)?;
    ensure!(
        labeling.width() == unary.width && labeling.height() == unary.height,
        Input,
        "labeling size differs from unary"
    );
    let f = Features::from_image(image);
    let x = labeling.data();
    let mut e: f64 = unary.psi.iter().zip(x).map(|(p, &l)| p[l as usize]).sum();
    let n = x.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if potts(x[i] as usize, x[j] as usize) == 1 {
                e += pairwise_kernel(f.pos(i), f.pos(j), f.rgb[i], f.rgb[j], params);
            }
        }
    }
    Ok(e)
}

/// Outcome of a mean-field run.
#[derive(Debug, Clone)]
pub struct MeanField {
    pub marginals: MarginalField,
    pub iterations: usize,
    pub converged: bool,
}

/// Shared fixed-point loop. `messages(Q)` returns `Σ_{j≠i} k(i,j)·Q_j(l)` per pixel.
pub(crate) fn iterate(
    unary: &UnaryField,
    params: &CrfParams,
    init: Option<&MarginalField>,
    mut messages: impl FnMut(&MarginalField) -> Vec<[f64; 2]>,
    mut observe: impl FnMut(usize, &MarginalField),
) -> Result<MeanField> {
    params.validate()?;
    let mut q = match init {
        Some(m) => {
            ensure!(
                m.width == unary.width && m.height == unary.height,
                Input,
                "initial marginals differ in size from the unary"
            );
            m.clone()
        }
        None => unary.softmax(),
    };
    let mut converged = false;
    let mut done = 0;
    for it in 0..params.iterations {
        let m = messages(&q);
        let next: Vec<[f64; 2]> = unary
            .psi
            .iter()
            .zip(&m)
            .map(|(p, m)| normalize([-p[0] - m[1], -p[1] - m[0]]))
            .collect();
        let next = MarginalField {
            width: q.width,
            height: q.height,
            q: next,
        };
        let change = next.max_abs_diff(&q);
        q = next;
        done = it + 1;
        observe(done, &q);
        if change < params.tol {
            converged = true;
            break;
        }
    }
    Ok(MeanField {
        marginals: q,
        iterations: done,
        converged,
    })
}
