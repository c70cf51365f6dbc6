//! Central-difference verification of the reverse pass.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::diffusion::{build_schedule, ClassLabel};
use crate::error::{ensure, Result};
use crate::nn::layers::LayerKind;
use crate::nn::objective::{loss_with_draws, Draws, LossNorm};
use crate::nn::tensor::Tensor4;
use crate::nn::unet::DenoiserNet;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub probes: usize,
    pub h: f64,
    /// Denominator floor for the relative error, so exact zeros compare as equal.
    pub floor: f64,
    pub seed: u64,
    pub norm: LossNorm,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            probes: 20,
            h: 1e-5,
            floor: 1e-6,
            seed: 0,
            norm: LossNorm::L2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KindReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub per_kind: BTreeMap<LayerKind, KindReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_kind
            .values()
            .map(|k| k.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn gradient_check(net: &DenoiserNet<f64>, probe_count: usize) -> Result<GradCheckReport> {
    gradient_check_with(
        net,
        GradCheckOptions {
            probes: probe_count,
            ..Default::default()
        },
    )
}

/// Probes random parameters of every layer family present in `net`.
pub fn gradient_check_with(net: &DenoiserNet<f64>, opts: GradCheckOptions) -> Result<GradCheckReport> {
    ensure!(opts.probes >= 1, Input, "probe_count must be at least 1");
    let arch = net.arch();
    let side = arch.size_multiple() * 2;
    let shape = [2, arch.in_channels, side, side];
    let mut rng = RngStream::new(opts.seed);
    let batch = Tensor4::new(shape, rng.normal_vec(shape.iter().product()))?;
    let labels = [ClassLabel::Healthy, ClassLabel::Unhealthy];
    let schedule = build_schedule(20, 1e-3, 0.2)?;
    let draws = Draws::sample(shape, &schedule, &mut rng);

    let analytic = loss_with_draws(net, &batch, &labels, &schedule, &draws, opts.norm)?.grads;
    let mut probe_net = net.clone();
    let mut loss_at = |idx: usize, v: f64| -> Result<f64> {
        let old = probe_net.params()[idx];
        probe_net.params_mut()[idx] = v;
        let l = loss_with_draws(&probe_net, &batch, &labels, &schedule, &draws, opts.norm)?.loss;
        probe_net.params_mut()[idx] = old;
        Ok(l)
    };

    let mut by_kind: BTreeMap<LayerKind, Vec<usize>> = BTreeMap::new();
    for b in net.blocks() {
        by_kind.entry(b.kind).or_default().extend(b.range());
    }
    let mut per_kind = BTreeMap::new();
    for (kind, indices) in by_kind {
        let mut report = KindReport {
            probes: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for _ in 0..opts.probes {
            let idx = indices[rng.int_in(0, indices.len() - 1)];
            let p = net.params()[idx];
            let numeric = (loss_at(idx, p + opts.h)? - loss_at(idx, p - opts.h)?) / (2.0 * opts.h);
            let a = analytic[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.probes += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_error = report.max_abs_error.max(abs);
        }
        per_kind.insert(kind, report);
    }
    Ok(GradCheckReport { per_kind })
}
