//! ε-prediction objective and its gradient.

use rayon::prelude::*;

use crate::diffusion::{forward_noise_slice, ClassLabel, NoiseSchedule};
use crate::error::{ensure, Result};
use crate::nn::real::Real;
use crate::nn::tensor::Tensor4;
use crate::nn::unet::DenoiserNet;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Mean squared error.
    #[default]
    L2,
    /// Mean absolute error.
    L1,
}

/// Per-sample timesteps and noise used by one loss evaluation.
#[derive(Debug, Clone)]
pub struct Draws<F> {
    pub timesteps: Vec<usize>,
    pub eps: Tensor4<F>,
}

impl<F: Real> Draws<F> {
    /// For each item in order: `t ~ U{1..T}`, then `ε ~ N(0, I)`.
    pub fn sample(shape: [usize; 4], schedule: &NoiseSchedule, rng: &mut RngStream) -> Self {
        let item = shape[1] * shape[2] * shape[3];
        let mut timesteps = Vec::with_capacity(shape[0]);
        let mut eps = Vec::with_capacity(shape[0] * item);
        for _ in 0..shape[0] {
            timesteps.push(rng.int_in(1, schedule.len()));
            eps.extend(rng.normal_vec::<F>(item));
        }
        Self {
            timesteps,
            eps: Tensor4::new(shape, eps).expect("sized from shape"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    /// Mean over every element of the batch.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grads: Vec<F>,
}

/// Draws `(t, ε)` from `rng` and evaluates the objective with its gradient.
pub fn loss_and_grads<F: Real>(
    net: &DenoiserNet<F>,
    batch: &Tensor4<F>,
    labels: &[ClassLabel],
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
    norm: LossNorm,
) -> Result<LossOutput<F>> {
    ensure!(batch.batch() > 0, Input, "training batch is empty");
    ensure!(
        labels.len() == batch.batch(),
        Input,
        "{} labels for a batch of {}",
        labels.len(),
        batch.batch()
    );
    let draws = Draws::sample(batch.shape(), schedule, rng);
    loss_with_draws(net, batch, labels, schedule, &draws, norm)
}

/// Deterministic objective for fixed draws. Items run in parallel and are reduced in order.
pub fn loss_with_draws<F: Real>(
    net: &DenoiserNet<F>,
    batch: &Tensor4<F>,
    labels: &[ClassLabel],
    schedule: &NoiseSchedule,
    draws: &Draws<F>,
    norm: LossNorm,
) -> Result<LossOutput<F>> {
    let n = batch.batch();
    ensure!(n > 0, Input, "training batch is empty");
    ensure!(labels.len() == n, Input, "{} labels for a batch of {n}", labels.len());
    ensure!(
        draws.eps.shape() == batch.shape() && draws.timesteps.len() == n,
        Input,
        "noise draws do not match the batch shape"
    );
    let items: Vec<Result<(f64, Vec<F>)>> = (0..n)
        .into_par_iter()
        .map(|i| item_loss(net, batch, labels[i], schedule, draws, i, norm))
        .collect();
    let mut per_sample = Vec::with_capacity(n);
    let mut grads = vec![F::zero(); net.param_count()];
    let scale = F::of(1.0 / n as f64);
    for it in items {
        let (l, g) = it?;
        per_sample.push(l);
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b * scale;
        }
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    Ok(LossOutput {
        loss,
        per_sample,
        grads,
    })
}

fn item_loss<F: Real>(
    net: &DenoiserNet<F>,
    batch: &Tensor4<F>,
    label: ClassLabel,
    schedule: &NoiseSchedule,
    draws: &Draws<F>,
    i: usize,
    norm: LossNorm,
) -> Result<(f64, Vec<F>)> {
    let t = draws.timesteps[i];
    let ab = schedule.alphabar(t)?;
    let eps = draws.eps.item(i);
    let [_, c, h, w] = batch.shape();
    let xt = Tensor4::new([1, c, h, w], forward_noise_slice(batch.item(i), eps, ab))?;
    let (pred, tape) = net.forward_train(&xt, &[label], &[ab])?;
    let count = pred.data().len() as f64;
    let inv = F::of(1.0 / count);
    let mut total = 0.0;
    let mut dy = Vec::with_capacity(pred.data().len());
    for (&p, &e) in pred.data().iter().zip(eps) {
        let r = p - e;
        match norm {
            LossNorm::L2 => {
                total += (r * r).f64();
                dy.push(F::of(2.0) * r * inv);
            }
            LossNorm::L1 => {
                total += r.abs().f64();
                let s = if r > F::zero() {
                    F::one()
                } else if r < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                dy.push(s * inv);
            }
        }
    }
    let mut grads = vec![F::zero(); net.param_count()];
    net.backward(&tape, &Tensor4::new(pred.shape(), dy)?, &mut grads);
    Ok((total / count, grads))
}
