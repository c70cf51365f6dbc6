//! Forward noising, conditioning, and the training loop.

mod model;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Real, Tensor4};

pub use model::{predict_noise, ConditionalModel};
pub use schedule::{build_schedule, NoiseSchedule};
pub use train::{
    to_model_input, train, write_loss_csv, LabeledImage, ScheduleConfig, TrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    /// `c0`: healthy skin.
    Healthy,
    /// `c1`: lesion present.
    Unhealthy,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Healthy => 0,
            ClassLabel::Unhealthy => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ClassLabel::Healthy),
            1 => Some(ClassLabel::Unhealthy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "c0",
            ClassLabel::Unhealthy => "c1",
        }
    }
}

/// Single class-embedded net, or one unconditional net per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    Embedding,
    Dual,
}

pub(crate) fn forward_noise_slice<F: Real>(x0: &[F], eps: &[F], alphabar: f64) -> Vec<F> {
    let (a, b) = (F::of(alphabar.sqrt()), F::of((1.0 - alphabar).sqrt()));
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise<F: Real>(x0: &Tensor4<F>, t: usize, schedule: &NoiseSchedule, eps: &Tensor4<F>) -> Result<Tensor4<F>> {
    let ab = schedule.alphabar(t)?;
    ensure!(
        x0.shape() == eps.shape(),
        Input,
        "noise shape {:?} differs from image shape {:?}",
        eps.shape(),
        x0.shape()
    );
    Tensor4::new(x0.shape(), forward_noise_slice(x0.data(), eps.data(), ab))
}
