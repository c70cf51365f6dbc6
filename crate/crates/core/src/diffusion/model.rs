use std::path::Path;

use crate::diffusion::{ClassLabel, ConditioningMode, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::nn::{model_file, Architecture, DenoiserNet, Tensor4};

/// A trained predictor in either conditioning mode.
#[derive(Debug, Clone)]
pub enum ConditionalModel {
    Embedding(DenoiserNet<f32>),
    Dual {
        healthy: DenoiserNet<f32>,
        unhealthy: DenoiserNet<f32>,
    },
}

impl ConditionalModel {
    pub fn embedding(net: DenoiserNet<f32>) -> Result<Self> {
        ensure!(
            net.arch().class_conditioned,
            Config,
            "embedding mode needs a class-conditioned net"
        );
        Ok(Self::Embedding(net))
    }

    pub fn dual(healthy: DenoiserNet<f32>, unhealthy: DenoiserNet<f32>) -> Result<Self> {
        ensure!(
            healthy.arch() == unhealthy.arch(),
            Config,
            "dual-model nets must share one architecture"
        );
        ensure!(
            !healthy.arch().class_conditioned,
            Config,
            "dual-model nets must not carry a class table"
        );
        Ok(Self::Dual { healthy, unhealthy })
    }

    pub fn mode(&self) -> ConditioningMode {
        match self {
            Self::Embedding(_) => ConditioningMode::Embedding,
            Self::Dual { .. } => ConditioningMode::Dual,
        }
    }

    pub fn arch(&self) -> &Architecture {
        match self {
            Self::Embedding(n) => n.arch(),
            Self::Dual { healthy, .. } => healthy.arch(),
        }
    }

    pub fn nets(&self) -> Vec<&DenoiserNet<f32>> {
        match self {
            Self::Embedding(n) => vec![n],
            Self::Dual { healthy, unhealthy } => vec![healthy, unhealthy],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params: Vec<&[f32]> = self.nets().into_iter().map(|n| n.params()).collect();
        model_file::encode(self.arch(), self.mode(), &params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_decoded(model_file::decode(bytes)?)
    }

    fn from_decoded(d: model_file::Decoded) -> Result<Self> {
        let model_err = |e: Error| Error::Model(e.to_string());
        let mut nets = d.nets.into_iter();
        let mut next = || -> Result<DenoiserNet<f32>> {
            let p = nets
                .next()
                .ok_or_else(|| Error::Model("model file is missing a parameter block".into()))?;
            DenoiserNet::from_params(d.arch.clone(), p)
        };
        let model = match d.mode {
            ConditioningMode::Embedding => Self::embedding(next()?),
            ConditioningMode::Dual => {
                let h = next()?;
                Self::dual(h, next()?)
            }
        }
        .map_err(model_err)?;
        ensure!(nets.next().is_none(), Model, "model file has extra parameter blocks");
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        model_file::write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_decoded(model_file::read(path)?)
    }
}

/// ε̂ for label `c` at timestep `t`, dispatched by conditioning mode.
pub fn predict_noise(
    model: &ConditionalModel,
    x_t: &Tensor4<f32>,
    c: ClassLabel,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor4<f32>> {
    let ab = schedule.alphabar(t)?;
    match model {
        ConditionalModel::Embedding(net) => net.forward(x_t, c, ab),
        ConditionalModel::Dual { healthy, unhealthy } => match c {
            // The nets ignore the label argument; they carry no class table.
            ClassLabel::Healthy => healthy.forward(x_t, c, ab),
            ClassLabel::Unhealthy => unhealthy.forward(x_t, c, ab),
        },
    }
}
