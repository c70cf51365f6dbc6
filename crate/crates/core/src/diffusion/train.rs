use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig};
use crate::diffusion::{build_schedule, ClassLabel, ConditionalModel, ConditioningMode, NoiseSchedule};
use crate::error::{ensure, Result};
use crate::io::write_text;
use crate::nn::{adam_step, loss_and_grads, Architecture, DenoiserNet, LossNorm, OptimizerState, Tensor4};
use crate::raster::{BinaryMask, Image};
use crate::rng::RngStream;

/// Schedule parameters shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: ScheduleConfig,
    pub mode: ConditioningMode,
    pub loss: LossNorm,
    pub arch: Architecture,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Written after every epoch when set.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            batch_size: 8,
            epochs: 30,
            learning_rate: 5e-4,
            schedule: ScheduleConfig::default(),
            mode: ConditioningMode::Embedding,
            loss: LossNorm::L2,
            arch: Architecture::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_size >= 1, Config, "image_size must be positive");
        ensure!(self.batch_size >= 1, Config, "batch_size must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive"
        );
        self.arch.validate()?;
        self.schedule.build()?;
        let m = self.arch.size_multiple();
        ensure!(
            self.image_size % m == 0,
            Config,
            "image_size {} must be divisible by {m}",
            self.image_size
        );
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub label: ClassLabel,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConditionalModel,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// `[0,1]` HWC image to a `[-1,1]` NCHW tensor with batch size one.
pub fn to_model_input(image: &Image) -> Tensor4<f32> {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut data = vec![0.0f32; w * h * c];
    for (i, px) in image.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * w * h + i] = v * 2.0 - 1.0;
        }
    }
    Tensor4::new([1, c, h, w], data).expect("sized from image")
}

fn fresh_model(cfg: &TrainConfig) -> Result<ConditionalModel> {
    match cfg.mode {
        ConditioningMode::Embedding => {
            let arch = Architecture {
                class_conditioned: true,
                ..cfg.arch.clone()
            };
            ConditionalModel::embedding(DenoiserNet::new(arch, cfg.seed)?)
        }
        ConditioningMode::Dual => {
            let arch = Architecture {
                class_conditioned: false,
                ..cfg.arch.clone()
            };
            ConditionalModel::dual(
                DenoiserNet::new(arch.clone(), cfg.seed)?,
                DenoiserNet::new(arch, cfg.seed.wrapping_add(1))?,
            )
        }
    }
}

/// Trains from scratch with Adam on the ε-prediction objective.
pub fn train(dataset: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!dataset.is_empty(), Config, "training set is empty");
    for s in dataset {
        ensure!(
            s.image.width() == cfg.image_size && s.image.height() == cfg.image_size,
            Config,
            "training image is {}x{}, config expects {}",
            s.image.width(),
            s.image.height(),
            cfg.image_size
        );
        ensure!(
            s.image.channels() == cfg.arch.in_channels,
            Config,
            "training image has {} channels, net expects {}",
            s.image.channels(),
            cfg.arch.in_channels
        );
    }
    for c in [ClassLabel::Healthy, ClassLabel::Unhealthy] {
        ensure!(
            dataset.iter().any(|s| s.label == c),
            Config,
            "training set has no {} images; both classes are required",
            c.name()
        );
    }
    let schedule = cfg.schedule.build()?;
    let mut model = fresh_model(cfg)?;
    let mut states: Vec<OptimizerState<f32>> = model
        .nets()
        .iter()
        .map(|n| OptimizerState::new(n.param_count(), cfg.learning_rate))
        .collect();
    let mut rng = RngStream::substream(cfg.seed, 1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let empty = BinaryMask::zeros(cfg.image_size, cfg.image_size);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut groups: Vec<(Vec<Tensor4<f32>>, Vec<ClassLabel>)> =
                vec![(Vec::new(), Vec::new()); states.len()];
            for &i in chunk {
                let s = &dataset[i];
                let (img, _) = augment(&s.image, &empty, &cfg.augment, &mut rng)?;
                let g = match model {
                    ConditionalModel::Embedding(_) => 0,
                    ConditionalModel::Dual { .. } => s.label.index(),
                };
                groups[g].0.push(to_model_input(&img));
                groups[g].1.push(s.label);
            }
            for (g, (items, labels)) in groups.into_iter().enumerate() {
                if items.is_empty() {
                    continue;
                }
                let batch = Tensor4::stack(&items)?;
                let net = net_mut(&mut model, g);
                let out = loss_and_grads(net, &batch, &labels, &schedule, &mut rng, cfg.loss)?;
                adam_step(net.params_mut(), &out.grads, &mut states[g])?;
                total += out.per_sample.iter().sum::<f64>();
                count += labels.len();
            }
        }
        let mean = total / count as f64;
        log::info!("epoch {} mean loss {:.6}", epoch + 1, mean);
        epoch_losses.push(mean);
        if let Some(path) = &cfg.checkpoint {
            model.save(path)?;
        }
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

fn net_mut(model: &mut ConditionalModel, g: usize) -> &mut DenoiserNet<f32> {
    match model {
        ConditionalModel::Embedding(n) => n,
        ConditionalModel::Dual { healthy, unhealthy } => {
            if g == 0 {
                healthy
            } else {
                unhealthy
            }
        }
    }
}

/// Two-column `epoch,mean_loss` CSV.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{},{l:.9}", i + 1).expect("string write");
    }
    write_text(path, &s)
}
