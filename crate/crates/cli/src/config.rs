//! The pipeline configuration document (TOML). Every key has a default and
//! unknown keys are rejected.

use std::path::Path;

use diffseg::data::{AugmentConfig, SyntheticSpec};
use diffseg::densecrf::CrfParams;
use diffseg::diffseg::{BinarizePolicy, EnsembleOptions, Threshold};
use diffseg::diffusion::{ConditioningMode, ScheduleConfig, TrainConfig};
use diffseg::nn::{Activation, Architecture, LossNorm, Norm};
use diffseg::refine::RefineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Drives data generation, training, ensemble noise and refinement sampling.
    pub seed: u64,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    pub segment: SegmentSection,
    pub crf: CrfParams,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleConfig::default(),
            train: TrainSection::default(),
            segment: SegmentSection::default(),
            crf: CrfParams::default(),
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Diseased training images; each also yields a healthy counterfactual.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub generator: SyntheticSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train: 200,
            val: 0,
            test: 50,
            generator: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub conditioning: ConditioningMode,
    pub emb_dim: usize,
    pub channels: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            conditioning: ConditioningMode::Embedding,
            emb_dim: 64,
            channels: vec![16, 32, 64],
            norm_groups: 8,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_channels: 3,
            emb_dim: self.emb_dim,
            channels: self.channels.clone(),
            norm_groups: self.norm_groups,
            activation: Activation::Silu,
            norm: Norm::Group,
            class_conditioned: self.conditioning == ConditioningMode::Embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossNorm,
    pub augment: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 5e-4,
            loss: LossNorm::L2,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    Fixed,
    Otsu,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSection {
    /// `start:stop:step` (inclusive) or a comma list.
    pub timesteps: String,
    /// Timestep used by the single-mask `segment` command.
    pub timestep: usize,
    pub threshold: ThresholdRule,
    pub delta: f64,
    pub quantile: f64,
    pub normalize: bool,
    /// Gaussian σ (pixels) applied to difference maps; 0 disables.
    pub smooth_sigma: f64,
}

impl Default for SegmentSection {
    fn default() -> Self {
        Self {
            timesteps: "60:150:10".into(),
            timestep: 100,
            threshold: ThresholdRule::Fixed,
            delta: 0.5,
            quantile: 0.9,
            normalize: true,
            smooth_sigma: 0.0,
        }
    }
}

impl SegmentSection {
    pub fn policy(&self) -> BinarizePolicy {
        let threshold = match self.threshold {
            ThresholdRule::Fixed => Threshold::Fixed(self.delta),
            ThresholdRule::Otsu => Threshold::Otsu,
            ThresholdRule::Quantile => Threshold::Quantile(self.quantile),
        };
        BinarizePolicy {
            threshold,
            normalize: self.normalize,
        }
    }

    pub fn options(&self) -> EnsembleOptions {
        EnsembleOptions {
            policy: self.policy(),
            smooth_sigma: (self.smooth_sigma > 0.0).then_some(self.smooth_sigma),
        }
    }
}

/// Parses `start:stop:step` (stop inclusive) or `a,b,c`.
pub fn parse_timesteps(spec: &str) -> Result<Vec<usize>, String> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("`{s}` is not a non-negative integer"))
    };
    let out: Vec<usize> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("`{spec}` is not start:stop:step"));
        }
        let (a, b, s) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if s == 0 {
            return Err("step must be positive".into());
        }
        (a..=b).step_by(s).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_, _>>()?
    };
    if out.is_empty() {
        return Err(format!("`{spec}` selects no timesteps"));
    }
    Ok(out)
}

fn keyed(key: &str, r: diffseg::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| match e {
        diffseg::Error::Config(m) if m.starts_with(key) => CliError::Config(m),
        diffseg::Error::Config(m) => CliError::Config(format!("{key}: {m}")),
        other => CliError::Core(other),
    })
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::Usage(format!("config file not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string() + &span_hint(&e)))
    }

    pub fn timesteps(&self) -> Result<Vec<usize>, CliError> {
        parse_timesteps(&self.segment.timesteps)
            .map_err(|m| CliError::Config(format!("segment.timesteps: {m}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut gen = self.synth.generator.clone();
        gen.seed = self.seed;
        keyed("synth", gen.validate())?;
        keyed("model", self.model.architecture().validate())?;
        keyed("schedule", self.schedule.build().map(|_| ()))?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(CliError::Config("train.epochs must be at least 1".into()));
        }
        keyed("train", self.train_config(self.synth.generator.image_size).validate())?;
        keyed("train.augment", t.augment.validate())?;
        keyed("segment", self.segment.policy().validate())?;
        if !(self.segment.smooth_sigma >= 0.0 && self.segment.smooth_sigma.is_finite()) {
            return Err(CliError::Config("segment.smooth_sigma must be non-negative".into()));
        }
        let steps = self.schedule.steps;
        let ts = self.timesteps()?;
        for &x in ts.iter().chain([&self.segment.timestep]) {
            if !(1..=steps).contains(&x) {
                return Err(CliError::Config(format!(
                    "segment.timesteps: {x} outside the schedule range 1..={steps}"
                )));
            }
        }
        if ts.windows(2).any(|p| p[0] >= p[1]) {
            return Err(CliError::Config("segment.timesteps must be strictly increasing".into()));
        }
        keyed("crf", self.crf.validate())?;
        keyed("refine", self.refine.validate())?;
        if self.refine.subset_size > ts.len() {
            return Err(CliError::Config(format!(
                "refine.subset_size {} exceeds the {} ensemble timesteps",
                self.refine.subset_size,
                ts.len()
            )));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.synth.generator.clone()
        }
    }

    pub fn train_config(&self, image_size: usize) -> TrainConfig {
        TrainConfig {
            image_size,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            schedule: self.schedule.clone(),
            mode: self.model.conditioning,
            loss: self.train.loss,
            arch: self.model.architecture(),
            augment: self.train.augment.clone(),
            seed: self.seed,
            checkpoint: None,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            seed: self.seed,
            ..self.refine.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_timesteps_are_ten() {
        let ts = parse_timesteps("60:150:10").unwrap();
        assert_eq!(ts.len(), 10);
        assert_eq!((ts[0], ts[9]), (60, 150));
        assert_eq!(parse_timesteps("5, 9").unwrap(), vec![5, 9]);
        assert!(parse_timesteps("1:5:0").is_err());
        assert!(parse_timesteps("a").is_err());
    }

    #[test]
    fn default_config_validates() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let e = PipelineConfig::parse("[crf]\nw3 = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("w3"), "{e}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn invalid_value_names_key() {
        let cfg = PipelineConfig::parse("[refine]\nsubset_size = 11\n").unwrap();
        let e = cfg.validate().unwrap_err();
        assert!(e.to_string().contains("refine.subset_size"), "{e}");
        let cfg = PipelineConfig::parse("[model]\nemb_dim = 3\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("model"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
