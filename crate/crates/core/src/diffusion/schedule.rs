use serde::Serialize;

use crate::error::{ensure, Result};

/// Linear β schedule with cumulative products `ᾱ_t = ∏_{i≤t}(1 − β_i)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphabars: Vec<f64>,
}

pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(t_max >= 1, Config, "schedule length T must be at least 1");
    ensure!(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        Config,
        "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
    );
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alphabars = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphabars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphabars })
}

impl NoiseSchedule {
    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabars
    }

    fn check(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.len()).contains(&t),
            Input,
            "timestep {t} outside 1..={}",
            self.len()
        );
        Ok(())
    }

    /// `β_t`, 1-based.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t`, 1-based.
    pub fn alphabar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphabars[t - 1])
    }
}
