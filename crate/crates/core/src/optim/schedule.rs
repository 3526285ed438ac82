use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LinearWarmupLinearDecay,
    LinearWarmupPolyDecay,
}

/// Linear warmup to `lr_max`, then linear or polynomial decay to zero at
/// `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    #[serde(default)]
    pub kind: ScheduleKind,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default = "unit_power")]
    pub power: f64,
}

fn unit_power() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn linear(lr_max: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::LinearWarmupLinearDecay,
            lr_max,
            warmup_steps,
            total_steps,
            power: 1.0,
        }
    }

    pub fn poly(lr_max: f64, warmup_steps: u64, total_steps: u64, power: f64) -> Self {
        Self {
            kind: ScheduleKind::LinearWarmupPolyDecay,
            power,
            ..Self::linear(lr_max, warmup_steps, total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps > 0 && self.warmup_steps < self.total_steps) {
            return Err(Error::Config(format!(
                "warmup steps {} must lie strictly between 0 and total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_max > 0.0) || !(self.power > 0.0) {
            return Err(Error::Config("lr_max and power must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at_step(&self, t: u64) -> f64 {
        let (w, total) = (self.warmup_steps, self.total_steps);
        if t >= total {
            return 0.0;
        }
        if t < w {
            return self.lr_max * t as f64 / w as f64;
        }
        let remaining = (total - t) as f64 / (total - w) as f64;
        match self.kind {
            ScheduleKind::LinearWarmupLinearDecay => self.lr_max * remaining,
            ScheduleKind::LinearWarmupPolyDecay => self.lr_max * remaining.powf(self.power),
        }
    }
}
