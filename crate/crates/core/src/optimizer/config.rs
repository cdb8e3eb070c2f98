use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Inserts are used as built.
    #[serde(rename = "ipgo")]
    Ipgo,
    /// Inserts additionally attend to the prompt tokens before concatenation.
    #[serde(rename = "ipgo-plus")]
    IpgoPlus,
}

impl Mode {
    pub fn uses_attention(self) -> bool {
        matches!(self, Mode::IpgoPlus)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 · factor^floor(epoch / period)`
    StepDecay { lr0: f64, factor: f64, period: usize },
    /// Half-cosine from `lr_hi` at the first epoch to `lr_lo` at the last.
    Cosine { lr_hi: f64, lr_lo: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    /// Conformity coefficient.
    pub gamma: f64,
    pub clip_norm: f64,
    pub n_pre: usize,
    pub n_suff: usize,
    pub m_pre: usize,
    pub m_suff: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl TrainConfig {
    /// Prompt-wise defaults: 50 epochs, lr 1e-3 decayed by 0.9 every 10 epochs,
    /// m = 300, ten prefix and ten suffix tokens, γ = 1e-3, clipping at 1.0.
    pub fn promptwise_default() -> Self {
        TrainConfig {
            mode: Mode::Ipgo,
            epochs: 50,
            lr_schedule: LrSchedule::StepDecay { lr0: 1e-3, factor: 0.9, period: 10 },
            gamma: 1e-3,
            clip_norm: 1.0,
            n_pre: 10,
            n_suff: 10,
            m_pre: 300,
            m_suff: 300,
            seed: 0,
            batch_size: 1,
        }
    }

    /// Prompt-batch defaults: attention on, 20 epochs, cosine 1e-4 → 1e-5, batches of 4.
    pub fn batch_default() -> Self {
        TrainConfig {
            mode: Mode::IpgoPlus,
            epochs: 20,
            lr_schedule: LrSchedule::Cosine { lr_hi: 1e-4, lr_lo: 1e-5 },
            batch_size: 4,
            ..TrainConfig::promptwise_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return fail(format!("clip_norm must be > 0, got {}", self.clip_norm));
        }
        match self.lr_schedule {
            LrSchedule::StepDecay { lr0, factor, period } => {
                if !(lr0 > 0.0 && lr0.is_finite()) || !(factor > 0.0 && factor.is_finite()) || period == 0 {
                    return fail(format!("invalid step decay schedule {:?}", self.lr_schedule));
                }
            }
            LrSchedule::Cosine { lr_hi, lr_lo } => {
                if !(lr_hi > 0.0 && lr_lo > 0.0 && lr_hi.is_finite() && lr_lo.is_finite()) {
                    return fail(format!("invalid cosine schedule {:?}", self.lr_schedule));
                }
            }
        }
        if self.m_pre == 0 || self.m_suff == 0 {
            return fail("m_pre and m_suff must be >= 1".into());
        }
        if self.n_pre + self.n_suff == 0 {
            return fail("at least one of n_pre, n_suff must be > 0".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        Ok(())
    }
}
