use serde::{Deserialize, Serialize};

use super::layout::{build_layout, TokenLayout, TokenMode};
use crate::diffusion::ScheduleConfig;
use crate::error::{invalid, Result};
use crate::tasks::ArchSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub token_mode: TokenMode,
    /// Maximum parameters per token in chunked mode (`M`).
    pub chunk: usize,
    pub num_freqs: usize,
    /// log₂ of the highest encoding frequency.
    pub max_freq_exp: f64,
    /// Multiplier applied to loss/return conditioning scalars before encoding.
    pub metric_scale: f64,
    /// Which task metric the model is conditioned on.
    pub metric_index: usize,
    pub schedule: ScheduleConfig,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 4,
            heads: 4,
            token_mode: TokenMode::LayerByLayer,
            chunk: 96,
            num_freqs: 128,
            max_freq_exp: 14.0,
            metric_scale: 1.0,
            metric_index: 0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl GptConfig {
    /// Checks the config against a task architecture and returns its layout.
    pub fn layout_for(&self, arch: &ArchSpec) -> Result<TokenLayout> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(invalid("hidden, layers and heads must be ≥ 1"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden)));
        }
        if self.num_freqs == 0 || !(self.max_freq_exp >= 0.0) {
            return Err(invalid("scalar encoder needs ≥ 1 frequency and a nonnegative max exponent"));
        }
        if !(self.metric_scale > 0.0 && self.metric_scale.is_finite()) {
            return Err(invalid("metric_scale must be positive"));
        }
        self.schedule.build()?;
        let layout = build_layout(arch, self.token_mode, self.chunk)?;
        let m = layout.max_token_len();
        if m >= self.hidden {
            return Err(invalid(format!(
                "largest token holds {m} parameters; it must be smaller than the hidden size {} (M < hidden)",
                self.hidden
            )));
        }
        Ok(layout)
    }
}
