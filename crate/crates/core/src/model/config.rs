use serde::{Deserialize, Serialize};

use super::window::WindowConfig;
use crate::error::{Error, Result};

/// How attention values are formed from current and past features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// `F_0 - F_i`
    PresentMinusPast,
    /// `F_i - F_0`
    PastMinusPresent,
}

/// Architecture hyperparameters. Stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: WindowConfig,
    /// Square patch stride of the backbone.
    pub patch: usize,
    pub image_channels: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub rtpe_hidden: usize,
    pub value_mode: ValueMode,
    pub use_rtpe: bool,
    pub use_tat: bool,
    pub ln_eps: f64,
    pub init_std: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_past: usize,
    pub max_future: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            layers: 2,
            heads: 4,
            window: WindowConfig { t: 4, h: 3, w: 3 },
            patch: 8,
            image_channels: 3,
            num_classes: 2,
            mlp_ratio: 2,
            rtpe_hidden: 32,
            value_mode: ValueMode::PresentMinusPast,
            use_rtpe: true,
            use_tat: true,
            ln_eps: 1e-5,
            init_std: 0.02,
            score_threshold: 0.3,
            nms_iou: 0.65,
            max_past: 4,
            max_future: 4,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            layers: 1,
            heads: 1,
            window: WindowConfig { t: 2, h: 2, w: 2 },
            rtpe_hidden: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            ));
        }
        if self.patch == 0 || self.image_channels == 0 || self.num_classes == 0 {
            return fail("patch, image_channels and num_classes must be >= 1".into());
        }
        if self.mlp_ratio == 0 || self.rtpe_hidden == 0 {
            return fail("mlp_ratio and rtpe_hidden must be >= 1".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return fail(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        if self.max_past == 0 || self.max_future == 0 {
            return fail("max_past and max_future must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return fail("score_threshold and nms_iou must lie in [0, 1]".into());
        }
        if self.use_rtpe && !self.use_tat {
            return fail("use_rtpe requires use_tat".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    /// Per-cell head outputs: objectness, dx, dy, w, h, class logits.
    pub fn head_outputs(&self) -> usize {
        5 + self.num_classes
    }
}
