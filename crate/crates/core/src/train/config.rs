use std::path::PathBuf;

use super::loss::LossWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quantize::QuantizerConfig;
use crate::tensor::AdamWConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub quantizer: QuantizerConfig,
    pub loss: LossWeights,
    /// Also decode the continuous encoding and add its weighted reconstruction loss.
    pub dual: bool,
    pub optimizer: AdamWConfig,
    pub total_steps: u64,
    /// Frames per batch, rounded down to whole windows.
    pub batch_frames: usize,
    pub window_frames: usize,
    pub seed: u64,
    pub eval_every: u64,
    /// Keep a numbered checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub manifest: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let total_steps = 5000;
        Self {
            model: ModelConfig::default(),
            quantizer: QuantizerConfig::default(),
            loss: LossWeights {
                lambda: super::ScheduleConfig::scaled(total_steps),
                ..LossWeights::default()
            },
            dual: false,
            optimizer: AdamWConfig::default(),
            total_steps,
            batch_frames: 1024,
            window_frames: 32,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 0,
            manifest: PathBuf::from("corpus/manifest.tsv"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        self.quantizer.validate(self.model.code_dim())?;
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!("adam betas must lie in [0, 1), got {} and {}", o.beta1, o.beta2));
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.window_frames == 0 || !self.window_frames.is_multiple_of(self.model.downsample) {
            return bad(format!(
                "window_frames {} must be a positive multiple of downsample {}",
                self.window_frames, self.model.downsample
            ));
        }
        if self.batch_frames < self.window_frames {
            return bad(format!(
                "batch_frames {} is smaller than one window of {}",
                self.batch_frames, self.window_frames
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}
