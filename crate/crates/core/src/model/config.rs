use serde::{Deserialize, Serialize};

use crate::corpus::phones::vocab_size;
use crate::corpus::FeatureSet;
use crate::error::{Error, Result};

/// Mel frames emitted per decoder step.
pub const FRAMES_PER_STEP: usize = 2;

/// Layer widths of the acoustic model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub phone_dim: usize,
    /// Encoder width; the bidirectional GRU uses half per direction.
    pub enc_dim: usize,
    /// Encoder conv bank holds widths `1..=enc_bank`.
    pub enc_bank: usize,
    pub bank_channels: usize,
    pub highway_layers: usize,
    pub spk_dim: usize,
    pub cond_dim: usize,
    pub prenet_dim: usize,
    /// Drop probability on the pre-net output during training.
    pub prenet_dropout: f64,
    pub dec_dim: usize,
    pub attn_dim: usize,
    /// Centered attention window over conditioned states (odd).
    pub attn_window: usize,
    pub n_mels: usize,
    pub post_bank: usize,
    /// Post-net GRU width, split across directions.
    pub post_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: vocab_size(),
            phone_dim: 256,
            enc_dim: 256,
            enc_bank: 8,
            bank_channels: 128,
            highway_layers: 2,
            spk_dim: 256,
            cond_dim: 256,
            prenet_dim: 256,
            prenet_dropout: 0.5,
            dec_dim: 256,
            attn_dim: 128,
            attn_window: 11,
            n_mels: 80,
            post_bank: 8,
            post_dim: 256,
        }
    }
}

impl ModelConfig {
    /// Small widths for quick experiments on the synthetic corpus.
    pub fn toy(spk_dim: usize) -> Self {
        ModelConfig {
            phone_dim: 32,
            enc_dim: 32,
            enc_bank: 4,
            bank_channels: 16,
            spk_dim,
            cond_dim: 48,
            prenet_dim: 48,
            dec_dim: 96,
            attn_dim: 24,
            post_bank: 4,
            post_dim: 32,
            ..Default::default()
        }
    }

    /// Width of the per-frame concatenation fed to the conditioning layer.
    pub fn condition_input_dim(&self) -> usize {
        self.enc_dim + 2 + self.spk_dim
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab", self.vocab),
            ("phone_dim", self.phone_dim),
            ("enc_dim", self.enc_dim),
            ("enc_bank", self.enc_bank),
            ("bank_channels", self.bank_channels),
            ("spk_dim", self.spk_dim),
            ("cond_dim", self.cond_dim),
            ("prenet_dim", self.prenet_dim),
            ("dec_dim", self.dec_dim),
            ("attn_dim", self.attn_dim),
            ("n_mels", self.n_mels),
            ("post_bank", self.post_bank),
            ("post_dim", self.post_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model {name} must be positive")));
        }
        if !self.enc_dim.is_multiple_of(2) || !self.post_dim.is_multiple_of(2) {
            return Err(Error::invalid("enc_dim and post_dim must be even"));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::invalid(format!(
                "prenet dropout {} outside [0, 1)",
                self.prenet_dropout
            )));
        }
        if self.attn_window.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "attention window {} must be odd",
                self.attn_window
            )));
        }
        Ok(())
    }
}

/// Scaling of the scalar frame conditions.
///
/// f0 maps to `ln(1 + f) / ln(1 + f0_max)`; RMSE maps linearly so that the
/// corpus range `[rmse_min, rmse_max]` becomes `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub f0_max: f32,
    pub rmse_min: f32,
    pub rmse_max: f32,
}

impl Default for FeatureNorm {
    fn default() -> Self {
        FeatureNorm {
            f0_max: 1100.0,
            rmse_min: 0.0,
            rmse_max: 1.0,
        }
    }
}

impl FeatureNorm {
    pub fn from_features<'a>(sets: impl IntoIterator<Item = &'a FeatureSet>, f0_max: f32) -> Result<Self> {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for s in sets {
            for &r in &s.rmse {
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("no RMSE frames to normalise"));
        }
        Ok(FeatureNorm {
            f0_max,
            rmse_min: lo,
            rmse_max: hi,
        })
    }

    pub fn f0(&self, f: f32) -> f32 {
        (1.0 + f.max(0.0)).ln() / (1.0 + self.f0_max).ln()
    }

    pub fn f0_inverse(&self, v: f32) -> f32 {
        (v * (1.0 + self.f0_max).ln()).exp() - 1.0
    }

    pub fn rmse(&self, r: f32) -> f32 {
        let span = self.rmse_max - self.rmse_min;
        if span <= 0.0 {
            return 0.0;
        }
        (r - self.rmse_min) / span
    }

    pub fn rmse_inverse(&self, v: f32) -> f32 {
        self.rmse_min + v * (self.rmse_max - self.rmse_min)
    }
}
