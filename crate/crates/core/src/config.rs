//! Run configuration as `key=value` pairs.
//!
//! Files hold one `key = value` per line; `#` starts a comment. Values are
//! applied in order over the defaults, so later lines (and command-line
//! overrides applied after the file) win.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::{FeatureExtractor, SynthOptions};
use crate::dsp::{F0Config, MelConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelTrainConfig};
use crate::nn::AdamConfig;
use crate::speaker::{EmbedConfig, EmbedTrainConfig, LossConfig};

/// Documentation of one configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub range: &'static str,
    pub doc: &'static str,
}

trait Value: FromStr + Display + Copy {
    fn as_f64(self) -> f64;
}

impl Value for u64 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Value for usize {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Value for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

fn parse_in<T: Value>(key: &str, raw: &str, lo: f64, hi: f64) -> Result<T> {
    let v: T = raw
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse `{raw}`")))?;
    let f = v.as_f64();
    if !(f.is_finite() && f >= lo && f <= hi) {
        return Err(Error::invalid(format!("{key}: {raw} outside [{lo}, {hi}]")));
    }
    Ok(v)
}

macro_rules! run_config {
    ($( $field:ident : $ty:ty = $default:expr, $key:literal, [$lo:expr, $hi:expr], $doc:literal; )*) => {
        /// Every tunable of the pipeline.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        pub const KEYS: &[KeyDoc] = &[
            $( KeyDoc {
                key: $key,
                default: stringify!($default),
                range: concat!("[", stringify!($lo), ", ", stringify!($hi), "]"),
                doc: $doc,
            }, )*
        ];

        impl RunConfig {
            /// Set one key, checking its documented range.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => self.$field = parse_in::<$ty>($key, value, $lo as f64, $hi as f64)?, )*
                    _ => return Err(Error::invalid(format!("unknown configuration key `{key}`"))),
                }
                Ok(())
            }

            /// All keys with their current values, in documentation order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![ $( ($key, self.$field.to_string()), )* ]
            }
        }
    };
}

run_config! {
    seed: u64 = 1, "seed", [0, u64::MAX], "root seed; every stage draws from a named substream";
    workers: usize = 0, "workers", [0, 1024], "parallel extraction workers, 0 for one per core";
    corpus_speakers: usize = 20, "corpus.speakers", [2, 10000], "synthetic speakers";
    corpus_utts: usize = 20, "corpus.utts", [1, 10000], "synthetic utterances per speaker";
    corpus_singing_fraction: f64 = 0.5, "corpus.singing_fraction", [0, 1], "share of sung utterances per speaker";
    mel_n_mels: usize = 80, "mel.n_mels", [2, 256], "mel bands";
    mel_fmin: f64 = 40.0, "mel.fmin", [0, 12000], "lowest mel band edge in Hz";
    mel_fmax: f64 = 12000.0, "mel.fmax", [1, 12000], "highest mel band edge in Hz";
    f0_min: f64 = 50.0, "f0.min", [20, 1000], "lowest tracked pitch in Hz";
    f0_max: f64 = 1100.0, "f0.max", [100, 4000], "highest tracked pitch in Hz, also the f0 normaliser";
    f0_threshold: f64 = 0.15, "f0.threshold", [0.01, 0.99], "YIN voicing threshold";
    vad_db: f64 = 40.0, "vad.threshold_db", [1, 120], "frames this far below the loudest frame are dropped";
    embed_channels: usize = 256, "embed.channels", [1, 4096], "TDNN channels";
    embed_dim: usize = 256, "embed.dim", [2, 4096], "d-vector size, also the acoustic model speaker input";
    embed_steps: usize = 2000, "embed.steps", [1, 10000000], "embedding training steps";
    embed_speakers_per_batch: usize = 8, "embed.speakers_per_batch", [2, 1024], "speakers sampled per batch";
    embed_utts_per_speaker: usize = 2, "embed.utts_per_speaker", [1, 64], "segments per sampled speaker";
    embed_segment_min: usize = 100, "embed.segment_min", [9, 100000], "shortest training segment in frames";
    embed_segment_max: usize = 200, "embed.segment_max", [9, 100000], "longest training segment in frames";
    embed_lr: f64 = 0.001, "embed.lr", [1e-7, 1], "embedding learning rate after warm-up";
    embed_warmup: u64 = 4000, "embed.warmup", [1, 10000000], "embedding warm-up steps";
    embed_clip: f64 = 5.0, "embed.clip", [1e-6, 1e6], "embedding gradient norm limit";
    loss_scale: f64 = 30.0, "loss.scale", [1e-3, 1000], "cosine-margin scale s";
    loss_margin: f64 = 0.2, "loss.margin", [0, 1], "cosine margin m";
    loss_triplet_margin: f64 = 0.3, "loss.triplet_margin", [0, 2], "triplet hinge margin";
    loss_lambda_lmcl: f64 = 1.0, "loss.lambda_lmcl", [0, 100], "weight of the cosine-margin term";
    loss_lambda_triplet: f64 = 1.0, "loss.lambda_triplet", [0, 100], "weight of the triplet term";
    model_phone_dim: usize = 256, "model.phone_dim", [1, 4096], "phone embedding size";
    model_enc_dim: usize = 256, "model.enc_dim", [2, 4096], "encoder width (even)";
    model_enc_bank: usize = 8, "model.enc_bank", [1, 32], "encoder conv bank widths 1..=n";
    model_bank_channels: usize = 128, "model.bank_channels", [1, 4096], "channels per conv bank width";
    model_highway_layers: usize = 2, "model.highway_layers", [0, 16], "highway layers per CBHG";
    model_cond_dim: usize = 256, "model.cond_dim", [1, 4096], "conditioned state width";
    model_prenet_dim: usize = 256, "model.prenet_dim", [1, 4096], "decoder pre-net width";
    model_prenet_dropout: f64 = 0.5, "model.prenet_dropout", [0, 0.95], "pre-net dropout during training";
    model_dec_dim: usize = 256, "model.dec_dim", [1, 4096], "decoder GRU width";
    model_attn_dim: usize = 128, "model.attn_dim", [1, 4096], "attention hidden width";
    model_attn_window: usize = 11, "model.attn_window", [1, 101], "attention window in frames (odd)";
    model_post_bank: usize = 8, "model.post_bank", [1, 32], "post-net conv bank widths 1..=n";
    model_post_dim: usize = 256, "model.post_dim", [2, 4096], "post-net GRU width (even)";
    train_steps: u64 = 5000, "train.steps", [1, 100000000], "acoustic model training steps";
    train_batch_size: usize = 8, "train.batch_size", [1, 4096], "utterances per batch";
    train_checkpoint_every: u64 = 500, "train.checkpoint_every", [1, 100000000], "steps between checkpoints";
    train_lr: f64 = 0.001, "train.lr", [1e-7, 1], "acoustic model learning rate after warm-up";
    train_warmup: u64 = 500, "train.warmup", [1, 100000000], "acoustic model warm-up steps";
    train_clip: f64 = 1.0, "train.clip", [1e-6, 1e6], "acoustic model gradient norm limit";
    griffin_lim_iters: usize = 32, "convert.griffin_lim_iters", [1, 10000], "Griffin-Lim iterations";
    enroll_floor_s: f64 = 5.0, "convert.enroll_floor_s", [0, 3600], "minimum voiced enrollment audio in seconds";
    enroll_recommended_s: f64 = 20.0, "convert.enroll_recommended_s", [0, 3600], "enrollment length below which a warning is logged";
}

/// `(key, value)` pairs of a configuration file.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Split a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`; the result is validated.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            cfg.apply(&parse_pairs(&text)?)?;
        }
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_fmin >= self.mel_fmax {
            return Err(Error::invalid("mel.fmin must be below mel.fmax"));
        }
        if self.f0_min >= self.f0_max {
            return Err(Error::invalid("f0.min must be below f0.max"));
        }
        if self.embed_segment_min > self.embed_segment_max {
            return Err(Error::invalid("embed.segment_min exceeds embed.segment_max"));
        }
        self.model_config(1).validate()?;
        FeatureExtractor::new(self.mel_config(), self.f0_config(), self.vad_db as f32)?;
        Ok(())
    }

    /// Canonical `key=value` text; its digest identifies the run.
    pub fn canonical(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn mel_config(&self) -> MelConfig {
        MelConfig {
            n_mels: self.mel_n_mels,
            fmin: self.mel_fmin as f32,
            fmax: self.mel_fmax as f32,
        }
    }

    pub fn f0_config(&self) -> F0Config {
        F0Config {
            f0_min: self.f0_min as f32,
            f0_max: self.f0_max as f32,
            threshold: self.f0_threshold as f32,
        }
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.mel_config(), self.f0_config(), self.vad_db as f32)
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            n_speakers: self.corpus_speakers,
            utts_per_speaker: self.corpus_utts,
            singing_fraction: self.corpus_singing_fraction as f32,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn embed_config(&self, n_classes: usize) -> EmbedConfig {
        EmbedConfig {
            channels: self.embed_channels,
            embed_dim: self.embed_dim,
            n_classes,
            ..Default::default()
        }
    }

    pub fn embed_train_config(&self) -> EmbedTrainConfig {
        EmbedTrainConfig {
            steps: self.embed_steps,
            speakers_per_batch: self.embed_speakers_per_batch,
            utts_per_speaker: self.embed_utts_per_speaker,
            segment_min: self.embed_segment_min,
            segment_max: self.embed_segment_max,
            loss: LossConfig {
                scale: self.loss_scale,
                margin: self.loss_margin,
                triplet_margin: self.loss_triplet_margin,
                lambda_lmcl: self.loss_lambda_lmcl,
                lambda_triplet: self.loss_lambda_triplet,
            },
            adam: AdamConfig {
                base_lr: self.embed_lr,
                warmup_steps: self.embed_warmup,
                ..Default::default()
            },
            clip_norm: self.embed_clip,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            phone_dim: self.model_phone_dim,
            enc_dim: self.model_enc_dim,
            enc_bank: self.model_enc_bank,
            bank_channels: self.model_bank_channels,
            highway_layers: self.model_highway_layers,
            spk_dim: self.embed_dim,
            cond_dim: self.model_cond_dim,
            prenet_dim: self.model_prenet_dim,
            prenet_dropout: self.model_prenet_dropout,
            dec_dim: self.model_dec_dim,
            attn_dim: self.model_attn_dim,
            attn_window: self.model_attn_window,
            n_mels: self.mel_n_mels,
            post_bank: self.model_post_bank,
            post_dim: self.model_post_dim,
        }
    }

    pub fn model_train_config(&self) -> ModelTrainConfig {
        ModelTrainConfig {
            steps: self.train_steps,
            batch_size: self.train_batch_size,
            checkpoint_every: self.train_checkpoint_every,
            adam: AdamConfig {
                base_lr: self.train_lr,
                warmup_steps: self.train_warmup,
                ..Default::default()
            },
            clip_norm: self.train_clip,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_library_defaults() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.mel_config(), MelConfig::default());
        assert_eq!(c.f0_config(), F0Config::default());
        assert_eq!(
            c.model_config(crate::corpus::phones::vocab_size()),
            ModelConfig::default()
        );
        assert_eq!(c.model_train_config(), ModelTrainConfig::default());
        let e = c.embed_train_config();
        assert_eq!((e.steps, e.loss), (2000, LossConfig::default()));
    }

    #[test]
    fn file_then_overrides() {
        let text = "# comment\nseed = 7\n\ntrain.steps=10  # trailing\n";
        let pairs = parse_pairs(text).unwrap();
        let mut c = RunConfig::default();
        c.apply(&pairs).unwrap();
        c.apply(&[parse_override("seed=9").unwrap()]).unwrap();
        assert_eq!((c.seed, c.train_steps), (9, 10));
    }

    #[test]
    fn rejects_unknown_keys_and_out_of_range_values() {
        let mut c = RunConfig::default();
        assert!(c.set("model.bogus", "1").unwrap_err().to_string().contains("unknown"));
        assert!(c.set("loss.margin", "1.5").is_err());
        assert!(c.set("train.steps", "ten").is_err());
        assert!(c.set("loss.margin", "0.35").is_ok());
        assert!(parse_pairs("novalue\n").is_err());
        let mut bad = RunConfig::default();
        bad.set("model.enc_dim", "5").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut seen = std::collections::HashSet::new();
        for k in KEYS {
            assert!(seen.insert(k.key), "duplicate {}", k.key);
            assert!(!k.doc.is_empty());
        }
        assert_eq!(KEYS.len(), RunConfig::default().pairs().len());
    }
}
