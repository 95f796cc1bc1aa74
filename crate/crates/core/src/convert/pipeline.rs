use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::keyshift::{is_cross_register, key_shift_factor, shift_f0, KeyShift};
use crate::corpus::{FeatureExtractor, FeatureSet, PhoneEntry};
use crate::dsp::{griffin_lim, AudioBuffer, MelSpectrogram};
use crate::error::{Error, Result, StageExt};
use crate::model::{AcousticModel, ModelInput};
use crate::speaker::SpeakerEncoder;

/// Enrollments with less voiced audio than this are rejected.
pub const ENROLL_FLOOR_S: f64 = 5.0;
/// Shorter enrollments are accepted with a warning.
pub const ENROLL_RECOMMENDED_S: f64 = 20.0;

/// When the source f0 is transposed into the target register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftPolicy {
    /// Only for cross-register pairs (more than about four semitones).
    Auto,
    Always,
    Never,
}

#[derive(Clone, Copy, Debug)]
pub struct ConversionRequest<'a> {
    pub source: &'a AudioBuffer,
    pub phones: &'a [PhoneEntry],
    pub enrollment: &'a AudioBuffer,
    pub policy: ShiftPolicy,
    /// Used instead of the measured ratio when set.
    pub nu_override: Option<f64>,
    pub allow_out_of_band: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub nu: f64,
    pub source_mean_f0: f64,
    pub target_mean_f0: f64,
    /// Whether `nu` was applied to the source f0.
    pub shifted: bool,
    pub frames: usize,
    pub stages_ms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct ConversionOutput {
    pub audio: AudioBuffer,
    pub mel: MelSpectrogram,
    pub dvector: Vec<f32>,
    pub report: ConversionReport,
}

/// Target speaker material derived from an enrollment recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Enrollment {
    pub dvector: Vec<f32>,
    pub f0: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct Converter<'a> {
    pub model: &'a AcousticModel,
    pub embedder: &'a SpeakerEncoder,
    pub features: &'a FeatureExtractor,
    pub griffin_lim_iters: usize,
    pub enroll_floor_s: f64,
    pub enroll_recommended_s: f64,
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().stage(name)?;
        self.0.insert(name.to_string(), t.elapsed().as_secs_f64() * 1e3);
        Ok(out)
    }
}

impl<'a> Converter<'a> {
    pub fn new(model: &'a AcousticModel, embedder: &'a SpeakerEncoder, features: &'a FeatureExtractor) -> Self {
        Converter {
            model,
            embedder,
            features,
            griffin_lim_iters: 32,
            enroll_floor_s: ENROLL_FLOOR_S,
            enroll_recommended_s: ENROLL_RECOMMENDED_S,
        }
    }

    /// d-vector and f0 contour of the target. Every voiced frame counts
    /// toward the target mean f0.
    pub fn enroll(&self, audio: &AudioBuffer) -> Result<Enrollment> {
        let mags = self.features.speaker(audio)?;
        let dvector = self.embedder.extract_dvector(
            &mags,
            self.features.speaker_frame.hop_seconds(),
            self.enroll_floor_s,
            self.enroll_recommended_s,
        )?;
        let f0 = self.features.synthesis(audio)?.f0;
        Ok(Enrollment { dvector, f0 })
    }

    /// Source features checked against the phone durations.
    pub fn source_features(&self, audio: &AudioBuffer, phones: &[PhoneEntry]) -> Result<FeatureSet> {
        let feats = self.features.synthesis(audio)?;
        let total: usize = phones.iter().map(|p| p.dur as usize).sum();
        if total != feats.frames() {
            return Err(Error::invalid(format!(
                "phone durations cover {total} frames but the source has {}",
                feats.frames()
            )));
        }
        Ok(feats)
    }

    pub fn convert(&self, req: &ConversionRequest) -> Result<ConversionOutput> {
        let mut timer = Timer(BTreeMap::new());
        let target = timer.run("enrollment", || self.enroll(req.enrollment))?;
        self.convert_enrolled(req, &target, timer.0)
    }

    /// Conversion with a precomputed enrollment.
    pub fn convert_enrolled(
        &self,
        req: &ConversionRequest,
        target: &Enrollment,
        stages_ms: BTreeMap<String, f64>,
    ) -> Result<ConversionOutput> {
        let mut timer = Timer(stages_ms);
        let source = timer.run("source-features", || self.source_features(req.source, req.phones))?;
        let vowels: Vec<bool> = req
            .phones
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.vowel, p.dur as usize))
            .collect();
        let (shift, f0, shifted) = timer.run("key-shift", || {
            let all = vec![true; target.f0.len()];
            let mut shift = key_shift_factor(&source.f0, &vowels, &target.f0, &all)?;
            if let Some(nu) = req.nu_override {
                shift = KeyShift { nu, ..shift };
            }
            let apply = match req.policy {
                ShiftPolicy::Auto => is_cross_register(shift.nu),
                ShiftPolicy::Always => true,
                ShiftPolicy::Never => false,
            };
            let f0 = if apply {
                shift_f0(&source.f0, shift.nu, &self.features.f0, req.allow_out_of_band)?
            } else {
                source.f0.clone()
            };
            Ok((shift, f0, apply))
        })?;
        let input = ModelInput {
            phones: req.phones.iter().map(PhoneEntry::id).collect(),
            durations: req.phones.iter().map(|p| p.dur as usize).collect(),
            f0,
            rmse: source.rmse,
            speaker: target.dvector.clone(),
        };
        let frames = input.frames();
        let mel = timer.run("acoustic-model", || self.model.infer(&input).map(|p| p.refined))?;
        let mel = MelSpectrogram {
            frames: mel,
            mel: self.features.mel_config(),
        };
        let audio = timer.run("vocoder", || {
            let out = griffin_lim(&mel, &self.features.frame, self.griffin_lim_iters)?;
            // Keep one hop per frame; the rest is the tail of the last window.
            let n = (frames * self.features.frame.hop).min(out.audio.len());
            AudioBuffer::new(out.audio.samples()[..n].to_vec(), out.audio.sample_rate())
        })?;
        Ok(ConversionOutput {
            audio,
            mel,
            dvector: target.dvector.clone(),
            report: ConversionReport {
                nu: shift.nu,
                source_mean_f0: shift.source_mean,
                target_mean_f0: shift.target_mean,
                shifted,
                frames,
                stages_ms: timer.0,
            },
        })
    }
}
