use std::path::Path;

use crate::error::{Error, Result};

pub const SUPPORTED_RATES: [u32; 2] = [16_000, 24_000];

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::invalid(format!(
                "unsupported sample rate {sample_rate} Hz (use 16000 or 24000)"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!(
                "sample {i} is {} (must be finite, within [-1, 1])",
                samples[i]
            )));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    /// Like [`new`](Self::new) but clamps out-of-range samples.
    pub fn clipped(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        for s in &mut samples {
            if s.is_finite() {
                *s = s.clamp(-1.0, 1.0);
            }
        }
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in audio.samples() {
        w.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

const SINC_ZEROS: usize = 16;

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if audio.sample_rate() == target_rate {
        return Ok(audio.clone());
    }
    let (sr_in, sr_out) = (audio.sample_rate() as f64, target_rate as f64);
    let x = audio.samples();
    let cutoff = (sr_out / sr_in).min(1.0);
    let half = (SINC_ZEROS as f64 / cutoff).ceil() as i64;
    let n_out = (x.len() as f64 * sr_out / sr_in).round() as usize;
    let out = (0..n_out)
        .map(|n| {
            let t = n as f64 * sr_in / sr_out;
            let centre = t.floor() as i64;
            let mut acc = 0.0f64;
            for k in (centre - half + 1)..=(centre + half) {
                if k < 0 || k as usize >= x.len() {
                    continue;
                }
                let d = t - k as f64;
                let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half as f64).cos();
                acc += x[k as usize] as f64 * cutoff * sinc(cutoff * d) * w;
            }
            acc as f32
        })
        .collect();
    AudioBuffer::clipped(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}
