use rand::Rng;
use rustfft::num_complex::Complex32;

use super::mel::{MelFilterbank, MelSpectrogram, LOG_FLOOR};
use super::stft::StftPlan;
use super::{AudioBuffer, FrameConfig, FrameMatrix};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const OUTPUT_PEAK: f32 = 0.95;

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    /// Peak-normalised waveform (left silent if the reconstruction is all zero).
    pub audio: AudioBuffer,
    /// Peak absolute sample before normalisation.
    pub raw_peak: f32,
    /// Spectral convergence `‖|X| − S‖ / ‖S‖` of each iterate, first entry
    /// for the initial random-phase signal.
    pub convergence: Vec<f64>,
}

/// Invert a log-mel spectrogram: pseudo-inverse to linear magnitudes, then
/// iterative phase reconstruction with a least-squares inverse STFT.
pub fn griffin_lim(mel: &MelSpectrogram, frame: &FrameConfig, iterations: usize) -> Result<GriffinLimOutput> {
    if iterations < 1 {
        return Err(Error::invalid("griffin-lim needs at least one iteration"));
    }
    let fb = MelFilterbank::new(mel.mel, *frame)?;
    let mut energy = mel.frames.clone();
    energy
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = (v.exp() - LOG_FLOOR).max(0.0));
    let target = fb.pseudo_inverse()?.apply(&energy)?;
    reconstruct(&target, frame, iterations)
}

pub(crate) fn reconstruct(target: &FrameMatrix, frame: &FrameConfig, iterations: usize) -> Result<GriffinLimOutput> {
    let plan = StftPlan::new(*frame)?;
    let bins = frame.bins();
    if target.cols() != bins || target.rows() == 0 {
        return Err(Error::shape(format!(
            "magnitudes are {}x{}, need T x {bins}",
            target.rows(),
            target.cols()
        )));
    }
    // Full-spectrum norm: interior bins appear twice once mirrored.
    let weight = |k: usize| if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
    let target_norm = (0..target.rows())
        .flat_map(|t| {
            target
                .row(t)
                .iter()
                .enumerate()
                .map(move |(k, s)| weight(k) * (*s as f64).powi(2))
        })
        .sum::<f64>()
        .sqrt();

    let mut rng = substream(0, "griffin-lim");
    let mut spectra: Vec<Vec<Complex32>> = (0..target.rows())
        .map(|t| {
            target
                .row(t)
                .iter()
                .map(|s| Complex32::from_polar(*s, rng.random_range(0.0..std::f32::consts::TAU)))
                .collect()
        })
        .collect();
    let mut x = plan.synthesize(&spectra);
    let mut convergence = Vec::with_capacity(iterations + 1);
    for it in 0..=iterations {
        let analysed = plan.analyze(&x)?;
        let mut err = 0.0f64;
        for (t, row) in analysed.iter().enumerate() {
            for (k, c) in row.iter().enumerate() {
                let s = target.row(t)[k];
                err += weight(k) * (c.norm() as f64 - s as f64).powi(2);
                let mag = c.norm();
                spectra[t][k] = if mag > 0.0 {
                    c * (s / mag)
                } else {
                    Complex32::new(s, 0.0)
                };
            }
        }
        convergence.push(if target_norm > 0.0 {
            err.sqrt() / target_norm
        } else {
            0.0
        });
        if it < iterations {
            x = plan.synthesize(&spectra);
        }
    }
    let raw_peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if raw_peak > 0.0 {
        let g = OUTPUT_PEAK / raw_peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    Ok(GriffinLimOutput {
        audio: AudioBuffer::clipped(x, frame.sample_rate)?,
        raw_peak,
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, stft_magnitude, MelConfig};

    fn tone_mel(f: f32, seconds: f32) -> MelSpectrogram {
        let n = (24_000.0 * seconds) as usize;
        let x = (0..n)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * f * i as f32 / 24_000.0).sin())
            .collect();
        let spec = stft_magnitude(&AudioBuffer::new(x, 24_000).unwrap(), &FrameConfig::SYNTHESIS).unwrap();
        mel_spectrogram(&spec, MelConfig::default()).unwrap()
    }

    #[test]
    fn silent_mel_gives_silence() {
        let mel = MelSpectrogram {
            frames: FrameMatrix::new(10, 80, vec![LOG_FLOOR.ln(); 800]).unwrap(),
            mel: MelConfig::default(),
        };
        let out = griffin_lim(&mel, &FrameConfig::SYNTHESIS, 5).unwrap();
        assert!(out.raw_peak < 1e-3);
        assert!(griffin_lim(&mel, &FrameConfig::SYNTHESIS, 0).is_err());
    }

    #[test]
    fn tone_peak_survives_and_error_is_monotone() {
        let out = griffin_lim(&tone_mel(440.0, 0.5), &FrameConfig::SYNTHESIS, 60).unwrap();
        assert!((out.audio.peak() - OUTPUT_PEAK).abs() < 1e-6);
        for w in out.convergence.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
        let spec = stft_magnitude(&out.audio, &FrameConfig::SYNTHESIS).unwrap();
        let mut avg = vec![0.0f32; spec.frames.cols()];
        for t in 0..spec.frames.rows() {
            for (a, v) in avg.iter_mut().zip(spec.frames.row(t)) {
                *a += v;
            }
        }
        let peak = (0..avg.len()).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap() as f32;
        let expect = 440.0 * 1024.0 / 24_000.0;
        assert!((peak - expect).abs() <= 1.0, "peak bin {peak}, expected {expect}");
    }
}
