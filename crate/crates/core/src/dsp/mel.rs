use nalgebra::DMatrix;

use super::{FrameConfig, FrameMatrix, Spectrogram};
use crate::error::{Error, Result};

/// Floor added before the log so silence maps to a finite value.
pub const LOG_FLOOR: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f32,
    pub fmax: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 80,
            fmin: 40.0,
            fmax: 12_000.0,
        }
    }
}

/// Log-magnitude mel frames, `T × n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: FrameMatrix,
    pub mel: MelConfig,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with unit peak on the HTK mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub mel: MelConfig,
    pub frame: FrameConfig,
    /// `n_mels × bins`, row-major.
    weights: Vec<f32>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(mel: MelConfig, frame: FrameConfig) -> Result<Self> {
        if mel.n_mels < 2 {
            return Err(Error::invalid(format!("need at least 2 mel bands, got {}", mel.n_mels)));
        }
        let nyquist = frame.sample_rate as f32 / 2.0;
        if !(mel.fmin >= 0.0 && mel.fmin < mel.fmax && mel.fmax <= nyquist) {
            return Err(Error::invalid(format!(
                "mel range must satisfy 0 <= fmin < fmax <= {nyquist}, got {}..{}",
                mel.fmin, mel.fmax
            )));
        }
        let bins = frame.bins();
        let (lo, hi) = (hz_to_mel(mel.fmin as f64), hz_to_mel(mel.fmax as f64));
        let edges: Vec<f64> = (0..mel.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel.n_mels + 1) as f64))
            .collect();
        let bin_hz = frame.sample_rate as f64 / frame.fft_size as f64;
        let mut weights = vec![0.0f32; mel.n_mels * bins];
        for m in 0..mel.n_mels {
            let (l, c, u) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = ((f - l) / (c - l)).min((u - f) / (u - c));
                if w > 0.0 {
                    weights[m * bins + k] = w as f32;
                }
            }
        }
        Ok(MelFilterbank {
            mel,
            frame,
            weights,
            centers: edges[1..=mel.n_mels].to_vec(),
        })
    }

    pub fn bins(&self) -> usize {
        self.frame.bins()
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Centre frequency of every band in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Linear magnitudes (`T × bins`) to linear mel energies (`T × n_mels`).
    pub fn project(&self, linear: &FrameMatrix) -> Result<FrameMatrix> {
        let bins = self.bins();
        if linear.cols() != bins {
            return Err(Error::shape(format!(
                "spectrum has {} bins, filterbank expects {bins}",
                linear.cols()
            )));
        }
        let mut out = FrameMatrix::zeros(linear.rows(), self.mel.n_mels);
        for t in 0..linear.rows() {
            let row = linear.row(t);
            for (m, o) in out.row_mut(t).iter_mut().enumerate() {
                let w = &self.weights[m * bins..(m + 1) * bins];
                *o = w.iter().zip(row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// Non-negative least-squares-style inverse: Moore-Penrose
    /// pseudo-inverse followed by clamping at zero.
    pub fn pseudo_inverse(&self) -> Result<MelInverse> {
        let bins = self.bins();
        let f = DMatrix::from_row_slice(
            self.mel.n_mels,
            bins,
            &self.weights.iter().map(|v| *v as f64).collect::<Vec<_>>(),
        );
        let pinv = f
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::invalid(format!("filterbank pseudo-inverse failed: {e}")))?;
        Ok(MelInverse {
            n_mels: self.mel.n_mels,
            bins,
            pinv: pinv.transpose().as_slice().iter().map(|v| *v as f32).collect(),
        })
    }
}

pub struct MelInverse {
    n_mels: usize,
    bins: usize,
    /// `bins × n_mels`, row-major.
    pinv: Vec<f32>,
}

impl MelInverse {
    pub fn apply(&self, mel_energy: &FrameMatrix) -> Result<FrameMatrix> {
        if mel_energy.cols() != self.n_mels {
            return Err(Error::shape(format!(
                "mel has {} bands, inverse expects {}",
                mel_energy.cols(),
                self.n_mels
            )));
        }
        let mut out = FrameMatrix::zeros(mel_energy.rows(), self.bins);
        for t in 0..mel_energy.rows() {
            let row = mel_energy.row(t);
            for (k, o) in out.row_mut(t).iter_mut().enumerate() {
                let p = &self.pinv[k * self.n_mels..(k + 1) * self.n_mels];
                *o = p.iter().zip(row).map(|(a, b)| a * b).sum::<f32>().max(0.0);
            }
        }
        Ok(out)
    }
}

pub fn mel_spectrogram(spec: &Spectrogram, mel: MelConfig) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::new(mel, spec.config)?;
    mel_with_filterbank(spec, &fb)
}

pub(crate) fn mel_with_filterbank(spec: &Spectrogram, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    let mut frames = fb.project(&spec.frames)?;
    frames.data_mut().iter_mut().for_each(|v| *v = (*v + LOG_FLOOR).ln());
    Ok(MelSpectrogram { frames, mel: fb.mel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft_magnitude, AudioBuffer};
    use rand::{Rng, SeedableRng};

    fn bank() -> MelFilterbank {
        MelFilterbank::new(MelConfig::default(), FrameConfig::SYNTHESIS).unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = FrameConfig::SYNTHESIS;
        let mel = |n, lo, hi| MelConfig {
            n_mels: n,
            fmin: lo,
            fmax: hi,
        };
        assert!(MelFilterbank::new(mel(1, 40.0, 8000.0), cfg).is_err());
        assert!(MelFilterbank::new(mel(80, 8000.0, 4000.0), cfg).is_err());
        assert!(MelFilterbank::new(mel(80, 40.0, 13_000.0), cfg).is_err());
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let spec = Spectrogram {
            frames: FrameMatrix::zeros(3, 513),
            config: FrameConfig::SYNTHESIS,
        };
        let mel = mel_spectrogram(&spec, MelConfig::default()).unwrap();
        assert!(mel.frames.data().iter().all(|v| *v == LOG_FLOOR.ln()));
    }

    #[test]
    fn filterbank_covers_band() {
        let fb = bank();
        let bins = fb.bins();
        let bin_hz = 24_000.0 / 1024.0;
        for m in 0..80 {
            let area: f32 = fb.weights()[m * bins..(m + 1) * bins].iter().sum();
            assert!(area > 0.0, "band {m} is empty");
        }
        for k in 0..bins {
            let f = k as f32 * bin_hz;
            if f > 40.0 && f < 12_000.0 {
                let hits = (0..80).filter(|m| fb.weights()[m * bins + k] > 0.0).count();
                assert!(hits >= 1, "bin {k} ({f} Hz) is uncovered");
            }
        }
    }

    #[test]
    fn tone_lands_in_nearest_band() {
        let x = (0..24_000)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 24_000.0).sin())
            .collect();
        let spec = stft_magnitude(&AudioBuffer::new(x, 24_000).unwrap(), &FrameConfig::SYNTHESIS).unwrap();
        let mel = mel_spectrogram(&spec, MelConfig::default()).unwrap();
        let fb = bank();
        let nearest = (0..80)
            .min_by(|&a, &b| {
                (fb.centers()[a] - 1000.0)
                    .abs()
                    .total_cmp(&(fb.centers()[b] - 1000.0).abs())
            })
            .unwrap();
        let row = mel.frames.row(mel.frames.rows() / 2);
        let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, nearest);
    }

    #[test]
    fn pseudo_inverse_roundtrip_error_is_bounded() {
        let fb = bank();
        let inv = fb.pseudo_inverse().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data = (0..10 * 513).map(|_| rng.random::<f32>()).collect();
        let linear = FrameMatrix::new(10, 513, data).unwrap();
        let mel = fb.project(&linear).unwrap();
        let back = fb.project(&inv.apply(&mel).unwrap()).unwrap();
        let num: f32 = mel.data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f32 = mel.data().iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 0.35);
    }
}
