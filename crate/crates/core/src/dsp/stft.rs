use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use super::{AudioBuffer, FrameConfig, FrameMatrix};
use crate::error::{Error, Result};

/// Magnitude STFT, `T × (fft_size/2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: FrameMatrix,
    pub config: FrameConfig,
}

/// Left-aligned frame count; partial trailing frames are dropped.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Result<usize> {
    if len < win {
        return Err(Error::invalid(format!(
            "audio has {len} samples, shorter than one {win}-sample window"
        )));
    }
    Ok((len - win) / hop + 1)
}

/// Unwindowed frames as rows of a `T × win` matrix.
pub fn frame_signal(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FrameMatrix> {
    frame_samples(audio.samples(), cfg)
}

pub(crate) fn frame_samples(x: &[f32], cfg: &FrameConfig) -> Result<FrameMatrix> {
    cfg.validate()?;
    let t = frame_count(x.len(), cfg.win, cfg.hop)?;
    let mut data = Vec::with_capacity(t * cfg.win);
    for i in 0..t {
        data.extend_from_slice(&x[i * cfg.hop..i * cfg.hop + cfg.win]);
    }
    FrameMatrix::new(t, cfg.win, data)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let p = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (0.5 - 0.5 * p.cos()) as f32
        })
        .collect()
}

const NORM_FLOOR: f64 = 1e-3;

pub(crate) struct StftPlan {
    pub cfg: FrameConfig,
    pub window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl StftPlan {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            cfg,
            window: hann_window(cfg.win),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    /// Complex half-spectra of every frame, `T` rows of `bins` values.
    pub fn analyze(&self, x: &[f32]) -> Result<Vec<Vec<Complex32>>> {
        let (win, hop, n) = (self.cfg.win, self.cfg.hop, self.cfg.fft_size);
        let t = frame_count(x.len(), win, hop)?;
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            buf.iter_mut().for_each(|c| *c = Complex32::new(0.0, 0.0));
            for (k, (s, w)) in x[i * hop..i * hop + win].iter().zip(&self.window).enumerate() {
                buf[k].re = s * w;
            }
            self.forward.process(&mut buf);
            out.push(buf[..self.cfg.bins()].to_vec());
        }
        Ok(out)
    }

    /// Least-squares inverse: windowed overlap-add divided by the summed
    /// squared window. The divisor is floored so the taper at either end of
    /// the signal does not amplify rounding noise.
    pub fn synthesize(&self, spectra: &[Vec<Complex32>]) -> Vec<f32> {
        let (win, hop, n) = (self.cfg.win, self.cfg.hop, self.cfg.fft_size);
        let len = self.cfg.samples_for_frames(spectra.len());
        let mut acc = vec![0.0f64; len];
        let mut norm = vec![0.0f64; len];
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        for (i, half) in spectra.iter().enumerate() {
            buf[..half.len()].copy_from_slice(half);
            for k in 1..n - half.len() + 1 {
                buf[n - k] = half[k].conj();
            }
            self.inverse.process(&mut buf);
            for k in 0..win {
                let w = self.window[k] as f64;
                acc[i * hop + k] += buf[k].re as f64 / n as f64 * w;
                norm[i * hop + k] += w * w;
            }
        }
        acc.iter()
            .zip(&norm)
            .map(|(a, w)| (a / w.max(NORM_FLOOR)) as f32)
            .collect()
    }
}

pub(crate) fn magnitudes(spectra: &[Vec<Complex32>]) -> FrameMatrix {
    let cols = spectra.first().map_or(0, |r| r.len());
    let data = spectra.iter().flat_map(|r| r.iter().map(|c| c.norm())).collect();
    FrameMatrix::new(spectra.len(), cols, data).expect("rows have equal length")
}

/// Hann-windowed DFT magnitudes on left-aligned frames.
pub fn stft_magnitude(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<Spectrogram> {
    if audio.sample_rate() != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "audio is {} Hz but the analysis expects {} Hz",
            audio.sample_rate(),
            cfg.sample_rate
        )));
    }
    let plan = StftPlan::new(*cfg)?;
    Ok(Spectrogram {
        frames: magnitudes(&plan.analyze(audio.samples())?),
        config: *cfg,
    })
}
