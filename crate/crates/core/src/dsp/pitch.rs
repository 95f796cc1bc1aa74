use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;

use super::stft::frame_samples;
use super::{AudioBuffer, FrameConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Config {
    pub f0_min: f32,
    pub f0_max: f32,
    /// Cumulative-mean-normalised difference below which a lag counts as periodic.
    pub threshold: f32,
}

impl Default for F0Config {
    fn default() -> Self {
        F0Config {
            f0_min: 50.0,
            f0_max: 1100.0,
            threshold: 0.15,
        }
    }
}

impl F0Config {
    pub fn clamp_voiced(&self, f: f32) -> f32 {
        if f > 0.0 {
            f.clamp(self.f0_min, self.f0_max)
        } else {
            0.0
        }
    }
}

/// Frames quieter than this are unvoiced regardless of periodicity.
const SILENCE_RMS: f64 = 1e-7;

/// YIN pitch per analysis frame; 0 marks unvoiced frames. Uses the same
/// left-aligned frames as the STFT, so contours line up with the mel.
pub fn estimate_f0(audio: &AudioBuffer, frame: &FrameConfig, cfg: &F0Config) -> Result<Vec<f32>> {
    let sr = frame.sample_rate as f32;
    if !(cfg.f0_min > 0.0 && cfg.f0_min < cfg.f0_max && cfg.f0_max < sr / 2.0) {
        return Err(Error::invalid(format!(
            "f0 range must satisfy 0 < min < max < {}, got {}..{}",
            sr / 2.0,
            cfg.f0_min,
            cfg.f0_max
        )));
    }
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::invalid(format!(
            "voicing threshold {} outside (0, 1)",
            cfg.threshold
        )));
    }
    let tau_max = (sr / cfg.f0_min).ceil() as usize;
    let tau_min = ((sr / cfg.f0_max).floor() as usize).max(2);
    if tau_max + 2 > frame.win {
        return Err(Error::invalid(format!(
            "lag {tau_max} for f0_min {} Hz does not fit a {}-sample frame",
            cfg.f0_min, frame.win
        )));
    }
    let frames = frame_samples(audio.samples(), frame)?;
    let yin = Yin::new(frame.win, tau_max);
    Ok((0..frames.rows())
        .map(|t| {
            let x = frames.row(t);
            match yin.period(x, tau_min, cfg.threshold) {
                Some(tau) => {
                    let f = sr / tau;
                    if f >= cfg.f0_min && f <= cfg.f0_max {
                        f
                    } else {
                        0.0
                    }
                }
                None => 0.0,
            }
        })
        .collect())
}

struct Yin {
    win: usize,
    tau_max: usize,
    n: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f32>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f32>>,
}

impl Yin {
    fn new(win: usize, tau_max: usize) -> Self {
        let n = (2 * win).next_power_of_two();
        let mut planner = FftPlanner::new();
        Yin {
            win,
            tau_max,
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    /// Cumulative-mean-normalised difference for lags `0..=tau_max`.
    fn cmnd(&self, x: &[f32]) -> Option<Vec<f64>> {
        let w = self.win - self.tau_max;
        let energy: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64;
        if energy.sqrt() < SILENCE_RMS {
            return None;
        }
        let zero = Complex32::new(0.0, 0.0);
        let mut a = vec![zero; self.n];
        let mut b = vec![zero; self.n];
        for j in 0..w {
            a[j].re = x[j];
        }
        for (j, v) in x.iter().enumerate() {
            b[j].re = *v;
        }
        self.fwd.process(&mut a);
        self.fwd.process(&mut b);
        for (p, q) in a.iter_mut().zip(&b) {
            *p = p.conj() * q;
        }
        self.inv.process(&mut a);

        let mut prefix = vec![0.0f64; x.len() + 1];
        for (j, v) in x.iter().enumerate() {
            prefix[j + 1] = prefix[j] + (*v as f64).powi(2);
        }
        let e0 = prefix[w];
        let mut out = vec![1.0f64; self.tau_max + 1];
        let mut running = 0.0;
        for tau in 1..=self.tau_max {
            let r = a[tau].re as f64 / self.n as f64;
            let d = (e0 + prefix[tau + w] - prefix[tau] - 2.0 * r).max(0.0);
            running += d;
            out[tau] = if running > 1e-12 { d * tau as f64 / running } else { 1.0 };
        }
        Some(out)
    }

    fn period(&self, x: &[f32], tau_min: usize, threshold: f32) -> Option<f32> {
        let d = self.cmnd(x)?;
        let mut tau = (tau_min..self.tau_max).find(|&t| d[t] < threshold as f64)?;
        while tau + 1 < self.tau_max && d[tau + 1] < d[tau] {
            tau += 1;
        }
        let (l, c, r) = (d[tau - 1], d[tau], d[tau + 1]);
        let denom = l - 2.0 * c + r;
        let shift = if denom.abs() > 1e-12 {
            (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        Some((tau as f64 + shift) as f32)
    }
}
