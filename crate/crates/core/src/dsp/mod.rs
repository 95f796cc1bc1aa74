//! Audio I/O and frame-level signal features.

mod audio;
pub mod cache;
mod energy;
mod griffin_lim;
pub(crate) mod mel;
mod pitch;
mod stft;

pub use audio::{read_wav, resample, write_wav, AudioBuffer};
pub use energy::{energy_vad, frame_rms, rmse};
pub use griffin_lim::{griffin_lim, GriffinLimOutput};
pub use mel::{mel_spectrogram, MelConfig, MelFilterbank, MelSpectrogram, LOG_FLOOR};
pub use pitch::{estimate_f0, F0Config};
pub use stft::{frame_count, frame_signal, hann_window, stft_magnitude, Spectrogram};

use crate::error::{Error, Result};

/// Framing and transform sizes for one analysis branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl FrameConfig {
    /// 24 kHz, 40 ms window, 10 ms hop, FFT 1024. Mel, f0 and RMSE for the
    /// acoustic model share these frames.
    pub const SYNTHESIS: FrameConfig = FrameConfig {
        sample_rate: 24_000,
        win: 960,
        hop: 240,
        fft_size: 1024,
    };

    /// 16 kHz, 32 ms window, 16 ms hop, 257 bins.
    pub const SPEAKER: FrameConfig = FrameConfig {
        sample_rate: 16_000,
        win: 512,
        hop: 256,
        fft_size: 512,
    };

    pub fn from_seconds(sample_rate: u32, window_s: f64, shift_s: f64, fft_size: usize) -> Result<Self> {
        if !(shift_s > 0.0 && window_s >= shift_s) {
            return Err(Error::invalid(format!(
                "need window >= shift > 0, got window {window_s} s, shift {shift_s} s"
            )));
        }
        let cfg = FrameConfig {
            sample_rate,
            win: (window_s * sample_rate as f64).round() as usize,
            hop: (shift_s * sample_rate as f64).round() as usize,
            fft_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win < self.hop {
            return Err(Error::invalid(format!(
                "need win >= hop > 0, got win {} hop {}",
                self.win, self.hop
            )));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.win {
            return Err(Error::invalid(format!(
                "fft size {} must be a power of two >= window {}",
                self.fft_size, self.win
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Number of samples spanned by `frames` left-aligned frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.win
        }
    }
}

/// Dense row-major `rows × cols` matrix of frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!("{rows}x{cols} matrix from {} values", data.len())));
        }
        Ok(FrameMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FrameMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<FrameMatrix> {
        if start + len > self.rows {
            return Err(Error::shape(format!("rows {start}..{} of {}", start + len, self.rows)));
        }
        Ok(FrameMatrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Keep the rows whose mask entry is true.
    pub fn select_rows(&self, mask: &[bool]) -> FrameMatrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            data.extend_from_slice(self.row(i));
            rows += 1;
        }
        FrameMatrix {
            rows,
            cols: self.cols,
            data,
        }
    }
}
