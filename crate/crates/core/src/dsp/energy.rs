use super::stft::frame_samples;
use super::{AudioBuffer, FrameConfig, FrameMatrix};
use crate::error::{Error, Result};

pub fn frame_rms(frame: &[f32]) -> f32 {
    let sq: f64 = frame.iter().map(|v| (*v as f64).powi(2)).sum();
    (sq / frame.len() as f64).sqrt() as f32
}

/// Per-frame root-mean-square energy of unwindowed frames.
pub fn rmse(frames: &FrameMatrix) -> Result<Vec<f32>> {
    if frames.rows() == 0 || frames.cols() == 0 {
        return Err(Error::invalid("rmse of an empty frame matrix"));
    }
    Ok((0..frames.rows()).map(|t| frame_rms(frames.row(t))).collect())
}

/// Keep frames whose RMS lies within `threshold_db` of the loudest frame.
/// Digital silence keeps nothing.
pub fn energy_vad(audio: &AudioBuffer, cfg: &FrameConfig, threshold_db: f32) -> Result<Vec<bool>> {
    let rms = rmse(&frame_samples(audio.samples(), cfg)?)?;
    let peak = rms.iter().cloned().fold(0.0f32, f32::max);
    if peak <= 0.0 {
        return Ok(vec![false; rms.len()]);
    }
    let floor = peak * 10f32.powf(-threshold_db / 20.0);
    Ok(rms.iter().map(|r| *r > floor).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::frame_signal;
    use proptest::prelude::*;

    fn tone(n: usize, amp: f32) -> Vec<f32> {
        (0..n)
            .map(|i| amp * (2.0 * std::f32::consts::PI * 500.0 * i as f32 / 16_000.0).sin())
            .collect()
    }

    #[test]
    fn constant_and_zero_frames() {
        let m = FrameMatrix::new(2, 4, vec![0.3; 4].into_iter().chain([0.0; 4]).collect()).unwrap();
        let r = rmse(&m).unwrap();
        assert!((r[0] - 0.3).abs() < 1e-7);
        assert_eq!(r[1], 0.0);
        assert!(rmse(&FrameMatrix::zeros(0, 4)).is_err());
    }

    #[test]
    fn sine_rms_is_amplitude_over_root_two() {
        // 500 Hz at 16 kHz: 32 samples per period, 512-sample frames hold 16.
        let a = AudioBuffer::new(tone(16_000, 0.8), 16_000).unwrap();
        let r = rmse(&frame_signal(&a, &FrameConfig::SPEAKER).unwrap()).unwrap();
        for v in r {
            assert!((v - 0.8 / 2f32.sqrt()).abs() < 1e-3);
        }
    }

    #[test]
    fn vad_tone_silence_and_mix() {
        let cfg = FrameConfig::SPEAKER;
        let a = AudioBuffer::new(tone(16_000, 0.5), 16_000).unwrap();
        assert!(energy_vad(&a, &cfg, 40.0).unwrap().iter().all(|k| *k));
        let z = AudioBuffer::new(vec![0.0; 16_000], 16_000).unwrap();
        assert!(energy_vad(&z, &cfg, 40.0).unwrap().iter().all(|k| !*k));

        let mut x = tone(8192, 0.5);
        x.extend(std::iter::repeat_n(0.0, 8192));
        let m = energy_vad(&AudioBuffer::new(x, 16_000).unwrap(), &cfg, 40.0).unwrap();
        let kept = m.iter().filter(|k| **k).count() as i64;
        // Frames starting before sample 8192 - 512 + 1 are all tone.
        let tone_frames = ((8192 - 512) / 256 + 1) as i64;
        assert!(
            (kept - tone_frames).abs() <= 1,
            "kept {kept}, tone frames {tone_frames}"
        );
    }

    proptest! {
        #[test]
        fn rmse_is_non_negative_and_scales(values in proptest::collection::vec(-1.0f32..1.0, 8..64), k in 0.1f32..1.0) {
            let n = values.len() / 4 * 4;
            let m = FrameMatrix::new(n / 4, 4, values[..n].to_vec()).unwrap();
            let scaled = FrameMatrix::new(n / 4, 4, values[..n].iter().map(|v| v * k).collect()).unwrap();
            for (a, b) in rmse(&m).unwrap().iter().zip(rmse(&scaled).unwrap()) {
                prop_assert!(*a >= 0.0);
                prop_assert!((a * k - b).abs() < 1e-5);
            }
        }
    }
}
