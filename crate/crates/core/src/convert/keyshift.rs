use log::warn;
use serde::{Deserialize, Serialize};

use crate::dsp::F0Config;
use crate::error::{Error, Result};

/// Accepted range of the key-shift ratio.
pub const NU_BAND: (f64, f64) = (0.25, 4.0);

/// Ratio of target to source mean vowel f0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyShift {
    pub nu: f64,
    pub source_mean: f64,
    pub target_mean: f64,
}

/// Mean f0 over frames that are voiced and flagged in `mask`.
pub fn vowel_voiced_mean(f0: &[f32], mask: &[bool]) -> Result<Option<f64>> {
    if f0.len() != mask.len() {
        return Err(Error::shape(format!(
            "{} f0 frames but {} mask flags",
            f0.len(),
            mask.len()
        )));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&f, &m) in f0.iter().zip(mask) {
        if m && f > 0.0 {
            sum += f as f64;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn key_shift_factor(
    source_f0: &[f32],
    source_vowels: &[bool],
    target_f0: &[f32],
    target_vowels: &[bool],
) -> Result<KeyShift> {
    let source_mean = vowel_voiced_mean(source_f0, source_vowels)?.ok_or(Error::NoVoicedVowels("source"))?;
    let target_mean = vowel_voiced_mean(target_f0, target_vowels)?.ok_or(Error::NoVoicedVowels("target"))?;
    Ok(KeyShift {
        nu: target_mean / source_mean,
        source_mean,
        target_mean,
    })
}

/// Shift larger than about four semitones either way.
pub fn is_cross_register(nu: f64) -> bool {
    nu.log2().abs() > 1.0 / 3.0
}

/// Multiply voiced frames by `nu` and clip them to the f0 range. Ratios
/// outside [`NU_BAND`] are rejected unless `allow_out_of_band`.
pub fn shift_f0(f0: &[f32], nu: f64, range: &F0Config, allow_out_of_band: bool) -> Result<Vec<f32>> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::invalid(format!("key shift {nu} is not a positive number")));
    }
    if !allow_out_of_band && !(NU_BAND.0..=NU_BAND.1).contains(&nu) {
        return Err(Error::invalid(format!(
            "key shift {nu:.3} outside [{}, {}]",
            NU_BAND.0, NU_BAND.1
        )));
    }
    let mut clipped = 0usize;
    let out = f0
        .iter()
        .map(|&f| {
            if f <= 0.0 {
                return 0.0;
            }
            let v = (f as f64 * nu) as f32;
            let c = v.clamp(range.f0_min, range.f0_max);
            if c != v {
                clipped += 1;
            }
            c
        })
        .collect();
    if clipped > 0 {
        warn!(
            "{clipped} shifted f0 frames clipped to [{}, {}] Hz",
            range.f0_min, range.f0_max
        );
    }
    Ok(out)
}
