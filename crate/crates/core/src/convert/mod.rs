//! Source-to-target conversion: key shift and the synthesis pipeline.

mod keyshift;
mod pipeline;

pub use keyshift::{is_cross_register, key_shift_factor, shift_f0, vowel_voiced_mean, KeyShift, NU_BAND};
pub use pipeline::{
    ConversionOutput, ConversionReport, ConversionRequest, Converter, Enrollment, ShiftPolicy, ENROLL_FLOOR_S,
    ENROLL_RECOMMENDED_S,
};
