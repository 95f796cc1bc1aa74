//! Synthetic speech and singing corpus with ground-truth labels.
//!
//! Vowels are a pulse train through three speaker-specific formant
//! resonators; consonants are band-passed noise. Speech pitch declines
//! linearly across the utterance, singing holds one equal-tempered note per
//! vowel with vibrato.

use std::f32::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, PhoneEntry, UtteranceKind, UtteranceRecord};
use super::phones::{PhoneKind, INVENTORY, VOWEL_COUNT};
use crate::dsp::{write_wav, AudioBuffer, FrameConfig};
use crate::error::{Error, Result};
use crate::rng::{substream, StageRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpeakerSpec {
    pub name: String,
    /// Neutral-vowel formant centres, ascending.
    pub formants_hz: [f32; 3],
    pub bandwidths_hz: [f32; 3],
    pub base_pitch_hz: f32,
    pub vibrato_cents: f32,
    pub vibrato_rate_hz: f32,
    /// One-pole low-pass coefficient shaping the glottal source.
    pub tilt: f32,
}

impl SynthSpeakerSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f32 / 2.0;
        let f = self.formants_hz;
        if !(f[0] > 0.0 && f[0] < f[1] && f[1] < f[2] && f[2] < nyquist) {
            return Err(Error::invalid(format!(
                "speaker {}: formants {f:?} must ascend below {nyquist} Hz",
                self.name
            )));
        }
        if !(self.base_pitch_hz > 0.0 && self.base_pitch_hz < nyquist) || !(0.0..1.0).contains(&self.tilt) {
            return Err(Error::invalid(format!("speaker {}: bad pitch or tilt", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Fraction of each speaker's utterances rendered as singing.
    pub singing_fraction: f32,
    pub seed: u64,
    pub speech_syllables: (usize, usize),
    pub singing_syllables: (usize, usize),
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_speakers: 20,
            utts_per_speaker: 20,
            singing_fraction: 0.5,
            seed: 1,
            speech_syllables: (6, 10),
            singing_syllables: (4, 7),
        }
    }
}

pub struct SynthCorpus {
    pub manifest: PathBuf,
    pub records: Vec<UtteranceRecord>,
    pub speakers: Vec<SynthSpeakerSpec>,
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i:02}")
}

/// Speakers spread over pitch and vocal-tract size by stratified sampling.
pub fn random_speakers(n: usize, seed: u64) -> Vec<SynthSpeakerSpec> {
    let mut rng = substream(seed, "synth/speakers");
    let mut scale_strata: Vec<usize> = (0..n).collect();
    scale_strata.shuffle(&mut rng);
    let (lo, hi) = (90f32.ln(), 320f32.ln());
    (0..n)
        .map(|i| {
            let u: f32 = rng.random();
            let pitch = (lo + (hi - lo) * (i as f32 + u) / n as f32).exp();
            let alpha = 0.8 + 0.42 * (scale_strata[i] as f32 + rng.random::<f32>()) / n as f32;
            SynthSpeakerSpec {
                name: speaker_name(i),
                formants_hz: [500.0 * alpha, 1500.0 * alpha, 2500.0 * alpha],
                bandwidths_hz: [
                    60.0 + 40.0 * rng.random::<f32>(),
                    90.0 + 40.0 * rng.random::<f32>(),
                    130.0 + 60.0 * rng.random::<f32>(),
                ],
                base_pitch_hz: pitch,
                vibrato_cents: rng.random_range(10.0..25.0),
                vibrato_rate_hz: rng.random_range(4.5..6.5),
                tilt: rng.random_range(0.3..0.9),
            }
        })
        .collect()
}

/// Random consonant-vowel syllables with durations in 10 ms frames.
pub fn random_phones<R: Rng>(kind: UtteranceKind, syllables: (usize, usize), rng: &mut R) -> Vec<PhoneEntry> {
    let n = rng.random_range(syllables.0..=syllables.1.max(syllables.0));
    let mut out = Vec::new();
    for _ in 0..n {
        if rng.random::<f32>() < 0.8 {
            let c = rng.random_range(VOWEL_COUNT..INVENTORY.len());
            out.push(PhoneEntry::new(c, rng.random_range(4..=8)));
        }
        let v = rng.random_range(0..VOWEL_COUNT);
        let dur = match kind {
            UtteranceKind::Speech => rng.random_range(8..=20),
            UtteranceKind::Singing => rng.random_range(18..=40),
        };
        out.push(PhoneEntry::new(v, dur));
    }
    out
}

pub fn midi_to_hz(note: f32) -> f32 {
    440.0 * 2f32.powf((note - 69.0) / 12.0)
}

pub fn hz_to_midi(f: f32) -> f32 {
    69.0 + 12.0 * (f / 440.0).log2()
}

struct Resonator {
    a: f32,
    b: f32,
    c: f32,
    y1: f32,
    y2: f32,
}

impl Resonator {
    fn new() -> Self {
        Resonator {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tune(&mut self, freq: f32, bw: f32, sr: f32) {
        let r = (-PI * bw / sr).exp();
        self.b = 2.0 * r * (TAU * freq / sr).cos();
        self.c = -r * r;
        self.a = 1.0 - self.b - self.c;
    }

    fn step(&mut self, x: f32) -> f32 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn envelope(n: usize, ramp: usize) -> impl Iterator<Item = f32> {
    let ramp = ramp.min(n / 2).max(1);
    (0..n).map(move |i| {
        let k = i.min(n - 1 - i);
        if k >= ramp {
            1.0
        } else {
            0.5 - 0.5 * (PI * k as f32 / ramp as f32).cos()
        }
    })
}

fn rms(x: &[f32]) -> f32 {
    (x.iter().map(|v| v * v).sum::<f32>() / x.len().max(1) as f32).sqrt()
}

/// Render one utterance at the synthesis sample rate. The output spans
/// exactly `Σ dur` analysis frames.
pub fn render<R: Rng>(
    spec: &SynthSpeakerSpec,
    phones: &[PhoneEntry],
    kind: UtteranceKind,
    rng: &mut R,
) -> Result<AudioBuffer> {
    let frame = FrameConfig::SYNTHESIS;
    spec.validate(frame.sample_rate)?;
    let total: usize = phones.iter().map(|p| p.dur as usize).sum();
    if total == 0 {
        return Err(Error::invalid("utterance has zero total duration"));
    }
    let sr = frame.sample_rate as f32;
    let len = frame.samples_for_frames(total);
    let offset = (frame.win - frame.hop) / 2;

    let mut bounds = Vec::with_capacity(phones.len());
    let mut cum = 0;
    for (i, p) in phones.iter().enumerate() {
        let start = if cum == 0 { 0 } else { cum * frame.hop + offset };
        cum += p.dur as usize;
        let end = if i + 1 == phones.len() {
            len
        } else {
            cum * frame.hop + offset
        };
        bounds.push((start, end.max(start)));
    }

    let mut voiced = vec![0.0f32; len];
    let mut noise = vec![0.0f32; len];
    let mut formants = [Resonator::new(), Resonator::new(), Resonator::new()];
    let mut band = Resonator::new();
    let mut phase = 0.0f32;
    let mut tilt_state = 0.0f32;
    let alpha = spec.formants_hz[0] / 500.0;
    for (p, &(start, end)) in phones.iter().zip(&bounds) {
        if end == start {
            continue;
        }
        let def = INVENTORY[p.id()];
        match def.kind {
            PhoneKind::Vowel { formant_ratio } => {
                for k in 0..3 {
                    let f = (spec.formants_hz[k] * formant_ratio[k]).min(0.45 * sr);
                    formants[k].tune(f, spec.bandwidths_hz[k], sr);
                }
                let note = match kind {
                    UtteranceKind::Singing => {
                        let base = hz_to_midi(spec.base_pitch_hz).round();
                        Some(midi_to_hz(base + rng.random_range(-4..=7) as f32))
                    }
                    UtteranceKind::Speech => None,
                };
                let vib_phase: f32 = rng.random_range(0.0..TAU);
                let gain = rng.random_range(0.7..1.0);
                for (n, env) in (start..end).zip(envelope(end - start, 120)) {
                    let t = n as f32 / sr;
                    let f0 = match note {
                        Some(f) => {
                            let cents = spec.vibrato_cents * (TAU * spec.vibrato_rate_hz * t + vib_phase).sin();
                            f * 2f32.powf(cents / 1200.0)
                        }
                        None => spec.base_pitch_hz * (1.1 - 0.2 * n as f32 / len as f32),
                    };
                    phase += f0 / sr;
                    let mut src = 0.0;
                    if phase >= 1.0 {
                        phase -= 1.0;
                        src = 1.0;
                    }
                    tilt_state = src + spec.tilt * tilt_state;
                    let mut y = tilt_state;
                    for r in &mut formants {
                        y = r.step(y);
                    }
                    voiced[n] = y * env * gain;
                }
            }
            PhoneKind::Consonant {
                center_hz,
                bandwidth_hz,
            } => {
                band.tune((center_hz * alpha.sqrt()).min(0.45 * sr), bandwidth_hz, sr);
                let gain = rng.random_range(0.7..1.0);
                for (n, env) in (start..end).zip(envelope(end - start, 48)) {
                    let w: f32 = StandardNormal.sample(rng);
                    noise[n] = band.step(w) * env * gain;
                }
            }
        }
    }
    let (vr, nr) = (rms(&voiced), rms(&noise));
    let mut out: Vec<f32> = voiced
        .iter()
        .zip(&noise)
        .map(|(v, c)| {
            let v = if vr > 0.0 { v / vr } else { 0.0 };
            let c = if nr > 0.0 { c / nr } else { 0.0 };
            v + 0.3 * c
        })
        .collect();
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    AudioBuffer::new(out, frame.sample_rate)
}

fn utterance_kind(j: usize, fraction: f32) -> UtteranceKind {
    if ((j + 1) as f32 * fraction).floor() > (j as f32 * fraction).floor() {
        UtteranceKind::Singing
    } else {
        UtteranceKind::Speech
    }
}

pub fn utterance_rng(seed: u64, id: &str) -> StageRng {
    substream(seed, &format!("synth/utt/{id}"))
}

/// Write `wav/<id>.wav`, `manifest.jsonl` and `speakers.json` under `out_dir`.
pub fn synth_corpus(opts: &SynthOptions, out_dir: &Path) -> Result<SynthCorpus> {
    if opts.n_speakers < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 speakers, got {}",
            opts.n_speakers
        )));
    }
    if opts.utts_per_speaker < 1 {
        return Err(Error::invalid("need at least 1 utterance per speaker"));
    }
    if !(0.0..=1.0).contains(&opts.singing_fraction) {
        return Err(Error::invalid(format!(
            "singing fraction {} outside [0, 1]",
            opts.singing_fraction
        )));
    }
    fs::create_dir_all(out_dir.join("wav"))?;
    let speakers = random_speakers(opts.n_speakers, opts.seed);
    let jobs: Vec<(usize, usize)> = (0..opts.n_speakers)
        .flat_map(|s| (0..opts.utts_per_speaker).map(move |j| (s, j)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(s, j)| {
            let spk = &speakers[s];
            let id = format!("{}_u{j:03}", spk.name);
            let kind = utterance_kind(j, opts.singing_fraction);
            let mut rng = utterance_rng(opts.seed, &id);
            let syl = match kind {
                UtteranceKind::Speech => opts.speech_syllables,
                UtteranceKind::Singing => opts.singing_syllables,
            };
            let phones = random_phones(kind, syl, &mut rng);
            let audio = render(spk, &phones, kind, &mut rng)?;
            let wav = PathBuf::from("wav").join(format!("{id}.wav"));
            write_wav(&out_dir.join(&wav), &audio)?;
            Ok(UtteranceRecord {
                id,
                wav,
                speaker: Some(spk.name.clone()),
                kind,
                phones,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    fs::write(out_dir.join("speakers.json"), serde_json::to_string_pretty(&speakers)?)?;
    Ok(SynthCorpus {
        manifest,
        records,
        speakers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{estimate_f0, F0Config};
    use rand::SeedableRng;

    fn speaker(pitch: f32) -> SynthSpeakerSpec {
        SynthSpeakerSpec {
            name: "t".into(),
            formants_hz: [520.0, 1480.0, 2550.0],
            bandwidths_hz: [80.0, 100.0, 150.0],
            base_pitch_hz: pitch,
            vibrato_cents: 20.0,
            vibrato_rate_hz: 5.5,
            tilt: 0.6,
        }
    }

    fn voiced_f0(audio: &AudioBuffer) -> Vec<f32> {
        estimate_f0(audio, &FrameConfig::SYNTHESIS, &F0Config::default())
            .unwrap()
            .into_iter()
            .filter(|f| *f > 0.0)
            .collect()
    }

    #[test]
    fn length_matches_duration_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let phones = random_phones(UtteranceKind::Speech, (3, 5), &mut rng);
        let audio = render(&speaker(150.0), &phones, UtteranceKind::Speech, &mut rng).unwrap();
        let total: usize = phones.iter().map(|p| p.dur as usize).sum();
        let frames = crate::dsp::frame_count(audio.len(), 960, 240).unwrap();
        assert_eq!(frames, total);
    }

    #[test]
    fn speech_mean_pitch_tracks_base() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let phones = random_phones(UtteranceKind::Speech, (8, 10), &mut rng);
        let audio = render(&speaker(120.0), &phones, UtteranceKind::Speech, &mut rng).unwrap();
        let f0 = voiced_f0(&audio);
        let mean = f0.iter().sum::<f32>() / f0.len() as f32;
        assert!((mean - 120.0).abs() < 15.0, "mean voiced f0 {mean}");
    }

    #[test]
    fn singing_lands_on_note_grid() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let phones = random_phones(UtteranceKind::Singing, (6, 8), &mut rng);
        let audio = render(&speaker(220.0), &phones, UtteranceKind::Singing, &mut rng).unwrap();
        let f0 = voiced_f0(&audio);
        let near = f0
            .iter()
            .filter(|f| {
                let m = hz_to_midi(**f);
                (m - m.round()).abs() * 100.0 <= 40.0
            })
            .count();
        assert!(near as f32 >= 0.8 * f0.len() as f32, "{near}/{}", f0.len());
    }

    #[test]
    fn corpus_is_deterministic_and_validated() {
        let opts = SynthOptions {
            n_speakers: 2,
            utts_per_speaker: 2,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ca = synth_corpus(&opts, a.path()).unwrap();
        synth_corpus(&opts, b.path()).unwrap();
        assert_eq!(ca.records.len(), 4);
        assert_eq!(
            ca.records.iter().filter(|r| r.kind == UtteranceKind::Singing).count(),
            2
        );
        for name in ["manifest.jsonl", "wav/spk00_u000.wav", "wav/spk01_u001.wav"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        let one = SynthOptions { n_speakers: 1, ..opts };
        assert!(synth_corpus(&one, a.path()).is_err());
    }

    #[test]
    fn generated_speakers_are_valid_and_spread() {
        let spk = random_speakers(20, 4);
        for s in &spk {
            s.validate(24_000).unwrap();
        }
        let mut pitches: Vec<f32> = spk.iter().map(|s| s.base_pitch_hz).collect();
        pitches.sort_by(f32::total_cmp);
        assert!(pitches[0] < 100.0 && pitches[19] > 280.0);
    }
}
