use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use log::warn;
use rayon::prelude::*;

use super::manifest::UtteranceRecord;
use crate::dsp::cache::{self, FeatureKind};
use crate::dsp::{
    energy_vad, estimate_f0, frame_signal, read_wav, resample, rmse, stft_magnitude, AudioBuffer, F0Config,
    FrameConfig, FrameMatrix, MelConfig, MelFilterbank,
};
use crate::error::{Error, Result, StageExt};

/// Frame-aligned conditioning features for the acoustic model.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub mel: FrameMatrix,
    pub f0: Vec<f32>,
    pub rmse: Vec<f32>,
}

impl FeatureSet {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Synthesis,
    Speaker,
    Both,
}

impl Branch {
    fn kinds(self) -> &'static [FeatureKind] {
        match self {
            Branch::Synthesis => &[FeatureKind::Mel, FeatureKind::F0, FeatureKind::Rmse],
            Branch::Speaker => &[FeatureKind::Stft],
            Branch::Both => &FeatureKind::ALL,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub frame: FrameConfig,
    pub speaker_frame: FrameConfig,
    pub f0: F0Config,
    pub vad_db: f32,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(mel: MelConfig, f0: F0Config, vad_db: f32) -> Result<Self> {
        let frame = FrameConfig::SYNTHESIS;
        Ok(FeatureExtractor {
            frame,
            speaker_frame: FrameConfig::SPEAKER,
            f0,
            vad_db,
            filterbank: MelFilterbank::new(mel, frame)?,
        })
    }

    pub fn mel_config(&self) -> MelConfig {
        self.filterbank.mel
    }

    /// Mel, f0 and RMSE on identical 24 kHz frames.
    pub fn synthesis(&self, audio: &AudioBuffer) -> Result<FeatureSet> {
        let audio = resample(audio, self.frame.sample_rate)?;
        let spec = stft_magnitude(&audio, &self.frame)?;
        let mel = crate::dsp::mel::mel_with_filterbank(&spec, &self.filterbank)?.frames;
        let f0 = estimate_f0(&audio, &self.frame, &self.f0)?;
        let rmse = rmse(&frame_signal(&audio, &self.frame)?)?;
        debug_assert!(f0.len() == mel.rows() && rmse.len() == mel.rows());
        Ok(FeatureSet { mel, f0, rmse })
    }

    /// 257-bin 16 kHz STFT magnitudes of the frames that pass the energy VAD.
    pub fn speaker(&self, audio: &AudioBuffer) -> Result<FrameMatrix> {
        let audio = resample(audio, self.speaker_frame.sample_rate)?;
        let spec = stft_magnitude(&audio, &self.speaker_frame)?;
        let keep = energy_vad(&audio, &self.speaker_frame, self.vad_db)?;
        let kept = spec.frames.select_rows(&keep);
        if kept.rows() == 0 {
            return Err(Error::invalid("no frames pass voice activity detection"));
        }
        Ok(kept)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(MelConfig::default(), F0Config::default(), 40.0).expect("default analysis config is valid")
    }
}

pub fn cache_path(cache_dir: &Path, id: &str, kind: FeatureKind) -> PathBuf {
    cache_dir.join(format!("{id}.{}.dscf", kind.name()))
}

fn modified(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

fn up_to_date(wav: &Path, cache_dir: &Path, id: &str, branch: Branch) -> bool {
    let Some(src) = modified(wav) else { return false };
    branch
        .kinds()
        .iter()
        .all(|k| modified(&cache_path(cache_dir, id, *k)).is_some_and(|t| t >= src))
}

fn save_atomic(path: &Path, kind: FeatureKind, m: &FrameMatrix) -> Result<()> {
    let tmp = path.with_extension("dscf.part");
    cache::save(&tmp, kind, m)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn column(v: &[f32]) -> FrameMatrix {
    FrameMatrix::new(v.len(), 1, v.to_vec()).expect("column shape")
}

pub fn check_durations(rec: &UtteranceRecord, frames: usize) -> Result<()> {
    let total = rec.total_frames();
    if total != frames {
        return Err(Error::invalid(format!(
            "{}: phone durations sum to {total} frames but the audio has {frames}",
            rec.id
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractStatus {
    Extracted,
    UpToDate,
}

pub fn extract_record(
    ex: &FeatureExtractor,
    rec: &UtteranceRecord,
    manifest_dir: &Path,
    cache_dir: &Path,
    branch: Branch,
) -> Result<ExtractStatus> {
    let wav = rec.wav_path(manifest_dir);
    if up_to_date(&wav, cache_dir, &rec.id, branch) {
        return Ok(ExtractStatus::UpToDate);
    }
    let audio = read_wav(&wav).stage("read")?;
    if matches!(branch, Branch::Synthesis | Branch::Both) {
        let f = ex.synthesis(&audio).stage("synthesis features")?;
        check_durations(rec, f.frames())?;
        save_atomic(
            &cache_path(cache_dir, &rec.id, FeatureKind::Mel),
            FeatureKind::Mel,
            &f.mel,
        )?;
        save_atomic(
            &cache_path(cache_dir, &rec.id, FeatureKind::F0),
            FeatureKind::F0,
            &column(&f.f0),
        )?;
        save_atomic(
            &cache_path(cache_dir, &rec.id, FeatureKind::Rmse),
            FeatureKind::Rmse,
            &column(&f.rmse),
        )?;
    }
    if matches!(branch, Branch::Speaker | Branch::Both) {
        let s = ex.speaker(&audio).stage("speaker features")?;
        save_atomic(
            &cache_path(cache_dir, &rec.id, FeatureKind::Stft),
            FeatureKind::Stft,
            &s,
        )?;
    }
    Ok(ExtractStatus::Extracted)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractSummary {
    pub extracted: usize,
    pub up_to_date: usize,
    /// `(record id, error message)` for every record that failed.
    pub failed: Vec<(String, String)>,
}

/// Extract every record on a pool of `workers` threads. Per-record failures
/// are collected rather than aborting the run.
pub fn extract_all(
    ex: &FeatureExtractor,
    records: &[UtteranceRecord],
    manifest_dir: &Path,
    cache_dir: &Path,
    branch: Branch,
    workers: usize,
) -> Result<ExtractSummary> {
    fs::create_dir_all(cache_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        records
            .par_iter()
            .map(|r| (r.id.clone(), extract_record(ex, r, manifest_dir, cache_dir, branch)))
            .collect()
    });
    let mut summary = ExtractSummary::default();
    for (id, res) in results {
        match res {
            Ok(ExtractStatus::Extracted) => summary.extracted += 1,
            Ok(ExtractStatus::UpToDate) => summary.up_to_date += 1,
            Err(e) => {
                warn!("{id}: {e}");
                summary.failed.push((id, e.to_string()));
            }
        }
    }
    Ok(summary)
}

pub fn load_synthesis(rec: &UtteranceRecord, cache_dir: &Path) -> Result<FeatureSet> {
    let mel = cache::load(&cache_path(cache_dir, &rec.id, FeatureKind::Mel), FeatureKind::Mel)?;
    let f0 = cache::load(&cache_path(cache_dir, &rec.id, FeatureKind::F0), FeatureKind::F0)?.into_data();
    let rmse = cache::load(&cache_path(cache_dir, &rec.id, FeatureKind::Rmse), FeatureKind::Rmse)?.into_data();
    if f0.len() != mel.rows() || rmse.len() != mel.rows() {
        return Err(Error::invalid(format!("{}: cached feature lengths disagree", rec.id)));
    }
    check_durations(rec, mel.rows())?;
    Ok(FeatureSet { mel, f0, rmse })
}

pub fn load_speaker(rec: &UtteranceRecord, cache_dir: &Path) -> Result<FrameMatrix> {
    cache::load(&cache_path(cache_dir, &rec.id, FeatureKind::Stft), FeatureKind::Stft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synth_corpus, SynthOptions};

    #[test]
    fn extraction_is_consistent_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            n_speakers: 2,
            utts_per_speaker: 2,
            ..Default::default()
        };
        let corpus = synth_corpus(&opts, dir.path()).unwrap();
        let cache = dir.path().join("cache");
        let ex = FeatureExtractor::default();
        let s = extract_all(&ex, &corpus.records, dir.path(), &cache, Branch::Both, 2).unwrap();
        assert_eq!((s.extracted, s.up_to_date, s.failed.len()), (4, 0, 0));
        let again = extract_all(&ex, &corpus.records, dir.path(), &cache, Branch::Both, 2).unwrap();
        assert_eq!((again.extracted, again.up_to_date), (0, 4));

        for r in &corpus.records {
            let f = load_synthesis(r, &cache).unwrap();
            assert_eq!(f.mel.cols(), 80);
            assert_eq!(f.frames(), r.total_frames());
            assert_eq!(load_speaker(r, &cache).unwrap().cols(), 257);
        }
    }

    #[test]
    fn duration_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            n_speakers: 2,
            utts_per_speaker: 1,
            ..Default::default()
        };
        let mut corpus = synth_corpus(&opts, dir.path()).unwrap();
        corpus.records[0].phones[0].dur += 1;
        let ex = FeatureExtractor::default();
        let s = extract_all(
            &ex,
            &corpus.records,
            dir.path(),
            &dir.path().join("c"),
            Branch::Synthesis,
            1,
        )
        .unwrap();
        assert_eq!(s.extracted, 1);
        assert_eq!(s.failed.len(), 1);
        assert!(s.failed[0].1.contains("durations"));
    }
}
