//! Glue between stages: labels, d-vectors and training items for a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{load_speaker, FeatureSet, UtteranceRecord};
use crate::error::{Error, Result};
use crate::model::{ModelInput, TrainItem};
use crate::speaker::{normalize, SpeakerEncoder};

/// Speaker names in first-appearance order and each record's class index.
pub fn speaker_classes(records: &[UtteranceRecord]) -> (Vec<String>, Vec<Option<usize>>) {
    let mut names: Vec<String> = Vec::new();
    let labels = records
        .iter()
        .map(|r| {
            r.speaker.as_ref().map(|s| match names.iter().position(|n| n == s) {
                Some(i) => i,
                None => {
                    names.push(s.clone());
                    names.len() - 1
                }
            })
        })
        .collect();
    (names, labels)
}

/// Utterance-level d-vector of every record from its cached STFT magnitudes.
pub fn utterance_dvectors(
    enc: &SpeakerEncoder,
    records: &[UtteranceRecord],
    cache_dir: &Path,
) -> Result<Vec<Vec<f32>>> {
    records
        .par_iter()
        .map(|r| {
            let mags = load_speaker(r, cache_dir)?;
            enc.embed_utterance(&mags)
                .map_err(|e| Error::invalid(format!("{}: {e}", r.id)))
        })
        .collect()
}

/// Per record, the normalised mean d-vector of its speaker's utterances.
/// Records without a speaker keep their own vector.
pub fn speaker_mean_dvectors(records: &[UtteranceRecord], dvectors: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
    if records.len() != dvectors.len() {
        return Err(Error::shape("one d-vector per record is required"));
    }
    let mut sums: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for (r, d) in records.iter().zip(dvectors) {
        if let Some(s) = &r.speaker {
            let acc = sums.entry(s.as_str()).or_insert_with(|| vec![0.0; d.len()]);
            acc.iter_mut().zip(d).for_each(|(a, v)| *a += v);
        }
    }
    let means: BTreeMap<&str, Vec<f32>> = sums
        .into_iter()
        .map(|(k, v)| normalize(v).map(|v| (k, v)))
        .collect::<Result<_>>()?;
    Ok(records
        .iter()
        .zip(dvectors)
        .map(|(r, d)| match &r.speaker {
            Some(s) => means[s.as_str()].clone(),
            None => d.clone(),
        })
        .collect())
}

pub fn model_input(rec: &UtteranceRecord, features: &FeatureSet, speaker: Vec<f32>) -> ModelInput {
    ModelInput {
        phones: rec.phone_ids(),
        durations: rec.durations(),
        f0: features.f0.clone(),
        rmse: features.rmse.clone(),
        speaker,
    }
}

pub fn train_items(
    records: &[UtteranceRecord],
    features: &[FeatureSet],
    speakers: &[Vec<f32>],
) -> Result<Vec<TrainItem>> {
    if records.len() != features.len() || records.len() != speakers.len() {
        return Err(Error::shape("records, features and speakers must align"));
    }
    Ok(records
        .iter()
        .zip(features)
        .zip(speakers)
        .map(|((r, f), s)| TrainItem {
            id: r.id.clone(),
            input: model_input(r, f, s.clone()),
            mel: f.mel.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PhoneEntry, UtteranceKind};

    fn rec(id: &str, speaker: Option<&str>) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            wav: format!("{id}.wav").into(),
            speaker: speaker.map(String::from),
            kind: UtteranceKind::Speech,
            phones: vec![PhoneEntry::new(0, 3)],
        }
    }

    #[test]
    fn classes_follow_first_appearance() {
        let recs = [
            rec("a", Some("x")),
            rec("b", None),
            rec("c", Some("y")),
            rec("d", Some("x")),
        ];
        let (names, labels) = speaker_classes(&recs);
        assert_eq!(names, vec!["x", "y"]);
        assert_eq!(labels, vec![Some(0), None, Some(1), Some(0)]);
    }

    #[test]
    fn speaker_means_are_shared_and_unit_norm() {
        let recs = [rec("a", Some("x")), rec("b", Some("x")), rec("c", None)];
        let d = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let m = speaker_mean_dvectors(&recs, &d).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((m[0][0] - h).abs() < 1e-6 && (m[0][1] - h).abs() < 1e-6);
        assert_eq!(m[0], m[1]);
        assert_eq!(m[2], d[2]);
    }
}
