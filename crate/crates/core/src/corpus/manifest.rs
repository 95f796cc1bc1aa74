use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::phones::{phone, phone_id};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtteranceKind {
    Speech,
    Singing,
}

impl fmt::Display for UtteranceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UtteranceKind::Speech => "speech",
            UtteranceKind::Singing => "singing",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneEntry {
    pub sym: String,
    pub vowel: bool,
    /// Duration in 10 ms synthesis frames.
    pub dur: u32,
}

impl PhoneEntry {
    pub fn new(id: usize, dur: u32) -> Self {
        let p = phone(id).expect("phone id in inventory");
        PhoneEntry {
            sym: p.sym.to_string(),
            vowel: p.is_vowel(),
            dur,
        }
    }

    pub fn id(&self) -> usize {
        phone_id(&self.sym).expect("validated at parse time")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub wav: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub kind: UtteranceKind,
    pub phones: Vec<PhoneEntry>,
}

impl UtteranceRecord {
    pub fn total_frames(&self) -> usize {
        self.phones.iter().map(|p| p.dur as usize).sum()
    }

    pub fn phone_ids(&self) -> Vec<usize> {
        self.phones.iter().map(PhoneEntry::id).collect()
    }

    pub fn durations(&self) -> Vec<usize> {
        self.phones.iter().map(|p| p.dur as usize).collect()
    }

    /// Per-frame flag marking frames inside vowel phones.
    pub fn vowel_mask(&self) -> Vec<bool> {
        self.phones
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.vowel, p.dur as usize))
            .collect()
    }

    pub fn wav_path(&self, manifest_dir: &Path) -> PathBuf {
        if self.wav.is_absolute() {
            self.wav.clone()
        } else {
            manifest_dir.join(&self.wav)
        }
    }
}

// Durations are read signed so a negative value gets a field-specific error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhone {
    sym: String,
    vowel: bool,
    dur: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    wav: PathBuf,
    #[serde(default)]
    speaker: Option<String>,
    kind: UtteranceKind,
    phones: Vec<RawPhone>,
}

fn validate(raw: RawRecord) -> std::result::Result<UtteranceRecord, String> {
    if raw.id.is_empty() {
        return Err("field `id` is empty".into());
    }
    let mut phones = Vec::with_capacity(raw.phones.len());
    for (i, p) in raw.phones.into_iter().enumerate() {
        let def = phone_id(&p.sym)
            .and_then(phone)
            .ok_or_else(|| format!("phones[{i}]: unknown phone symbol `{}`", p.sym))?;
        if p.vowel != def.is_vowel() {
            return Err(format!(
                "phones[{i}]: field `vowel` is {} but `{}` is {}",
                p.vowel,
                p.sym,
                if def.is_vowel() { "a vowel" } else { "a consonant" }
            ));
        }
        if p.dur < 0 {
            return Err(format!("phones[{i}]: field `dur` is negative ({})", p.dur));
        }
        let dur = u32::try_from(p.dur).map_err(|_| format!("phones[{i}]: field `dur` is too large"))?;
        phones.push(PhoneEntry {
            sym: p.sym,
            vowel: p.vowel,
            dur,
        });
    }
    Ok(UtteranceRecord {
        id: raw.id,
        wav: raw.wav,
        speaker: raw.speaker,
        kind: raw.kind,
        phones,
    })
}

pub fn parse_manifest_str(text: &str, path: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let rec = validate(raw).map_err(err)?;
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id `{}`", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    parse_manifest_str(&fs::read_to_string(path)?, path)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
