//! Manifests, feature caches, batching and the synthetic corpus.

mod batch;
mod features;
mod manifest;
pub mod phones;
pub mod synth;

pub use batch::{make_batches, pad_frames, Padded};
pub use features::{
    cache_path, check_durations, extract_all, extract_record, load_speaker, load_synthesis, Branch, ExtractStatus,
    ExtractSummary, FeatureExtractor, FeatureSet,
};
pub use manifest::{parse_manifest, parse_manifest_str, write_manifest, PhoneEntry, UtteranceKind, UtteranceRecord};
pub use synth::{synth_corpus, SynthCorpus, SynthOptions, SynthSpeakerSpec};
