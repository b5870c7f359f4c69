//! Synthetic multilingual corpus, mel files, featurization and batching.

mod featurize;
mod manifest;
mod melf;
mod toy;

use std::io;
use std::path::Path;

pub use featurize::{featurize_wav, filter_edges_hz, filter_weight, hz_to_mel, mel_to_hz, Featurizer, HOP, SAMPLE_RATE, WINDOW};
pub use manifest::{
    batches, gen_toy_corpus, load_manifest, pad_batch, parse_manifest, Batch, Example, GeneratedCorpus, Manifest,
    UtteranceRecord, HELDOUT_FILE, MANIFEST_FILE, MEL_DIR, SPEC_FILE, TRAIN_FILE,
};
pub use melf::{MelSpectrogram, LOG_FLOOR, N_MELS};
pub use toy::{
    generate_utterance, hash64, heldout_count, oracle_mel, oracle_mel_symbols, sample_units, template_value, CorpusSpec,
    SpeakerSpec, TokenForm, ToyLanguageSpec, ToyToken, ToyUnit, ToyUtterance, DEFAULT_TONE_SHIFT, MAX_TOKENS,
    MIN_TOKENS,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("empty batch")]
    EmptyBatch,
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
