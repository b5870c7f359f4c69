//! Manifests, corpus generation on disk, and batch padding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::melf::MelSpectrogram;
use super::toy::{generate_utterance, heldout_count, CorpusSpec, ToyUtterance};
use super::CorpusError;
use crate::parallel::parallel_map;
use crate::textfront::{PhonemeString, RepresentationKind, TokenSequence, BYTE_PAD, PAD};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const SPEC_FILE: &str = "corpus_spec.json";
pub const MEL_DIR: &str = "mels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub text: String,
    pub phonemes: Option<PhonemeString>,
    pub speaker: usize,
    pub language: usize,
    /// Relative paths resolve against the manifest's directory.
    pub mel_path: String,
}

impl UtteranceRecord {
    pub fn resolve_mel(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.mel_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// Records of a manifest plus the directory their relative paths hang off.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn load_mel(&self, record: &UtteranceRecord) -> Result<MelSpectrogram, CorpusError> {
        MelSpectrogram::load(record.resolve_mel(&self.base_dir))
    }

    /// Corpus spec stored next to the manifest by [`gen_toy_corpus`], if any.
    pub fn corpus_spec(&self) -> Result<Option<CorpusSpec>, CorpusError> {
        let path = self.base_dir.join(SPEC_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CorpusError::Invalid(format!("{}: {e}", path.display())))
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<UtteranceRecord>, CorpusError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| CorpusError::Manifest {
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let records = parse_manifest(&text).map_err(|e| match e {
        CorpusError::Manifest { line, msg } => CorpusError::Manifest {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })?;
    Ok(Manifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        records,
    })
}

fn write_jsonl(path: &Path, records: &[&UtteranceRecord]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CorpusError::io(path, e))
}

/// What [`gen_toy_corpus`] wrote.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub out_dir: PathBuf,
    pub utterances: Vec<ToyUtterance>,
    pub records: Vec<UtteranceRecord>,
    /// Parallel to `records`.
    pub heldout: Vec<bool>,
}

/// Writes `mels/`, `manifest.jsonl`, `train.jsonl`, `heldout.jsonl` and a copy
/// of the spec to `out_dir`. The last tenth of each speaker's indices is held
/// out.
pub fn gen_toy_corpus(global_seed: u64, spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus, CorpusError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let mel_dir = out_dir.join(MEL_DIR);
    fs::create_dir_all(&mel_dir).map_err(|e| CorpusError::io(&mel_dir, e))?;

    let jobs: Vec<(usize, usize)> = spec
        .speakers
        .iter()
        .enumerate()
        .flat_map(|(s, _)| (0..spec.n_per_speaker).map(move |i| (s, i)))
        .collect();
    let held = heldout_count(spec.n_per_speaker);
    let results = parallel_map(&jobs, |&(s, i)| -> Result<(ToyUtterance, UtteranceRecord), CorpusError> {
        let spk = &spec.speakers[s];
        let utt = generate_utterance(spec, spk, i, global_seed)?;
        let rel = format!("{MEL_DIR}/s{:03}_{:05}.melf", spk.speaker_id, i);
        utt.mel.save(out_dir.join(&rel))?;
        let rec = UtteranceRecord {
            text: utt.text.clone(),
            phonemes: Some(utt.phonemes.clone()),
            speaker: utt.speaker_id,
            language: utt.language_id,
            mel_path: rel,
        };
        Ok((utt, rec))
    });
    let mut utterances = Vec::with_capacity(jobs.len());
    let mut records = Vec::with_capacity(jobs.len());
    let mut heldout = Vec::with_capacity(jobs.len());
    for (r, &(_, i)) in results.into_iter().zip(&jobs) {
        let (u, rec) = r?;
        utterances.push(u);
        records.push(rec);
        heldout.push(i >= spec.n_per_speaker - held);
    }

    let all: Vec<&UtteranceRecord> = records.iter().collect();
    let train: Vec<&UtteranceRecord> = records.iter().zip(&heldout).filter(|(_, h)| !**h).map(|(r, _)| r).collect();
    let test: Vec<&UtteranceRecord> = records.iter().zip(&heldout).filter(|(_, h)| **h).map(|(r, _)| r).collect();
    write_jsonl(&out_dir.join(MANIFEST_FILE), &all)?;
    write_jsonl(&out_dir.join(TRAIN_FILE), &train)?;
    write_jsonl(&out_dir.join(HELDOUT_FILE), &test)?;
    let spec_path = out_dir.join(SPEC_FILE);
    let spec_json = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&spec_path, spec_json + "\n").map_err(|e| CorpusError::io(&spec_path, e))?;

    Ok(GeneratedCorpus {
        out_dir: out_dir.to_path_buf(),
        utterances,
        records,
        heldout,
    })
}

/// One encoded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub mel: MelSpectrogram,
    pub speaker: usize,
    pub language: usize,
}

/// A padded batch. Token arrays are `batch x max_tokens`, mel arrays are
/// `batch x max_frames x n_mels`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_tokens: usize,
    pub max_frames: usize,
    pub n_mels: usize,
    pub ids: Vec<usize>,
    pub tone_ids: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub token_lens: Vec<usize>,
    pub mels: Vec<f64>,
    pub frame_mask: Vec<bool>,
    pub frame_lens: Vec<usize>,
    /// 1 at each example's final true frame, 0 elsewhere (padding included).
    pub stop_labels: Vec<f64>,
    pub speakers: Vec<usize>,
    pub languages: Vec<usize>,
}

/// Pads examples to the longest token sequence and mel in the group.
pub fn pad_batch(examples: &[Example]) -> Result<Batch, CorpusError> {
    let first = examples.first().ok_or(CorpusError::EmptyBatch)?;
    let kind = first.tokens.kind;
    let n_mels = first.mel.n_mels();
    if let Some(e) = examples.iter().find(|e| e.tokens.kind != kind) {
        return Err(CorpusError::Invalid(format!(
            "batch mixes {kind} and {} token sequences",
            e.tokens.kind
        )));
    }
    if examples.iter().any(|e| e.mel.n_mels() != n_mels) {
        return Err(CorpusError::Invalid("batch mixes mel sizes".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.tokens.is_empty() || e.tokens.tone_ids.len() != e.tokens.ids.len()) {
        return Err(CorpusError::Invalid(format!(
            "token sequence with {} ids and {} tone ids",
            e.tokens.ids.len(),
            e.tokens.tone_ids.len()
        )));
    }
    let pad = if kind == RepresentationKind::Byte { BYTE_PAD } else { PAD };
    let size = examples.len();
    let max_tokens = examples.iter().map(|e| e.tokens.len()).max().unwrap();
    let max_frames = examples.iter().map(|e| e.mel.frames()).max().unwrap();

    let mut b = Batch {
        size,
        max_tokens,
        max_frames,
        n_mels,
        ids: vec![pad; size * max_tokens],
        tone_ids: vec![0; size * max_tokens],
        token_mask: vec![false; size * max_tokens],
        token_lens: Vec::with_capacity(size),
        mels: vec![0.0; size * max_frames * n_mels],
        frame_mask: vec![false; size * max_frames],
        frame_lens: Vec::with_capacity(size),
        stop_labels: vec![0.0; size * max_frames],
        speakers: examples.iter().map(|e| e.speaker).collect(),
        languages: examples.iter().map(|e| e.language).collect(),
    };
    for (i, e) in examples.iter().enumerate() {
        let n = e.tokens.len();
        let row = i * max_tokens;
        b.ids[row..row + n].copy_from_slice(&e.tokens.ids);
        b.tone_ids[row..row + n].copy_from_slice(&e.tokens.tone_ids);
        b.token_mask[row..row + n].iter_mut().for_each(|m| *m = true);
        b.token_lens.push(n);

        let t = e.mel.frames();
        let start = i * max_frames * n_mels;
        for (dst, &src) in b.mels[start..start + t * n_mels].iter_mut().zip(e.mel.data()) {
            *dst = f64::from(src);
        }
        b.frame_mask[i * max_frames..i * max_frames + t].iter_mut().for_each(|m| *m = true);
        b.stop_labels[i * max_frames + t - 1] = 1.0;
        b.frame_lens.push(t);
    }
    Ok(b)
}

/// Consecutive groups of `batch_size` examples, the last one possibly short.
pub fn batches(examples: &[Example], batch_size: usize) -> Result<Vec<Batch>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::Invalid("batch size 0".into()));
    }
    examples.chunks(batch_size).map(pad_batch).collect()
}
