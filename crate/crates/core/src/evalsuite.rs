//! Proxy metrics for a trained checkpoint: a speaker probe on frozen text
//! encodings, attention diagonality, oracle-based voice cloning and PCA.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndgrad::{ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{hash64, oracle_mel, sample_units, CorpusError, CorpusSpec, Example, MelSpectrogram, ToyUnit};
use crate::parallel::parallel_map;
use crate::synthesizer::{encode_text, synthesize, ModelConfig, ModelError, Synthesis};
use crate::textfront::{Frontend, TextError};
use crate::trainer::{adam_step, AdamState};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("probe needs at least 2 speakers, found {0}")]
    TooFewSpeakers(usize),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            steps: 1000,
            lr: 1e-3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub held_out_accuracy: f64,
    pub chance_level: f64,
    /// Held-out tokens the accuracy is measured on.
    pub n_examples: usize,
    pub n_train_tokens: usize,
}

/// Per-token feature rows of one utterance and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRows {
    /// `tokens x dim`.
    pub rows: Tensor,
    pub label: usize,
}

fn stack(groups: &[&LabeledRows]) -> (Tensor, Vec<usize>) {
    let dim = groups[0].rows.shape()[1];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for g in groups {
        data.extend_from_slice(g.rows.data());
        labels.extend(std::iter::repeat(g.label).take(g.rows.shape()[0]));
    }
    let n = labels.len();
    (Tensor::new(vec![n, dim], data).expect("rows share a width"), labels)
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-a..a))
}

/// Trains a one-hidden-layer ReLU classifier on utterance-grouped rows and
/// reports accuracy on the utterances it did not see.
pub fn probe_features(groups: &[LabeledRows], n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if n_classes < 2 {
        return Err(EvalError::TooFewSpeakers(n_classes));
    }
    if groups.len() < 2 {
        return Err(EvalError::Input("probe needs at least 2 utterances".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.label >= n_classes) {
        return Err(EvalError::Input(format!("label {} outside {n_classes} classes", g.label)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(cfg.seed, 0x9806e, 0));
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((groups.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, groups.len() - 1);
    let train: Vec<&LabeledRows> = order[..n_train].iter().map(|&i| &groups[i]).collect();
    let test: Vec<&LabeledRows> = order[n_train..].iter().map(|&i| &groups[i]).collect();
    let (x_train, y_train) = stack(&train);
    let (x_test, y_test) = stack(&test);
    let dim = x_train.shape()[1];

    let mut params: ParamSet = [
        ("w1".to_string(), glorot(&mut rng, dim, cfg.hidden)),
        ("b1".to_string(), Tensor::zeros(&[1, cfg.hidden])),
        ("w2".to_string(), glorot(&mut rng, cfg.hidden, n_classes)),
        ("b2".to_string(), Tensor::zeros(&[1, n_classes])),
    ]
    .into_iter()
    .collect();
    let mut adam = AdamState::new(&params);

    let n = y_train.len();
    let mut pick = vec![0.0; n * n_classes];
    for (i, &y) in y_train.iter().enumerate() {
        pick[i * n_classes + y] = -1.0 / n as f64;
    }
    let pick = Tensor::new(vec![n, n_classes], pick).map_err(ModelError::from)?;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new().with_finite_checks(false);
        let bound = params.bind(&mut tape);
        let x = tape.constant(x_train.clone());
        let logits = mlp(&mut tape, &bound, x)?;
        let logp = tape.log_softmax(logits).map_err(ModelError::from)?;
        let p = tape.constant(pick.clone());
        let picked = tape.mul(logp, p).map_err(ModelError::from)?;
        let loss = tape.sum(picked).map_err(ModelError::from)?;
        let grads = tape.backward(loss).map_err(ModelError::from)?;
        adam_step(&mut params, &bound.grads(&grads), &mut adam, cfg.lr);
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(x_test);
    let logits = mlp(&mut tape, &bound, x)?;
    let correct = tape
        .value(logits)
        .data()
        .chunks(n_classes)
        .zip(&y_test)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(ProbeResult {
        held_out_accuracy: correct as f64 / y_test.len() as f64,
        chance_level: 1.0 / n_classes as f64,
        n_examples: y_test.len(),
        n_train_tokens: n,
    })
}

fn mlp(tape: &mut Tape, p: &ndgrad::Bound, x: ndgrad::Var) -> Result<ndgrad::Var> {
    let m = |e: ndgrad::NdError| EvalError::Model(e.into());
    let h = tape.matmul(x, p.var("w1").map_err(m)?).map_err(m)?;
    let h = tape.add(h, p.var("b1").map_err(m)?).map_err(m)?;
    let h = tape.relu(h).map_err(m)?;
    let o = tape.matmul(h, p.var("w2").map_err(m)?).map_err(m)?;
    tape.add(o, p.var("b2").map_err(m)?).map_err(m)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Probe on the frozen per-token encodings of `examples`, labelled by
/// speaker. No gradient reaches the encoder.
pub fn disentanglement_probe(cfg: &ModelConfig, params: &ParamSet, examples: &[Example], probe: &ProbeConfig) -> Result<ProbeResult> {
    let groups = parallel_map(examples, |e| {
        encode_text(cfg, params, &e.tokens).map(|rows| LabeledRows { rows, label: e.speaker })
    })
    .into_iter()
    .collect::<std::result::Result<Vec<_>, _>>()?;
    let speakers = examples.iter().map(|e| e.speaker + 1).max().unwrap_or(0);
    probe_features(&groups, speakers, probe)
}

/// Mass within `band` tokens of the straight diagonal, averaged over decoder
/// steps. A single decoder step counts all of its mass.
pub fn attention_diagonality(alignment: &Tensor, band: usize) -> f64 {
    let (td, te) = (alignment.shape()[0], alignment.shape()[1]);
    if td == 0 || te == 0 {
        return 0.0;
    }
    if td == 1 {
        return alignment.data().iter().sum();
    }
    let mut total = 0.0;
    for t in 0..td {
        let center = (t as f64 * (te - 1) as f64 / (td - 1) as f64).round() as usize;
        let lo = center.saturating_sub(band);
        let hi = (center + band).min(te - 1);
        total += alignment.row(t)[lo..=hi].iter().sum::<f64>();
    }
    total / td as f64
}

/// Linearly resamples a spectrogram along time to `frames` frames.
pub fn resample_time(mel: &MelSpectrogram, frames: usize) -> MelSpectrogram {
    let (src, nm) = (mel.frames(), mel.n_mels());
    let mut out = Vec::with_capacity(frames * nm);
    for i in 0..frames {
        let pos = if frames == 1 || src == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (frames - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let w = pos - lo as f64;
        let (a, b) = (mel.frame(lo), mel.frame(hi));
        out.extend(a.iter().zip(b).map(|(&x, &y)| ((1.0 - w) * x as f64 + w * y as f64) as f32));
    }
    MelSpectrogram::new(nm, out).expect("resampled frames are whole")
}

/// Mean squared difference after resampling `mel` to the length of `target`.
pub fn mel_distance(mel: &MelSpectrogram, target: &MelSpectrogram) -> f64 {
    let r = resample_time(mel, target.frames());
    let n = r.data().len();
    r.data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n as f64
}

/// Index of the nearest oracle and every distance.
pub fn nearest_oracle(mel: &MelSpectrogram, oracles: &[MelSpectrogram]) -> (usize, Vec<f64>) {
    let d: Vec<f64> = oracles.iter().map(|o| mel_distance(mel, o)).collect();
    let best = d
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b })
        .0;
    (best, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloningEntry {
    pub text: String,
    /// `None` when synthesis ran to the frame limit.
    pub nearest_speaker: Option<usize>,
    pub distances: Vec<f64>,
    pub hit_max_frames: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloningReport {
    pub target_speaker: usize,
    pub language: usize,
    pub entries: Vec<CloningEntry>,
    /// Over utterances that stopped before the frame limit.
    pub fraction_correct: f64,
    pub hit_max_frames: usize,
    pub mean_target_distance: f64,
    pub mean_best_other_distance: f64,
}

/// A text to synthesize together with its toy units.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyText {
    pub language: usize,
    pub units: Vec<ToyUnit>,
    pub text: String,
}

/// `count` random texts of `language`, drawn from a stream independent of
/// corpus generation.
pub fn fresh_texts(spec: &CorpusSpec, language: usize, count: usize, seed: u64) -> Result<Vec<ToyText>> {
    let lang = spec
        .language(language)
        .ok_or_else(|| EvalError::Input(format!("unknown language {language}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(seed, 0xc10e_0000 + language as u64, count as u64));
    (0..count)
        .map(|_| {
            let units = sample_units(&mut rng, lang);
            let text = lang.text(&units)?;
            Ok(ToyText { language, units, text })
        })
        .collect()
}

fn synthesize_text(cfg: &ModelConfig, params: &ParamSet, frontend: &Frontend, spec: &CorpusSpec, t: &ToyText, speaker: usize) -> Result<Synthesis> {
    let lang = spec.language(t.language).expect("text language exists");
    let seq = frontend.encode(&t.text, Some(&lang.phonemes(&t.units)), t.language)?;
    Ok(synthesize(cfg, params, &seq, speaker, t.language)?)
}

/// Synthesizes each text with `target_speaker` and finds the oracle speaker
/// whose rendering of the same units is nearest.
pub fn cloning_score(
    cfg: &ModelConfig,
    params: &ParamSet,
    frontend: &Frontend,
    spec: &CorpusSpec,
    texts: &[ToyText],
    target_speaker: usize,
) -> Result<CloningReport> {
    let language = texts.first().map_or(0, |t| t.language);
    let entries = parallel_map(texts, |t| -> Result<CloningEntry> {
        let syn = synthesize_text(cfg, params, frontend, spec, t, target_speaker)?;
        if syn.hit_max_frames {
            return Ok(CloningEntry {
                text: t.text.clone(),
                nearest_speaker: None,
                distances: Vec::new(),
                hit_max_frames: true,
            });
        }
        let lang = spec.language(t.language).expect("text language exists");
        let oracles = spec
            .speakers
            .iter()
            .map(|s| oracle_mel(&t.units, lang, s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (best, distances) = nearest_oracle(&syn.mel, &oracles);
        Ok(CloningEntry {
            text: t.text.clone(),
            nearest_speaker: Some(spec.speakers[best].speaker_id),
            distances,
            hit_max_frames: false,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let target_pos = spec
        .speakers
        .iter()
        .position(|s| s.speaker_id == target_speaker)
        .ok_or_else(|| EvalError::Input(format!("unknown speaker {target_speaker}")))?;
    let done: Vec<&CloningEntry> = entries.iter().filter(|e| !e.hit_max_frames).collect();
    let frac = |f: &dyn Fn(&CloningEntry) -> f64| {
        if done.is_empty() {
            0.0
        } else {
            done.iter().map(|e| f(e)).sum::<f64>() / done.len() as f64
        }
    };
    let fraction_correct = frac(&|e| (e.nearest_speaker == Some(target_speaker)) as u8 as f64);
    let mean_target_distance = frac(&|e| e.distances[target_pos]);
    let mean_best_other_distance = frac(&|e| {
        e.distances
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target_pos)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min)
    });
    Ok(CloningReport {
        target_speaker,
        language,
        hit_max_frames: entries.len() - done.len(),
        entries,
        fraction_correct,
        mean_target_distance,
        mean_best_other_distance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalityReport {
    pub band: usize,
    pub mean: f64,
    pub per_utterance: Vec<f64>,
    pub hit_max_frames: usize,
}

/// Diagonality of each text synthesized by the native speaker of its
/// language.
pub fn diagonality_report(
    cfg: &ModelConfig,
    params: &ParamSet,
    frontend: &Frontend,
    spec: &CorpusSpec,
    texts: &[(ToyText, usize)],
    band: usize,
) -> Result<(DiagonalityReport, Vec<Synthesis>)> {
    let syns = parallel_map(texts, |(t, spk)| synthesize_text(cfg, params, frontend, spec, t, *spk))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per_utterance: Vec<f64> = syns.iter().map(|s| attention_diagonality(&s.alignment, band)).collect();
    let mean = if per_utterance.is_empty() {
        0.0
    } else {
        per_utterance.iter().sum::<f64>() / per_utterance.len() as f64
    };
    let report = DiagonalityReport {
        band,
        mean,
        hit_max_frames: syns.iter().filter(|s| s.hit_max_frames).count(),
        per_utterance,
    };
    Ok((report, syns))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    /// `n x 2`.
    pub coords: Vec<[f64; 2]>,
    /// Variance along each component, non-increasing.
    pub explained_variance: [f64; 2],
    /// Unit principal directions; the first nonzero loading is positive.
    pub components: [Vec<f64>; 2],
}

/// Projection of mean-centred rows onto the two leading eigenvectors of
/// their covariance.
pub fn pca2(vectors: &[Vec<f64>]) -> Result<Pca2> {
    let n = vectors.len();
    if n < 2 {
        return Err(EvalError::Input(format!("pca2 needs at least 2 vectors, got {n}")));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(EvalError::Input("pca2 needs equal, nonzero widths".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut explained_variance = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol || scale == 0.0 {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        explained_variance[k] = lambda;
        components[k] = v;
    }
    let coords = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let proj = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [proj(&components[0]), proj(&components[1])]
        })
        .collect();
    Ok(Pca2 {
        coords,
        explained_variance,
        components,
    })
}

/// Rows of the learned speaker embedding table.
pub fn speaker_embeddings(params: &ParamSet) -> Result<Vec<Vec<f64>>> {
    let table = params
        .get("cond.speaker")
        .ok_or_else(|| EvalError::Input("checkpoint has no speaker table".into()))?;
    Ok((0..table.shape()[0]).map(|i| table.row(i).to_vec()).collect())
}

/// Time-averaged frame of a spectrogram.
pub fn mean_frame(mel: &MelSpectrogram) -> Vec<f64> {
    let t = mel.frames().max(1) as f64;
    let mut acc = vec![0.0; mel.n_mels()];
    for i in 0..mel.frames() {
        for (a, &v) in acc.iter_mut().zip(mel.frame(i)) {
            *a += v as f64;
        }
    }
    acc.iter().map(|a| a / t).collect()
}

/// Writes a binary (P5) greyscale image. `values` is row-major
/// `height x width`; the range maps linearly onto 0..=255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    fs::write(path, pgm_bytes(width, height, values)?).map_err(|e| EvalError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(EvalError::Input(format!("{} values for a {width}x{height} image", values.len())));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Spectrogram as an image `frames` wide and `n_mels` high, low bins at the
/// bottom.
pub fn mel_image(mel: &MelSpectrogram) -> (usize, usize, Vec<f64>) {
    let (w, h) = (mel.frames(), mel.n_mels());
    let mut v = Vec::with_capacity(w * h);
    for row in 0..h {
        let bin = h - 1 - row;
        v.extend((0..w).map(|t| mel.frame(t)[bin] as f64));
    }
    (w, h, v)
}

/// Alignment as an image with decoder steps across and tokens down.
pub fn alignment_image(alignment: &Tensor) -> (usize, usize, Vec<f64>) {
    let (td, te) = (alignment.shape()[0], alignment.shape()[1]);
    let mut v = Vec::with_capacity(td * te);
    for j in 0..te {
        v.extend((0..td).map(|t| alignment.row(t)[j]));
    }
    (td, te, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub band: usize,
    pub n_diagonality: usize,
    pub n_cloning: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            band: 2,
            n_diagonality: 50,
            n_cloning: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: ProbeResult,
    /// True when the probe reaches the informative regime (accuracy ≥ 0.90).
    pub probe_informative: bool,
    pub diagonality: Option<DiagonalityReport>,
    /// One report per speaker and non-native language.
    pub cloning: Vec<CloningReport>,
    pub speaker_pca: Option<Pca2>,
}

pub const PROBE_INFORMATIVE: f64 = 0.90;

/// Texts for the diagonality check, alternating over speakers, each in the
/// speaker's own language.
pub fn diagonality_texts(spec: &CorpusSpec, count: usize, seed: u64) -> Result<Vec<(ToyText, usize)>> {
    let ns = spec.speakers.len();
    let mut out = Vec::with_capacity(count);
    for (k, s) in spec.speakers.iter().enumerate() {
        let share = count / ns + usize::from(k < count % ns);
        let texts = fresh_texts(spec, s.native_language_id, share, hash64(seed, 0xd1a6, s.speaker_id as u64))?;
        out.extend(texts.into_iter().map(|t| (t, s.speaker_id)));
    }
    Ok(out)
}

/// Probe, diagonality, cloning and speaker PCA for one checkpoint. Metrics
/// that need oracles are skipped when `spec` is absent.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamSet,
    frontend: &Frontend,
    examples: &[Example],
    spec: Option<&CorpusSpec>,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let probe = disentanglement_probe(cfg, params, examples, &eval.probe)?;
    let mut diagonality = None;
    let mut cloning = Vec::new();
    if let Some(spec) = spec {
        let texts = diagonality_texts(spec, eval.n_diagonality, eval.seed)?;
        diagonality = Some(diagonality_report(cfg, params, frontend, spec, &texts, eval.band)?.0);
        for s in &spec.speakers {
            for lang in spec.languages.iter().filter(|l| l.language_id != s.native_language_id) {
                let texts = fresh_texts(spec, lang.language_id, eval.n_cloning, eval.seed)?;
                cloning.push(cloning_score(cfg, params, frontend, spec, &texts, s.speaker_id)?);
            }
        }
    }
    let emb = speaker_embeddings(params)?;
    let speaker_pca = if emb.len() >= 2 { Some(pca2(&emb)?) } else { None };
    Ok(EvalReport {
        probe_informative: probe.held_out_accuracy >= PROBE_INFORMATIVE,
        probe,
        diagonality,
        cloning,
        speaker_pca,
    })
}
