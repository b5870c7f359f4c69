//! Loss composition, Adam, learning-rate schedule, checkpoints and the
//! training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndgrad::{nten, GradMap, ParamSet, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{hash64, pad_batch, Batch, CorpusError, Example, Manifest};
use crate::synthesizer::{
    check_params, init_params, save_model, ClassifierInput, ForwardOutputs, Latent, Model, ModelConfig, ModelError,
};
use crate::textfront::{build_grapheme_vocab, build_phoneme_vocab, Frontend, Lexicon, RepresentationKind, TextError, Vocabulary};

pub const OPTIMIZER_FILE: &str = "optimizer.nten";
pub const STATE_FILE: &str = "train_state.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_mel,loss_stop,loss_kl,loss_spk";
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss term {term} is not finite at step {step}")]
    NonFinite { term: &'static str, step: u64 },
    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {last_checkpoint}")]
    Diverged { step: u64, loss: f64, last_checkpoint: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn file_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_start: f64,
    pub decay_halflife: f64,
    pub grl_lambda: f64,
    pub w_syn: f64,
    pub w_spk: f64,
    pub kl_weight: f64,
    pub kl_warmup_steps: u64,
    pub grl_clip: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub adversarial_enabled: bool,
    pub use_residual_encoder: bool,
    pub log_interval: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            base_lr: 1e-3,
            decay_start: 50_000.0,
            decay_halflife: 12_500.0,
            grl_lambda: 1.0,
            w_syn: 1.0,
            w_spk: 0.02,
            kl_weight: 1.0,
            kl_warmup_steps: 10_000,
            grl_clip: 0.5,
            total_steps: 100_000,
            seed: 0,
            adversarial_enabled: true,
            use_residual_encoder: true,
            log_interval: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale variant: batch 16, decay starting halfway through and
    /// halving every eighth of the run, KL warmup over the first tenth.
    pub fn desk(total_steps: u64) -> Self {
        Self {
            batch_size: 16,
            decay_start: 0.5 * total_steps as f64,
            decay_halflife: (0.125 * total_steps as f64).max(1.0),
            kl_warmup_steps: total_steps / 10,
            total_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(self.decay_start >= 0.0 && self.decay_halflife > 0.0) {
            return bad("decay parameters must be positive");
        }
        for (name, w) in [("grl_lambda", self.grl_lambda), ("w_syn", self.w_syn), ("w_spk", self.w_spk), ("kl_weight", self.kl_weight)] {
            if !(w >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.grl_clip > 0.0) {
            return bad("grl_clip must be positive");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive");
        }
        Ok(())
    }

    /// `base_lr · 0.5^(max(0, step − decay_start) / decay_halflife)`.
    pub fn lr(&self, step: u64) -> f64 {
        lr_schedule(self.base_lr, self.decay_start, self.decay_halflife, step)
    }

    /// KL weight ramping linearly from 0 to `kl_weight` over the warmup.
    pub fn beta(&self, step: u64) -> f64 {
        if self.kl_warmup_steps == 0 {
            self.kl_weight
        } else {
            self.kl_weight * (step as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }

    pub fn classifier_input(&self) -> ClassifierInput {
        if self.adversarial_enabled {
            ClassifierInput::Reversed {
                lambda: self.grl_lambda,
                clip: self.grl_clip,
            }
        } else {
            ClassifierInput::Detached
        }
    }
}

pub fn lr_schedule(base_lr: f64, decay_start: f64, halflife: f64, step: u64) -> f64 {
    let past = (step as f64 - decay_start).max(0.0);
    base_lr * 0.5f64.powf(past / halflife)
}

/// `½ Σ (μ² + e^logvar − 1 − logvar)` for one posterior.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mel: f64,
    pub stop: f64,
    pub kl: f64,
    pub spk: f64,
}

/// Handles of the loss terms on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mel: Var,
    pub stop: Var,
    pub kl: Option<Var>,
    pub spk: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        LossBreakdown {
            total: v(self.total),
            mel: v(self.mel),
            stop: v(self.stop),
            kl: self.kl.map_or(0.0, v),
            spk: v(self.spk),
        }
    }
}

fn weights(shape: Vec<usize>, mask: &[bool], norm: f64) -> Result<Tensor> {
    Ok(Tensor::new(shape, mask.iter().map(|&m| if m { 1.0 / norm } else { 0.0 }).collect()).map_err(ModelError::from)?)
}

/// `w_syn·(MSE + BCE) + β·KL + w_spk·CE_spk`.
///
/// MSE averages over true frames and mel bins, BCE over true frames, KL over
/// the batch, and CE over real tokens.
pub fn compose_loss(tape: &mut Tape, out: &ForwardOutputs, batch: &Batch, cfg: &TrainConfig, step: u64) -> Result<LossVars> {
    let (b, td, nm) = (batch.size, batch.max_frames, batch.n_mels);
    let m = |e: ndgrad::NdError| TrainError::Model(e.into());
    let n_frames = batch.frame_mask.iter().filter(|&&x| x).count() as f64;

    let targets = tape.constant(Tensor::new(vec![b, td, nm], batch.mels.clone()).map_err(m)?);
    let diff = tape.sub(out.frames, targets).map_err(m)?;
    let sq = tape.mul(diff, diff).map_err(m)?;
    let w = tape.constant(weights(vec![b, td, 1], &batch.frame_mask, n_frames * nm as f64)?);
    let wsq = tape.mul(sq, w).map_err(m)?;
    let mel = tape.sum(wsq).map_err(m)?;

    let bce = tape.bce_with_logits(out.stop_logits, &batch.stop_labels).map_err(m)?;
    let w = tape.constant(weights(vec![b, td], &batch.frame_mask, n_frames)?);
    let wb = tape.mul(bce, w).map_err(m)?;
    let stop = tape.sum(wb).map_err(m)?;

    let kl = match out.posterior {
        Some((mu, logvar)) => {
            let mu2 = tape.mul(mu, mu).map_err(m)?;
            let e = tape.exp(logvar).map_err(m)?;
            let s = tape.add(mu2, e).map_err(m)?;
            let s = tape.sub(s, logvar).map_err(m)?;
            let total = tape.sum(s).map_err(m)?;
            let scaled = tape.scale(total, 0.5 / b as f64).map_err(m)?;
            let dims = tape.shape(mu)[1] as f64;
            let offset = tape.constant(Tensor::scalar(-0.5 * dims));
            Some(tape.add(scaled, offset).map_err(m)?)
        }
        None => None,
    };

    let logp = tape.log_softmax(out.speaker_logits).map_err(m)?;
    let s = tape.shape(out.speaker_logits)[1];
    let n_tokens = batch.token_mask.iter().filter(|&&x| x).count() as f64;
    let mut pick = vec![0.0; batch.token_mask.len() * s];
    for (k, &real) in batch.token_mask.iter().enumerate() {
        if real {
            let spk = batch.speakers[k / batch.max_tokens];
            pick[k * s + spk] = -1.0 / n_tokens;
        }
    }
    let pick = tape.constant(Tensor::new(vec![batch.token_mask.len(), s], pick).map_err(m)?);
    let picked = tape.mul(logp, pick).map_err(m)?;
    let spk = tape.sum(picked).map_err(m)?;

    let syn = tape.add(mel, stop).map_err(m)?;
    let mut total = tape.scale(syn, cfg.w_syn).map_err(m)?;
    if let Some(kl) = kl {
        let k = tape.scale(kl, cfg.beta(step)).map_err(m)?;
        total = tape.add(total, k).map_err(m)?;
    }
    let c = tape.scale(spk, cfg.w_spk).map_err(m)?;
    total = tape.add(total, c).map_err(m)?;

    let vars = LossVars { total, mel, stop, kl, spk };
    let vals = vars.values(tape);
    for (term, v) in [("mel", vals.mel), ("stop", vals.stop), ("kl", vals.kl), ("spk", vals.spk), ("total", vals.total)] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { term, step });
        }
    }
    Ok(vars)
}

/// First and second moments of Adam for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn to_params(&self) -> ParamSet {
        self.m
            .iter()
            .map(|(k, t)| (format!("m.{k}"), t.clone()))
            .chain(self.v.iter().map(|(k, t)| (format!("v.{k}"), t.clone())))
            .collect()
    }

    pub fn from_params(p: &ParamSet, step: u64) -> Self {
        let part = |prefix: &str| {
            p.iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        Self {
            m: part("m."),
            v: part("v."),
            step,
        }
    }
}

/// Bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient.
pub fn adam_step(params: &mut ParamSet, grads: &GradMap, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let v = state.v.get_mut(name).expect("moment for every parameter");
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Builds the vocabulary for `kind` from a manifest's training text.
pub fn build_frontend(kind: RepresentationKind, manifest: &Manifest, lexicon: Option<Lexicon>) -> Result<Frontend> {
    let vocab = match kind {
        RepresentationKind::Grapheme => {
            let texts: Vec<&str> = manifest.records.iter().map(|r| r.text.as_str()).collect();
            build_grapheme_vocab(&texts)?
        }
        RepresentationKind::Byte => Vocabulary::bytes(),
        RepresentationKind::Phoneme => {
            let prons = manifest
                .records
                .iter()
                .map(|r| match (&r.phonemes, &lexicon) {
                    (Some(p), _) => Ok(p.clone()),
                    (None, Some(lex)) => crate::textfront::lexicon_lookup(&r.text, lex),
                    (None, None) => Err(TextError::NoPronunciation(r.text.clone())),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            build_phoneme_vocab(&prons)?
        }
    };
    Ok(Frontend { vocab, lexicon })
}

/// Encodes every manifest record and loads its mel.
pub fn load_examples(manifest: &Manifest, frontend: &Frontend) -> Result<Vec<Example>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(Example {
                tokens: frontend.encode(&r.text, r.phonemes.as_ref(), r.language)?,
                mel: manifest.load_mel(r)?,
                speaker: r.speaker,
                language: r.language,
            })
        })
        .collect()
}

/// Model config sized for a frontend and a set of examples.
pub fn model_config_for(frontend: &Frontend, examples: &[Example]) -> ModelConfig {
    let speakers = examples.iter().map(|e| e.speaker + 1).max().unwrap_or(1);
    let languages = examples.iter().map(|e| e.language + 1).max().unwrap_or(1);
    ModelConfig::new(frontend.kind(), frontend.vocab.size(), speakers, languages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub config: TrainConfig,
}

/// Everything needed to continue or use a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub params: ParamSet,
    pub adam: AdamState,
    pub frontend: Frontend,
    examples: Vec<Example>,
}

/// Metrics of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.6e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.lr, l.total, l.mel, l.stop, l.kl, l.spk
        )
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig, frontend: Frontend, examples: Vec<Example>) -> Result<Self> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(TrainError::Corpus(CorpusError::EmptyManifest));
        }
        let params = init_params(&model_cfg, cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            cfg,
            model_cfg,
            params,
            adam,
            frontend,
            examples,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Batch indices and epsilon for `step`, drawn from a stream derived from
    /// the seed and the step alone, so resumed runs see the same data.
    pub fn draw(&self, step: u64) -> (Vec<usize>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(self.cfg.seed, 0x5eed_ba7c, step));
        let n = self.examples.len();
        let k = self.cfg.batch_size.min(n);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        let eps = Tensor::from_fn(&[k, self.model_cfg.latent_dim], |_| StandardNormal.sample(&mut rng));
        (idx, eps)
    }

    /// Loss and gradients on one batch at the current parameters.
    pub fn loss_and_grads(&self, batch: &Batch, eps: Tensor, step: u64) -> Result<(LossBreakdown, GradMap)> {
        let mut tape = Tape::new().with_finite_checks(false);
        let bound = self.params.bind(&mut tape);
        let model = Model::new(&self.model_cfg, &bound);
        let latent = if self.cfg.use_residual_encoder { Latent::Sample(eps) } else { Latent::Disabled };
        let out = model.teacher_forced(&mut tape, batch, &latent, self.cfg.classifier_input())?;
        let loss = compose_loss(&mut tape, &out, batch, &self.cfg, step)?;
        let grads = tape.backward(loss.total).map_err(ModelError::from)?;
        Ok((loss.values(&tape), bound.grads(&grads)))
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.adam.step;
        let (idx, eps) = self.draw(step);
        let picked: Vec<Example> = idx.iter().map(|&i| self.examples[i].clone()).collect();
        let batch = pad_batch(&picked)?;
        let (loss, grads) = self.loss_and_grads(&batch, eps, step)?;
        if !(loss.total <= DIVERGENCE_LIMIT) || !grads.is_finite() {
            return Err(TrainError::Diverged {
                step,
                loss: loss.total,
                last_checkpoint: String::new(),
            });
        }
        let lr = self.cfg.lr(step);
        adam_step(&mut self.params, &grads, &mut self.adam, lr);
        Ok(StepReport { step: step + 1, lr, loss })
    }

    /// Runs until `total_steps`, appending metrics to `out_dir/metrics.csv`
    /// and writing checkpoints into `out_dir`.
    pub fn run(&mut self, out_dir: &Path, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| file_err(out_dir, e))?;
        let metrics_path = out_dir.join(METRICS_FILE);
        let mut metrics = if self.adam.step == 0 || !metrics_path.exists() {
            let mut f = fs::File::create(&metrics_path).map_err(|e| file_err(&metrics_path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| file_err(&metrics_path, e))?;
            f
        } else {
            fs::OpenOptions::new()
                .append(true)
                .open(&metrics_path)
                .map_err(|e| file_err(&metrics_path, e))?
        };
        let mut last_checkpoint: Option<PathBuf> = None;
        while self.adam.step < self.cfg.total_steps {
            let report = match self.train_step() {
                Ok(r) => r,
                Err(TrainError::Diverged { step, loss, .. }) => {
                    return Err(TrainError::Diverged {
                        step,
                        loss,
                        last_checkpoint: last_checkpoint.map_or_else(|| "none".into(), |p| p.display().to_string()),
                    })
                }
                Err(e) => return Err(e),
            };
            if report.step % self.cfg.log_interval == 0 {
                writeln!(metrics, "{}", report.csv_line()).map_err(|e| file_err(&metrics_path, e))?;
            }
            if self.cfg.checkpoint_interval > 0 && report.step % self.cfg.checkpoint_interval == 0 {
                self.save_checkpoint(out_dir)?;
                last_checkpoint = Some(out_dir.to_path_buf());
            }
            on_step(&report);
        }
        metrics.flush().map_err(|e| file_err(&metrics_path, e))?;
        self.save_checkpoint(out_dir)
    }

    /// Writes `config.json`, `params.nten`, `optimizer.nten`,
    /// `train_state.json`, `vocab.txt` and, for phoneme models, `lexicon.txt`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_model(dir, &self.model_cfg, &self.params)?;
        let opt = dir.join(OPTIMIZER_FILE);
        nten::save(&self.adam.to_params(), &opt).map_err(|e| file_err(&opt, e))?;
        let state = TrainState {
            step: self.adam.step,
            config: self.cfg.clone(),
        };
        let sp = dir.join(STATE_FILE);
        fs::write(&sp, serde_json::to_string_pretty(&state).expect("state serializes") + "\n").map_err(|e| file_err(&sp, e))?;
        let vp = dir.join(VOCAB_FILE);
        fs::write(&vp, self.frontend.vocab.to_text()).map_err(|e| file_err(&vp, e))?;
        if let Some(lex) = &self.frontend.lexicon {
            let lp = dir.join(LEXICON_FILE);
            fs::write(&lp, lex.to_text()).map_err(|e| file_err(&lp, e))?;
        }
        Ok(())
    }

    /// Restores a trainer from a checkpoint written by
    /// [`Trainer::save_checkpoint`], attaching `examples` for further steps.
    pub fn resume(dir: &Path, examples: Vec<Example>) -> Result<Self> {
        let ck = load_checkpoint(dir)?;
        let adam = ck.adam.ok_or_else(|| file_err(&dir.join(OPTIMIZER_FILE), "missing optimizer state"))?;
        let cfg = ck.train.ok_or_else(|| file_err(&dir.join(STATE_FILE), "missing training state"))?;
        Ok(Self {
            cfg,
            model_cfg: ck.model_cfg,
            params: ck.params,
            adam,
            frontend: ck.frontend,
            examples,
        })
    }
}

/// Contents of a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub params: ParamSet,
    pub frontend: Frontend,
    pub train: Option<TrainConfig>,
    pub adam: Option<AdamState>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| file_err(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (model_cfg, params) = crate::synthesizer::load_model(dir)?;
    let vocab = Vocabulary::from_text(&read_text(&dir.join(VOCAB_FILE))?)?;
    if vocab.kind() != model_cfg.repr_kind || vocab.size() != model_cfg.vocab_size {
        return Err(file_err(&dir.join(VOCAB_FILE), "vocabulary does not match model config"));
    }
    let lp = dir.join(LEXICON_FILE);
    let lexicon = if lp.exists() { Some(Lexicon::from_text(&read_text(&lp)?)?) } else { None };
    let sp = dir.join(STATE_FILE);
    let (train, adam) = if sp.exists() {
        let state: TrainState = serde_json::from_str(&read_text(&sp)?).map_err(|e| file_err(&sp, e))?;
        let op = dir.join(OPTIMIZER_FILE);
        let moments = nten::load(&op).map_err(|e| file_err(&op, e))?;
        let adam = AdamState::from_params(&moments, state.step);
        check_params(&model_cfg, &adam.m).map_err(|e| file_err(&op, e))?;
        check_params(&model_cfg, &adam.v).map_err(|e| file_err(&op, e))?;
        (Some(state.config), Some(adam))
    } else {
        (None, None)
    };
    Ok(Checkpoint {
        model_cfg,
        params,
        frontend: Frontend { vocab, lexicon },
        train,
        adam,
    })
}
