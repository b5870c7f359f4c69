//! Attention-based text-to-spectrogram model.
//!
//! Token and tone embeddings feed a bidirectional recurrent encoder whose
//! per-token outputs `t_i` are attended by an autoregressive decoder. The
//! decoder is conditioned at every step on a speaker embedding, a language
//! embedding and a latent `z` from a variational residual encoder. A
//! per-token speaker classifier sits behind a gradient-reversal node.
//!
//! The recurrent cells are minimal gated units:
//! `f = σ(x·Wf_x + h·Wf_h + bf)`, `c = tanh(x·Wc_x + (f⊙h)·Wc_h + bc)`,
//! `h' = h + f⊙(c − h)`.

use std::path::Path;

use ndgrad::{Bound, NdError, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, MelSpectrogram, N_MELS};
use crate::textfront::{RepresentationKind, TokenSequence, ToneStress};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.nten";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] NdError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: {msg}")]
    Param { name: String, msg: String },
    #[error("{0}")]
    Input(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub repr_kind: RepresentationKind,
    pub vocab_size: usize,
    pub tone_table_size: usize,
    pub token_emb_dim: usize,
    pub tone_emb_dim: usize,
    /// Width of `t_i`; split evenly between the two encoder directions.
    pub encoder_dim: usize,
    pub attention_dim: usize,
    pub attention_filters: usize,
    pub attention_kernel: usize,
    pub prenet_dim: usize,
    pub decoder_dim: usize,
    pub residual_dim: usize,
    pub n_mels: usize,
    pub speaker_count: usize,
    pub language_count: usize,
    pub speaker_emb_dim: usize,
    pub language_emb_dim: usize,
    pub latent_dim: usize,
    pub classifier_hidden: usize,
    pub max_decoder_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            repr_kind: RepresentationKind::Phoneme,
            vocab_size: 3,
            tone_table_size: ToneStress::COUNT,
            token_emb_dim: 32,
            tone_emb_dim: 8,
            encoder_dim: 32,
            attention_dim: 16,
            attention_filters: 4,
            attention_kernel: 7,
            prenet_dim: 32,
            decoder_dim: 64,
            residual_dim: 32,
            n_mels: N_MELS,
            speaker_count: 1,
            language_count: 1,
            speaker_emb_dim: 64,
            language_emb_dim: 3,
            latent_dim: 16,
            classifier_hidden: 256,
            max_decoder_frames: 200,
        }
    }
}

impl ModelConfig {
    pub fn new(repr_kind: RepresentationKind, vocab_size: usize, speaker_count: usize, language_count: usize) -> Self {
        Self {
            repr_kind,
            vocab_size,
            speaker_count,
            language_count,
            ..Self::default()
        }
    }

    /// Width of the per-step decoder conditioning: speaker, language, latent.
    pub fn cond_dim(&self) -> usize {
        self.speaker_emb_dim + self.language_emb_dim + self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("tone_table_size", self.tone_table_size),
            ("token_emb_dim", self.token_emb_dim),
            ("tone_emb_dim", self.tone_emb_dim),
            ("encoder_dim", self.encoder_dim),
            ("attention_dim", self.attention_dim),
            ("attention_filters", self.attention_filters),
            ("attention_kernel", self.attention_kernel),
            ("prenet_dim", self.prenet_dim),
            ("decoder_dim", self.decoder_dim),
            ("residual_dim", self.residual_dim),
            ("n_mels", self.n_mels),
            ("speaker_count", self.speaker_count),
            ("language_count", self.language_count),
            ("speaker_emb_dim", self.speaker_emb_dim),
            ("language_emb_dim", self.language_emb_dim),
            ("latent_dim", self.latent_dim),
            ("classifier_hidden", self.classifier_hidden),
            ("max_decoder_frames", self.max_decoder_frames),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.encoder_dim % 2 != 0 {
            return Err(ModelError::Config("encoder_dim must be even".into()));
        }
        if self.attention_kernel % 2 == 0 {
            return Err(ModelError::Config("attention_kernel must be odd".into()));
        }
        if self.tone_table_size < ToneStress::COUNT {
            return Err(ModelError::Config(format!("tone_table_size must be at least {}", ToneStress::COUNT)));
        }
        Ok(())
    }

    /// Name, shape and initializer of every parameter.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut mat = |name: &str, rows: usize, cols: usize| out.push((name.to_string(), vec![rows, cols], Init::Glorot));
        let e_in = self.token_emb_dim + self.tone_emb_dim;
        let he = self.encoder_dim / 2;
        let dec_in = self.prenet_dim + self.encoder_dim + self.cond_dim();
        let head_in = self.decoder_dim + self.encoder_dim;
        for (prefix, input, hidden) in [
            ("enc.fw", e_in, he),
            ("enc.bw", e_in, he),
            ("res.cell", self.n_mels, self.residual_dim),
            ("dec.cell", dec_in, self.decoder_dim),
        ] {
            mat(&format!("{prefix}.wf_x"), input, hidden);
            mat(&format!("{prefix}.wf_h"), hidden, hidden);
            mat(&format!("{prefix}.wc_x"), input, hidden);
            mat(&format!("{prefix}.wc_h"), hidden, hidden);
        }
        mat("res.mu.w", self.residual_dim, self.latent_dim);
        mat("res.logvar.w", self.residual_dim, self.latent_dim);
        mat("dec.prenet1.w", self.n_mels, self.prenet_dim);
        mat("dec.prenet2.w", self.prenet_dim, self.prenet_dim);
        mat("att.query", self.decoder_dim, self.attention_dim);
        mat("att.key.w", self.encoder_dim, self.attention_dim);
        mat("att.loc.w", self.attention_filters, self.attention_dim);
        mat("att.v", self.attention_dim, 1);
        mat("dec.frame.w", head_in, self.n_mels);
        mat("dec.stop.w", head_in, 1);
        mat("spk_clf.hidden.w", self.encoder_dim, self.classifier_hidden);
        mat("spk_clf.out.w", self.classifier_hidden, self.speaker_count);

        let bias = |name: &str, n: usize| (name.to_string(), vec![1, n], Init::Zero);
        out.extend([
            bias("enc.fw.bf", he),
            bias("enc.fw.bc", he),
            bias("enc.bw.bf", he),
            bias("enc.bw.bc", he),
            bias("res.cell.bf", self.residual_dim),
            bias("res.cell.bc", self.residual_dim),
            bias("dec.cell.bf", self.decoder_dim),
            bias("dec.cell.bc", self.decoder_dim),
            bias("res.mu.b", self.latent_dim),
            bias("res.logvar.b", self.latent_dim),
            bias("dec.prenet1.b", self.prenet_dim),
            bias("dec.prenet2.b", self.prenet_dim),
            bias("att.key.b", self.attention_dim),
            bias("dec.frame.b", self.n_mels),
            bias("dec.stop.b", 1),
            bias("spk_clf.hidden.b", self.classifier_hidden),
            bias("spk_clf.out.b", self.speaker_count),
        ]);
        let emb = |name: &str, shape: Vec<usize>| (name.to_string(), shape, Init::Embedding);
        out.extend([
            emb("emb.token", vec![self.vocab_size, self.token_emb_dim]),
            emb("emb.tone", vec![self.tone_table_size, self.tone_emb_dim]),
            emb("cond.speaker", vec![self.speaker_count, self.speaker_emb_dim]),
            emb("cond.language", vec![self.language_count, self.language_emb_dim]),
        ]);
        out.push((
            "att.loc.conv".into(),
            vec![self.attention_filters, 1, self.attention_kernel],
            Init::Glorot,
        ));
        out
    }

    /// Parameters fed to the speaker classifier only.
    pub fn is_classifier_param(name: &str) -> bool {
        name.starts_with("spk_clf.")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, json + "\n").map_err(|e| file_err(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| file_err(&path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| file_err(&path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±0.05.
    Embedding,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
    Zero,
}

/// Seeded initialization of every parameter in the layout, in layout order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, init) in cfg.param_layout() {
        let bound = match init {
            Init::Embedding => 0.05,
            Init::Zero => 0.0,
            Init::Glorot => {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [r, c] => (*r, *c),
                    [f, c, k] => (c * k, f * k),
                    _ => unreachable!("glorot on rank {}", shape.len()),
                };
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            }
        };
        let t = Tensor::from_fn(&shape, |_| if bound == 0.0 { 0.0 } else { rng.gen_range(-bound..bound) });
        params.insert(name, t);
    }
    Ok(params)
}

/// Checks that `params` holds exactly the tensors `cfg` calls for.
pub fn check_params(cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let layout = cfg.param_layout();
    for (name, shape, _) in &layout {
        let t = params.get(name).ok_or_else(|| ModelError::Param {
            name: name.clone(),
            msg: "missing".into(),
        })?;
        if t.shape() != shape.as_slice() {
            return Err(ModelError::Param {
                name: name.clone(),
                msg: format!("shape {:?}, config expects {shape:?}", t.shape()),
            });
        }
    }
    if let Some(extra) = params.names().find(|n| !layout.iter().any(|(l, _, _)| l == *n)) {
        return Err(ModelError::Param {
            name: extra.clone(),
            msg: "not part of this model".into(),
        });
    }
    Ok(())
}

pub fn save_model(dir: &Path, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    cfg.save(dir)?;
    let path = dir.join(PARAMS_FILE);
    ndgrad::nten::save(params, &path).map_err(|e| file_err(&path, e))
}

pub fn load_model(dir: &Path) -> Result<(ModelConfig, ParamSet)> {
    let cfg = ModelConfig::load(dir)?;
    let path = dir.join(PARAMS_FILE);
    let params = ndgrad::nten::load(&path).map_err(|e| file_err(&path, e))?;
    check_params(&cfg, &params)?;
    Ok((cfg, params))
}

/// Where the latent `z` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Latent {
    /// `z = mu + exp(logvar / 2) ⊙ eps`, with `eps` shaped `batch x latent_dim`.
    Sample(Tensor),
    /// `z = 0`, the prior mean; the posterior is still computed.
    PriorMean,
    /// Residual encoder switched off: `z = 0` and no posterior.
    Disabled,
}

/// How the speaker classifier sees the encoder output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassifierInput {
    /// Through a gradient-reversal node with scale `lambda` whose incoming
    /// gradient is first clipped to global norm `clip`.
    Reversed { lambda: f64, clip: f64 },
    /// Through a detached copy: the classifier trains, the encoder gets nothing.
    Detached,
}

/// Per-step recurrent weights of one gated cell.
#[derive(Debug, Clone, Copy)]
struct Cell {
    wf_x: Var,
    wf_h: Var,
    bf: Var,
    wc_x: Var,
    wc_h: Var,
    bc: Var,
}

impl Cell {
    fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        let v = |s: &str| p.var(&format!("{prefix}.{s}"));
        Ok(Self {
            wf_x: v("wf_x")?,
            wf_h: v("wf_h")?,
            bf: v("bf")?,
            wc_x: v("wc_x")?,
            wc_h: v("wc_h")?,
            bc: v("bc")?,
        })
    }

    /// One update from precomputed input projections.
    fn step(&self, tape: &mut Tape, xf: Var, xc: Var, h: Var) -> Result<Var> {
        let hf = tape.matmul(h, self.wf_h)?;
        let f_pre = tape.add(xf, hf)?;
        let f = tape.sigmoid(f_pre)?;
        let fh = tape.mul(f, h)?;
        let hc = tape.matmul(fh, self.wc_h)?;
        let c_pre = tape.add(xc, hc)?;
        let c = tape.tanh(c_pre)?;
        let delta = tape.sub(c, h)?;
        let upd = tape.mul(f, delta)?;
        Ok(tape.add(h, upd)?)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

/// `h + m ⊙ (h' − h)`: rows with `m = 0` keep their previous state.
fn masked_update(tape: &mut Tape, h: Var, h_new: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(h_new);
    }
    let m = tape.constant(Tensor::new(vec![mask.len(), 1], mask.iter().map(|&m| f64::from(u8::from(m))).collect())?);
    let d = tape.sub(h_new, h)?;
    let md = tape.mul(m, d)?;
    Ok(tape.add(h, md)?)
}

/// Row `t` of a `[b, steps, d]` tensor as `[b, d]`.
fn time_slice(tape: &mut Tape, x: Var, t: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let s = tape.slice(x, 1, t, t + 1)?;
    Ok(tape.reshape(s, &[shape[0], shape[2]])?)
}

/// Stacks `[b, d]` tensors along a new time axis: `[b, steps, d]`.
fn stack_time(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let parts = xs
        .iter()
        .map(|&x| {
            let s = tape.shape(x).to_vec();
            tape.reshape(x, &[s[0], 1, s[1]])
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.concat(&parts, 1)?)
}

/// Applies `f` to a `[b, n, d]` tensor viewed as `[b*n, d]`.
fn rowwise(tape: &mut Tape, x: Var, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = f(tape, flat)?;
    let d = tape.shape(y)[1];
    Ok(tape.reshape(y, &[s[0], s[1], d])?)
}

/// Encoder output for a padded batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[b, t_enc, encoder_dim]`.
    pub t: Var,
    /// `b * t_enc` flags, true on real tokens.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub steps: usize,
}

/// Decoder-side quantities computed once per utterance batch.
struct AttentionMemory {
    t: Var,
    keys: Var,
    mask: Vec<bool>,
    batch: usize,
    steps: usize,
}

/// Handle on a bound parameter set. All methods append to the caller's tape.
pub struct Model<'a> {
    pub cfg: &'a ModelConfig,
    p: &'a Bound,
}

impl<'a> Model<'a> {
    pub fn new(cfg: &'a ModelConfig, p: &'a Bound) -> Self {
        Self { cfg, p }
    }

    fn var(&self, name: &str) -> Result<Var> {
        Ok(self.p.var(name)?)
    }

    /// `[b, t, token_emb + tone_emb]`: token embedding concatenated with the
    /// tone/stress embedding of each position.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize], tone_ids: &[usize], batch: usize) -> Result<Var> {
        if ids.len() != tone_ids.len() || ids.is_empty() || ids.len() % batch != 0 {
            return Err(ModelError::Input(format!("{} ids, {} tone ids, batch {batch}", ids.len(), tone_ids.len())));
        }
        let tok = tape.embedding_gather(self.var("emb.token")?, ids)?;
        let tone = tape.embedding_gather(self.var("emb.tone")?, tone_ids)?;
        let e = tape.concat(&[tok, tone], 1)?;
        let d = tape.shape(e)[1];
        Ok(tape.reshape(e, &[batch, ids.len() / batch, d])?)
    }

    /// Bidirectional pass; padded positions do not disturb the states of
    /// real tokens in either direction.
    pub fn encode(&self, tape: &mut Tape, embedded: Var, mask: &[bool]) -> Result<Encoded> {
        let shape = tape.shape(embedded).to_vec();
        let (b, steps) = (shape[0], shape[1]);
        if mask.len() != b * steps {
            return Err(ModelError::Input(format!("mask of {} for {b}x{steps} tokens", mask.len())));
        }
        let he = self.cfg.encoder_dim / 2;
        let mut halves = Vec::new();
        for (prefix, reverse) in [("enc.fw", false), ("enc.bw", true)] {
            let cell = Cell::bind(self.p, prefix)?;
            let xf = rowwise(tape, embedded, |tp, x| linear(tp, x, cell.wf_x, Some(cell.bf)))?;
            let xc = rowwise(tape, embedded, |tp, x| linear(tp, x, cell.wc_x, Some(cell.bc)))?;
            let mut h = tape.constant(Tensor::zeros(&[b, he]));
            let mut outs = vec![h; steps];
            let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
            for t in order {
                let (f, c) = (time_slice(tape, xf, t)?, time_slice(tape, xc, t)?);
                let h_new = cell.step(tape, f, c, h)?;
                let m: Vec<bool> = (0..b).map(|i| mask[i * steps + t]).collect();
                h = masked_update(tape, h, h_new, &m)?;
                outs[t] = h;
            }
            halves.push(stack_time(tape, &outs)?);
        }
        let t = tape.concat(&halves, 2)?;
        Ok(Encoded {
            t,
            mask: mask.to_vec(),
            batch: b,
            steps,
        })
    }

    /// Posterior `(mu, logvar)`, each `[b, latent_dim]`, from a recurrent pass
    /// over the mel frames mean-pooled over each example's true frames.
    pub fn residual_encode(&self, tape: &mut Tape, mels: Var, frame_mask: &[bool]) -> Result<(Var, Var)> {
        let shape = tape.shape(mels).to_vec();
        let (b, steps) = (shape[0], shape[1]);
        if frame_mask.len() != b * steps {
            return Err(ModelError::Input("frame mask does not match mel batch".into()));
        }
        let lens: Vec<usize> = (0..b).map(|i| frame_mask[i * steps..(i + 1) * steps].iter().filter(|&&m| m).count()).collect();
        if lens.iter().any(|&l| l == 0) {
            return Err(ModelError::Input("residual encoder needs at least one frame".into()));
        }
        let cell = Cell::bind(self.p, "res.cell")?;
        let xf = rowwise(tape, mels, |tp, x| linear(tp, x, cell.wf_x, Some(cell.bf)))?;
        let xc = rowwise(tape, mels, |tp, x| linear(tp, x, cell.wc_x, Some(cell.bc)))?;
        let mut h = tape.constant(Tensor::zeros(&[b, self.cfg.residual_dim]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let (f, c) = (time_slice(tape, xf, t)?, time_slice(tape, xc, t)?);
            let h_new = cell.step(tape, f, c, h)?;
            let m: Vec<bool> = (0..b).map(|i| frame_mask[i * steps + t]).collect();
            h = masked_update(tape, h, h_new, &m)?;
            states.push(h);
        }
        let all = stack_time(tape, &states)?;
        let weights = Tensor::new(
            vec![b, steps, 1],
            (0..b * steps).map(|k| if frame_mask[k] { 1.0 / lens[k / steps] as f64 } else { 0.0 }).collect(),
        )?;
        let w = tape.constant(weights);
        let weighted = tape.mul(all, w)?;
        let pooled = tape.sum_axis(weighted, 1)?;
        let mu = linear(tape, pooled, self.var("res.mu.w")?, Some(self.var("res.mu.b")?))?;
        let logvar = linear(tape, pooled, self.var("res.logvar.w")?, Some(self.var("res.logvar.b")?))?;
        Ok((mu, logvar))
    }

    /// `z = mu + exp(logvar/2) ⊙ eps`.
    pub fn reparameterize(&self, tape: &mut Tape, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
        if tape.shape(mu) != eps.shape() {
            return Err(ModelError::Input(format!("epsilon {:?} for posterior {:?}", eps.shape(), tape.shape(mu))));
        }
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let e = tape.constant(eps.clone());
        let noise = tape.mul(std, e)?;
        Ok(tape.add(mu, noise)?)
    }

    /// `[b, 83]` conditioning rows: speaker embedding, language embedding, z.
    pub fn conditioning(&self, tape: &mut Tape, speakers: &[usize], languages: &[usize], z: Var) -> Result<Var> {
        let s = tape.embedding_gather(self.var("cond.speaker")?, speakers)?;
        let l = tape.embedding_gather(self.var("cond.language")?, languages)?;
        Ok(tape.concat(&[s, l, z], 1)?)
    }

    fn memory(&self, tape: &mut Tape, enc: &Encoded) -> Result<AttentionMemory> {
        let (kw, kb) = (self.var("att.key.w")?, self.var("att.key.b")?);
        let keys = rowwise(tape, enc.t, |tp, x| linear(tp, x, kw, Some(kb)))?;
        Ok(AttentionMemory {
            t: enc.t,
            keys,
            mask: enc.mask.clone(),
            batch: enc.batch,
            steps: enc.steps,
        })
    }

    /// Location-sensitive attention. Returns the context `[b, encoder_dim]`
    /// and the new alignment `[b, t_enc]`.
    fn attend_mem(&self, tape: &mut Tape, h: Var, mem: &AttentionMemory, prev: Var) -> Result<(Var, Var)> {
        let (b, te, a) = (mem.batch, mem.steps, self.cfg.attention_dim);
        let q = tape.matmul(h, self.var("att.query")?)?;
        let q = tape.reshape(q, &[b, 1, a])?;
        let prev3 = tape.reshape(prev, &[b, te, 1])?;
        let loc = tape.conv1d(prev3, self.var("att.loc.conv")?)?;
        let loc_w = self.var("att.loc.w")?;
        let loc = rowwise(tape, loc, |tp, x| linear(tp, x, loc_w, None))?;
        let qk = tape.add(q, mem.keys)?;
        let pre = tape.add(qk, loc)?;
        let act = tape.tanh(pre)?;
        let v = self.var("att.v")?;
        let energies = rowwise(tape, act, |tp, x| linear(tp, x, v, None))?;
        let energies = tape.reshape(energies, &[b, te])?;
        let align = tape.masked_softmax(energies, &mem.mask)?;
        let a3 = tape.reshape(align, &[b, te, 1])?;
        let weighted = tape.mul(a3, mem.t)?;
        let ctx = tape.sum_axis(weighted, 1)?;
        Ok((ctx, align))
    }

    /// Public form of the attention step over a freshly encoded batch.
    pub fn attend(&self, tape: &mut Tape, h: Var, enc: &Encoded, prev: Var) -> Result<(Var, Var)> {
        let mem = self.memory(tape, enc)?;
        self.attend_mem(tape, h, &mem, prev)
    }

    fn prenet(&self, tape: &mut Tape, frames: Var) -> Result<Var> {
        let h1 = linear(tape, frames, self.var("dec.prenet1.w")?, Some(self.var("dec.prenet1.b")?))?;
        let h1 = tape.relu(h1)?;
        let h2 = linear(tape, h1, self.var("dec.prenet2.w")?, Some(self.var("dec.prenet2.b")?))?;
        Ok(tape.relu(h2)?)
    }

    /// Splits the decoder input weights into their prenet, context and
    /// conditioning row blocks.
    fn decoder_blocks(&self, tape: &mut Tape) -> Result<DecoderBlocks> {
        let cell = Cell::bind(self.p, "dec.cell")?;
        let (p, e) = (self.cfg.prenet_dim, self.cfg.encoder_dim);
        let total = p + e + self.cfg.cond_dim();
        let mut split = |w: Var| -> Result<[Var; 3]> {
            Ok([tape.slice(w, 0, 0, p)?, tape.slice(w, 0, p, p + e)?, tape.slice(w, 0, p + e, total)?])
        };
        let f = split(cell.wf_x)?;
        let c = split(cell.wc_x)?;
        Ok(DecoderBlocks { cell, f, c })
    }

    /// Frame and stop logit heads on `[h, context]` rows.
    fn heads(&self, tape: &mut Tape, hc: Var) -> Result<(Var, Var)> {
        let frame = linear(tape, hc, self.var("dec.frame.w")?, Some(self.var("dec.frame.b")?))?;
        let stop = linear(tape, hc, self.var("dec.stop.w")?, Some(self.var("dec.stop.b")?))?;
        Ok((frame, stop))
    }

    /// One decoder step from scratch: prenet of `prev_frame`, attention with
    /// state `h`, recurrent update on `[prenet, context, cond]`, heads.
    /// Returns `(frame, stop_logit, h', context, alignment)`.
    pub fn decode_step(&self, tape: &mut Tape, prev_frame: Var, cond: Var, h: Var, enc: &Encoded, prev_align: Var) -> Result<StepOutput> {
        let mem = self.memory(tape, enc)?;
        let blocks = self.decoder_blocks(tape)?;
        let pre = self.prenet(tape, prev_frame)?;
        let static_in = blocks.static_projection(tape, pre, cond)?;
        self.step_inner(tape, &blocks, &mem, static_in, h, prev_align)
    }

    fn step_inner(
        &self,
        tape: &mut Tape,
        blocks: &DecoderBlocks,
        mem: &AttentionMemory,
        (sf, sc): (Var, Var),
        h: Var,
        prev_align: Var,
    ) -> Result<StepOutput> {
        let (ctx, align) = self.attend_mem(tape, h, mem, prev_align)?;
        let cf = tape.matmul(ctx, blocks.f[1])?;
        let cc = tape.matmul(ctx, blocks.c[1])?;
        let xf = tape.add(sf, cf)?;
        let xc = tape.add(sc, cc)?;
        let h_new = blocks.cell.step(tape, xf, xc, h)?;
        let hc = tape.concat(&[h_new, ctx], 1)?;
        let (frame, stop) = self.heads(tape, hc)?;
        Ok(StepOutput {
            frame,
            stop,
            h: h_new,
            context: ctx,
            alignment: align,
        })
    }

    /// Per-token speaker logits `[b * t_enc, speaker_count]` from a
    /// one-hidden-layer ReLU network.
    pub fn classify_speaker(&self, tape: &mut Tape, enc: &Encoded, input: ClassifierInput) -> Result<Var> {
        let src = match input {
            ClassifierInput::Reversed { lambda, clip } => tape.gradient_reversal_clipped(enc.t, lambda, clip)?,
            ClassifierInput::Detached => {
                let v = tape.value(enc.t).clone();
                tape.constant(v)
            }
        };
        let flat = tape.reshape(src, &[enc.batch * enc.steps, self.cfg.encoder_dim])?;
        let hidden = linear(tape, flat, self.var("spk_clf.hidden.w")?, Some(self.var("spk_clf.hidden.b")?))?;
        let hidden = tape.relu(hidden)?;
        linear(tape, hidden, self.var("spk_clf.out.w")?, Some(self.var("spk_clf.out.b")?))
    }

    /// Training-mode pass: the decoder reads ground-truth previous frames.
    pub fn teacher_forced(&self, tape: &mut Tape, batch: &Batch, latent: &Latent, classifier: ClassifierInput) -> Result<ForwardOutputs> {
        let (b, te, td, nm) = (batch.size, batch.max_tokens, batch.max_frames, batch.n_mels);
        if nm != self.cfg.n_mels {
            return Err(ModelError::Input(format!("batch has {nm} mel bins, model expects {}", self.cfg.n_mels)));
        }
        if batch.stop_labels.len() != b * td || batch.mels.len() != b * td * nm {
            return Err(ModelError::Input("stop labels and target mels disagree in length".into()));
        }
        let emb = self.embed(tape, &batch.ids, &batch.tone_ids, b)?;
        let enc = self.encode(tape, emb, &batch.token_mask)?;
        let targets = tape.constant(Tensor::new(vec![b, td, nm], batch.mels.clone())?);

        let (posterior, z) = match latent {
            Latent::Disabled => (None, tape.constant(Tensor::zeros(&[b, self.cfg.latent_dim]))),
            other => {
                let (mu, logvar) = self.residual_encode(tape, targets, &batch.frame_mask)?;
                let z = match other {
                    Latent::Sample(eps) => self.reparameterize(tape, mu, logvar, eps)?,
                    _ => tape.constant(Tensor::zeros(&[b, self.cfg.latent_dim])),
                };
                (Some((mu, logvar)), z)
            }
        };
        let cond = self.conditioning(tape, &batch.speakers, &batch.languages, z)?;

        let mem = self.memory(tape, &enc)?;
        let blocks = self.decoder_blocks(tape)?;
        // Previous frames: zeros, then targets shifted right by one.
        let mut prev = vec![0.0; b * td * nm];
        for i in 0..b {
            for t in 1..td {
                let src = (i * td + t - 1) * nm;
                let dst = (i * td + t) * nm;
                prev[dst..dst + nm].copy_from_slice(&batch.mels[src..src + nm]);
            }
        }
        let prev = tape.constant(Tensor::new(vec![b * td, nm], prev)?);
        let pre = self.prenet(tape, prev)?;
        let pf = tape.matmul(pre, blocks.f[0])?;
        let pc = tape.matmul(pre, blocks.c[0])?;
        let pf = tape.reshape(pf, &[b, td, self.cfg.decoder_dim])?;
        let pc = tape.reshape(pc, &[b, td, self.cfg.decoder_dim])?;
        let cf = tape.matmul(cond, blocks.f[2])?;
        let cf = tape.add(cf, blocks.cell.bf)?;
        let cc = tape.matmul(cond, blocks.c[2])?;
        let cc = tape.add(cc, blocks.cell.bc)?;
        let cf = tape.reshape(cf, &[b, 1, self.cfg.decoder_dim])?;
        let cc = tape.reshape(cc, &[b, 1, self.cfg.decoder_dim])?;
        let sf_all = tape.add(pf, cf)?;
        let sc_all = tape.add(pc, cc)?;

        let mut h = tape.constant(Tensor::zeros(&[b, self.cfg.decoder_dim]));
        let mut align = tape.constant(initial_alignment(b, te));
        let (mut hs, mut ctxs, mut aligns) = (Vec::with_capacity(td), Vec::with_capacity(td), Vec::with_capacity(td));
        for t in 0..td {
            let sf = time_slice(tape, sf_all, t)?;
            let sc = time_slice(tape, sc_all, t)?;
            let out = self.step_inner(tape, &blocks, &mem, (sf, sc), h, align)?;
            h = out.h;
            align = out.alignment;
            hs.push(out.h);
            ctxs.push(out.context);
            aligns.push(out.alignment);
        }
        let hs = stack_time(tape, &hs)?;
        let ctxs = stack_time(tape, &ctxs)?;
        let hc = tape.concat(&[hs, ctxs], 2)?;
        let d = tape.shape(hc)[2];
        let hc = tape.reshape(hc, &[b * td, d])?;
        let (frames, stops) = self.heads(tape, hc)?;
        let frames = tape.reshape(frames, &[b, td, nm])?;
        let stops = tape.reshape(stops, &[b, td])?;
        let speaker_logits = self.classify_speaker(tape, &enc, classifier)?;
        Ok(ForwardOutputs {
            frames,
            stop_logits: stops,
            posterior,
            speaker_logits,
            alignments: aligns,
            encoded: enc,
        })
    }
}

struct DecoderBlocks {
    cell: Cell,
    /// `[prenet, context, cond]` row blocks of `Wf_x`.
    f: [Var; 3],
    c: [Var; 3],
}

impl DecoderBlocks {
    /// Input projections of the parts that do not depend on attention.
    fn static_projection(&self, tape: &mut Tape, pre: Var, cond: Var) -> Result<(Var, Var)> {
        let pf = tape.matmul(pre, self.f[0])?;
        let cf = tape.matmul(cond, self.f[2])?;
        let sf0 = tape.add(pf, cf)?;
        let sf = tape.add(sf0, self.cell.bf)?;
        let pc = tape.matmul(pre, self.c[0])?;
        let cc = tape.matmul(cond, self.c[2])?;
        let sc0 = tape.add(pc, cc)?;
        let sc = tape.add(sc0, self.cell.bc)?;
        Ok((sf, sc))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub frame: Var,
    pub stop: Var,
    pub h: Var,
    pub context: Var,
    pub alignment: Var,
}

/// Everything a teacher-forced pass produces, as tape handles.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// `[b, t_dec, n_mels]`.
    pub frames: Var,
    /// `[b, t_dec]`.
    pub stop_logits: Var,
    /// `(mu, logvar)`, absent when the residual encoder is disabled.
    pub posterior: Option<(Var, Var)>,
    /// `[b * t_enc, speaker_count]`.
    pub speaker_logits: Var,
    /// One `[b, t_enc]` alignment row block per decoder step.
    pub alignments: Vec<Var>,
    pub encoded: Encoded,
}

impl ForwardOutputs {
    /// Alignment of example `i` as a `t_dec x t_enc` matrix.
    pub fn alignment_matrix(&self, tape: &Tape, i: usize) -> Tensor {
        let te = self.encoded.steps;
        let data: Vec<f64> = self
            .alignments
            .iter()
            .flat_map(|&a| tape.value(a).data()[i * te..(i + 1) * te].to_vec())
            .collect();
        Tensor::new(vec![self.alignments.len(), te], data).expect("alignment shape")
    }
}

/// One-hot alignment on the first token of every row.
pub fn initial_alignment(batch: usize, steps: usize) -> Tensor {
    Tensor::from_fn(&[batch, steps], |k| if k % steps == 0 { 1.0 } else { 0.0 })
}

/// Closed-form `z` for a posterior: `mu + exp(logvar/2) ⊙ eps`, or zeros for
/// the prior mean.
pub fn sample_latent(mu: &[f64], logvar: &[f64], eps: Option<&[f64]>) -> Vec<f64> {
    match eps {
        None => vec![0.0; mu.len()],
        Some(e) => mu
            .iter()
            .zip(logvar)
            .zip(e)
            .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
            .collect(),
    }
}

fn sequence_mask(seq: &TokenSequence) -> Vec<bool> {
    vec![true; seq.len()]
}

/// Token embedding rows of one sequence, `t_enc x (token_emb + tone_emb)`.
pub fn embed_tokens(cfg: &ModelConfig, params: &ParamSet, seq: &TokenSequence) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let m = Model::new(cfg, &bound);
    let e = m.embed(&mut tape, &seq.ids, &seq.tone_ids, 1)?;
    let d = tape.shape(e)[2];
    Ok(tape.value(e).clone().reshaped(vec![seq.len(), d])?)
}

/// Per-token encodings `t_i` of one sequence, `t_enc x encoder_dim`.
pub fn encode_text(cfg: &ModelConfig, params: &ParamSet, seq: &TokenSequence) -> Result<Tensor> {
    let mut tape = Tape::new().with_finite_checks(false);
    let bound = params.bind(&mut tape);
    let m = Model::new(cfg, &bound);
    let e = m.embed(&mut tape, &seq.ids, &seq.tone_ids, 1)?;
    let enc = m.encode(&mut tape, e, &sequence_mask(seq))?;
    Ok(tape.value(enc.t).clone().reshaped(vec![seq.len(), cfg.encoder_dim])?)
}

/// Posterior `(mu, logvar)` of one spectrogram.
pub fn residual_encode(cfg: &ModelConfig, params: &ParamSet, mel: &MelSpectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new().with_finite_checks(false);
    let bound = params.bind(&mut tape);
    let m = Model::new(cfg, &bound);
    let x = tape.constant(Tensor::new(vec![1, mel.frames(), mel.n_mels()], mel.to_f64())?);
    let (mu, lv) = m.residual_encode(&mut tape, x, &vec![true; mel.frames()])?;
    Ok((tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec()))
}

/// Result of autoregressive synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    /// `t_dec x t_enc`.
    pub alignment: Tensor,
    /// True when decoding ran to `max_decoder_frames` without a stop.
    pub hit_max_frames: bool,
}

/// Greedy autoregressive decoding from a zero frame with `z` at the prior
/// mean. Speaker and language are chosen independently of the text.
pub fn synthesize(cfg: &ModelConfig, params: &ParamSet, seq: &TokenSequence, speaker: usize, language: usize) -> Result<Synthesis> {
    if speaker >= cfg.speaker_count || language >= cfg.language_count {
        return Err(ModelError::Input(format!(
            "speaker {speaker} / language {language} outside tables of {} / {}",
            cfg.speaker_count, cfg.language_count
        )));
    }
    let mut tape = Tape::new().with_finite_checks(false);
    let bound = params.bind(&mut tape);
    let m = Model::new(cfg, &bound);
    let emb = m.embed(&mut tape, &seq.ids, &seq.tone_ids, 1)?;
    let enc = m.encode(&mut tape, emb, &sequence_mask(seq))?;
    let z = tape.constant(Tensor::zeros(&[1, cfg.latent_dim]));
    let cond = m.conditioning(&mut tape, &[speaker], &[language], z)?;
    let mem = m.memory(&mut tape, &enc)?;
    let blocks = m.decoder_blocks(&mut tape)?;

    let mut frame = tape.constant(Tensor::zeros(&[1, cfg.n_mels]));
    let mut h = tape.constant(Tensor::zeros(&[1, cfg.decoder_dim]));
    let mut align = tape.constant(initial_alignment(1, enc.steps));
    let mut frames = Vec::new();
    let mut aligns = Vec::new();
    let mut stopped = false;
    for _ in 0..cfg.max_decoder_frames {
        let pre = m.prenet(&mut tape, frame)?;
        let stat = blocks.static_projection(&mut tape, pre, cond)?;
        let out = m.step_inner(&mut tape, &blocks, &mem, stat, h, align)?;
        frames.extend_from_slice(tape.value(out.frame).data());
        aligns.extend_from_slice(tape.value(out.alignment).data());
        let stop_logit = tape.value(out.stop).data()[0];
        h = out.h;
        align = out.alignment;
        frame = out.frame;
        if stop_logit > 0.0 {
            stopped = true;
            break;
        }
    }
    let steps = frames.len() / cfg.n_mels;
    Ok(Synthesis {
        mel: MelSpectrogram::from_f64(cfg.n_mels, &frames).map_err(|e| ModelError::Input(e.to_string()))?,
        alignment: Tensor::new(vec![steps, enc.steps], aligns)?,
        hit_max_frames: !stopped,
    })
}
