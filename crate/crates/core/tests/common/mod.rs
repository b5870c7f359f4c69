#![allow(dead_code)]

use ndgrad::{norm_relative_error, numeric_gradient, ParamSet, Tape, Tensor, Var};
use polysynth::corpus::{generate_utterance, pad_batch, Batch, CorpusSpec, Example, MelSpectrogram};
use polysynth::synthesizer::{ClassifierInput, Latent, Model, ModelConfig, ModelError};
use polysynth::textfront::{build_phoneme_vocab, Frontend, RepresentationKind};
use polysynth::trainer::{compose_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

/// Toy spec with `n` utterances per speaker and no noise.
pub fn clean_spec(n: usize) -> CorpusSpec {
    let mut spec = CorpusSpec::two_language_default(n);
    spec.noise_sigma = 0.0;
    spec
}

pub fn phoneme_frontend(spec: &CorpusSpec) -> Frontend {
    let mut prons = Vec::new();
    for lang in &spec.languages {
        let units = lang.units();
        prons.push(lang.phonemes(&units));
    }
    Frontend {
        vocab: build_phoneme_vocab(&prons).unwrap(),
        lexicon: Some(spec.lexicon()),
    }
}

/// Examples straight from the generator, without touching disk.
pub fn toy_examples(spec: &CorpusSpec, frontend: &Frontend, seed: u64) -> Vec<Example> {
    let mut out = Vec::new();
    for spk in &spec.speakers {
        for i in 0..spec.n_per_speaker {
            let u = generate_utterance(spec, spk, i, seed).unwrap();
            out.push(Example {
                tokens: frontend.encode(&u.text, Some(&u.phonemes), u.language_id).unwrap(),
                mel: u.mel,
                speaker: u.speaker_id,
                language: u.language_id,
            });
        }
    }
    out
}

/// Small widths so that finite differences over every parameter stay cheap.
pub fn tiny_config(vocab_size: usize, n_mels: usize) -> ModelConfig {
    ModelConfig {
        token_emb_dim: 3,
        tone_emb_dim: 2,
        encoder_dim: 4,
        attention_dim: 3,
        attention_filters: 2,
        attention_kernel: 3,
        prenet_dim: 3,
        decoder_dim: 4,
        residual_dim: 4,
        n_mels,
        speaker_emb_dim: 2,
        language_emb_dim: 2,
        latent_dim: 2,
        classifier_hidden: 3,
        max_decoder_frames: 12,
        ..ModelConfig::new(RepresentationKind::Phoneme, vocab_size, 2, 2)
    }
}

/// A batch of `lens.len()` examples with random tokens and random mels.
pub fn random_batch(rng: &mut impl Rng, vocab_size: usize, n_mels: usize, lens: &[(usize, usize)]) -> Batch {
    let examples: Vec<Example> = lens
        .iter()
        .enumerate()
        .map(|(i, &(te, td))| {
            let ids: Vec<usize> = (0..te).map(|_| rng.gen_range(3..vocab_size)).collect();
            let tone_ids = (0..te).map(|_| rng.gen_range(0..5)).collect();
            let mel: Vec<f32> = (0..td * n_mels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Example {
                tokens: polysynth::textfront::TokenSequence {
                    kind: RepresentationKind::Phoneme,
                    ids,
                    tone_ids,
                    language_id: i % 2,
                },
                mel: MelSpectrogram::new(n_mels, mel).unwrap(),
                speaker: i % 2,
                language: i % 2,
            }
        })
        .collect();
    pad_batch(&examples).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every parameter drawn uniformly from ±`scale`.
pub fn random_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ParamSet {
    let mut r = rng(seed);
    cfg.param_layout()
        .into_iter()
        .map(|(name, shape, _)| (name, Tensor::from_fn(&shape, |_| r.gen_range(-scale..scale))))
        .collect()
}

#[derive(Clone, Copy)]
enum Term {
    Total,
    WeightedSpeaker,
}

/// A loss term as a function of one flat vector holding every parameter.
fn flat_loss(
    cfg: &ModelConfig,
    names: &[(String, Vec<usize>)],
    batch: &polysynth::corpus::Batch,
    eps: &Tensor,
    term: Term,
) -> impl Fn(&mut Tape, Var) -> ndgrad::Result<Var> {
    let cfg = cfg.clone();
    let names = names.to_vec();
    let batch = batch.clone();
    let eps = eps.clone();
    move |tape: &mut Tape, x: Var| {
        let mut offset = 0;
        let mut vars = Vec::new();
        for (name, shape) in &names {
            let n: usize = shape.iter().product();
            let s = tape.slice(x, 0, offset, offset + n)?;
            vars.push((name.clone(), tape.reshape(s, shape)?));
            offset += n;
        }
        let bound: ndgrad::Bound = vars.into_iter().collect();
        let m = Model::new(&cfg, &bound);
        let out = m
            .teacher_forced(tape, &batch, &Latent::Sample(eps.clone()), ClassifierInput::Reversed { lambda: 1.0, clip: 0.5 })
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
        let mut tc = TrainConfig::desk(100);
        tc.kl_warmup_steps = 0;
        let loss = compose_loss(tape, &out, &batch, &tc, 7).expect("finite loss");
        match term {
            Term::Total => Ok(loss.total),
            Term::WeightedSpeaker => tape.scale(loss.spk, tc.w_spk),
        }
    }
}

/// Norm-wise relative error of the tape gradient of the full loss against
/// finite differences. Upstream of the reversal layer the speaker term enters with
/// the opposite sign, so the numeric oracle there is
/// `d(total)/dθ − 2·d(w_spk·CE)/dθ`.
pub fn full_loss_gradient_error(seed: u64) -> f64 {
    let cfg = tiny_config(7, 3);
    let mut r = rng(seed);
    let batch = random_batch(&mut r, 7, 3, &[(3, 4), (2, 3)]);
    let params = random_params(&cfg, seed, 0.6);
    let names: Vec<(String, Vec<usize>)> = params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
    let flat = Tensor::vector(params.iter().flat_map(|(_, t)| t.data().to_vec()).collect());
    let eps = Tensor::from_fn(&[2, cfg.latent_dim], |_| r.gen_range(-1.0..1.0));

    let total = flat_loss(&cfg, &names, &batch, &eps, Term::Total);
    let mut tape = Tape::new();
    let x = tape.param(flat.clone());
    let y = total(&mut tape, x).unwrap();
    let analytic = tape.backward(y).unwrap().wrt(x);

    let mut numeric = numeric_gradient(&total, &flat, 1e-6).unwrap();
    let spk = numeric_gradient(flat_loss(&cfg, &names, &batch, &eps, Term::WeightedSpeaker), &flat, 1e-6).unwrap();
    let mut offset = 0;
    for (name, shape) in &names {
        let n: usize = shape.iter().product();
        if name.starts_with("enc.") || name.starts_with("emb.") {
            for i in offset..offset + n {
                numeric.data_mut()[i] -= 2.0 * spk.data()[i];
            }
        }
        offset += n;
    }
    norm_relative_error(&analytic, &numeric)
}

/// Monte-Carlo estimate of KL(N(mu, e^lv) ‖ N(0, I)) from `n` samples of the
/// log-density ratio.
pub fn kl_monte_carlo(mu: &[f64], logvar: &[f64], n: usize, rng: &mut impl Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        let mut ratio = 0.0;
        for (&m, &lv) in mu.iter().zip(logvar) {
            let e: f64 = StandardNormal.sample(rng);
            let z = m + (lv / 2.0).exp() * e;
            ratio += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        acc += ratio;
    }
    acc / n as f64
}
