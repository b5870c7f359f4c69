mod common;

use common::*;
use ndgrad::{GradMap, ParamSet, Tape, Tensor};
use polysynth::corpus::{pad_batch, Batch, Example};
use polysynth::synthesizer::{ClassifierInput, Latent, Model, ModelConfig};
use polysynth::trainer::*;
use rand::Rng;

#[test]
fn schedule_spot_values() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr(0), 1e-3);
    assert_eq!(cfg.lr(50_000), 1e-3);
    assert_eq!(cfg.lr(62_500), 5e-4);
    assert_eq!(cfg.lr(75_000), 2.5e-4);
    assert!(cfg.lr(56_250) < 1e-3 && cfg.lr(56_250) > 5e-4);
}

#[test]
fn default_and_desk_configs() {
    let cfg = TrainConfig::default();
    let json = serde_json::to_value(&cfg).unwrap();
    assert_eq!(json["w_syn"], 1.0);
    assert_eq!(json["w_spk"], 0.02);
    assert_eq!(json["grl_clip"], 0.5);
    assert_eq!(json["batch_size"], 256);
    let desk = TrainConfig::desk(8000);
    assert_eq!(desk.batch_size, 16);
    assert_eq!(desk.decay_start, 4000.0);
    assert_eq!(desk.decay_halflife, 1000.0);
    assert_eq!(desk.kl_warmup_steps, 800);
    assert_eq!(desk.beta(0), 0.0);
    assert_eq!(desk.beta(400), 0.5);
    assert_eq!(desk.beta(5000), 1.0);
    desk.validate().unwrap();
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { w_spk: -0.1, ..TrainConfig::default() },
        TrainConfig { decay_halflife: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { base_lr: f64::NAN, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn kl_closed_form_spot_values() {
    assert_eq!(kl_divergence(&[0.0; 16], &[0.0; 16]), 0.0);
    assert_eq!(kl_divergence(&[1.0; 16], &[0.0; 16]), 8.0);
}

#[test]
fn kl_agrees_with_monte_carlo() {
    let mut r = rng(4);
    for _ in 0..3 {
        let mu: Vec<f64> = (0..16).map(|_| r.gen_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let exact = kl_divergence(&mu, &lv);
        let mc = kl_monte_carlo(&mu, &lv, 100_000, &mut r);
        assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
    }
}

fn forward(cfg: &ModelConfig, params: &ParamSet, batch: &Batch, tc: &TrainConfig, eps: &Tensor, step: u64) -> (LossBreakdown, GradMap) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let m = Model::new(cfg, &bound);
    let latent = if tc.use_residual_encoder { Latent::Sample(eps.clone()) } else { Latent::Disabled };
    let out = m.teacher_forced(&mut tape, batch, &latent, tc.classifier_input()).unwrap();
    let loss = compose_loss(&mut tape, &out, batch, tc, step).unwrap();
    let grads = bound.grads(&tape.backward(loss.total).unwrap());
    (loss.values(&tape), grads)
}

#[test]
fn loss_terms_match_direct_formulas() {
    let cfg = tiny_config(9, 4);
    let params = random_params(&cfg, 3, 0.5);
    let mut r = rng(5);
    let batch = random_batch(&mut r, 9, 4, &[(3, 5), (4, 2), (2, 3)]);
    let eps = Tensor::from_fn(&[3, cfg.latent_dim], |_| r.gen_range(-1.0..1.0));
    let tc = TrainConfig { kl_warmup_steps: 10, ..TrainConfig::desk(100) };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let m = Model::new(&cfg, &bound);
    let out = m.teacher_forced(&mut tape, &batch, &Latent::Sample(eps), tc.classifier_input()).unwrap();
    let got = compose_loss(&mut tape, &out, &batch, &tc, 4).unwrap().values(&tape);

    let frames = tape.value(out.frames).data();
    let stops = tape.value(out.stop_logits).data();
    let nm = batch.n_mels;
    let (mut se, mut bce, mut n) = (0.0, 0.0, 0.0);
    for k in 0..batch.frame_mask.len() {
        if !batch.frame_mask[k] {
            continue;
        }
        n += 1.0;
        for j in 0..nm {
            se += (frames[k * nm + j] - batch.mels[k * nm + j]).powi(2);
        }
        let (x, y) = (stops[k], batch.stop_labels[k]);
        bce += -(y * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - y) * (1.0 / (1.0 + x.exp())).ln());
    }
    let mse = se / (n * nm as f64);
    bce /= n;

    let (mu, lv) = out.posterior.unwrap();
    let (mu, lv) = (tape.value(mu).clone(), tape.value(lv).clone());
    let d = cfg.latent_dim;
    let kl = (0..3).map(|i| kl_divergence(&mu.data()[i * d..][..d], &lv.data()[i * d..][..d])).sum::<f64>() / 3.0;

    let logits = tape.value(out.speaker_logits).data();
    let (mut ce, mut nt) = (0.0, 0.0);
    for (k, &real) in batch.token_mask.iter().enumerate() {
        if real {
            let row = &logits[k * 2..k * 2 + 2];
            let lse = (row[0].exp() + row[1].exp()).ln();
            ce += lse - row[batch.speakers[k / batch.max_tokens]];
            nt += 1.0;
        }
    }
    ce /= nt;

    let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * (1.0 + b.abs());
    assert!(close(got.mel, mse), "{} {}", got.mel, mse);
    assert!(close(got.stop, bce));
    assert!(close(got.kl, kl));
    assert!(close(got.spk, ce));
    assert!(close(got.total, (mse + bce) + 0.4 * kl + 0.02 * ce));
    assert!(got.kl >= 0.0);
}

#[test]
fn disabled_adversary_leaves_encoder_gradients_untouched() {
    let cfg = tiny_config(9, 4);
    let params = random_params(&cfg, 8, 0.5);
    let mut r = rng(6);
    let batch = random_batch(&mut r, 9, 4, &[(3, 3), (4, 4)]);
    let eps = Tensor::zeros(&[2, cfg.latent_dim]);
    let with = TrainConfig { adversarial_enabled: false, ..TrainConfig::desk(10) };
    let without = TrainConfig { w_spk: 0.0, ..with.clone() };
    let (_, g1) = forward(&cfg, &params, &batch, &with, &eps, 3);
    let (_, g0) = forward(&cfg, &params, &batch, &without, &eps, 3);
    for (name, g) in g1.iter() {
        if !name.starts_with("spk_clf") {
            assert_eq!(g, g0.get(name).unwrap(), "{name}");
        }
    }
    assert_ne!(g1.get("spk_clf.out.w"), g0.get("spk_clf.out.w"));
}

#[test]
fn disabled_residual_encoder_gives_zero_kl() {
    let cfg = tiny_config(9, 4);
    let params = random_params(&cfg, 8, 0.5);
    let mut r = rng(7);
    let batch = random_batch(&mut r, 9, 4, &[(3, 3), (4, 4)]);
    let tc = TrainConfig { use_residual_encoder: false, ..TrainConfig::desk(10) };
    let (loss, grads) = forward(&cfg, &params, &batch, &tc, &Tensor::zeros(&[2, 2]), 5);
    assert_eq!(loss.kl, 0.0);
    for name in ["res.mu.w", "res.logvar.w", "res.cell.wf_x"] {
        assert!(grads.get(name).unwrap().data().iter().all(|&x| x == 0.0), "{name}");
    }
}

#[test]
fn adam_rules() {
    let mut params: ParamSet = [("w".to_string(), Tensor::vector(vec![1.0, -2.0]))].into_iter().collect();
    let mut state = AdamState::new(&params);
    let before = params.clone();
    adam_step(&mut params, &GradMap::new(), &mut state, 1e-3);
    assert_eq!(params, before);
    assert_eq!(state.step, 1);

    let mut params: ParamSet = [("w".to_string(), Tensor::scalar(0.5))].into_iter().collect();
    let mut state = AdamState::new(&params);
    let mut g = GradMap::new();
    g.insert("w", Tensor::scalar(3.0));
    adam_step(&mut params, &g, &mut state, 1e-3);
    let moved = 0.5 - params.get("w").unwrap().data()[0];
    assert!((moved - 1e-3).abs() < 1e-9, "{moved}");

    // Hand-rolled reference for a few steps with varying gradients.
    let grads = [0.3, -1.2, 0.05, 2.0];
    let mut params: ParamSet = [("w".to_string(), Tensor::scalar(0.1))].into_iter().collect();
    let mut state = AdamState::new(&params);
    let (mut w, mut m, mut v) = (0.1f64, 0.0f64, 0.0f64);
    for (t, &gv) in grads.iter().enumerate() {
        let mut g = GradMap::new();
        g.insert("w", Tensor::scalar(gv));
        adam_step(&mut params, &g, &mut state, 0.01);
        m = 0.9 * m + 0.1 * gv;
        v = 0.999 * v + 0.001 * gv * gv;
        let k = t as i32 + 1;
        w -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        assert!((params.get("w").unwrap().data()[0] - w).abs() < 1e-15);
    }
    let round = AdamState::from_params(&state.to_params(), state.step);
    assert_eq!(round, state);
}

/// Examples of the noise-free two-language corpus with `n` utterances per
/// speaker, plus a frontend and a tiny model config.
fn tiny_setup(n: usize) -> (ModelConfig, polysynth::textfront::Frontend, Vec<Example>) {
    let spec = clean_spec(n);
    let fe = phoneme_frontend(&spec);
    let ex = toy_examples(&spec, &fe, 11);
    let cfg = ModelConfig {
        n_mels: 128,
        max_decoder_frames: 80,
        ..tiny_config(fe.vocab.size(), 128)
    };
    (cfg, fe, ex)
}

fn tiny_trainer(steps: u64, seed: u64) -> Trainer {
    let (cfg, fe, ex) = tiny_setup(3);
    let tc = TrainConfig {
        batch_size: 4,
        seed,
        log_interval: 2,
        ..TrainConfig::desk(steps)
    };
    Trainer::new(tc, cfg, fe, ex).unwrap()
}

#[test]
fn metrics_and_checkpoints_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_trainer(6, 1).run(a.path(), |_| {}).unwrap();
    tiny_trainer(6, 1).run(b.path(), |_| {}).unwrap();
    let csv = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len() - 1, 6 / 2);
    assert!(lines[1].starts_with("2,"));
    for f in [METRICS_FILE, "params.nten", OPTIMIZER_FILE, STATE_FILE, VOCAB_FILE, LEXICON_FILE, "config.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    tiny_trainer(6, 2).run(straight.path(), |_| {}).unwrap();

    let mut first = tiny_trainer(6, 2);
    for _ in 0..3 {
        first.train_step().unwrap();
    }
    first.save_checkpoint(split.path()).unwrap();
    let examples = first.examples().to_vec();
    let mut resumed = Trainer::resume(split.path(), examples).unwrap();
    assert_eq!(resumed.step(), 3);
    assert_eq!(resumed.cfg.lr(resumed.step()), lr_schedule(1e-3, 3.0, 0.75, 3));
    while resumed.step() < 6 {
        resumed.train_step().unwrap();
    }
    resumed.save_checkpoint(split.path()).unwrap();
    assert_eq!(
        std::fs::read(straight.path().join("params.nten")).unwrap(),
        std::fs::read(split.path().join("params.nten")).unwrap()
    );
}

#[test]
fn checkpoint_save_load_save_is_stable_and_names_missing_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut t = tiny_trainer(4, 3);
    t.train_step().unwrap();
    t.save_checkpoint(a.path()).unwrap();
    let resumed = Trainer::resume(a.path(), Vec::new()).unwrap();
    resumed.save_checkpoint(b.path()).unwrap();
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
    std::fs::remove_file(a.path().join(OPTIMIZER_FILE)).unwrap();
    let err = load_checkpoint(a.path()).err().unwrap().to_string();
    assert!(err.contains(OPTIMIZER_FILE), "{err}");
}

#[test]
fn exploding_loss_aborts_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = tiny_trainer(4, 4);
    t.params.get_mut("dec.frame.b").unwrap().data_mut().iter_mut().for_each(|x| *x = 1e4);
    match t.run(dir.path(), |_| {}) {
        Err(TrainError::Diverged { step, loss, .. }) => {
            assert_eq!(step, 0);
            assert!(loss > DIVERGENCE_LIMIT);
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

fn speaker_ce(cfg: &ModelConfig, params: &ParamSet, batch: &Batch) -> f64 {
    let tc = TrainConfig::desk(10);
    let eps = Tensor::zeros(&[batch.size, cfg.latent_dim]);
    forward(cfg, params, batch, &tc, &eps, 5).0.spk
}

/// Loss and gradients with the classifier frozen and only the speaker term.
fn adversarial_grads(cfg: &ModelConfig, params: &ParamSet, batch: &Batch, freeze_classifier: bool) -> GradMap {
    let tc = TrainConfig {
        w_syn: 0.0,
        kl_weight: 0.0,
        ..TrainConfig::desk(10)
    };
    let mut tape = Tape::new();
    let bound = params.bind_with(&mut tape, |n| ModelConfig::is_classifier_param(n) == freeze_classifier);
    let m = Model::new(cfg, &bound);
    let eps = Tensor::zeros(&[batch.size, cfg.latent_dim]);
    let out = m
        .teacher_forced(&mut tape, batch, &Latent::Sample(eps), ClassifierInput::Reversed { lambda: 1.0, clip: 0.5 })
        .unwrap();
    let loss = compose_loss(&mut tape, &out, batch, &tc, 5).unwrap();
    bound.grads(&tape.backward(loss.total).unwrap())
}

fn descend(params: &ParamSet, grads: &GradMap, lr: f64) -> ParamSet {
    params
        .iter()
        .map(|(k, t)| {
            let mut t = t.clone();
            if let Some(g) = grads.get(k) {
                for (x, gi) in t.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * gi;
                }
            }
            (k.clone(), t)
        })
        .collect()
}

#[test]
fn adversarial_and_classifier_steps_pull_in_opposite_directions() {
    let (cfg, _, ex) = tiny_setup(2);
    let params = random_params(&cfg, 9, 0.4);
    let batch = pad_batch(&ex).unwrap();
    let before = speaker_ce(&cfg, &params, &batch);

    let enc_step = descend(&params, &adversarial_grads(&cfg, &params, &batch, true), 1e-2);
    let after_enc = speaker_ce(&cfg, &enc_step, &batch);
    assert!(after_enc > before, "{after_enc} <= {before}");

    let clf_step = descend(&params, &adversarial_grads(&cfg, &params, &batch, false), 1e-2);
    let after_clf = speaker_ce(&cfg, &clf_step, &batch);
    assert!(after_clf < before, "{after_clf} >= {before}");
}

#[test]
fn frontend_and_examples_from_a_generated_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let spec = clean_spec(4);
    polysynth::corpus::gen_toy_corpus(3, &spec, dir.path()).unwrap();
    let manifest = polysynth::corpus::load_manifest(dir.path().join(polysynth::corpus::TRAIN_FILE)).unwrap();
    for kind in [
        polysynth::textfront::RepresentationKind::Grapheme,
        polysynth::textfront::RepresentationKind::Byte,
        polysynth::textfront::RepresentationKind::Phoneme,
    ] {
        let fe = build_frontend(kind, &manifest, Some(spec.lexicon())).unwrap();
        let ex = load_examples(&manifest, &fe).unwrap();
        assert_eq!(ex.len(), manifest.records.len());
        let mc = model_config_for(&fe, &ex);
        assert_eq!((mc.speaker_count, mc.language_count, mc.repr_kind), (2, 2, kind));
        for e in &ex {
            fe.vocab.validate(&e.tokens).unwrap();
        }
    }
}
