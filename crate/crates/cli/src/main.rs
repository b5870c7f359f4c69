use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use polysynth::corpus::{gen_toy_corpus, load_manifest, oracle_mel, CorpusSpec, MelSpectrogram};
use polysynth::evalsuite::{
    alignment_image, diagonality_report, diagonality_texts, evaluate, fresh_texts, mean_frame, mel_image, pca2, write_pgm,
    EvalConfig, ProbeConfig,
};
use polysynth::synthesizer::synthesize;
use polysynth::textfront::RepresentationKind;
use polysynth::trainer::{build_frontend, load_checkpoint, load_examples, model_config_for, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "polysynth", version, about = "Multilingual multispeaker spectrogram synthesis on toy languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy corpus from a corpus spec.
    GenData(GenDataArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Synthesize one text into a mel spectrogram.
    Synthesize(SynthesizeArgs),
    /// Probe, diagonality and cloning report for a checkpoint.
    Eval(EvalArgs),
    /// Render a mel spectrogram as a grayscale image.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Corpus spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Repr {
    Grapheme,
    Byte,
    Phoneme,
}

impl From<Repr> for RepresentationKind {
    fn from(r: Repr) -> Self {
        match r {
            Repr::Grapheme => RepresentationKind::Grapheme,
            Repr::Byte => RepresentationKind::Byte,
            Repr::Phoneme => RepresentationKind::Phoneme,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    repr: Repr,
    /// Checkpoint and metrics directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_adversarial: bool,
    #[arg(long)]
    no_residual_encoder: bool,
    /// Gradient reversal scale.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch 16 with the decay schedule scaled to the run length.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    speaker: usize,
    #[arg(long)]
    language: usize,
    /// Output MELF; the alignment goes next to it as `.align.pgm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// JSON report; CSV and PGM artifacts go to `<stem>_artifacts/`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    probe_steps: Option<usize>,
    #[arg(long, default_value_t = 50)]
    n_cloning: usize,
    #[arg(long, default_value_t = 50)]
    n_diagonality: usize,
    #[arg(long, default_value_t = 2)]
    band: usize,
    /// Alignment and mel images written per category.
    #[arg(long, default_value_t = 4)]
    figures: usize,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    melf: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `out.melf` -> `out.<suffix>`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec: CorpusSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.spec.display()))?;
    let corpus = gen_toy_corpus(a.seed, &spec, &a.out)?;
    write_json(
        &a.out.join("run.json"),
        &json!({
            "command": "gen-data",
            "seed": a.seed,
            "spec_path": a.spec,
            "out": a.out,
            "spec": spec,
        }),
    )?;
    eprintln!("wrote {} utterances to {}", corpus.utterances.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let kind: RepresentationKind = a.repr.into();
    let lexicon = match kind {
        RepresentationKind::Phoneme => manifest.corpus_spec()?.map(|s| s.lexicon()),
        _ => None,
    };
    let frontend = build_frontend(kind, &manifest, lexicon)?;
    let examples = load_examples(&manifest, &frontend)?;

    let mut trainer = if a.resume {
        let t = Trainer::resume(&a.out, examples)?;
        if t.frontend != frontend {
            bail!("checkpoint in {} was trained with a different vocabulary", a.out.display());
        }
        t
    } else {
        let steps = a.steps.unwrap_or(TrainConfig::default().total_steps);
        let mut cfg = if a.desk_scale { TrainConfig::desk(steps) } else { TrainConfig { total_steps: steps, ..TrainConfig::default() } };
        cfg.seed = a.seed;
        cfg.adversarial_enabled = !a.no_adversarial;
        cfg.use_residual_encoder = !a.no_residual_encoder;
        if let Some(l) = a.lambda {
            cfg.grl_lambda = l;
        }
        if let Some(b) = a.batch_size {
            cfg.batch_size = b;
        }
        if let Some(l) = a.log_interval {
            cfg.log_interval = l;
        }
        if let Some(c) = a.checkpoint_interval {
            cfg.checkpoint_interval = c;
        }
        let model_cfg = model_config_for(&frontend, &examples);
        Trainer::new(cfg, model_cfg, frontend, examples)?
    };
    if a.resume {
        if let Some(s) = a.steps {
            trainer.cfg.total_steps = s;
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(
        &a.out.join("run.json"),
        &json!({
            "command": "train",
            "seed": trainer.cfg.seed,
            "manifest": a.manifest,
            "repr": format!("{:?}", a.repr).to_lowercase(),
            "out": a.out,
            "resume": a.resume,
            "train_config": trainer.cfg,
            "model_config": trainer.model_cfg,
        }),
    )?;

    let total = trainer.cfg.total_steps;
    let every = (total / 20).max(1);
    trainer.run(&a.out, |r| {
        if r.step % every == 0 || r.step == total {
            eprintln!(
                "step {}/{} lr {:.3e} loss {:.5} mel {:.5} stop {:.5} kl {:.4} spk {:.4}",
                r.step, total, r.lr, r.loss.total, r.loss.mel, r.loss.stop, r.loss.kl, r.loss.spk
            );
        }
    })?;
    Ok(())
}

fn synthesize_cmd(a: SynthesizeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let seq = ck.frontend.encode(&a.text, None, a.language)?;
    let syn = synthesize(&ck.model_cfg, &ck.params, &seq, a.speaker, a.language)?;
    ensure_parent(&a.out)?;
    syn.mel.save(&a.out)?;
    let (w, h, v) = alignment_image(&syn.alignment);
    let align = sibling(&a.out, "align.pgm");
    write_pgm(&align, w, h, &v)?;
    write_json(
        &sibling(&a.out, "run.json"),
        &json!({
            "command": "synthesize",
            "ckpt": a.ckpt,
            "text": a.text,
            "speaker": a.speaker,
            "language": a.language,
            "out": a.out,
            "alignment": align,
            "frames": syn.mel.frames(),
            "hit_max_frames": syn.hit_max_frames,
            "model_config": ck.model_cfg,
        }),
    )?;
    if syn.hit_max_frames {
        eprintln!("warning: decoding stopped at the frame limit ({})", ck.model_cfg.max_decoder_frames);
    }
    Ok(())
}

fn write_pca_csv(path: &Path, header: &str, labels: &[String], vectors: &[Vec<f64>]) -> Result<()> {
    let pca = pca2(vectors)?;
    let mut s = format!("{header},pc1,pc2\n");
    for (l, c) in labels.iter().zip(&pca.coords) {
        s.push_str(&format!("{l},{},{}\n", c[0], c[1]));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn write_mel_pgm(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let (w, h, v) = mel_image(mel);
    Ok(write_pgm(path, w, h, &v)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let manifest = load_manifest(&a.manifest)?;
    let examples = load_examples(&manifest, &ck.frontend)?;
    let spec = manifest.corpus_spec()?;
    let mut probe = ProbeConfig {
        seed: a.seed,
        ..ProbeConfig::default()
    };
    if let Some(s) = a.probe_steps {
        probe.steps = s;
    }
    let cfg = EvalConfig {
        probe,
        band: a.band,
        n_diagonality: a.n_diagonality,
        n_cloning: a.n_cloning,
        seed: a.seed,
    };
    let report = evaluate(&ck.model_cfg, &ck.params, &ck.frontend, &examples, spec.as_ref(), &cfg)?;
    ensure_parent(&a.report)?;
    write_json(&a.report, &serde_json::to_value(&report)?)?;

    let art = a.report.with_file_name(format!("{}_artifacts", a.report.file_stem().unwrap_or_default().to_string_lossy()));
    fs::create_dir_all(&art).with_context(|| format!("creating {}", art.display()))?;
    if let Some(pca) = &report.speaker_pca {
        let mut s = String::from("speaker,pc1,pc2\n");
        for (i, c) in pca.coords.iter().enumerate() {
            s.push_str(&format!("{i},{},{}\n", c[0], c[1]));
        }
        fs::write(art.join("speaker_embeddings_pca.csv"), s)?;
    }
    if let Some(spec) = &spec {
        // Alignments of native syntheses.
        let texts = diagonality_texts(spec, a.n_diagonality, a.seed)?;
        let (_, syns) = diagonality_report(&ck.model_cfg, &ck.params, &ck.frontend, spec, &texts, a.band)?;
        for (k, s) in syns.iter().take(a.figures).enumerate() {
            let (w, h, v) = alignment_image(&s.alignment);
            write_pgm(&art.join(format!("align_{k:03}.pgm")), w, h, &v)?;
        }

        // Utterance-level PCA over every speaker x language pairing, plus
        // synthesized-vs-oracle images for the first few texts of each.
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        for s in &spec.speakers {
            for lang in &spec.languages {
                let texts = fresh_texts(spec, lang.language_id, a.n_cloning, a.seed)?;
                for (k, t) in texts.iter().enumerate() {
                    let seq = ck.frontend.encode(&t.text, Some(&lang.phonemes(&t.units)), t.language)?;
                    let syn = synthesize(&ck.model_cfg, &ck.params, &seq, s.speaker_id, lang.language_id)?;
                    labels.push(format!("{},{}", s.speaker_id, lang.language_id));
                    vectors.push(mean_frame(&syn.mel));
                    if k < a.figures {
                        let stem = format!("mel_s{}_l{}_{k:03}", s.speaker_id, lang.language_id);
                        write_mel_pgm(&art.join(format!("{stem}_synth.pgm")), &syn.mel)?;
                        for o in &spec.speakers {
                            let oracle = oracle_mel(&t.units, lang, o)?;
                            write_mel_pgm(&art.join(format!("{stem}_oracle_s{}.pgm", o.speaker_id)), &oracle)?;
                        }
                    }
                }
            }
        }
        if vectors.len() >= 2 {
            write_pca_csv(&art.join("utterance_pca.csv"), "speaker,language", &labels, &vectors)?;
        }
    }
    write_json(
        &sibling(&a.report, "run.json"),
        &json!({
            "command": "eval",
            "ckpt": a.ckpt,
            "manifest": a.manifest,
            "report": a.report,
            "artifacts": art,
            "figures": a.figures,
            "eval_config": cfg,
            "model_config": ck.model_cfg,
        }),
    )?;

    eprintln!(
        "probe accuracy {:.3} (chance {:.3}, informative: {})",
        report.probe.held_out_accuracy, report.probe.chance_level, report.probe_informative
    );
    if let Some(d) = &report.diagonality {
        eprintln!("diagonality {:.3} ({} hit max frames)", d.mean, d.hit_max_frames);
    }
    for c in &report.cloning {
        eprintln!(
            "cloning speaker {} -> language {}: {:.2} correct ({} hit max frames)",
            c.target_speaker, c.language, c.fraction_correct, c.hit_max_frames
        );
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let mel = MelSpectrogram::load(&a.melf)?;
    ensure_parent(&a.out)?;
    write_mel_pgm(&a.out, &mel)?;
    write_json(
        &sibling(&a.out, "run.json"),
        &json!({
            "command": "plot",
            "melf": a.melf,
            "out": a.out,
            "width": mel.frames(),
            "height": mel.n_mels(),
        }),
    )
}
