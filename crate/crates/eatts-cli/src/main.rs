//! eatts: corpus construction, extractor and TTS training, synthesis and
//! objective evaluation, plus a one-command desk-scale reproduction.

use clap::{Args, Parser, Subcommand};
use eatts::checkpoint::Container;
use eatts::corpus::{
    build_extractor_corpus, build_tts_corpus, corpus_dir_of, load_environments, FeatureStore,
    GroupBy, Manifest, PairingPlan,
};
use eatts::dsp::{
    griffin_lim, mel_spectrogram, read_wav, write_wav, MelSpectrogram, StftMelConfig, WavFormat,
};
use eatts::error::{EattsError, Result};
use eatts::eval::{
    dump_embeddings, eval_mcd, leakage_probe, seen_combo_case, topk_accuracy, train_probe,
    unseen_both_case, unseen_combo_case, CaseId, EvalCase,
};
use eatts::extractor::{train_extractor, ExtractorModel};
use eatts::pipeline::{repro_desk, Preset, RunConfig};
use eatts::rng::Rng;
use eatts::synth::{train_tts, SynthModel, TrainMode, TtsTrainOptions};
use eatts::util::fmt_f64;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "eatts", version, about = "Environment-aware TTS at desk scale")]
struct Cli {
    /// Worker threads for corpus rendering and evaluation. 1 guarantees
    /// bitwise determinism (parallel stages are order-preserving anyway).
    /// Also honors the EATTS_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dataset construction.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Feature extraction.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Embedding extractor training and inference.
    #[command(subcommand)]
    Extractor(ExtractorCmd),
    /// Conditioned TTS training and synthesis.
    #[command(subcommand)]
    Tts(TtsCmd),
    /// Objective evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// End-to-end reproduction runs.
    #[command(subcommand)]
    Repro(ReproCmd),
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value override file (one per line, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline key=value override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, preset: Preset, seed: u64) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(preset, seed);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| EattsError::io(path.display().to_string(), e))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                EattsError::Config(format!("--set expects key=value, got '{kv}'"))
            })?;
            cfg.apply_override(k, v)?;
        }
        cfg.seed = seed;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Cross corpus for extractor training: speakers x environments.
    BuildExtractor {
        #[arg(long)]
        out: PathBuf,
        /// Environment count.
        #[arg(long, default_value_t = 8)]
        envs: usize,
        /// Speakers heard in every environment.
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        /// Utterances per speaker-environment cell.
        #[arg(long, default_value_t = 10)]
        utts: usize,
        /// Identifier namespace prefix, keeps corpora disjoint.
        #[arg(long, default_value = "x")]
        ns: String,
        /// Environment-library namespace: corpora built with the same
        /// env-ns and env-seed share identical rooms.
        #[arg(long, default_value = "xv")]
        env_ns: String,
        /// Environment-library seed (defaults to --seed).
        #[arg(long)]
        env_seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fully entangled TTS corpus: one environment per speaker.
    BuildTts {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        pairs: usize,
        #[arg(long, default_value_t = 40)]
        utts: usize,
        #[arg(long, default_value_t = 0.05)]
        heldout_pair_frac: f64,
        #[arg(long, default_value_t = 0.05)]
        heldout_utt_frac: f64,
        #[arg(long, default_value = "t")]
        ns: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render mel features for every utterance of a manifest into one
    /// EATTS1 container (one record per utterance id).
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// STFT/mel features of a single WAV into an EATTS1 container.
    Extract {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value STFT overrides (win_length, hop_length, fft_size,
        /// n_mels, fmin, fmax).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ExtractorCmd {
    /// GE2E training of a speaker or environment extractor.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_name = "speaker|environment")]
        group_by: String,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Utterance embeddings, one line per input: utt_id then the vector.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        /// WAV inputs (repeatable).
        #[arg(long)]
        wav: Vec<PathBuf>,
        /// EATTS1 mel containers (repeatable, record "mel").
        #[arg(long)]
        mel: Vec<PathBuf>,
        /// Embed every utterance of a manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TtsCmd {
    /// Train the conditioned synthesizer (proposed or baseline objective).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        spk_ckpt: PathBuf,
        #[arg(long)]
        env_ckpt: PathBuf,
        #[arg(long, value_name = "proposed|baseline", default_value = "proposed")]
        mode: String,
        /// Freeze the pretrained extractors (proposed mode). Disable to
        /// fine-tune them jointly under the total loss.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        freeze: bool,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Synthesize a mel-spectrogram (and optionally a waveform).
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// One line: space-separated symbol ids, TAB, comma-separated
        /// per-symbol frame durations.
        #[arg(long)]
        text_file: PathBuf,
        /// Reference WAV for the speaker embedding.
        #[arg(long)]
        spk_ref: PathBuf,
        /// Reference WAV for the environment embedding.
        #[arg(long)]
        env_ref: PathBuf,
        #[arg(long)]
        out_mel: PathBuf,
        /// Optional Griffin-Lim waveform output.
        #[arg(long)]
        out_wav: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        gl_iters: usize,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// MCD between synthesized and ground-truth speech for one case.
    Mcd {
        #[arg(long, value_name = "seen_combo|unseen_combo|unseen_both")]
        case: String,
        #[arg(long)]
        tts_ckpt: PathBuf,
        /// TTS corpus manifest; pairs.tsv and envs/ are read from its
        /// directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Seed the TTS corpus was built with (re-derives speaker voices
        /// for ground-truth rendering).
        #[arg(long)]
        corpus_seed: u64,
        #[arg(long, default_value_t = 12)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear-probe classification of natural heldout embeddings.
    Classify {
        #[arg(long)]
        spk_ckpt: PathBuf,
        #[arg(long)]
        env_ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-factor leakage probe on a cross corpus.
    Leakage {
        #[arg(long)]
        spk_ckpt: PathBuf,
        #[arg(long)]
        env_ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labeled embedding dump with a 2-D PCA companion file.
    Dump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReproCmd {
    /// Full desk-scale reproduction: corpora, extractors, both TTS systems,
    /// MCD cases, leakage and classification, embedding dumps, summary TSV.
    Desk {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn read_manifest_and_store(manifest_path: &Path) -> Result<(Manifest, FeatureStore, PathBuf)> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = corpus_dir_of(manifest_path);
    let store = FeatureStore::build(&manifest, &dir, &StftMelConfig::default())?;
    Ok((manifest, store, dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| EattsError::io(path.display().to_string(), e))
}

fn mel_to_container(mel: &MelSpectrogram) -> Container {
    let mut c = Container::new();
    c.push_f64(
        "mel",
        vec![mel.n_frames, mel.n_mels],
        mel.data.clone(),
    );
    c.push_u64("config_hash", vec![mel.config_hash]);
    c
}

fn mel_from_container(c: &Container) -> Result<MelSpectrogram> {
    let (dims, data) = c.get_f64("mel")?;
    if dims.len() != 2 {
        return Err(EattsError::Checkpoint("mel record must be rank 2".into()));
    }
    let hash = c.get_u64_scalar("config_hash").unwrap_or(0);
    Ok(MelSpectrogram::new(dims[0], dims[1], data.to_vec(), hash))
}

fn parse_stft_overrides(path: &Path) -> Result<StftMelConfig> {
    let mut cfg = StftMelConfig::default();
    let text =
        std::fs::read_to_string(path).map_err(|e| EattsError::io(path.display().to_string(), e))?;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| EattsError::Config(format!("expected key=value, got '{line}'")))?;
        let bad = |e: &dyn std::fmt::Display| EattsError::Config(format!("{k}: {e}"));
        match k.trim() {
            "win_length" => cfg.win_length = v.trim().parse().map_err(|e| bad(&e))?,
            "hop_length" => cfg.hop_length = v.trim().parse().map_err(|e| bad(&e))?,
            "fft_size" => cfg.fft_size = v.trim().parse().map_err(|e| bad(&e))?,
            "n_mels" => cfg.n_mels = v.trim().parse().map_err(|e| bad(&e))?,
            "fmin" => cfg.fmin = v.trim().parse().map_err(|e| bad(&e))?,
            "fmax" => cfg.fmax = v.trim().parse().map_err(|e| bad(&e))?,
            other => {
                return Err(EattsError::Config(format!(
                    "unknown STFT key '{other}'"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_text_file(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| EattsError::io(path.display().to_string(), e))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| EattsError::EmptyInput("empty text file".into()))?;
    let (sym_part, dur_part) = line.split_once('\t').ok_or_else(|| EattsError::Parse {
        path: path.display().to_string(),
        detail: "expected 'symbols<TAB>durations'".into(),
    })?;
    let bad = |what: &str, e: &dyn std::fmt::Display| EattsError::Parse {
        path: path.display().to_string(),
        detail: format!("{what}: {e}"),
    };
    let symbols = sym_part
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| bad("symbol", &e)))
        .collect::<Result<Vec<_>>>()?;
    let durations = dur_part
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| bad("duration", &e)))
        .collect::<Result<Vec<_>>>()?;
    Ok((symbols, durations))
}

fn build_case(
    case: CaseId,
    manifest: &Manifest,
    plan: &PairingPlan,
    trials: usize,
    rng: &mut Rng,
) -> Result<EvalCase> {
    match case {
        CaseId::SeenCombo => seen_combo_case(manifest, plan, trials, rng),
        CaseId::UnseenCombo => unseen_combo_case(manifest, plan, trials, rng),
        CaseId::UnseenBoth => unseen_both_case(manifest, plan, trials, rng),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("EATTS_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1);
    eatts::util::set_threads(threads);

    match cli.cmd {
        Cmd::Corpus(c) => match c {
            CorpusCmd::BuildExtractor {
                out,
                envs,
                speakers,
                utts,
                ns,
                env_ns,
                env_seed,
                seed,
            } => {
                let env_seed = env_seed.unwrap_or(seed);
                let manifest = build_extractor_corpus(
                    &ns, &env_ns, env_seed, envs, speakers, utts, &out, seed,
                )?;
                write_text(
                    &out.join("config.txt"),
                    &format!(
                        "ns={ns}\nenv_ns={env_ns}\nenv_seed={env_seed}\nenvs={envs}\nspeakers={speakers}\nutts={utts}\nseed={seed}\n"
                    ),
                )?;
                println!("{} utterances -> {}", manifest.records.len(), out.display());
            }
            CorpusCmd::BuildTts {
                out,
                pairs,
                utts,
                heldout_pair_frac,
                heldout_utt_frac,
                ns,
                seed,
            } => {
                let (manifest, plan) = build_tts_corpus(
                    &ns,
                    pairs,
                    utts,
                    heldout_pair_frac,
                    heldout_utt_frac,
                    &out,
                    seed,
                )?;
                write_text(
                    &out.join("config.txt"),
                    &format!(
                        "ns={ns}\npairs={pairs}\nutts={utts}\nheldout_pair_frac={heldout_pair_frac}\nheldout_utt_frac={heldout_utt_frac}\nseed={seed}\n"
                    ),
                )?;
                println!(
                    "{} utterances, {} heldout pairs -> {}",
                    manifest.records.len(),
                    plan.heldout_pairs.len(),
                    out.display()
                );
            }
            CorpusCmd::Render { manifest, out } => {
                let m = Manifest::read(&manifest)?;
                let dir = corpus_dir_of(&manifest);
                let cfg = StftMelConfig::default();
                let store = FeatureStore::build(&m, &dir, &cfg)?;
                let mut c = Container::new();
                c.push_u64("config_hash", vec![cfg.config_hash()]);
                for rec in &m.records {
                    let mel = store.get(&rec.utt_id)?;
                    c.push_f64(
                        rec.utt_id.clone(),
                        vec![mel.n_frames, mel.n_mels],
                        mel.data.clone(),
                    );
                }
                c.write(&out)?;
                println!("{} feature records -> {}", m.records.len(), out.display());
            }
        },
        Cmd::Features(f) => match f {
            FeaturesCmd::Extract { wav, out, config } => {
                let cfg = match config {
                    Some(path) => parse_stft_overrides(&path)?,
                    None => StftMelConfig::default(),
                };
                let w = read_wav(&wav)?;
                let mel = mel_spectrogram(&w, &cfg)?;
                mel_to_container(&mel).write(&out)?;
                println!("{} frames x {} mels -> {}", mel.n_frames, mel.n_mels, out.display());
            }
        },
        Cmd::Extractor(e) => match e {
            ExtractorCmd::Train {
                manifest,
                group_by,
                steps,
                seed,
                out,
                config,
            } => {
                let cfg = config.resolve(Preset::Desk, seed)?;
                let (m, store, _) = read_manifest_and_store(&manifest)?;
                let group_by = GroupBy::parse(&group_by)?;
                let (model, losses) =
                    train_extractor(&m, &store, group_by, cfg.extractor.clone(), steps, seed)?;
                model.save(&out)?;
                let first = losses.first().copied().unwrap_or(0.0);
                let last = losses.last().copied().unwrap_or(0.0);
                println!(
                    "trained {steps} steps, loss {} -> {}, checkpoint {}",
                    fmt_f64(first),
                    fmt_f64(last),
                    out.display()
                );
            }
            ExtractorCmd::Embed {
                ckpt,
                wav,
                mel,
                manifest,
                out,
            } => {
                let model = ExtractorModel::load(&ckpt)?;
                let cfg = StftMelConfig::default();
                let mut lines = Vec::new();
                let mut emit = |utt_id: &str, mel: &MelSpectrogram| -> Result<()> {
                    let emb = model.infer_utterance(mel)?;
                    let mut line = utt_id.to_string();
                    for v in emb {
                        line.push('\t');
                        line.push_str(&fmt_f64(v as f64));
                    }
                    lines.push(line);
                    Ok(())
                };
                for path in &wav {
                    let w = read_wav(path)?;
                    let mel = mel_spectrogram(&w, &cfg)?;
                    let id = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().to_string())
                        .unwrap_or_else(|| path.display().to_string());
                    emit(&id, &mel)?;
                }
                for path in &mel {
                    let c = Container::read(path)?;
                    let m = mel_from_container(&c)?;
                    let id = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().to_string())
                        .unwrap_or_else(|| path.display().to_string());
                    emit(&id, &m)?;
                }
                if let Some(manifest_path) = &manifest {
                    let (m, store, _) = read_manifest_and_store(manifest_path)?;
                    for rec in &m.records {
                        emit(&rec.utt_id, store.get(&rec.utt_id)?)?;
                    }
                }
                if lines.is_empty() {
                    return Err(EattsError::EmptyInput(
                        "no inputs: pass --wav, --mel or --manifest".into(),
                    ));
                }
                write_text(&out, &(lines.join("\n") + "\n"))?;
                println!("{} embeddings -> {}", lines.len(), out.display());
            }
        },
        Cmd::Tts(t) => match t {
            TtsCmd::Train {
                manifest,
                spk_ckpt,
                env_ckpt,
                mode,
                freeze,
                steps,
                seed,
                out,
                config,
            } => {
                let cfg = config.resolve(Preset::Desk, seed)?;
                let (m, store, _) = read_manifest_and_store(&manifest)?;
                let spk = ExtractorModel::load(&spk_ckpt)?;
                let env = ExtractorModel::load(&env_ckpt)?;
                let mode = TrainMode::parse(&mode)?;
                let mut synth_cfg = cfg.synth.clone();
                synth_cfg.spk_embed_dim = spk.config.embed_dim;
                synth_cfg.env_embed_dim = env.config.embed_dim;
                let (model, trace) = train_tts(
                    &m,
                    &store,
                    &spk,
                    &env,
                    synth_cfg,
                    TtsTrainOptions {
                        mode,
                        freeze_extractors: freeze,
                        n_steps: steps,
                        seed,
                    },
                )?;
                model.save(&out)?;
                let first = trace.first().map(|b| b.total).unwrap_or(0.0);
                let last = trace.last().map(|b| b.total).unwrap_or(0.0);
                println!(
                    "trained {steps} steps ({}), loss {} -> {}, checkpoint {}",
                    mode.as_str(),
                    fmt_f64(first),
                    fmt_f64(last),
                    out.display()
                );
            }
            TtsCmd::Synth {
                ckpt,
                text_file,
                spk_ref,
                env_ref,
                out_mel,
                out_wav,
                gl_iters,
            } => {
                let model = SynthModel::load(&ckpt)?;
                let (symbols, durations) = parse_text_file(&text_file)?;
                let cfg = StftMelConfig::default();
                let spk_mel = mel_spectrogram(&read_wav(&spk_ref)?, &cfg)?;
                let env_mel = mel_spectrogram(&read_wav(&env_ref)?, &cfg)?;
                let mel = model.synthesize(
                    &symbols,
                    &durations,
                    &spk_mel,
                    &env_mel,
                    cfg.config_hash(),
                )?;
                mel_to_container(&mel).write(&out_mel)?;
                println!("{} frames -> {}", mel.n_frames, out_mel.display());
                if let Some(wav_path) = out_wav {
                    let gl = griffin_lim(&mel, &cfg, gl_iters)?;
                    write_wav(&wav_path, &gl.waveform.limited_to(0.99), WavFormat::Float32)?;
                    println!("waveform -> {}", wav_path.display());
                }
            }
        },
        Cmd::Eval(e) => match e {
            EvalCmd::Mcd {
                case,
                tts_ckpt,
                manifest,
                corpus_seed,
                trials,
                seed,
                out,
            } => {
                let case = CaseId::parse(&case)?;
                let model = SynthModel::load(&tts_ckpt)?;
                let (m, store, dir) = read_manifest_and_store(&manifest)?;
                let plan_text = std::fs::read_to_string(dir.join("pairs.tsv"))
                    .map_err(|e| EattsError::io(dir.display().to_string(), e))?;
                let plan = PairingPlan::parse(&plan_text)?;
                let envs = load_environments(&dir, &m)?;
                let mut rng = Rng::new(seed);
                let eval_case = build_case(case, &m, &plan, trials, &mut rng)?;
                let cfg = StftMelConfig::default();
                let report = eval_mcd(&eval_case, &model, &store, &envs, corpus_seed, &cfg)?;
                let mut text = String::from("trial\tspeaker_id\tenv_id\tmcd\n");
                for (i, (trial, v)) in eval_case
                    .trials
                    .iter()
                    .zip(report.per_trial.iter())
                    .enumerate()
                {
                    text.push_str(&format!(
                        "{i}\t{}\t{}\t{}\n",
                        trial.speaker_id,
                        trial.env_id,
                        fmt_f64(*v)
                    ));
                }
                text.push_str(&format!("mean\t-\t-\t{}\n", fmt_f64(report.mean)));
                write_text(&out, &text)?;
                println!(
                    "{} trials, mean MCD {} -> {}",
                    report.per_trial.len(),
                    fmt_f64(report.mean),
                    out.display()
                );
            }
            EvalCmd::Classify {
                spk_ckpt,
                env_ckpt,
                manifest,
                seed,
                out,
            } => {
                let spk = ExtractorModel::load(&spk_ckpt)?;
                let env = ExtractorModel::load(&env_ckpt)?;
                let (m, store, _) = read_manifest_and_store(&manifest)?;
                let mut rows = String::from("factor\tsplit\ttop1\ttop5\n");
                for (name, model, by) in [
                    ("speaker", &spk, GroupBy::Speaker),
                    ("environment", &env, GroupBy::Environment),
                ] {
                    let mut train_embs = Vec::new();
                    let mut train_labels = Vec::new();
                    let mut held_embs = Vec::new();
                    let mut held_labels = Vec::new();
                    for rec in &m.records {
                        let emb = model.infer_utterance(store.get(&rec.utt_id)?)?;
                        let label = by.key(rec).to_string();
                        match rec.split {
                            eatts::corpus::Split::Train => {
                                train_embs.push(emb);
                                train_labels.push(label);
                            }
                            eatts::corpus::Split::Heldout => {
                                held_embs.push(emb);
                                held_labels.push(label);
                            }
                        }
                    }
                    let head = train_probe(&train_embs, &train_labels, seed)?;
                    let k5 = 5.min(head.labels.len());
                    let top1 = topk_accuracy(&head, &held_embs, &held_labels, 1)?;
                    let top5 = topk_accuracy(&head, &held_embs, &held_labels, k5)?;
                    rows.push_str(&format!(
                        "{name}\theldout\t{}\t{}\n",
                        fmt_f64(top1),
                        fmt_f64(top5)
                    ));
                }
                write_text(&out, &rows)?;
                println!("classification report -> {}", out.display());
            }
            EvalCmd::Leakage {
                spk_ckpt,
                env_ckpt,
                manifest,
                seed,
                out,
            } => {
                let spk = ExtractorModel::load(&spk_ckpt)?;
                let env = ExtractorModel::load(&env_ckpt)?;
                let (m, store, _) = read_manifest_and_store(&manifest)?;
                let report = leakage_probe(&spk, &env, &m, &store, seed)?;
                let text = format!(
                    "probe\taccuracy\nspk_emb->speaker\t{}\nspk_emb->environment\t{}\nenv_emb->environment\t{}\nenv_emb->speaker\t{}\nchance_speaker\t{}\nchance_env\t{}\n",
                    fmt_f64(report.spk_on),
                    fmt_f64(report.spk_off),
                    fmt_f64(report.env_on),
                    fmt_f64(report.env_off),
                    fmt_f64(report.chance_speaker),
                    fmt_f64(report.chance_env),
                );
                write_text(&out, &text)?;
                println!("leakage report -> {}", out.display());
            }
            EvalCmd::Dump { ckpt, manifest, out } => {
                let model = ExtractorModel::load(&ckpt)?;
                let (m, store, _) = read_manifest_and_store(&manifest)?;
                let n = dump_embeddings(&model, &m, &store, &out)?;
                println!(
                    "{n} embeddings -> {} (+ {})",
                    out.display(),
                    out.with_extension("pca.tsv").display()
                );
            }
        },
        Cmd::Repro(r) => match r {
            ReproCmd::Desk { out, seed, config } => {
                let mut cfg = config.resolve(Preset::Desk, seed)?;
                cfg.threads = threads;
                let outcome = repro_desk(&cfg, &out)?;
                println!("summary -> {}", out.join("summary.tsv").display());
                print!("{}", outcome.summary_tsv);
            }
        },
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        // Machine-readable single error line.
        eprintln!("EATTS_ERROR\t{e}");
        std::process::exit(1);
    }
}
