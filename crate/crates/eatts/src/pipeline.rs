//! End-to-end orchestration: corpus construction, extractor training, TTS
//! training (proposed and baseline), synthesis and the full objective
//! evaluation, driven by one run seed. Per-stage seeds are derived by
//! stable hashing of stage names, so every stage is reproducible on its
//! own.

use crate::corpus::{
    build_extractor_corpus, build_tts_corpus, load_environments, FeatureStore,
    GroupBy,
};
use crate::dsp::StftMelConfig;
use crate::error::{EattsError, Result};
use crate::eval::{
    classify_synthesized, cosine_gap, dump_embeddings, env_selectivity, eval_mcd,
    leakage_probe, seen_combo_case, train_natural_probes, unseen_both_case, unseen_combo_case,
    ClassificationReport, EvalCase, LeakageReport, McdReport,
};
use crate::extractor::{train_extractor, ExtractorConfig};
use crate::rng::{stage_seed, Rng};
use crate::synth::{train_tts, LossBreakdown, SynthConfig, SynthModel, TrainMode, TtsTrainOptions};
use crate::util::fmt_f64;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(EattsError::Config(format!(
                "preset must be desk|paper, got '{other}'"
            ))),
        }
    }
}

/// Every knob of the pipeline. Presets fill it; key=value overrides adjust
/// individual fields, rejecting unknown keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    // Environment-extractor corpus: n_envs x n_speakers x n_utts.
    pub env_corpus: (usize, usize, usize),
    // Speaker-extractor corpus: n_envs x n_speakers x n_utts.
    pub spk_corpus: (usize, usize, usize),
    pub tts_pairs: usize,
    pub tts_utts: usize,
    pub heldout_pair_frac: f64,
    pub heldout_utt_frac: f64,
    pub extractor: ExtractorConfig,
    pub extractor_steps: usize,
    pub synth: SynthConfig,
    pub tts_steps: usize,
    pub eval_trials: usize,
    pub stft: StftMelConfig,
}

impl RunConfig {
    pub fn desk(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            threads: 1,
            env_corpus: (8, 8, 8),
            spk_corpus: (6, 8, 8),
            tts_pairs: 12,
            tts_utts: 30,
            heldout_pair_frac: 0.05,
            heldout_utt_frac: 0.05,
            extractor: ExtractorConfig::desk(),
            extractor_steps: 250,
            synth: SynthConfig::desk(),
            tts_steps: 700,
            eval_trials: 12,
            stft: StftMelConfig::default(),
        }
    }

    pub fn paper(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            threads: 1,
            env_corpus: (64, 8, 20),
            spk_corpus: (8, 64, 20),
            tts_pairs: 108,
            tts_utts: 100,
            heldout_pair_frac: 0.05,
            heldout_utt_frac: 0.05,
            extractor: ExtractorConfig::paper(),
            extractor_steps: 5000,
            synth: SynthConfig::paper(),
            tts_steps: 20_000,
            eval_trials: 50,
            stft: StftMelConfig::default(),
        }
    }

    pub fn preset(p: Preset, seed: u64) -> RunConfig {
        match p {
            Preset::Desk => RunConfig::desk(seed),
            Preset::Paper => RunConfig::paper(seed),
        }
    }

    /// Applies one `key=value` override. Unknown keys are rejected.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| {
            EattsError::Config(format!("override {key}={value}: {e}"))
        };
        macro_rules! set {
            ($field:expr, $ty:ty) => {{
                $field = value.parse::<$ty>().map_err(|e| bad(&e))?;
            }};
        }
        match key {
            "seed" => set!(self.seed, u64),
            "threads" => set!(self.threads, usize),
            "env_corpus.envs" => set!(self.env_corpus.0, usize),
            "env_corpus.speakers" => set!(self.env_corpus.1, usize),
            "env_corpus.utts" => set!(self.env_corpus.2, usize),
            "spk_corpus.envs" => set!(self.spk_corpus.0, usize),
            "spk_corpus.speakers" => set!(self.spk_corpus.1, usize),
            "spk_corpus.utts" => set!(self.spk_corpus.2, usize),
            "tts.pairs" => set!(self.tts_pairs, usize),
            "tts.utts" => set!(self.tts_utts, usize),
            "tts.heldout_pair_frac" => set!(self.heldout_pair_frac, f64),
            "tts.heldout_utt_frac" => set!(self.heldout_utt_frac, f64),
            "extractor.n_lstm_layers" => set!(self.extractor.n_lstm_layers, usize),
            "extractor.hidden_dim" => set!(self.extractor.hidden_dim, usize),
            "extractor.embed_dim" => set!(self.extractor.embed_dim, usize),
            "extractor.crop_frames" => set!(self.extractor.crop_frames, usize),
            "extractor.s_groups" => set!(self.extractor.s_groups, usize),
            "extractor.u_per_group" => set!(self.extractor.u_per_group, usize),
            "extractor.learning_rate" => set!(self.extractor.learning_rate, f64),
            "extractor.steps" => set!(self.extractor_steps, usize),
            "synth.d_enc" => set!(self.synth.d_enc, usize),
            "synth.prenet_dim" => set!(self.synth.prenet_dim, usize),
            "synth.decoder_dim" => set!(self.synth.decoder_dim, usize),
            "synth.decode_frames" => set!(self.synth.decode_frames, usize),
            "synth.batch_pairs" => set!(self.synth.batch_pairs, usize),
            "synth.utts_per_pair" => set!(self.synth.utts_per_pair, usize),
            "synth.learning_rate" => set!(self.synth.learning_rate, f64),
            "synth.steps" => set!(self.tts_steps, usize),
            "eval.trials" => set!(self.eval_trials, usize),
            other => {
                return Err(EattsError::Config(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        // Embedding widths track the extractor unless overridden later.
        if key == "extractor.embed_dim" {
            self.synth.spk_embed_dim = self.extractor.embed_dim;
            self.synth.env_embed_dim = self.extractor.embed_dim;
        }
        Ok(())
    }

    /// Applies a key=value override file (one per line, # comments).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                EattsError::Config(format!("expected key=value, got '{line}'"))
            })?;
            self.apply_override(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Canonical echo of the effective configuration.
    pub fn echo(&self) -> String {
        format!(
            "seed={}\nthreads={}\n\
             env_corpus.envs={}\nenv_corpus.speakers={}\nenv_corpus.utts={}\n\
             spk_corpus.envs={}\nspk_corpus.speakers={}\nspk_corpus.utts={}\n\
             tts.pairs={}\ntts.utts={}\ntts.heldout_pair_frac={}\ntts.heldout_utt_frac={}\n\
             extractor.n_lstm_layers={}\nextractor.hidden_dim={}\nextractor.embed_dim={}\n\
             extractor.crop_frames={}\nextractor.s_groups={}\nextractor.u_per_group={}\n\
             extractor.learning_rate={}\nextractor.steps={}\n\
             synth.d_enc={}\nsynth.prenet_dim={}\nsynth.decoder_dim={}\nsynth.decode_frames={}\n\
             synth.batch_pairs={}\nsynth.utts_per_pair={}\nsynth.learning_rate={}\nsynth.steps={}\n\
             eval.trials={}\n",
            self.seed,
            self.threads,
            self.env_corpus.0,
            self.env_corpus.1,
            self.env_corpus.2,
            self.spk_corpus.0,
            self.spk_corpus.1,
            self.spk_corpus.2,
            self.tts_pairs,
            self.tts_utts,
            self.heldout_pair_frac,
            self.heldout_utt_frac,
            self.extractor.n_lstm_layers,
            self.extractor.hidden_dim,
            self.extractor.embed_dim,
            self.extractor.crop_frames,
            self.extractor.s_groups,
            self.extractor.u_per_group,
            self.extractor.learning_rate,
            self.extractor_steps,
            self.synth.d_enc,
            self.synth.prenet_dim,
            self.synth.decoder_dim,
            self.synth.decode_frames,
            self.synth.batch_pairs,
            self.synth.utts_per_pair,
            self.synth.learning_rate,
            self.tts_steps,
            self.eval_trials,
        )
    }
}

/// Everything a desk reproduction produces, plus the summary TSV bytes used
/// for the determinism check.
pub struct ReproOutcome {
    pub summary_tsv: String,
    pub env_loss_trace: Vec<f64>,
    pub spk_loss_trace: Vec<f64>,
    pub proposed_trace: Vec<LossBreakdown>,
    pub baseline_trace: Vec<LossBreakdown>,
    pub env_cosine_gap: f64,
    pub spk_cosine_gap: f64,
    pub leakage: LeakageReport,
    pub mcd_proposed: [McdReport; 3],
    pub mcd_baseline: [McdReport; 3],
    pub selectivity_proposed: f64,
    pub selectivity_baseline: f64,
    pub cls_proposed_seen: ClassificationReport,
    pub cls_proposed_unseen: ClassificationReport,
    pub cls_baseline_seen: ClassificationReport,
    pub cls_baseline_unseen: ClassificationReport,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| EattsError::io(path.display().to_string(), e))
}

struct Stage<'a>(&'a str);

impl Stage<'_> {
    fn run<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = std::time::Instant::now();
        let out = f().map_err(|e| e.in_stage(self.0))?;
        eprintln!(
            "[repro] stage {:<16} {:>8.2}s",
            self.0,
            started.elapsed().as_secs_f64()
        );
        Ok(out)
    }
}

/// Runs two independent stages, side by side when worker threads allow.
/// Each stage is single-threaded and deterministic on its own, so results
/// are identical either way.
fn run_pair<A, B>(
    a: impl FnOnce() -> Result<A> + Send,
    b: impl FnOnce() -> Result<B> + Send,
) -> Result<(A, B)>
where
    A: Send,
    B: Send,
{
    if crate::util::threads() >= 2 {
        std::thread::scope(|s| {
            let ha = s.spawn(a);
            let hb = s.spawn(b);
            let ra = ha.join().expect("stage thread panicked");
            let rb = hb.join().expect("stage thread panicked");
            Ok((ra?, rb?))
        })
    } else {
        Ok((a()?, b()?))
    }
}

/// The full desk-scale reproduction. Builds both extractor corpora and the
/// entangled TTS corpus, trains both extractors, trains the proposed and
/// baseline systems, and runs the whole objective evaluation. Byte-identical
/// summary for a fixed seed and thread count of 1.
pub fn repro_desk(config: &RunConfig, out_dir: &Path) -> Result<ReproOutcome> {
    crate::util::set_threads(config.threads);
    ensure_dir(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), config.echo())
        .map_err(|e| EattsError::io(out_dir.display().to_string(), e))?;
    let seed = config.seed;
    let stft = &config.stft;

    // Corpora. The two extractor corpora share one environment library
    // ("xv") so the leakage probe evaluates the environment extractor on
    // rooms it can recognize, while their speaker populations stay disjoint.
    let env_lib_seed = stage_seed(seed, "env-lib");
    let env_dir = out_dir.join("corpus_env");
    let (n_env_e, n_spk_e, n_utt_e) = config.env_corpus;
    let env_manifest = Stage("corpus-env").run(|| {
        build_extractor_corpus(
            "xe",
            "xv",
            env_lib_seed,
            n_env_e,
            n_spk_e,
            n_utt_e,
            &env_dir,
            stage_seed(seed, "corpus-env"),
        )
    })?;
    let spk_dir = out_dir.join("corpus_spk");
    let (n_env_s, n_spk_s, n_utt_s) = config.spk_corpus;
    let spk_manifest = Stage("corpus-spk").run(|| {
        build_extractor_corpus(
            "xs",
            "xv",
            env_lib_seed,
            n_env_s,
            n_spk_s,
            n_utt_s,
            &spk_dir,
            stage_seed(seed, "corpus-spk"),
        )
    })?;
    let tts_dir = out_dir.join("corpus_tts");
    let (tts_manifest, plan) = Stage("corpus-tts").run(|| {
        build_tts_corpus(
            "t",
            config.tts_pairs,
            config.tts_utts,
            config.heldout_pair_frac,
            config.heldout_utt_frac,
            &tts_dir,
            stage_seed(seed, "corpus-tts"),
        )
    })?;

    // Features.
    let env_store = Stage("features-env").run(|| FeatureStore::build(&env_manifest, &env_dir, stft))?;
    let spk_store = Stage("features-spk").run(|| FeatureStore::build(&spk_manifest, &spk_dir, stft))?;
    let tts_store = Stage("features-tts").run(|| FeatureStore::build(&tts_manifest, &tts_dir, stft))?;

    // Extractors: two independent trainings, run side by side.
    let ((env_extractor, env_loss_trace), (spk_extractor, spk_loss_trace)) = run_pair(
        || {
            Stage("extractor-env").run(|| {
                train_extractor(
                    &env_manifest,
                    &env_store,
                    GroupBy::Environment,
                    config.extractor.clone(),
                    config.extractor_steps,
                    stage_seed(seed, "extractor-env"),
                )
            })
        },
        || {
            Stage("extractor-spk").run(|| {
                train_extractor(
                    &spk_manifest,
                    &spk_store,
                    GroupBy::Speaker,
                    config.extractor.clone(),
                    config.extractor_steps,
                    stage_seed(seed, "extractor-spk"),
                )
            })
        },
    )?;
    env_extractor.save(&out_dir.join("env_extractor.eatts"))?;
    spk_extractor.save(&out_dir.join("spk_extractor.eatts"))?;

    let env_cosine_gap = cosine_gap(&env_extractor, &env_manifest, &env_store, GroupBy::Environment)?;
    let spk_cosine_gap = cosine_gap(&spk_extractor, &spk_manifest, &spk_store, GroupBy::Speaker)?;

    // Leakage probe on the speaker corpus (a cross corpus: speakers and
    // environments vary independently there).
    let leakage = Stage("leakage").run(|| {
        leakage_probe(
            &spk_extractor,
            &env_extractor,
            &spk_manifest,
            &spk_store,
            stage_seed(seed, "leakage"),
        )
    })?;

    // TTS systems: proposed and baseline are independent, run side by side.
    let ((proposed, proposed_trace), (baseline, baseline_trace)) = run_pair(
        || {
            Stage("tts-proposed").run(|| {
                train_tts(
                    &tts_manifest,
                    &tts_store,
                    &spk_extractor,
                    &env_extractor,
                    config.synth.clone(),
                    TtsTrainOptions {
                        mode: TrainMode::Proposed,
                        freeze_extractors: true,
                        n_steps: config.tts_steps,
                        seed: stage_seed(seed, "tts-proposed"),
                    },
                )
            })
        },
        || {
            Stage("tts-baseline").run(|| {
                train_tts(
                    &tts_manifest,
                    &tts_store,
                    &spk_extractor,
                    &env_extractor,
                    config.synth.clone(),
                    TtsTrainOptions {
                        mode: TrainMode::Baseline,
                        freeze_extractors: false,
                        n_steps: config.tts_steps,
                        seed: stage_seed(seed, "tts-baseline"),
                    },
                )
            })
        },
    )?;
    proposed.save(&out_dir.join("tts_proposed.eatts"))?;
    baseline.save(&out_dir.join("tts_baseline.eatts"))?;

    // Evaluation cases.
    let envs = load_environments(&tts_dir, &tts_manifest)?;
    let mut case_rng = Rng::new(stage_seed(seed, "eval-cases"));
    let seen = seen_combo_case(&tts_manifest, &plan, config.eval_trials, &mut case_rng)?;
    let unseen = unseen_combo_case(&tts_manifest, &plan, config.eval_trials, &mut case_rng)?;
    let both = unseen_both_case(&tts_manifest, &plan, config.eval_trials, &mut case_rng)?;
    let corpus_seed = stage_seed(seed, "corpus-tts");

    let run_mcd = |model: &SynthModel, case: &EvalCase| {
        eval_mcd(case, model, &tts_store, &envs, corpus_seed, stft)
    };
    let (mcd_proposed, mcd_baseline) = run_pair(
        || {
            Stage("mcd-proposed").run(|| {
                Ok([
                    run_mcd(&proposed, &seen)?,
                    run_mcd(&proposed, &unseen)?,
                    run_mcd(&proposed, &both)?,
                ])
            })
        },
        || {
            Stage("mcd-baseline").run(|| {
                Ok([
                    run_mcd(&baseline, &seen)?,
                    run_mcd(&baseline, &unseen)?,
                    run_mcd(&baseline, &both)?,
                ])
            })
        },
    )?;

    let (selectivity_proposed, selectivity_baseline) = run_pair(
        || {
            Stage("selectivity").run(|| {
                env_selectivity(&unseen, &proposed, &tts_store, &envs, corpus_seed, stft, 5)
            })
        },
        || env_selectivity(&unseen, &baseline, &tts_store, &envs, corpus_seed, stft, 5),
    )?;

    // Table-2-style classification of synthesized speech.
    let probes = Stage("probes").run(|| {
        train_natural_probes(
            &spk_extractor,
            &env_extractor,
            &tts_manifest,
            &tts_store,
            stage_seed(seed, "probes"),
        )
    })?;
    let classify = |model: &SynthModel, case: &EvalCase| {
        classify_synthesized(
            case,
            model,
            &probes,
            &spk_extractor,
            &env_extractor,
            &tts_store,
            stft,
        )
    };
    let cls_proposed_seen = Stage("classify").run(|| classify(&proposed, &seen))?;
    let cls_proposed_unseen = classify(&proposed, &unseen)?;
    let cls_baseline_seen = classify(&baseline, &seen)?;
    let cls_baseline_unseen = classify(&baseline, &unseen)?;

    // Embedding dumps with PCA projections.
    Stage("dumps").run(|| {
        dump_embeddings(
            &spk_extractor,
            &tts_manifest,
            &tts_store,
            &out_dir.join("speaker_embeddings.tsv"),
        )?;
        dump_embeddings(
            &env_extractor,
            &tts_manifest,
            &tts_store,
            &out_dir.join("env_embeddings.tsv"),
        )
    })?;

    // Summary.
    let mut s = String::from("metric\tcase\tsystem\tvalue\n");
    let mut row = |metric: &str, case: &str, system: &str, value: f64| {
        s.push_str(&format!("{metric}\t{case}\t{system}\t{}\n", fmt_f64(value)));
    };
    for (reports, system) in [(&mcd_proposed, "proposed"), (&mcd_baseline, "baseline")] {
        for report in reports.iter() {
            row("mcd_mean", report.case_id.as_str(), system, report.mean);
        }
    }
    row("env_selectivity", "unseen_combo", "proposed", selectivity_proposed);
    row("env_selectivity", "unseen_combo", "baseline", selectivity_baseline);
    for (cls, case, system) in [
        (&cls_proposed_seen, "seen_combo", "proposed"),
        (&cls_proposed_unseen, "unseen_combo", "proposed"),
        (&cls_baseline_seen, "seen_combo", "baseline"),
        (&cls_baseline_unseen, "unseen_combo", "baseline"),
    ] {
        row("acc_speaker_top1", case, system, cls.speaker_top1);
        row("acc_speaker_top5", case, system, cls.speaker_top5);
        row("acc_env_top1", case, system, cls.env_top1);
        row("acc_env_top5", case, system, cls.env_top5);
    }
    row("leakage_spk_on", "cross", "extractors", leakage.spk_on);
    row("leakage_spk_off", "cross", "extractors", leakage.spk_off);
    row("leakage_env_on", "cross", "extractors", leakage.env_on);
    row("leakage_env_off", "cross", "extractors", leakage.env_off);
    row("chance_speaker", "cross", "extractors", leakage.chance_speaker);
    row("chance_env", "cross", "extractors", leakage.chance_env);
    row("cosine_gap_env", "extractor_corpus", "extractors", env_cosine_gap);
    row("cosine_gap_speaker", "extractor_corpus", "extractors", spk_cosine_gap);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    row(
        "ge2e_env_first10",
        "trace",
        "extractors",
        mean(&env_loss_trace[..10.min(env_loss_trace.len())]),
    );
    row(
        "ge2e_env_last100",
        "trace",
        "extractors",
        mean(&env_loss_trace[env_loss_trace.len().saturating_sub(100)..]),
    );
    row(
        "ge2e_spk_first10",
        "trace",
        "extractors",
        mean(&spk_loss_trace[..10.min(spk_loss_trace.len())]),
    );
    row(
        "ge2e_spk_last100",
        "trace",
        "extractors",
        mean(&spk_loss_trace[spk_loss_trace.len().saturating_sub(100)..]),
    );
    let recon = |t: &[LossBreakdown]| t.iter().map(|b| b.l_recon).collect::<Vec<_>>();
    let p_recon = recon(&proposed_trace);
    let b_recon = recon(&baseline_trace);
    row("recon_first10", "trace", "proposed", mean(&p_recon[..10.min(p_recon.len())]));
    row(
        "recon_last50",
        "trace",
        "proposed",
        mean(&p_recon[p_recon.len().saturating_sub(50)..]),
    );
    row("recon_first10", "trace", "baseline", mean(&b_recon[..10.min(b_recon.len())]));
    row(
        "recon_last50",
        "trace",
        "baseline",
        mean(&b_recon[b_recon.len().saturating_sub(50)..]),
    );

    std::fs::write(out_dir.join("summary.tsv"), &s)
        .map_err(|e| EattsError::io(out_dir.display().to_string(), e))?;

    Ok(ReproOutcome {
        summary_tsv: s,
        env_loss_trace,
        spk_loss_trace,
        proposed_trace,
        baseline_trace,
        env_cosine_gap,
        spk_cosine_gap,
        leakage,
        mcd_proposed,
        mcd_baseline,
        selectivity_proposed,
        selectivity_baseline,
        cls_proposed_seen,
        cls_proposed_unseen,
        cls_baseline_seen,
        cls_baseline_unseen,
    })
}
