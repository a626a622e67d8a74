//! Objective evaluation: MCD under the seen/unseen cases, linear-probe
//! classification of embeddings (top-1/top-5), leakage probes across
//! factors, and labeled embedding dumps with a 2-D PCA projection.

use crate::autodiff::{AdamState, Graph, NamedParam, Shape};
use crate::corpus::{
    env_by_id, synth_toy_utterance, Environment, FeatureStore, GroupBy, Manifest, PairingPlan,
    Split, SpeakerVoiceSpec,
};
use crate::dsp::{mcd, mel_cepstrum, mel_spectrogram, MelSpectrogram, StftMelConfig};
use crate::error::{EattsError, Result};
use crate::extractor::ExtractorModel;
use crate::rng::Rng;
use crate::synth::{cross_entropy_graph, ClassifierHead, SynthModel};
use crate::util::fmt_f64;
use std::collections::BTreeMap;
use std::path::Path;

// ── Evaluation cases ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseId {
    SeenCombo,
    UnseenCombo,
    UnseenBoth,
}

impl CaseId {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseId::SeenCombo => "seen_combo",
            CaseId::UnseenCombo => "unseen_combo",
            CaseId::UnseenBoth => "unseen_both",
        }
    }

    pub fn parse(s: &str) -> Result<CaseId> {
        match s {
            "seen_combo" => Ok(CaseId::SeenCombo),
            "unseen_combo" => Ok(CaseId::UnseenCombo),
            "unseen_both" => Ok(CaseId::UnseenBoth),
            other => Err(EattsError::Parameter(format!(
                "case must be seen_combo|unseen_combo|unseen_both, got '{other}'"
            ))),
        }
    }
}

/// One synthesis trial: which speaker and environment to request, the text,
/// and the reference utterances embeddings are taken from.
#[derive(Debug, Clone)]
pub struct EvalTrial {
    pub speaker_id: String,
    pub env_id: String,
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    pub spk_ref_utt: String,
    pub env_ref_utt: String,
    /// Rendering variant for the ground truth (room RIR draw).
    pub gt_variant: u64,
}

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub case_id: CaseId,
    pub trials: Vec<EvalTrial>,
}

fn train_utts_of_pair<'a>(
    manifest: &'a Manifest,
    speaker: &str,
) -> Vec<&'a crate::corpus::UtteranceRecord> {
    manifest
        .records
        .iter()
        .filter(|r| r.speaker_id == speaker && r.split == Split::Train)
        .collect()
}

/// Seen combinations: training pairs, heldout utterances as targets,
/// training utterances of the same pair as references.
pub fn seen_combo_case(
    manifest: &Manifest,
    plan: &PairingPlan,
    n_trials: usize,
    rng: &mut Rng,
) -> Result<EvalCase> {
    let seen: Vec<&(String, String)> = plan
        .pairs
        .iter()
        .filter(|(s, e)| !plan.is_heldout(s, e))
        .collect();
    let mut trials = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let (speaker, env) = seen[rng.below(seen.len())].clone();
        let held: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.speaker_id == speaker && r.split == Split::Heldout)
            .collect();
        let train = train_utts_of_pair(manifest, &speaker);
        if held.is_empty() || train.is_empty() {
            return Err(EattsError::Lookup(format!(
                "pair {speaker}/{env} lacks heldout or training utterances"
            )));
        }
        let target = held[rng.below(held.len())];
        let reference = train[rng.below(train.len())];
        trials.push(EvalTrial {
            speaker_id: speaker,
            env_id: env,
            symbols: target.symbols.clone(),
            durations: target.durations.clone(),
            spk_ref_utt: reference.utt_id.clone(),
            env_ref_utt: reference.utt_id.clone(),
            // Match the corpus rendering of the target utterance exactly.
            gt_variant: crate::corpus::build::render_variant(&target.utt_id),
        });
        let _ = i;
    }
    Ok(EvalCase {
        case_id: CaseId::SeenCombo,
        trials,
    })
}

/// Unseen combinations: both factors trained, but the pairing is novel.
/// Speaker embedding comes from pair i, environment embedding from pair j.
pub fn unseen_combo_case(
    manifest: &Manifest,
    plan: &PairingPlan,
    n_trials: usize,
    rng: &mut Rng,
) -> Result<EvalCase> {
    let seen: Vec<&(String, String)> = plan
        .pairs
        .iter()
        .filter(|(s, e)| !plan.is_heldout(s, e))
        .collect();
    if seen.len() < 2 {
        return Err(EattsError::Config("need >= 2 seen pairs".into()));
    }
    let mut trials = Vec::with_capacity(n_trials);
    while trials.len() < n_trials {
        let i = rng.below(seen.len());
        let j = rng.below(seen.len());
        if i == j {
            continue;
        }
        let (speaker, _own_env) = seen[i].clone();
        let (donor_speaker, env) = seen[j].clone();
        let spk_train = train_utts_of_pair(manifest, &speaker);
        let env_train = train_utts_of_pair(manifest, &donor_speaker);
        if spk_train.is_empty() || env_train.is_empty() {
            return Err(EattsError::Lookup(
                "seen pair without training utterances".into(),
            ));
        }
        let (symbols, durations) = crate::corpus::build::random_text(rng);
        let gt_variant =
            crate::corpus::build::render_variant(&format!("unseen_combo:{}", trials.len()));
        trials.push(EvalTrial {
            speaker_id: speaker,
            env_id: env,
            symbols,
            durations,
            spk_ref_utt: spk_train[rng.below(spk_train.len())].utt_id.clone(),
            env_ref_utt: env_train[rng.below(env_train.len())].utt_id.clone(),
            gt_variant,
        });
    }
    Ok(EvalCase {
        case_id: CaseId::UnseenCombo,
        trials,
    })
}

/// Unseen speaker and unseen environment: the heldout pairs, whose ids
/// never appear in TTS training.
pub fn unseen_both_case(
    manifest: &Manifest,
    plan: &PairingPlan,
    n_trials: usize,
    rng: &mut Rng,
) -> Result<EvalCase> {
    if plan.heldout_pairs.is_empty() {
        return Err(EattsError::Config("no heldout pairs".into()));
    }
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let (speaker, env) = plan.heldout_pairs[rng.below(plan.heldout_pairs.len())].clone();
        let utts: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.speaker_id == speaker)
            .collect();
        if utts.is_empty() {
            return Err(EattsError::Lookup(format!(
                "heldout pair {speaker}/{env} has no utterances"
            )));
        }
        let reference = utts[rng.below(utts.len())];
        let (symbols, durations) = crate::corpus::build::random_text(rng);
        let gt_variant =
            crate::corpus::build::render_variant(&format!("unseen_both:{}", trials.len()));
        trials.push(EvalTrial {
            speaker_id: speaker,
            env_id: env,
            symbols,
            durations,
            spk_ref_utt: reference.utt_id.clone(),
            env_ref_utt: reference.utt_id.clone(),
            gt_variant,
        });
    }
    Ok(EvalCase {
        case_id: CaseId::UnseenBoth,
        trials,
    })
}

// ── MCD evaluation ──────────────────────────────────────────────────────

/// Renders the ground truth for a trial: clean toy speech from the trial's
/// speaker, passed through the requested environment.
pub fn render_ground_truth(
    trial: &EvalTrial,
    env: &Environment,
    corpus_seed: u64,
    cfg: &StftMelConfig,
) -> Result<MelSpectrogram> {
    let voice = SpeakerVoiceSpec::derive(&trial.speaker_id, corpus_seed);
    let clean = synth_toy_utterance(&voice, &trial.symbols, &trial.durations)?;
    let rendered = env.render(&clean, trial.gt_variant)?;
    let frames: usize = trial.durations.iter().sum();
    Ok(mel_spectrogram(&rendered, cfg)?.truncated(frames))
}

#[derive(Debug, Clone)]
pub struct McdReport {
    pub case_id: CaseId,
    pub per_trial: Vec<f64>,
    pub mean: f64,
}

/// MCD between a synthesis function's output and the ground-truth renderer,
/// per trial. Both sides are supplied as closures so the oracle wiring can
/// be tested (synthesis := ground truth must give exactly zero).
pub fn eval_mcd_with<S, G>(case: &EvalCase, mut synthesize: S, mut ground_truth: G) -> Result<McdReport>
where
    S: FnMut(&EvalTrial) -> Result<MelSpectrogram>,
    G: FnMut(&EvalTrial) -> Result<MelSpectrogram>,
{
    let mut per_trial = Vec::with_capacity(case.trials.len());
    for trial in &case.trials {
        let synth_mel = synthesize(trial)?;
        let gt_mel = ground_truth(trial)?;
        let d = mcd(&mel_cepstrum(&synth_mel)?, &mel_cepstrum(&gt_mel)?)?;
        per_trial.push(d);
    }
    let mean = per_trial.iter().sum::<f64>() / per_trial.len().max(1) as f64;
    Ok(McdReport {
        case_id: case.case_id,
        per_trial,
        mean,
    })
}

/// Standard MCD evaluation of a trained system on a case.
pub fn eval_mcd(
    case: &EvalCase,
    model: &SynthModel,
    store: &FeatureStore,
    envs: &[Environment],
    corpus_seed: u64,
    cfg: &StftMelConfig,
) -> Result<McdReport> {
    eval_mcd_with(
        case,
        |trial| {
            let spk_ref = store.get(&trial.spk_ref_utt)?;
            let env_ref = store.get(&trial.env_ref_utt)?;
            model.synthesize(
                &trial.symbols,
                &trial.durations,
                spk_ref,
                env_ref,
                cfg.config_hash(),
            )
        },
        |trial| {
            let env = env_by_id(envs, &trial.env_id)?;
            render_ground_truth(trial, env, corpus_seed, cfg)
        },
    )
}

/// Environment selectivity on a case: for each trial, is the synthesis
/// closer (in MCD) to the ground truth under the requested environment than
/// under most alternative environments? Returns the fraction of trials
/// where that holds.
pub fn env_selectivity(
    case: &EvalCase,
    model: &SynthModel,
    store: &FeatureStore,
    envs: &[Environment],
    corpus_seed: u64,
    cfg: &StftMelConfig,
    max_alternatives: usize,
) -> Result<f64> {
    let mut wins = 0usize;
    for trial in &case.trials {
        let spk_ref = store.get(&trial.spk_ref_utt)?;
        let env_ref = store.get(&trial.env_ref_utt)?;
        let synth_mel = model.synthesize(
            &trial.symbols,
            &trial.durations,
            spk_ref,
            env_ref,
            cfg.config_hash(),
        )?;
        let synth_cep = mel_cepstrum(&synth_mel)?;
        let target_env = env_by_id(envs, &trial.env_id)?;
        let gt = render_ground_truth(trial, target_env, corpus_seed, cfg)?;
        let target_mcd = mcd(&synth_cep, &mel_cepstrum(&gt)?)?;
        let mut closer = 0usize;
        let mut total = 0usize;
        for alt in envs.iter().filter(|e| e.id != trial.env_id) {
            if total >= max_alternatives {
                break;
            }
            let alt_gt = render_ground_truth(trial, alt, corpus_seed, cfg)?;
            let alt_mcd = mcd(&synth_cep, &mel_cepstrum(&alt_gt)?)?;
            if target_mcd < alt_mcd {
                closer += 1;
            }
            total += 1;
        }
        if total > 0 && closer * 2 > total {
            wins += 1;
        }
    }
    Ok(wins as f64 / case.trials.len().max(1) as f64)
}

// ── Linear probes ───────────────────────────────────────────────────────

/// Trains a linear softmax probe on labeled embeddings: fixed 200 epochs of
/// full-batch Adam, deterministic in the seed.
pub fn train_probe(
    embeddings: &[Vec<f32>],
    labels: &[String],
    seed: u64,
) -> Result<ClassifierHead> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(EattsError::Config(format!(
            "probe needs aligned non-empty data: {} embeddings, {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut vocab: Vec<String> = labels.to_vec();
    vocab.sort();
    vocab.dedup();
    if vocab.len() < 2 {
        return Err(EattsError::Config(
            "probe needs >= 2 classes".into(),
        ));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    if counts.values().any(|&c| c < 2) {
        return Err(EattsError::Config(
            "probe needs >= 2 samples per class".into(),
        ));
    }
    let dim = embeddings[0].len();
    let mut rng = Rng::new(seed);
    let mut head = ClassifierHead::init(dim, vocab, &mut rng);
    let label_idx: Vec<usize> = labels
        .iter()
        .map(|l| head.label_index(l))
        .collect::<Result<_>>()?;
    let flat: Vec<f32> = embeddings.concat();
    let n = embeddings.len();

    let mut params = vec![
        NamedParam::new("probe.w", head.w.clone()),
        NamedParam::new("probe.b", head.b.clone()),
    ];
    let mut adam = AdamState::new(&params, 0.05);
    for _epoch in 0..200 {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Shape::matrix(n, dim), flat.clone())?;
        let w = g.leaf(&params[0].value.clone().requires_grad(true));
        let b = g.leaf(&params[1].value.clone().requires_grad(true));
        let logits = g.matmul(x, w)?;
        let logits = g.broadcast_row_add(logits, b)?;
        let loss = cross_entropy_graph(&mut g, logits, &label_idx)?;
        let grads_map = g.backward(loss)?;
        let grads = vec![
            grads_map.get(w).expect("w grad").to_vec(),
            grads_map.get(b).expect("b grad").to_vec(),
        ];
        adam.step(&mut params, &grads)?;
    }
    head.w = params[0].value.clone();
    head.b = params[1].value.clone();
    Ok(head)
}

/// Fraction of samples whose true label ranks among the k largest logits.
/// Ties break toward the smaller class index.
pub fn topk_accuracy(
    head: &ClassifierHead,
    embeddings: &[Vec<f32>],
    labels: &[String],
    k: usize,
) -> Result<f64> {
    let n_classes = head.labels.len();
    if k == 0 || k > n_classes {
        return Err(EattsError::Parameter(format!(
            "top-k with k={k} outside 1..={n_classes}"
        )));
    }
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(EattsError::Config("top-k needs aligned non-empty data".into()));
    }
    let mut hits = 0usize;
    for (emb, label) in embeddings.iter().zip(labels.iter()) {
        let target = head.label_index(label)?;
        let logits = head.logits(emb);
        let mut order: Vec<usize> = (0..n_classes).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        if order[..k].contains(&target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / embeddings.len() as f64)
}

/// Majority-class share: the accuracy of the best constant classifier,
/// computed from the actual label marginals.
pub fn chance_level(labels: &[String]) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    max as f64 / labels.len().max(1) as f64
}

// ── Leakage probe ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    /// speaker embedding -> speaker label (on-factor)
    pub spk_on: f64,
    /// speaker embedding -> environment label (off-factor)
    pub spk_off: f64,
    /// environment embedding -> environment label (on-factor)
    pub env_on: f64,
    /// environment embedding -> speaker label (off-factor)
    pub env_off: f64,
    pub chance_speaker: f64,
    pub chance_env: f64,
}

/// Trains four linear probes on train-split embeddings of a cross corpus
/// and reports heldout top-1 accuracies for both on-factor and off-factor
/// predictions.
pub fn leakage_probe(
    spk_extractor: &ExtractorModel,
    env_extractor: &ExtractorModel,
    manifest: &Manifest,
    store: &FeatureStore,
    seed: u64,
) -> Result<LeakageReport> {
    let mut train_spk_emb = Vec::new();
    let mut train_env_emb = Vec::new();
    let mut train_spk_labels = Vec::new();
    let mut train_env_labels = Vec::new();
    let mut held_spk_emb = Vec::new();
    let mut held_env_emb = Vec::new();
    let mut held_spk_labels = Vec::new();
    let mut held_env_labels = Vec::new();
    for rec in &manifest.records {
        let mel = store.get(&rec.utt_id)?;
        let se = spk_extractor.infer_utterance(mel)?;
        let ee = env_extractor.infer_utterance(mel)?;
        match rec.split {
            Split::Train => {
                train_spk_emb.push(se);
                train_env_emb.push(ee);
                train_spk_labels.push(rec.speaker_id.clone());
                train_env_labels.push(rec.env_id.clone());
            }
            Split::Heldout => {
                held_spk_emb.push(se);
                held_env_emb.push(ee);
                held_spk_labels.push(rec.speaker_id.clone());
                held_env_labels.push(rec.env_id.clone());
            }
        }
    }
    if held_spk_emb.is_empty() {
        return Err(EattsError::Config(
            "leakage probe needs a heldout split".into(),
        ));
    }
    let p_spk_on = train_probe(&train_spk_emb, &train_spk_labels, seed ^ 1)?;
    let p_spk_off = train_probe(&train_spk_emb, &train_env_labels, seed ^ 2)?;
    let p_env_on = train_probe(&train_env_emb, &train_env_labels, seed ^ 3)?;
    let p_env_off = train_probe(&train_env_emb, &train_spk_labels, seed ^ 4)?;
    Ok(LeakageReport {
        spk_on: topk_accuracy(&p_spk_on, &held_spk_emb, &held_spk_labels, 1)?,
        spk_off: topk_accuracy(&p_spk_off, &held_spk_emb, &held_env_labels, 1)?,
        env_on: topk_accuracy(&p_env_on, &held_env_emb, &held_env_labels, 1)?,
        env_off: topk_accuracy(&p_env_off, &held_env_emb, &held_spk_labels, 1)?,
        chance_speaker: chance_level(&held_spk_labels),
        chance_env: chance_level(&held_env_labels),
    })
}

/// Mean intra-group minus mean inter-group cosine similarity of heldout
/// utterance embeddings: the clustering margin a trained extractor should
/// open up.
pub fn cosine_gap(
    extractor: &ExtractorModel,
    manifest: &Manifest,
    store: &FeatureStore,
    group_by: GroupBy,
) -> Result<f64> {
    let mut embs: Vec<(String, Vec<f32>)> = Vec::new();
    for rec in manifest.records.iter().filter(|r| r.split == Split::Heldout) {
        let emb = extractor.infer_utterance(store.get(&rec.utt_id)?)?;
        embs.push((group_by.key(rec).to_string(), emb));
    }
    if embs.len() < 2 {
        return Err(EattsError::Config(
            "cosine gap needs >= 2 heldout utterances".into(),
        ));
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let cos: f32 = embs[i]
                .1
                .iter()
                .zip(embs[j].1.iter())
                .map(|(a, b)| a * b)
                .sum();
            if embs[i].0 == embs[j].0 {
                intra += cos as f64;
                n_intra += 1;
            } else {
                inter += cos as f64;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(EattsError::Config(
            "cosine gap needs both intra- and inter-group pairs".into(),
        ));
    }
    Ok(intra / n_intra as f64 - inter / n_inter as f64)
}

/// Speaker/environment classification of synthesized utterances against
/// probes trained on natural speech, reported as top-1 and top-5 accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub speaker_top1: f64,
    pub speaker_top5: f64,
    pub env_top1: f64,
    pub env_top5: f64,
}

/// Probes over natural embeddings of the train split, reusable across
/// systems under test.
pub struct NaturalProbes {
    pub speaker: ClassifierHead,
    pub env: ClassifierHead,
}

pub fn train_natural_probes(
    spk_extractor: &ExtractorModel,
    env_extractor: &ExtractorModel,
    manifest: &Manifest,
    store: &FeatureStore,
    seed: u64,
) -> Result<NaturalProbes> {
    let mut spk_embs = Vec::new();
    let mut env_embs = Vec::new();
    let mut spk_labels = Vec::new();
    let mut env_labels = Vec::new();
    for rec in manifest.records.iter().filter(|r| r.split == Split::Train) {
        let mel = store.get(&rec.utt_id)?;
        spk_embs.push(spk_extractor.infer_utterance(mel)?);
        env_embs.push(env_extractor.infer_utterance(mel)?);
        spk_labels.push(rec.speaker_id.clone());
        env_labels.push(rec.env_id.clone());
    }
    Ok(NaturalProbes {
        speaker: train_probe(&spk_embs, &spk_labels, seed ^ 0x51)?,
        env: train_probe(&env_embs, &env_labels, seed ^ 0x52)?,
    })
}

/// Synthesizes every trial of a case with `model`, embeds the outputs with
/// the evaluation extractors, and classifies them against the requested
/// speaker/environment labels.
pub fn classify_synthesized(
    case: &EvalCase,
    model: &SynthModel,
    probes: &NaturalProbes,
    spk_extractor: &ExtractorModel,
    env_extractor: &ExtractorModel,
    store: &FeatureStore,
    cfg: &StftMelConfig,
) -> Result<ClassificationReport> {
    let mut spk_embs = Vec::new();
    let mut env_embs = Vec::new();
    let mut spk_labels = Vec::new();
    let mut env_labels = Vec::new();
    for trial in &case.trials {
        let mel = model.synthesize(
            &trial.symbols,
            &trial.durations,
            store.get(&trial.spk_ref_utt)?,
            store.get(&trial.env_ref_utt)?,
            cfg.config_hash(),
        )?;
        spk_embs.push(spk_extractor.infer_utterance(&mel)?);
        env_embs.push(env_extractor.infer_utterance(&mel)?);
        spk_labels.push(trial.speaker_id.clone());
        env_labels.push(trial.env_id.clone());
    }
    let k5 = 5.min(probes.speaker.labels.len());
    let k5e = 5.min(probes.env.labels.len());
    Ok(ClassificationReport {
        speaker_top1: topk_accuracy(&probes.speaker, &spk_embs, &spk_labels, 1)?,
        speaker_top5: topk_accuracy(&probes.speaker, &spk_embs, &spk_labels, k5)?,
        env_top1: topk_accuracy(&probes.env, &env_embs, &env_labels, 1)?,
        env_top5: topk_accuracy(&probes.env, &env_embs, &env_labels, k5e)?,
    })
}

// ── Embedding dumps and PCA ─────────────────────────────────────────────

/// Top-2 principal components via power iteration with deflation.
/// Deterministic: fixed start vector and a sign convention that makes the
/// largest-magnitude loading positive.
pub fn pca_top2(data: &[Vec<f32>]) -> Result<Vec<(f64, f64)>> {
    if data.len() < 2 {
        return Err(EattsError::Config("PCA needs >= 2 points".into()));
    }
    let d = data[0].len();
    let n = data.len();
    let mut mean = vec![0.0f64; d];
    for row in data {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = data
        .iter()
        .map(|row| {
            row.iter()
                .zip(mean.iter())
                .map(|(&v, &m)| v as f64 - m)
                .collect()
        })
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for c in cov.iter_mut() {
        *c /= denom;
    }

    let power_iterate = |cov: &[f64]| -> Vec<f64> {
        // Deterministic start, slightly tilted to avoid symmetric stalls.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * (i as f64 + 1.0)).collect();
        let mut prev = vec![0.0f64; d];
        for _ in 0..5000 {
            let mut next = vec![0.0f64; d];
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += cov[i * d + j] * v[j];
                }
                next[i] = acc;
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            let delta: f64 = next
                .iter()
                .zip(prev.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            prev = v;
            v = next;
            if delta < 1e-15 {
                break;
            }
        }
        // Sign convention: largest-magnitude loading positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        v
    };

    let v1 = power_iterate(&cov);
    // Deflate: cov - lambda1 v1 v1^T.
    let mut cv = vec![0.0f64; d];
    for i in 0..d {
        for j in 0..d {
            cv[i] += cov[i * d + j] * v1[j];
        }
    }
    let lambda1: f64 = v1.iter().zip(cv.iter()).map(|(a, b)| a * b).sum();
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= lambda1 * v1[i] * v1[j];
        }
    }
    let v2 = power_iterate(&deflated);

    Ok(centered
        .iter()
        .map(|row| {
            let p1: f64 = row.iter().zip(v1.iter()).map(|(a, b)| a * b).sum();
            let p2: f64 = row.iter().zip(v2.iter()).map(|(a, b)| a * b).sum();
            (p1, p2)
        })
        .collect())
}

/// Writes the labeled embedding TSV and its 2-D PCA companion
/// (`<out>.pca.tsv`). Returns the number of data rows.
pub fn dump_embeddings(
    extractor: &ExtractorModel,
    manifest: &Manifest,
    store: &FeatureStore,
    out: &Path,
) -> Result<usize> {
    let mut rows = Vec::new();
    for rec in &manifest.records {
        let emb = extractor.infer_utterance(store.get(&rec.utt_id)?)?;
        rows.push((rec, emb));
    }
    if rows.is_empty() {
        return Err(EattsError::EmptyInput("no utterances to dump".into()));
    }
    let dim = rows[0].1.len();
    let mut text = String::from("utt_id\tspeaker_id\tenv_id");
    for i in 0..dim {
        text.push_str(&format!("\te{i}"));
    }
    text.push('\n');
    for (rec, emb) in &rows {
        text.push_str(&format!("{}\t{}\t{}", rec.utt_id, rec.speaker_id, rec.env_id));
        for &v in emb {
            text.push_str(&format!("\t{}", fmt_f64(v as f64)));
        }
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|e| EattsError::io(out.display().to_string(), e))?;

    let embeddings: Vec<Vec<f32>> = rows.iter().map(|(_, e)| e.clone()).collect();
    let projected = pca_top2(&embeddings)?;
    let mut pca_text = String::from("utt_id\tspeaker_id\tenv_id\tpc1\tpc2\n");
    for ((rec, _), (p1, p2)) in rows.iter().zip(projected.iter()) {
        pca_text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            rec.utt_id,
            rec.speaker_id,
            rec.env_id,
            fmt_f64(*p1),
            fmt_f64(*p2)
        ));
    }
    let pca_path = out.with_extension("pca.tsv");
    std::fs::write(&pca_path, pca_text)
        .map_err(|e| EattsError::io(pca_path.display().to_string(), e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_embeddings(n_per: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<String>) {
        let mut rng = Rng::new(seed);
        let mut embs = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2 {
            for _ in 0..n_per {
                let base = if class == 0 { 1.0 } else { -1.0 };
                embs.push(vec![
                    base + 0.1 * rng.normal() as f32,
                    -base + 0.1 * rng.normal() as f32,
                    0.05 * rng.normal() as f32,
                ]);
                labels.push(format!("c{class}"));
            }
        }
        (embs, labels)
    }

    #[test]
    fn separable_classes_reach_perfect_training_accuracy() {
        let (embs, labels) = separable_embeddings(10, 1);
        let head = train_probe(&embs, &labels, 7).unwrap();
        let acc = topk_accuracy(&head, &embs, &labels, 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn shuffled_labels_stay_near_chance_on_heldout() {
        let (mut embs, labels) = separable_embeddings(30, 2);
        let mut rng = Rng::new(3);
        let mut shuffled = labels.clone();
        rng.shuffle(&mut shuffled);
        // Train on the first half, evaluate on the second.
        let half = embs.len() / 2;
        let held = embs.split_off(half);
        let held_labels = shuffled[half..].to_vec();
        let head = train_probe(&embs, &shuffled[..half].to_vec(), 9).unwrap();
        let acc = topk_accuracy(&head, &held, &held_labels, 1).unwrap();
        let chance = chance_level(&held_labels);
        assert!(
            (acc - chance).abs() <= 0.15,
            "acc {acc} vs chance {chance}"
        );
    }

    #[test]
    fn probe_is_deterministic() {
        let (embs, labels) = separable_embeddings(8, 4);
        let h1 = train_probe(&embs, &labels, 11).unwrap();
        let h2 = train_probe(&embs, &labels, 11).unwrap();
        assert_eq!(h1.w.data(), h2.w.data());
        assert_eq!(h1.b.data(), h2.b.data());
    }

    #[test]
    fn probe_rejects_degenerate_input() {
        let embs = vec![vec![1.0f32], vec![2.0]];
        let labels = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            train_probe(&embs, &labels, 1),
            Err(EattsError::Config(_))
        ));
    }

    #[test]
    fn topk_exhaustive_is_one_and_k_monotone() {
        let (embs, labels) = separable_embeddings(6, 5);
        let head = train_probe(&embs, &labels, 13).unwrap();
        let a1 = topk_accuracy(&head, &embs, &labels, 1).unwrap();
        let a2 = topk_accuracy(&head, &embs, &labels, 2).unwrap();
        assert!(a2 >= a1);
        assert_eq!(a2, 1.0);
        assert!(topk_accuracy(&head, &embs, &labels, 3).is_err());
    }

    #[test]
    fn chance_level_uses_marginals() {
        let labels: Vec<String> = ["a", "a", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(chance_level(&labels), 0.75);
    }

    #[test]
    fn pca_preserves_planar_distances() {
        // Points on a tilted 2-D plane in 5-D space.
        let mut rng = Rng::new(6);
        let u = [0.5f64, 0.5, 0.5, 0.5, 0.0];
        let v = [0.5f64, -0.5, 0.5, -0.5, 0.0];
        let mut data = Vec::new();
        let mut coords = Vec::new();
        for _ in 0..40 {
            let a = rng.range(-3.0, 3.0);
            let b = rng.range(-1.0, 1.0);
            coords.push((a, b));
            data.push(
                (0..5)
                    .map(|i| (a * u[i] + b * v[i]) as f32)
                    .collect::<Vec<f32>>(),
            );
        }
        let projected = pca_top2(&data).unwrap();
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let orig = {
                    let da = coords[i].0 - coords[j].0;
                    let db = coords[i].1 - coords[j].1;
                    (da * da + db * db).sqrt()
                };
                let proj = {
                    let d1 = projected[i].0 - projected[j].0;
                    let d2 = projected[i].1 - projected[j].1;
                    (d1 * d1 + d2 * d2).sqrt()
                };
                assert!(
                    (orig - proj).abs() < 1e-6,
                    "pair ({i},{j}): {orig} vs {proj}"
                );
            }
        }
    }

    #[test]
    fn pca_projection_centering_invariant() {
        let mut rng = Rng::new(8);
        let data: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..4).map(|_| rng.normal() as f32).collect())
            .collect();
        let shifted: Vec<Vec<f32>> = data
            .iter()
            .map(|row| row.iter().map(|&v| v + 5.0).collect())
            .collect();
        let p1 = pca_top2(&data).unwrap();
        let p2 = pca_top2(&shifted).unwrap();
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let d1 = ((p1[i].0 - p1[j].0).powi(2) + (p1[i].1 - p1[j].1).powi(2)).sqrt();
                let d2 = ((p2[i].0 - p2[j].0).powi(2) + (p2[i].1 - p2[j].1).powi(2)).sqrt();
                assert!((d1 - d2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mcd_oracle_wiring_identity_gives_zero() {
        let case = EvalCase {
            case_id: CaseId::SeenCombo,
            trials: vec![EvalTrial {
                speaker_id: "s".into(),
                env_id: "e".into(),
                symbols: vec![1, 2],
                durations: vec![40, 45],
                spk_ref_utt: String::new(),
                env_ref_utt: String::new(),
                gt_variant: 0,
            }],
        };
        let gt = |trial: &EvalTrial| -> Result<MelSpectrogram> {
            let frames: usize = trial.durations.iter().sum();
            let mut rng = Rng::new(1);
            Ok(MelSpectrogram::new(
                frames,
                80,
                (0..frames * 80).map(|_| rng.normal()).collect(),
                0,
            ))
        };
        let report = eval_mcd_with(&case, gt, gt).unwrap();
        assert_eq!(report.per_trial, vec![0.0]);
        assert_eq!(report.mean, 0.0);
    }
}
