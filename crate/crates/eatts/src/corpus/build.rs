//! Corpus construction: the cross corpus for extractor training (every
//! environment heard from multiple speakers, every speaker in multiple
//! rooms) and the fully entangled TTS corpus (speaker <-> environment is a
//! bijection, one pair being "clean").

use super::manifest::{Manifest, Split, UtteranceRecord};
use super::voice::{synth_toy_utterance, SpeakerVoiceSpec, VOCAB_SIZE};
use crate::dsp::{write_wav, Waveform, WavFormat};
use crate::error::{EattsError, Result};
use crate::rir::{synth_rir, Rir, RirSpec};
use crate::rng::{stage_seed, Rng};
use crate::util::par_map;
use std::path::{Path, PathBuf};

/// An acoustic environment: a parametric room (RT60, DRR, direct delay) or
/// "clean" (no convolution at all, keeping clean audio bit-exact).
///
/// A room is a parameter cell, not a single impulse response: every
/// rendering draws a fresh tail seeded by the rendering variant, the way a
/// real room yields a different measured RIR at every position. Room
/// identity is therefore carried by decay and level structure rather than
/// by one memorizable coloration pattern.
#[derive(Debug, Clone)]
pub struct Environment {
    pub id: String,
    pub spec: Option<RirSpec>,
}

impl Environment {
    pub fn clean(id: impl Into<String>) -> Environment {
        Environment {
            id: id.into(),
            spec: None,
        }
    }

    /// The impulse response for one rendering variant (0 is the canonical
    /// draw written to disk).
    pub fn rir_variant(&self, variant: u64) -> Result<Option<Rir>> {
        match &self.spec {
            None => Ok(None),
            Some(spec) => {
                let mut varied = spec.clone();
                varied.seed = spec.seed ^ variant;
                let mut rir = synth_rir(&varied)?;
                rir.id = self.id.clone();
                Ok(Some(rir))
            }
        }
    }

    /// Renders clean audio through this environment. Output keeps the input
    /// length (the convolution tail is trimmed) so mel frame counts match
    /// the symbol durations regardless of environment.
    pub fn render(&self, clean: &Waveform, variant: u64) -> Result<Waveform> {
        match self.rir_variant(variant)? {
            None => Ok(clean.clone()),
            Some(rir) => {
                let len = clean.len();
                Ok(rir.apply(clean)?.truncated(len).limited_to(0.99))
            }
        }
    }
}

/// Measured positions per room: each environment owns this many distinct
/// impulse-response draws, and every rendering picks one by utterance id.
pub const ROOM_POSITIONS: u64 = 5;

/// Rendering variant for an utterance id: a deterministic position index
/// within the room's family of impulse responses.
pub fn render_variant(utt_id: &str) -> u64 {
    crate::rng::fnv1a64(utt_id.as_bytes()) % ROOM_POSITIONS
}

/// Desk-scale environment grid: RT60 spread geometrically over [0.12, 1.8],
/// DRR and direct delay cycled so every room has a distinct fingerprint.
pub fn desk_env_spec(env_id: &str, index: usize, seed: u64) -> RirSpec {
    // Rooms form a (DRR, RT60) lattice: 6 dB DRR steps set the
    // reverberant-fill level and alternating short/long RT60 flips the
    // fill's decay slope, so every room pairs a distinct level with a
    // distinct slope. Both cues survive position re-draws.
    let drr_levels = [9.0, 9.0, 3.0, 3.0, -3.0, -3.0, -9.0, -9.0];
    let rt60_levels = [0.18, 1.2, 0.25, 1.5, 0.2, 1.0, 0.3, 1.7];
    let drr = drr_levels[index % 8] - 0.7 * (index / 8) as f64;
    let rt60 = (rt60_levels[index % 8] * 1.07f64.powi((index / 8) as i32)).min(1.8);
    let delay = 8 + 6 * (index % 8) + 2 * (index / 8);
    RirSpec::desk(rt60, drr, delay, stage_seed(seed, env_id))
}

pub fn synth_environment(env_id: &str, index: usize, seed: u64) -> Result<Environment> {
    let spec = desk_env_spec(env_id, index, seed);
    spec.validate()?;
    Ok(Environment {
        id: env_id.to_string(),
        spec: Some(spec),
    })
}

/// Bijective speaker <-> environment assignment with seen/unseen pair
/// annotations ("unseen" pairs are entirely held out of TTS training).
#[derive(Debug, Clone, PartialEq)]
pub struct PairingPlan {
    pub pairs: Vec<(String, String)>,
    pub heldout_pairs: Vec<(String, String)>,
}

impl PairingPlan {
    pub fn is_heldout(&self, speaker: &str, env: &str) -> bool {
        self.heldout_pairs
            .iter()
            .any(|(s, e)| s == speaker && e == env)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from("speaker_id\tenv_id\tstatus\n");
        for (s, e) in &self.pairs {
            let status = if self.is_heldout(s, e) { "unseen" } else { "seen" };
            out.push_str(&format!("{s}\t{e}\t{status}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<PairingPlan> {
        let mut pairs = Vec::new();
        let mut heldout_pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(EattsError::Parse {
                    path: "<pairing plan>".into(),
                    detail: format!("line {}: expected 3 fields", i + 1),
                });
            }
            pairs.push((f[0].to_string(), f[1].to_string()));
            if f[2] == "unseen" {
                heldout_pairs.push((f[0].to_string(), f[1].to_string()));
            }
        }
        Ok(PairingPlan {
            pairs,
            heldout_pairs,
        })
    }

    pub fn env_of(&self, speaker: &str) -> Result<&str> {
        self.pairs
            .iter()
            .find(|(s, _)| s == speaker)
            .map(|(_, e)| e.as_str())
            .ok_or_else(|| EattsError::Lookup(format!("speaker '{speaker}' not in pairing plan")))
    }
}

/// Symbols and durations for one utterance. Durations keep utterances past
/// the 80-frame crop length used by the extractors.
pub fn random_text(rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let n_symbols = 7;
    let symbols: Vec<usize> = (0..n_symbols).map(|_| rng.below(VOCAB_SIZE)).collect();
    let durations: Vec<usize> = (0..n_symbols).map(|_| 12 + rng.below(5)).collect();
    (symbols, durations)
}

struct RenderPlan {
    utt_id: String,
    speaker_id: String,
    env_id: String,
    split: Split,
    symbols: Vec<usize>,
    durations: Vec<usize>,
    voice: SpeakerVoiceSpec,
}

fn render_all(
    plans: Vec<RenderPlan>,
    envs: &[Environment],
    out_dir: &Path,
) -> Result<Vec<UtteranceRecord>> {
    std::fs::create_dir_all(out_dir.join("wav"))
        .map_err(|e| EattsError::io(out_dir.display().to_string(), e))?;
    let results = par_map(plans, |plan| -> Result<UtteranceRecord> {
        let clean = synth_toy_utterance(&plan.voice, &plan.symbols, &plan.durations)?;
        let env = envs
            .iter()
            .find(|e| e.id == plan.env_id)
            .ok_or_else(|| EattsError::Lookup(format!("environment '{}'", plan.env_id)))?;
        let rendered = env.render(&clean, render_variant(&plan.utt_id))?;
        let rel = format!("wav/{}.wav", plan.utt_id);
        write_wav(&out_dir.join(&rel), &rendered, WavFormat::Float32)?;
        Ok(UtteranceRecord {
            utt_id: plan.utt_id,
            speaker_id: plan.speaker_id,
            env_id: plan.env_id,
            split: plan.split,
            wav_path: rel,
            symbols: plan.symbols,
            durations: plan.durations,
        })
    });
    results.into_iter().collect()
}

fn write_env_files(envs: &[Environment], out_dir: &Path) -> Result<()> {
    let env_dir = out_dir.join("envs");
    std::fs::create_dir_all(&env_dir)
        .map_err(|e| EattsError::io(env_dir.display().to_string(), e))?;
    for env in envs {
        if let Some(spec) = &env.spec {
            std::fs::write(env_dir.join(format!("{}.rirspec", env.id)), spec.serialize())
                .map_err(|e| EattsError::io(env_dir.display().to_string(), e))?;
            // Canonical draw, for listening and external tools.
            if let Some(rir) = env.rir_variant(0)? {
                write_wav(
                    &env_dir.join(format!("{}.wav", env.id)),
                    &rir.as_waveform(),
                    WavFormat::Float32,
                )?;
            }
        }
    }
    Ok(())
}

/// Builds the cross corpus for extractor training: the full product of
/// `n_speakers_per_env` speakers and `n_envs` environments, `n_utts`
/// utterances per cell. Every environment is heard from every speaker, so
/// neither factor predicts the other.
///
/// Environments are drawn from the library named by `env_ns` and seeded by
/// `env_seed`: two corpora built with the same (env_ns, env_seed) share
/// identical rooms while keeping their speaker populations disjoint.
pub fn build_extractor_corpus(
    ns: &str,
    env_ns: &str,
    env_seed: u64,
    n_envs: usize,
    n_speakers_per_env: usize,
    n_utts: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest> {
    if n_speakers_per_env < 2 {
        return Err(EattsError::Config(
            "extractor corpus needs >= 2 speakers per environment".into(),
        ));
    }
    if n_envs < 2 || n_utts < 2 {
        return Err(EattsError::Config(
            "extractor corpus needs >= 2 environments and >= 2 utterances".into(),
        ));
    }
    let envs: Vec<Environment> = (0..n_envs)
        .map(|e| synth_environment(&format!("{env_ns}env{e:02}"), e, env_seed))
        .collect::<Result<_>>()?;
    let heldout_per_cell = (n_utts as f64 * 0.1).ceil() as usize;
    let mut master = Rng::new(stage_seed(seed, "extractor-corpus"));
    let mut plans = Vec::new();
    for s in 0..n_speakers_per_env {
        let speaker_id = format!("{ns}spk{s:02}");
        let voice = SpeakerVoiceSpec::derive(&speaker_id, seed);
        for env in &envs {
            for u in 0..n_utts {
                let utt_id = format!("{speaker_id}_{}_{u:03}", env.id);
                let mut rng = master.fork(&utt_id);
                let (symbols, durations) = random_text(&mut rng);
                let split = if u >= n_utts - heldout_per_cell {
                    Split::Heldout
                } else {
                    Split::Train
                };
                plans.push(RenderPlan {
                    utt_id,
                    speaker_id: speaker_id.clone(),
                    env_id: env.id.clone(),
                    split,
                    symbols,
                    durations,
                    voice: voice.clone(),
                });
            }
        }
    }
    let records = render_all(plans, &envs, out_dir)?;
    write_env_files(&envs, out_dir)?;
    let manifest = Manifest { records };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Builds the fully entangled TTS corpus: `n_pairs` speakers bijectively
/// paired with `n_pairs` environments (exactly one of them "clean"), a
/// heldout fraction of pairs excluded from training entirely, and a heldout
/// fraction of utterances inside each training pair.
pub fn build_tts_corpus(
    ns: &str,
    n_pairs: usize,
    n_utts_per_pair: usize,
    heldout_pair_frac: f64,
    heldout_utt_frac: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<(Manifest, PairingPlan)> {
    if n_pairs < 4 {
        return Err(EattsError::Config(format!(
            "tts corpus needs >= 4 pairs, got {n_pairs}"
        )));
    }
    for (name, frac) in [
        ("heldout_pair_frac", heldout_pair_frac),
        ("heldout_utt_frac", heldout_utt_frac),
    ] {
        if !(0.0..1.0).contains(&frac) || frac <= 0.0 {
            return Err(EattsError::Config(format!(
                "{name} must lie in (0, 1), got {frac}"
            )));
        }
    }
    if n_utts_per_pair < 2 {
        return Err(EattsError::Config(
            "tts corpus needs >= 2 utterances per pair".into(),
        ));
    }

    // Environment 0 is clean; the rest are synthetic rooms.
    let mut envs = vec![Environment::clean("clean")];
    for e in 1..n_pairs {
        envs.push(synth_environment(&format!("{ns}env{e:02}"), e - 1, seed)?);
    }

    let speakers: Vec<String> = (0..n_pairs).map(|s| format!("{ns}spk{s:02}")).collect();
    let mut master = Rng::new(stage_seed(seed, "tts-corpus"));

    // Random bijection speaker -> environment.
    let mut env_order: Vec<usize> = (0..n_pairs).collect();
    master.shuffle(&mut env_order);
    let pairs: Vec<(String, String)> = speakers
        .iter()
        .zip(env_order.iter())
        .map(|(s, &e)| (s.clone(), envs[e].id.clone()))
        .collect();

    // Hold out pairs (never the clean one, which the paper trains on).
    let n_heldout_pairs = ((n_pairs as f64) * heldout_pair_frac).ceil() as usize;
    let candidates: Vec<usize> = (0..n_pairs)
        .filter(|&i| pairs[i].1 != "clean")
        .collect();
    if n_heldout_pairs >= candidates.len() {
        return Err(EattsError::Config(format!(
            "heldout_pair_frac {heldout_pair_frac} leaves no training pairs"
        )));
    }
    let picked = master.choose_k(candidates.len(), n_heldout_pairs);
    let mut heldout_pairs: Vec<(String, String)> =
        picked.iter().map(|&i| pairs[candidates[i]].clone()).collect();
    heldout_pairs.sort();

    let plan = PairingPlan {
        pairs: pairs.clone(),
        heldout_pairs,
    };

    let heldout_per_pair = ((n_utts_per_pair as f64) * heldout_utt_frac).ceil() as usize;
    if heldout_per_pair >= n_utts_per_pair {
        return Err(EattsError::Config(
            "heldout_utt_frac holds out every utterance".into(),
        ));
    }
    let mut plans = Vec::new();
    for (speaker_id, env_id) in &pairs {
        let voice = SpeakerVoiceSpec::derive(speaker_id, seed);
        let pair_heldout = plan.is_heldout(speaker_id, env_id);
        for u in 0..n_utts_per_pair {
            let utt_id = format!("{speaker_id}_{env_id}_{u:03}");
            let mut rng = master.fork(&utt_id);
            let (symbols, durations) = random_text(&mut rng);
            let split = if pair_heldout || u >= n_utts_per_pair - heldout_per_pair {
                Split::Heldout
            } else {
                Split::Train
            };
            plans.push(RenderPlan {
                utt_id,
                speaker_id: speaker_id.clone(),
                env_id: env_id.clone(),
                split,
                symbols,
                durations,
                voice: voice.clone(),
            });
        }
    }
    let records = render_all(plans, &envs, out_dir)?;
    write_env_files(&envs, out_dir)?;
    let manifest = Manifest { records };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    std::fs::write(out_dir.join("pairs.tsv"), plan.serialize())
        .map_err(|e| EattsError::io(out_dir.display().to_string(), e))?;
    Ok((manifest, plan))
}

/// Reloads the environments written next to a corpus manifest.
pub fn load_environments(corpus_dir: &Path, manifest: &Manifest) -> Result<Vec<Environment>> {
    let mut ids: Vec<&str> = manifest.records.iter().map(|r| r.env_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut envs = Vec::new();
    for id in ids {
        if id == "clean" {
            envs.push(Environment::clean(id));
            continue;
        }
        let spec_path = corpus_dir.join("envs").join(format!("{id}.rirspec"));
        let text = std::fs::read_to_string(&spec_path)
            .map_err(|e| EattsError::io(spec_path.display().to_string(), e))?;
        let spec = RirSpec::parse(&text)?;
        envs.push(Environment {
            id: id.to_string(),
            spec: Some(spec),
        });
    }
    Ok(envs)
}

/// Convenience wrapper: environment lookup by id.
pub fn env_by_id<'a>(envs: &'a [Environment], id: &str) -> Result<&'a Environment> {
    envs.iter()
        .find(|e| e.id == id)
        .ok_or_else(|| EattsError::Lookup(format!("environment '{id}'")))
}

pub fn corpus_dir_of(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}
