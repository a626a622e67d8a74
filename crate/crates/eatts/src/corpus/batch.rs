//! Feature caching and deterministic GE2E batch sampling.

use super::manifest::{GroupBy, Manifest, Split, UtteranceRecord};
use crate::dsp::{mel_spectrogram, read_wav, MelSpectrogram, StftMelConfig};
use crate::error::{EattsError, Result};
use crate::rng::Rng;
use crate::util::par_map;
use std::collections::BTreeMap;
use std::path::Path;

/// In-memory mel cache for a corpus. Mels are truncated to the symbol
/// duration total so frame counts line up with the length regulator.
pub struct FeatureStore {
    mels: BTreeMap<String, MelSpectrogram>,
}

impl FeatureStore {
    pub fn build(manifest: &Manifest, base_dir: &Path, cfg: &StftMelConfig) -> Result<FeatureStore> {
        let items: Vec<(String, String, usize)> = manifest
            .records
            .iter()
            .map(|r| (r.utt_id.clone(), r.wav_path.clone(), r.total_frames()))
            .collect();
        let computed = par_map(items, |(utt_id, wav_path, frames)| {
            let w = read_wav(&base_dir.join(&wav_path))?;
            let mel = mel_spectrogram(&w, cfg)?.truncated(frames);
            Ok::<_, EattsError>((utt_id, mel))
        });
        let mut mels = BTreeMap::new();
        for item in computed {
            let (utt_id, mel) = item?;
            mels.insert(utt_id, mel);
        }
        Ok(FeatureStore { mels })
    }

    /// A store over precomputed mels (used in tests and synthesis paths).
    pub fn from_mels(mels: BTreeMap<String, MelSpectrogram>) -> FeatureStore {
        FeatureStore { mels }
    }

    pub fn get(&self, utt_id: &str) -> Result<&MelSpectrogram> {
        self.mels
            .get(utt_id)
            .ok_or_else(|| EattsError::Lookup(format!("no features for utterance '{utt_id}'")))
    }

    pub fn len(&self) -> usize {
        self.mels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mels.is_empty()
    }
}

/// One sampled GE2E batch: s_groups * u_per_group mel crops, grouped
/// contiguously by group key, each crop exactly crop_frames x n_mels.
#[derive(Debug)]
pub struct Ge2eBatch {
    pub group_keys: Vec<String>,
    pub per_group: usize,
    pub crop_frames: usize,
    pub n_mels: usize,
    /// Crop (g, u) at index g * per_group + u, row-major frames x mels.
    pub crops: Vec<Vec<f32>>,
}

impl Ge2eBatch {
    pub fn groups(&self) -> usize {
        self.group_keys.len()
    }

    pub fn total(&self) -> usize {
        self.groups() * self.per_group
    }
}

/// Samples `s_groups` groups and `u_per_group` utterances per group from the
/// train split, cropping `crop_frames` frames at a random start in each.
/// Deterministic in the RNG state.
pub fn sample_ge2e_batch(
    manifest: &Manifest,
    store: &FeatureStore,
    group_by: GroupBy,
    s_groups: usize,
    u_per_group: usize,
    crop_frames: usize,
    rng: &mut Rng,
) -> Result<Ge2eBatch> {
    let train = manifest.split(Split::Train);
    let groups = train.grouped(group_by);
    if groups.len() < s_groups {
        return Err(EattsError::Sampling(format!(
            "need {s_groups} groups, manifest has {}",
            groups.len()
        )));
    }
    let keys: Vec<&str> = groups.keys().copied().collect();
    let chosen = rng.choose_k(keys.len(), s_groups);
    let mut group_keys = Vec::with_capacity(s_groups);
    let mut crops = Vec::with_capacity(s_groups * u_per_group);
    let mut n_mels = 0;
    for &gi in &chosen {
        let key = keys[gi];
        let recs = &groups[key];
        // Only utterances long enough for the crop are eligible.
        let eligible: Vec<&&UtteranceRecord> = recs
            .iter()
            .filter(|r| {
                store
                    .get(&r.utt_id)
                    .map(|m| m.n_frames >= crop_frames)
                    .unwrap_or(false)
            })
            .collect();
        if eligible.len() < u_per_group {
            return Err(EattsError::Sampling(format!(
                "group '{key}' has {} usable utterances of >= {crop_frames} frames, need {u_per_group}",
                eligible.len()
            )));
        }
        let picks = rng.choose_k(eligible.len(), u_per_group);
        for &ui in &picks {
            let rec = eligible[ui];
            let mel = store.get(&rec.utt_id)?;
            let max_start = mel.n_frames - crop_frames;
            let start = if max_start == 0 { 0 } else { rng.below(max_start + 1) };
            let crop: Vec<f32> = mel
                .crop(start, crop_frames)
                .iter()
                .map(|&v| v as f32)
                .collect();
            n_mels = mel.n_mels;
            crops.push(crop);
        }
        group_keys.push(key.to_string());
    }
    Ok(Ge2eBatch {
        group_keys,
        per_group: u_per_group,
        crop_frames,
        n_mels,
        crops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MelSpectrogram;

    fn fake_mel(frames: usize) -> MelSpectrogram {
        MelSpectrogram::new(frames, 80, vec![0.25; frames * 80], 1)
    }

    fn fake_corpus(groups: usize, utts: usize, frames: usize) -> (Manifest, FeatureStore) {
        let mut records = Vec::new();
        let mut mels = BTreeMap::new();
        for g in 0..groups {
            for u in 0..utts {
                let utt_id = format!("s{g}_u{u}");
                records.push(UtteranceRecord {
                    utt_id: utt_id.clone(),
                    speaker_id: format!("s{g}"),
                    env_id: format!("e{}", u % 2),
                    split: Split::Train,
                    wav_path: String::new(),
                    symbols: vec![0],
                    durations: vec![frames],
                });
                mels.insert(utt_id, fake_mel(frames));
            }
        }
        (Manifest { records }, FeatureStore::from_mels(mels))
    }

    #[test]
    fn two_by_two_batch_shapes() {
        let (m, store) = fake_corpus(3, 4, 100);
        let mut rng = Rng::new(1);
        let b =
            sample_ge2e_batch(&m, &store, GroupBy::Speaker, 2, 2, 80, &mut rng).unwrap();
        assert_eq!(b.total(), 4);
        assert_eq!(b.group_keys.len(), 2);
        for crop in &b.crops {
            assert_eq!(crop.len(), 80 * 80);
        }
    }

    #[test]
    fn paper_scale_crop_count() {
        let (m, store) = fake_corpus(64, 10, 90);
        let mut rng = Rng::new(5);
        let b =
            sample_ge2e_batch(&m, &store, GroupBy::Speaker, 64, 10, 80, &mut rng).unwrap();
        assert_eq!(b.total(), 640);
    }

    #[test]
    fn short_utterance_causes_sampling_error() {
        // A group whose utterances include one of 79 frames cannot supply
        // u_per_group = 4 crops of 80.
        let mut records = Vec::new();
        let mut mels = BTreeMap::new();
        for u in 0..4 {
            let frames = if u == 3 { 79 } else { 100 };
            let utt_id = format!("s0_u{u}");
            records.push(UtteranceRecord {
                utt_id: utt_id.clone(),
                speaker_id: "s0".into(),
                env_id: "e0".into(),
                split: Split::Train,
                wav_path: String::new(),
                symbols: vec![0],
                durations: vec![frames],
            });
            mels.insert(utt_id, fake_mel(frames));
        }
        let m = Manifest { records };
        let store = FeatureStore::from_mels(mels);
        let mut rng = Rng::new(2);
        let err =
            sample_ge2e_batch(&m, &store, GroupBy::Speaker, 1, 4, 80, &mut rng).unwrap_err();
        assert!(err.to_string().contains("s0"), "{err}");
    }

    #[test]
    fn insufficient_groups_error_names_requirement() {
        let (m, store) = fake_corpus(2, 4, 100);
        let mut rng = Rng::new(3);
        assert!(matches!(
            sample_ge2e_batch(&m, &store, GroupBy::Speaker, 5, 2, 80, &mut rng),
            Err(EattsError::Sampling(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let (m, store) = fake_corpus(4, 6, 120);
        let run = |seed: u64| {
            let mut rng = Rng::new(seed);
            let b = sample_ge2e_batch(&m, &store, GroupBy::Environment, 2, 3, 80, &mut rng)
                .unwrap();
            (b.group_keys.clone(), b.crops.clone())
        };
        assert_eq!(run(7).0, run(7).0);
        assert_eq!(run(7).1, run(7).1);
    }
}
