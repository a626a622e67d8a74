//! Deterministic toy speech: a harmonic source per speaker, shaped by
//! per-symbol resonance patterns. Stands in for real corpora at desk scale;
//! speakers separate by pitch, spectral tilt and formant scaling, symbols by
//! their resonance layout.

use crate::dsp::{Waveform, PIPELINE_RATE};
use crate::error::{EattsError, Result};
use crate::rng::{fnv1a64, Rng};

/// Default symbol vocabulary size.
pub const VOCAB_SIZE: usize = 16;

/// Frame hop used to size utterances: duration is counted in mel frames.
pub const FRAME_HOP: usize = 275;

/// Neutral vocal-tract reference the speaker formants are expressed against.
const REF_FORMANTS: [f64; 3] = [540.0, 1500.0, 2700.0];
const FORMANT_BW: [f64; 3] = [90.0, 130.0, 180.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVoiceSpec {
    pub f0: f64,
    pub formant_centers: Vec<f64>,
    pub spectral_tilt: f64,
    pub seed: u64,
}

impl SpeakerVoiceSpec {
    /// Deterministically derives a voice from a speaker id and master seed.
    pub fn derive(speaker_id: &str, master_seed: u64) -> SpeakerVoiceSpec {
        let mut rng = Rng::new(master_seed ^ fnv1a64(speaker_id.as_bytes()));
        let f0 = (rng.range(95f64.ln(), 340f64.ln())).exp();
        let formant_centers = vec![
            rng.range(380.0, 700.0),
            rng.range(1100.0, 1900.0),
            rng.range(2300.0, 3100.0),
        ];
        let spectral_tilt = rng.range(-13.0, -5.0);
        SpeakerVoiceSpec {
            f0,
            formant_centers,
            spectral_tilt,
            seed: rng.next_u64(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(80.0..=400.0).contains(&self.f0) {
            return Err(EattsError::Parameter(format!(
                "voice f0 {} outside [80, 400] Hz",
                self.f0
            )));
        }
        let below_8k = self
            .formant_centers
            .iter()
            .filter(|&&f| f < 8000.0)
            .count();
        if below_8k < 2 {
            return Err(EattsError::Parameter(
                "voice needs >= 2 formants below 8 kHz".into(),
            ));
        }
        Ok(())
    }
}

/// Canonical resonance centers for a symbol, before speaker scaling.
pub fn symbol_resonances(symbol: usize) -> [f64; 3] {
    let h = fnv1a64(&symbol.to_le_bytes());
    let u = |salt: u64| -> f64 {
        let x = h.wrapping_mul(salt | 1).rotate_left((salt % 63) as u32);
        (x >> 11) as f64 / (1u64 << 53) as f64
    };
    [
        250.0 + 600.0 * u(0x9e37),
        900.0 + 1500.0 * u(0x85eb),
        2500.0 + 1000.0 * u(0xc2b2),
    ]
}

/// Resonance gain at frequency f for a symbol voiced by a speaker: the
/// symbol's canonical formants scaled by the speaker's vocal-tract ratios.
fn resonance_gain(f: f64, symbol_formants: &[f64; 3], ratios: &[f64; 3]) -> f64 {
    let mut gain = 0.08;
    for k in 0..3 {
        let center = symbol_formants[k] * ratios[k];
        let z = (f - center) / FORMANT_BW[k];
        gain += (-0.5 * z * z).exp();
    }
    gain
}

/// Synthesizes one utterance: phase-continuous harmonics at the speaker's
/// f0 with per-symbol resonance shaping, `duration * FRAME_HOP` samples per
/// symbol, peak-normalized to 0.5. Deterministic in all inputs.
pub fn synth_toy_utterance(
    voice: &SpeakerVoiceSpec,
    symbols: &[usize],
    durations: &[usize],
) -> Result<Waveform> {
    voice.validate()?;
    if symbols.is_empty() {
        return Err(EattsError::Parameter("empty symbol sequence".into()));
    }
    if symbols.len() != durations.len() {
        return Err(EattsError::dim(
            "symbols vs durations",
            &[symbols.len()],
            &[durations.len()],
        ));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(EattsError::Parameter(
            "every symbol needs duration >= 1 frame".into(),
        ));
    }
    let fs = PIPELINE_RATE as f64;
    let n_harmonics = ((7800.0 / voice.f0).floor() as usize).clamp(3, 60);
    let mut phase_rng = Rng::new(voice.seed);
    let phases: Vec<f64> = (0..n_harmonics)
        .map(|_| phase_rng.range(0.0, 2.0 * std::f64::consts::PI))
        .collect();
    // Source amplitude per harmonic: spectral tilt in dB per octave.
    let source_amp: Vec<f64> = (1..=n_harmonics)
        .map(|k| 10f64.powf(voice.spectral_tilt * (k as f64).log2() / 20.0))
        .collect();
    let ratios = [
        voice.formant_centers[0] / REF_FORMANTS[0],
        voice.formant_centers[1] / REF_FORMANTS[1],
        voice.formant_centers[2] / REF_FORMANTS[2],
    ];
    // Per-symbol harmonic gains.
    let seg_gains: Vec<Vec<f64>> = symbols
        .iter()
        .map(|&s| {
            let formants = symbol_resonances(s);
            (1..=n_harmonics)
                .map(|k| resonance_gain(k as f64 * voice.f0, &formants, &ratios))
                .collect()
        })
        .collect();

    let total: usize = durations.iter().map(|&d| d * FRAME_HOP).sum();
    let mut samples = vec![0.0f64; total];
    let two_pi = 2.0 * std::f64::consts::PI;
    // Phase-continuous oscillator bank: one rotating phasor per harmonic,
    // advanced by complex multiplication (rounding drift over an utterance
    // is ~1e-12, far below the mel floor).
    let mut osc_re: Vec<f64> = phases.iter().map(|p| p.cos()).collect();
    let mut osc_im: Vec<f64> = phases.iter().map(|p| p.sin()).collect();
    let rot: Vec<(f64, f64)> = (1..=n_harmonics)
        .map(|k| {
            let ang = two_pi * k as f64 * voice.f0 / fs;
            (ang.cos(), ang.sin())
        })
        .collect();
    let mut seg_start = 0usize;
    for (seg, &dur) in durations.iter().enumerate() {
        let seg_len = dur * FRAME_HOP;
        let fade = seg_len.min(128);
        for i in 0..seg_len {
            // Crossfade gains near the segment start to avoid clicks.
            let blend = if seg > 0 && i < fade {
                i as f64 / fade as f64
            } else {
                1.0
            };
            let mut v = 0.0;
            for k in 0..n_harmonics {
                let gain = if blend < 1.0 {
                    seg_gains[seg - 1][k] * (1.0 - blend) + seg_gains[seg][k] * blend
                } else {
                    seg_gains[seg][k]
                };
                v += source_amp[k] * gain * osc_im[k];
                let (re, im) = (osc_re[k], osc_im[k]);
                osc_re[k] = re * rot[k].0 - im * rot[k].1;
                osc_im[k] = re * rot[k].1 + im * rot[k].0;
            }
            samples[seg_start + i] = v;
        }
        seg_start += seg_len;
    }

    // Broadband aspiration noise tied to phonation. Without it the room
    // response would only ever be sampled at the speaker's harmonics and
    // environment cues would not transfer across voices.
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / total as f64).sqrt();
    let mut noise_rng = Rng::new(
        voice.seed
            ^ crate::rng::fnv1a64(
                &symbols
                    .iter()
                    .flat_map(|s| s.to_le_bytes())
                    .chain(durations.iter().flat_map(|d| d.to_le_bytes()))
                    .collect::<Vec<u8>>(),
            ),
    );
    let noise_level = 0.12 * rms;
    let mut lp = 0.0f64;
    for s in samples.iter_mut() {
        // One-pole lowpass keeps the hiss speech-like.
        lp += 0.35 * (noise_rng.normal() - lp);
        *s += noise_level * lp;
    }

    // Consonant-like noise bursts at symbol ends. They are derived from the
    // text alone (not the voice), so the room excitation heading into each
    // gap is spectrally voice-free.
    let text_seed = crate::rng::fnv1a64(
        &symbols
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .chain(durations.iter().flat_map(|d| d.to_le_bytes()))
            .collect::<Vec<u8>>(),
    );
    let mut seg_start = 0usize;
    for (seg, &dur) in durations.iter().enumerate() {
        let seg_len = dur * FRAME_HOP;
        let release = (seg_len / 2).min(8 * FRAME_HOP);
        let burst_len = (seg_len / 4).min(420);
        let burst_end = seg_len.saturating_sub(release);
        let burst_start = burst_end.saturating_sub(burst_len);
        let mut burst_rng = Rng::new(text_seed ^ (seg as u64).wrapping_mul(0x9e37_79b9));
        let mut lp = 0.0f64;
        for i in burst_start..burst_end {
            lp += 0.6 * (burst_rng.normal() - lp);
            // Short raised-cosine gate over the burst.
            let u = (i - burst_start) as f64 / burst_len.max(1) as f64;
            let gate = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * u).cos();
            samples[seg_start + i] += 0.9 * rms * gate * lp;
        }
        seg_start += seg_len;
    }

    // Per-symbol attack/release envelope. The release spans several mel
    // frames, so in reverberant renderings the fill level and decay slope
    // across the gap expose the room independently of the voice.
    let mut seg_start = 0usize;
    for &dur in durations {
        let seg_len = dur * FRAME_HOP;
        let attack = (seg_len / 4).min(176);
        let release = (seg_len / 2).min(8 * FRAME_HOP);
        for i in 0..seg_len {
            let mut env = 1.0;
            if i < attack {
                env = 0.02 + 0.98 * i as f64 / attack as f64;
            }
            let from_end = seg_len - 1 - i;
            if from_end < release {
                let fall = 0.02 + 0.98 * from_end as f64 / release as f64;
                env = env.min(fall);
            }
            samples[seg_start + i] *= env;
        }
        seg_start += seg_len;
    }

    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if peak > 0.0 {
        let k = 0.5 / peak;
        for s in samples.iter_mut() {
            *s *= k;
        }
    }
    Ok(Waveform::pipeline(samples))
}
