//! Room impulse responses: parametric synthesis (exponentially decaying
//! noise), Schroeder-integration RT60 estimation, and energy normalization.
//!
//! Synthetic RIRs stand in for measured databases at desk scale; loading
//! measured RIRs from WAV files remains supported.

use crate::dsp::{fft_convolve, read_wav, Waveform, PIPELINE_RATE};
use crate::error::{EattsError, Result};
use crate::rng::Rng;
use std::path::Path;

/// 60 dB of decay: ln(10^(60/20)) * 2 = 6.9078 per rt60 on the amplitude
/// envelope exp(-6.908 t / rt60).
const DECAY_RATE: f64 = 6.908;

#[derive(Debug, Clone, PartialEq)]
pub struct RirSpec {
    pub rt60: f64,
    pub direct_delay: usize,
    pub drr_db: f64,
    pub length: usize,
    pub seed: u64,
}

impl RirSpec {
    /// A spec with enough taps to express the full 60 dB decay.
    pub fn desk(rt60: f64, drr_db: f64, direct_delay: usize, seed: u64) -> RirSpec {
        let length = direct_delay + 1 + (rt60 * PIPELINE_RATE as f64).ceil() as usize;
        RirSpec {
            rt60,
            direct_delay,
            drr_db,
            length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.05..=2.0).contains(&self.rt60) {
            return Err(EattsError::Parameter(format!(
                "rt60 {} outside [0.05, 2.0] s",
                self.rt60
            )));
        }
        if self.length < self.direct_delay + 1 {
            return Err(EattsError::Parameter(format!(
                "length {} < direct_delay {} + 1",
                self.length, self.direct_delay
            )));
        }
        // The tail must reach at least -30 dB so the decay is expressible.
        let tail = self.length - self.direct_delay - 1;
        let needed = (self.rt60 * PIPELINE_RATE as f64 * 0.5) as usize;
        if tail < needed {
            return Err(EattsError::Parameter(format!(
                "length {} cannot express rt60 {} s (tail {tail} < {needed} samples)",
                self.length, self.rt60
            )));
        }
        Ok(())
    }

    /// key=value text form used in corpus configs.
    pub fn serialize(&self) -> String {
        format!(
            "rt60={}\ndirect_delay={}\ndrr_db={}\nlength={}\nseed={}\n",
            self.rt60, self.direct_delay, self.drr_db, self.length, self.seed
        )
    }

    pub fn parse(text: &str) -> Result<RirSpec> {
        let mut rt60 = None;
        let mut direct_delay = None;
        let mut drr_db = None;
        let mut length = None;
        let mut seed = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| EattsError::Parse {
                path: "<rir spec>".into(),
                detail: format!("expected key=value, got '{line}'"),
            })?;
            let bad = |e: &dyn std::fmt::Display| EattsError::Parse {
                path: "<rir spec>".into(),
                detail: format!("field {k}: {e}"),
            };
            match k {
                "rt60" => rt60 = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
                "direct_delay" => direct_delay = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                "drr_db" => drr_db = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
                "length" => length = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(&e))?),
                _ => {
                    return Err(EattsError::Parse {
                        path: "<rir spec>".into(),
                        detail: format!("unknown field '{k}'"),
                    })
                }
            }
        }
        let missing = |name: &str| EattsError::Parse {
            path: "<rir spec>".into(),
            detail: format!("missing field '{name}'"),
        };
        Ok(RirSpec {
            rt60: rt60.ok_or_else(|| missing("rt60"))?,
            direct_delay: direct_delay.ok_or_else(|| missing("direct_delay"))?,
            drr_db: drr_db.ok_or_else(|| missing("drr_db"))?,
            length: length.ok_or_else(|| missing("length"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        })
    }
}

/// A room impulse response at the pipeline rate.
#[derive(Debug, Clone)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub spec: Option<RirSpec>,
    pub id: String,
}

impl Rir {
    pub fn from_wav(path: &Path, id: impl Into<String>) -> Result<Rir> {
        let w = read_wav(path)?;
        if w.sample_rate != PIPELINE_RATE {
            return Err(EattsError::SampleRate {
                expected: PIPELINE_RATE,
                got: w.sample_rate,
            });
        }
        Ok(Rir {
            taps: w.samples,
            spec: None,
            id: id.into(),
        })
    }

    pub fn as_waveform(&self) -> Waveform {
        Waveform::pipeline(self.taps.clone())
    }

    /// Convolves a signal with this response (full linear convolution).
    pub fn apply(&self, x: &Waveform) -> Result<Waveform> {
        fft_convolve(x, &self.as_waveform())
    }
}

/// Synthesizes a deterministic RIR: a unit direct impulse followed by
/// Gaussian noise under an exp(-6.908 t / rt60) envelope, with the
/// direct-to-reverberant energy ratio set exactly to the requested dB value,
/// then energy-normalized.
pub fn synth_rir(spec: &RirSpec) -> Result<Rir> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut taps = vec![0.0; spec.length];
    taps[spec.direct_delay] = 1.0;
    let rate = PIPELINE_RATE as f64;
    let mut tail_energy = 0.0;
    for n in spec.direct_delay + 1..spec.length {
        let t = (n - spec.direct_delay) as f64 / rate;
        let v = rng.normal() * (-DECAY_RATE * t / spec.rt60).exp();
        taps[n] = v;
        tail_energy += v * v;
    }
    // Direct energy is 1; scale the tail so direct/reverb == drr exactly.
    let target = 10f64.powf(-spec.drr_db / 10.0);
    if tail_energy > 0.0 {
        let k = (target / tail_energy).sqrt();
        for tap in taps.iter_mut().skip(spec.direct_delay + 1) {
            *tap *= k;
        }
    }
    let rir = Rir {
        taps,
        spec: Some(spec.clone()),
        id: String::new(),
    };
    normalize_rir(rir)
}

/// Scales taps to unit energy. Tap shape is preserved.
pub fn normalize_rir(mut r: Rir) -> Result<Rir> {
    let energy: f64 = r.taps.iter().map(|t| t * t).sum();
    if energy <= 0.0 || !energy.is_finite() {
        return Err(EattsError::Degenerate(format!(
            "normalize_rir: energy {energy}"
        )));
    }
    let k = 1.0 / energy.sqrt();
    for t in r.taps.iter_mut() {
        *t *= k;
    }
    Ok(r)
}

/// RT60 via Schroeder backward integration: a least-squares line is fit to
/// the -5..-25 dB stretch of the energy decay curve and extrapolated to
/// -60 dB.
pub fn estimate_rt60(r: &Rir) -> Result<f64> {
    if r.taps.is_empty() {
        return Err(EattsError::EmptyInput("estimate_rt60 of empty RIR".into()));
    }
    // Integrate the late field only: the direct impulse would otherwise
    // dominate the curve and hide the decay at high DRR.
    let peak = r
        .taps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let tail = &r.taps[(peak + 1).min(r.taps.len())..];
    let n = tail.len();
    if n == 0 {
        return Err(EattsError::Estimation(
            "no late field after the direct impulse".into(),
        ));
    }
    // Backward cumulative energy.
    let mut edc = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        acc += tail[i] * tail[i];
        edc[i] = acc;
    }
    let total = edc[0];
    if total <= 0.0 {
        return Err(EattsError::Estimation(
            "zero late-field energy, no decay to fit".into(),
        ));
    }
    let db: Vec<f64> = edc
        .iter()
        .map(|&e| {
            if e > 0.0 {
                10.0 * (e / total).log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let start = db.iter().position(|&d| d <= -5.0).ok_or_else(|| {
        EattsError::Estimation("decay never reaches -5 dB".into())
    })?;
    let end = db.iter().position(|&d| d <= -25.0).ok_or_else(|| {
        EattsError::Estimation("decay never reaches -25 dB".into())
    })?;
    if end <= start || end - start < 10 {
        return Err(EattsError::Estimation(format!(
            "decay segment too short: {} samples",
            end.saturating_sub(start)
        )));
    }
    // Least-squares line over [start, end].
    let m = (end - start + 1) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &d) in db[start..=end].iter().enumerate() {
        let x = i as f64;
        sx += x;
        sy += d;
        sxx += x * x;
        sxy += x * d;
    }
    let denom = m * sxx - sx * sx;
    let slope = (m * sxy - sx * sy) / denom; // dB per sample, negative
    if slope >= 0.0 {
        return Err(EattsError::Estimation(format!(
            "non-decaying energy curve (slope {slope})"
        )));
    }
    Ok(-60.0 / (slope * PIPELINE_RATE as f64))
}
