//! Griffin-Lim phase reconstruction from a log-mel spectrogram.
//!
//! The mel matrix is lifted back to a linear magnitude spectrogram with a
//! weighted-transpose pseudo-inverse of the filterbank, then phase is
//! recovered by alternating STFT projections (plain Griffin-Lim, no
//! momentum, zero-phase init, fully deterministic).

use super::fft::Cpx;
use super::mel::{mel_filterbank, MelSpectrogram};
use super::stft::{istft, stft, Spectrogram, StftMelConfig};
use super::{Waveform, PIPELINE_RATE};
use crate::error::{EattsError, Result};

/// Result of phase reconstruction: waveform plus the spectral-convergence
/// error trace, one entry per iteration.
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    pub convergence: Vec<f64>,
}

/// Lifts log-mel frames to linear magnitudes: each bin is the
/// filterbank-weight-normalized average of the mel energies covering it.
fn mel_to_linear(mel: &MelSpectrogram, cfg: &StftMelConfig) -> Vec<f64> {
    let bank = mel_filterbank(cfg);
    let n_bins = cfg.n_bins();
    // Column sums of the filterbank for normalization.
    let mut col_sum = vec![0.0; n_bins];
    for row in &bank {
        for (c, &v) in col_sum.iter_mut().zip(row.iter()) {
            *c += v;
        }
    }
    let mut mags = vec![0.0; mel.n_frames * n_bins];
    for t in 0..mel.n_frames {
        let frame = mel.frame(t);
        let out = &mut mags[t * n_bins..(t + 1) * n_bins];
        for (m, row) in bank.iter().enumerate() {
            let energy = frame[m].exp();
            for (b, &w) in row.iter().enumerate() {
                if w > 0.0 {
                    out[b] += w * energy;
                }
            }
        }
        for (b, v) in out.iter_mut().enumerate() {
            if col_sum[b] > 1e-8 {
                *v /= col_sum[b];
            } else {
                *v = 0.0;
            }
        }
    }
    mags
}

pub fn griffin_lim(
    mel: &MelSpectrogram,
    cfg: &StftMelConfig,
    n_iter: usize,
) -> Result<GriffinLimOutput> {
    if n_iter < 1 {
        return Err(EattsError::Parameter(format!(
            "griffin_lim needs n_iter >= 1, got {n_iter}"
        )));
    }
    if mel.config_hash != cfg.config_hash() {
        return Err(EattsError::Config(
            "mel spectrogram was produced under a different STFT config".into(),
        ));
    }
    let n_bins = cfg.n_bins();
    let target = mel_to_linear(mel, cfg);
    let target_norm: f64 = target.iter().map(|m| m * m).sum::<f64>().sqrt();
    let out_len = (mel.n_frames.saturating_sub(1)) * cfg.hop_length + 1;

    // Zero-phase init.
    let mut spec = Spectrogram {
        n_frames: mel.n_frames,
        n_bins,
        data: target.iter().map(|&m| Cpx::real(m)).collect(),
    };
    let mut convergence = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let x = istft(&spec, cfg, out_len);
        let reproj = stft(&Waveform::new(x, PIPELINE_RATE), cfg)?;
        // |reproj| may have more frames than target if lengths round up;
        // compare over the target frames.
        let mut err = 0.0;
        for (i, &m) in target.iter().enumerate() {
            let diff = reproj.data[i].abs() - m;
            err += diff * diff;
        }
        convergence.push(if target_norm > 0.0 {
            err.sqrt() / target_norm
        } else {
            0.0
        });
        for (s, (&m, r)) in spec
            .data
            .iter_mut()
            .zip(target.iter().zip(reproj.data.iter()))
        {
            *s = Cpx::from_polar(m, r.arg());
        }
    }
    let samples = istft(&spec, cfg, out_len);
    Ok(GriffinLimOutput {
        waveform: Waveform::new(samples, PIPELINE_RATE),
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel::mel_spectrogram;

    #[test]
    fn rejects_zero_iterations() {
        let cfg = StftMelConfig::default();
        let mel = MelSpectrogram::new(2, 80, vec![0.0; 160], cfg.config_hash());
        assert!(matches!(
            griffin_lim(&mel, &cfg, 0),
            Err(EattsError::Parameter(_))
        ));
    }

    #[test]
    fn zero_mel_gives_near_silence() {
        let cfg = StftMelConfig::default();
        let floor = super::super::mel::MEL_FLOOR.ln();
        let mel = MelSpectrogram::new(40, 80, vec![floor; 40 * 80], cfg.config_hash());
        let out = griffin_lim(&mel, &cfg, 4).unwrap();
        let rms = (out.waveform.samples.iter().map(|s| s * s).sum::<f64>()
            / out.waveform.samples.len() as f64)
            .sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn pure_tone_peak_recovered_within_one_bin() {
        let cfg = StftMelConfig::default();
        let freq = 1000.0;
        let samples: Vec<f64> = (0..22_050)
            .map(|i| {
                0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / PIPELINE_RATE as f64).sin()
            })
            .collect();
        let mel = mel_spectrogram(&Waveform::new(samples, PIPELINE_RATE), &cfg).unwrap();
        let out = griffin_lim(&mel, &cfg, 16).unwrap();
        let spec = stft(&out.waveform, &cfg).unwrap();
        // Average magnitude over interior frames, find the dominant bin.
        let mut avg = vec![0.0; spec.n_bins];
        for t in 3..spec.n_frames - 3 {
            for (a, c) in avg.iter_mut().zip(spec.frame(t).iter()) {
                *a += c.abs();
            }
        }
        let peak_bin = avg
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0 as f64;
        let expected_bin = freq * cfg.fft_size as f64 / PIPELINE_RATE as f64;
        assert!(
            (peak_bin - expected_bin).abs() <= 1.0,
            "peak bin {peak_bin} vs expected {expected_bin}"
        );
    }

    #[test]
    fn spectral_convergence_does_not_increase() {
        let cfg = StftMelConfig::default();
        let mut rng = crate::rng::Rng::new(12);
        let samples: Vec<f64> = (0..8000)
            .map(|i| {
                0.3 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / PIPELINE_RATE as f64).sin()
                    + 0.1 * rng.range(-1.0, 1.0)
            })
            .collect();
        let mel = mel_spectrogram(&Waveform::new(samples, PIPELINE_RATE), &cfg).unwrap();
        let out = griffin_lim(&mel, &cfg, 32).unwrap();
        let first = out.convergence[0];
        let last = *out.convergence.last().unwrap();
        assert!(last <= first + 1e-6, "sc {first} -> {last}");
    }
}
