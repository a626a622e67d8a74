//! Mel filterbank and log-mel spectrogram extraction.

use super::stft::{stft, StftMelConfig};
use super::{Waveform, PIPELINE_RATE};
use crate::error::Result;

/// Linear-domain floor applied before the log.
pub const MEL_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank on the HTK mel scale, each row peak-normalized to 1.
/// Rows are n_mels x n_bins.
pub fn mel_filterbank(cfg: &StftMelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    // n_mels + 2 edge points, uniformly spaced in mel.
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|b| b as f64 * PIPELINE_RATE as f64 / cfg.fft_size as f64)
        .collect();
    let mut bank = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row = vec![0.0; n_bins];
        for (b, &f) in bin_hz.iter().enumerate() {
            if f > lo && f < center {
                row[b] = (f - lo) / (center - lo);
            } else if (f - center).abs() < 1e-12 {
                row[b] = 1.0;
            } else if f > center && f < hi {
                row[b] = (hi - f) / (hi - center);
            }
        }
        // Peak-normalize after sampling at bin frequencies.
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            for v in row.iter_mut() {
                *v /= peak;
            }
        }
        bank.push(row);
    }
    bank
}

/// Log-compressed mel spectrogram, frames x n_mels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
    pub config_hash: u64,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f64>, config_hash: u64) -> Self {
        debug_assert_eq!(data.len(), n_frames * n_mels);
        MelSpectrogram {
            n_frames,
            n_mels,
            data,
            config_hash,
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Drops frames past `n`, used to align features to symbol durations.
    pub fn truncated(mut self, n: usize) -> MelSpectrogram {
        if n < self.n_frames {
            self.data.truncate(n * self.n_mels);
            self.n_frames = n;
        }
        self
    }

    pub fn crop(&self, start: usize, len: usize) -> &[f64] {
        &self.data[start * self.n_mels..(start + len) * self.n_mels]
    }
}

/// Magnitude STFT -> triangular mel filterbank -> floor clamp -> natural log.
pub fn mel_spectrogram(w: &Waveform, cfg: &StftMelConfig) -> Result<MelSpectrogram> {
    let spec = stft(w, cfg)?;
    let bank = mel_filterbank(cfg);
    let mut data = Vec::with_capacity(spec.n_frames * cfg.n_mels);
    let mut mags = vec![0.0; spec.n_bins];
    for t in 0..spec.n_frames {
        let frame = spec.frame(t);
        for (m, c) in mags.iter_mut().zip(frame.iter()) {
            *m = c.abs();
        }
        for row in &bank {
            let e: f64 = row.iter().zip(mags.iter()).map(|(&w, &m)| w * m).sum();
            data.push(e.max(MEL_FLOOR).ln());
        }
    }
    Ok(MelSpectrogram::new(
        spec.n_frames,
        cfg.n_mels,
        data,
        cfg.config_hash(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_floors_at_log_1e10() {
        let cfg = StftMelConfig::default();
        let w = Waveform::new(vec![0.0; 3000], PIPELINE_RATE);
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        let floor = MEL_FLOOR.ln();
        assert!(mel.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn filterbank_rows_peak_at_one_and_centers_monotone() {
        let cfg = StftMelConfig::default();
        let bank = mel_filterbank(&cfg);
        assert_eq!(bank.len(), 80);
        let mut last_center_hz = -1.0;
        for row in &bank {
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let center_hz = argmax as f64 * PIPELINE_RATE as f64 / cfg.fft_size as f64;
            assert!(center_hz > last_center_hz, "centers must increase");
            assert!(center_hz <= cfg.fmax + 1e-9);
            last_center_hz = center_hz;
        }
        // Centers must agree with the mel formula: uniformly spaced in mel.
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        for (m, row) in bank.iter().enumerate() {
            let expected_hz =
                mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let center_hz = argmax as f64 * PIPELINE_RATE as f64 / cfg.fft_size as f64;
            let bin_width = PIPELINE_RATE as f64 / cfg.fft_size as f64;
            assert!(
                (center_hz - expected_hz).abs() <= bin_width,
                "mel {m}: {center_hz} vs {expected_hz}"
            );
        }
    }

    #[test]
    fn flat_spectrum_gives_positive_output_in_all_channels() {
        let cfg = StftMelConfig::default();
        let bank = mel_filterbank(&cfg);
        for (m, row) in bank.iter().enumerate() {
            let e: f64 = row.iter().sum();
            assert!(e > 0.0, "channel {m} dead");
        }
    }

    #[test]
    fn white_noise_mel_is_finite() {
        let cfg = StftMelConfig::default();
        let mut rng = crate::rng::Rng::new(17);
        let samples: Vec<f64> = (0..11_025).map(|_| rng.range(-0.9, 0.9)).collect();
        let mel = mel_spectrogram(&Waveform::new(samples, PIPELINE_RATE), &cfg).unwrap();
        assert!(mel.data.iter().all(|v| v.is_finite()));
        assert!(mel.data.iter().all(|&v| v >= MEL_FLOOR.ln()));
    }
}
