//! Short-time Fourier analysis: Hann window, center (reflect) framing,
//! and the inverse via weighted overlap-add.

use super::fft::{fft, ifft, Cpx};
use super::{Waveform, PIPELINE_RATE};
use crate::error::{EattsError, Result};
use crate::rng::fnv1a64;

/// Analysis configuration. Defaults follow a 50 ms Hann window and 12.5 ms
/// hop at 22,050 Hz, with an 80-channel mel filterbank over 0..8 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct StftMelConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for StftMelConfig {
    fn default() -> Self {
        StftMelConfig {
            win_length: 1102,
            hop_length: 275,
            fft_size: 2048,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl StftMelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < self.win_length {
            return Err(EattsError::Parameter(format!(
                "fft_size {} must be a power of two >= win_length {}",
                self.fft_size, self.win_length
            )));
        }
        if self.hop_length == 0 || self.win_length == 0 || self.n_mels == 0 {
            return Err(EattsError::Parameter("zero-sized STFT config field".into()));
        }
        if self.fmax <= self.fmin || self.fmax > PIPELINE_RATE as f64 / 2.0 {
            return Err(EattsError::Parameter(format!(
                "mel band [{}, {}] invalid at {} Hz",
                self.fmin, self.fmax, PIPELINE_RATE
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count under center padding of win_length/2 per side.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        let padded = n_samples + 2 * (self.win_length / 2);
        1 + (padded - self.win_length) / self.hop_length
    }

    /// Stable hash tying features to the configuration that produced them.
    pub fn config_hash(&self) -> u64 {
        let s = format!(
            "win={};hop={};fft={};mels={};fmin={};fmax={}",
            self.win_length, self.hop_length, self.fft_size, self.n_mels, self.fmin, self.fmax
        );
        fnv1a64(s.as_bytes())
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex spectrogram, frames x bins, row-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<Cpx>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Cpx] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.abs()).collect()
    }
}

/// Reflected index for center padding (period 2n-2, no edge duplication).
fn reflect(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

pub fn stft(w: &Waveform, cfg: &StftMelConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.samples.is_empty() {
        return Err(EattsError::EmptyInput("stft of empty waveform".into()));
    }
    if w.sample_rate != PIPELINE_RATE {
        return Err(EattsError::SampleRate {
            expected: PIPELINE_RATE,
            got: w.sample_rate,
        });
    }
    let n = w.samples.len();
    let pad = cfg.win_length / 2;
    let window = hann(cfg.win_length);
    let n_frames = cfg.frame_count(n);
    let n_bins = cfg.n_bins();
    let mut data = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Cpx::ZERO; cfg.fft_size];
    for t in 0..n_frames {
        let start = t as isize * cfg.hop_length as isize - pad as isize;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = if j < cfg.win_length {
                let src = reflect(start + j as isize, n);
                Cpx::real(w.samples[src] * window[j])
            } else {
                Cpx::ZERO
            };
        }
        fft(&mut buf);
        data.extend(buf.iter().take(n_bins).copied());
    }
    Ok(Spectrogram {
        n_frames,
        n_bins,
        data,
    })
}

/// Inverse STFT by weighted overlap-add; returns `out_len` samples starting
/// after the center padding.
pub fn istft(spec: &Spectrogram, cfg: &StftMelConfig, out_len: usize) -> Vec<f64> {
    let pad = cfg.win_length / 2;
    let total = pad + (spec.n_frames - 1) * cfg.hop_length + cfg.win_length;
    let window = hann(cfg.win_length);
    let mut acc = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Cpx::ZERO; cfg.fft_size];
    for t in 0..spec.n_frames {
        let frame = spec.frame(t);
        // Rebuild the full Hermitian spectrum from the half-spectrum.
        for (j, b) in buf.iter_mut().enumerate() {
            *b = if j < frame.len() {
                frame[j]
            } else {
                let mirror = frame[cfg.fft_size - j];
                Cpx::new(mirror.re, -mirror.im)
            };
        }
        ifft(&mut buf);
        let start = t * cfg.hop_length;
        for j in 0..cfg.win_length {
            acc[start + j] += buf[j].re * window[j];
            wsum[start + j] += window[j] * window[j];
        }
    }
    (0..out_len)
        .map(|i| {
            let idx = i + pad;
            if idx < total && wsum[idx] > 1e-8 {
                acc[idx] / wsum[idx]
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_81_frames() {
        let cfg = StftMelConfig::default();
        let w = Waveform::new(vec![0.1; 22_050], PIPELINE_RATE);
        let s = stft(&w, &cfg).unwrap();
        assert_eq!(s.n_frames, 81);
        assert_eq!(cfg.frame_count(22_050), 81);
    }

    #[test]
    fn frame_count_formula_holds_for_random_lengths() {
        let cfg = StftMelConfig::default();
        let mut rng = crate::rng::Rng::new(21);
        for _ in 0..100 {
            let n = 1 + rng.below(40_000);
            let w = Waveform::new(vec![0.01; n], PIPELINE_RATE);
            let s = stft(&w, &cfg).unwrap();
            let pad = cfg.win_length / 2;
            let expected = 1 + (n + 2 * pad - cfg.win_length) / cfg.hop_length;
            assert_eq!(s.n_frames, expected, "len {n}");
        }
    }

    #[test]
    fn zero_input_zero_magnitudes() {
        let cfg = StftMelConfig::default();
        let w = Waveform::new(vec![0.0; 5000], PIPELINE_RATE);
        let s = stft(&w, &cfg).unwrap();
        assert!(s.magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn empty_waveform_rejected() {
        let cfg = StftMelConfig::default();
        let w = Waveform::new(vec![], PIPELINE_RATE);
        assert!(matches!(stft(&w, &cfg), Err(EattsError::EmptyInput(_))));
    }

    #[test]
    fn wrong_rate_rejected() {
        let cfg = StftMelConfig::default();
        let w = Waveform::new(vec![0.0; 100], 16_000);
        assert!(matches!(stft(&w, &cfg), Err(EattsError::SampleRate { .. })));
    }

    #[test]
    fn bin_centered_sine_concentrates_energy_in_mainlobe() {
        let cfg = StftMelConfig::default();
        // k * fs / fft_size with k = 186 -> ~2002 Hz, exactly bin-centered.
        let k = 186usize;
        let freq = k as f64 * PIPELINE_RATE as f64 / cfg.fft_size as f64;
        let samples: Vec<f64> = (0..22_050)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / PIPELINE_RATE as f64).sin())
            .collect();
        let s = stft(&Waveform::new(samples, PIPELINE_RATE), &cfg).unwrap();
        // Interior frame, away from padding edges.
        let t = s.n_frames / 2;
        let frame = s.frame(t);
        let total: f64 = frame.iter().map(|c| c.abs() * c.abs()).sum();
        // The window is zero-padded inside the FFT buffer, so the Hann
        // mainlobe spans +-2*fft_size/win_length bins around k.
        let half = (2 * cfg.fft_size).div_ceil(cfg.win_length);
        let main: f64 = (k - half..=k + half)
            .map(|b| frame[b].abs() * frame[b].abs())
            .sum();
        assert!(main / total >= 0.9, "mainlobe fraction {}", main / total);
        let peak = frame
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert_eq!(peak, k, "spectral peak must sit on the tone bin");
    }

    #[test]
    fn istft_reconstructs_interior() {
        let cfg = StftMelConfig::default();
        let mut rng = crate::rng::Rng::new(3);
        let samples: Vec<f64> = (0..8000).map(|_| rng.range(-0.5, 0.5)).collect();
        let w = Waveform::new(samples.clone(), PIPELINE_RATE);
        let s = stft(&w, &cfg).unwrap();
        let back = istft(&s, &cfg, samples.len());
        // Perfect reconstruction holds away from the edges.
        for i in cfg.win_length..samples.len() - cfg.win_length {
            assert!(
                (back[i] - samples[i]).abs() < 1e-8,
                "i={} {} vs {}",
                i,
                back[i],
                samples[i]
            );
        }
    }
}
