//! Signal processing: WAV I/O, STFT/mel analysis, FFT convolution,
//! Griffin-Lim reconstruction, mel cepstra and MCD.

pub mod cepstrum;
pub mod convolve;
pub mod fft;
pub mod griffin_lim;
pub mod mel;
pub mod stft;
pub mod wav;

pub use cepstrum::{mcd, mel_cepstrum, MelCepstra, CEPSTRUM_ORDER};
pub use convolve::fft_convolve;
pub use griffin_lim::{griffin_lim, GriffinLimOutput};
pub use mel::{mel_filterbank, mel_spectrogram, MelSpectrogram, MEL_FLOOR};
pub use stft::{istft, stft, Spectrogram, StftMelConfig};
pub use wav::{read_wav, write_wav, WavFormat};

/// The one sample rate used by pipeline-internal audio. Other rates are
/// rejected rather than resampled.
pub const PIPELINE_RATE: u32 = 22_050;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Waveform {
        Waveform {
            samples,
            sample_rate,
        }
    }

    /// Pipeline-internal audio at 22,050 Hz.
    pub fn pipeline(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, PIPELINE_RATE)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Scales down (never up) so the peak stays below `limit`.
    pub fn limited_to(mut self, limit: f64) -> Waveform {
        let p = self.peak();
        if p > limit {
            let k = limit / p;
            for s in self.samples.iter_mut() {
                *s *= k;
            }
        }
        self
    }

    /// Keeps only the first `n` samples.
    pub fn truncated(mut self, n: usize) -> Waveform {
        self.samples.truncate(n);
        self
    }
}
