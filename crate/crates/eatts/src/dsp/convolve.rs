//! Linear convolution via zero-padded FFT.

use super::fft::{fft, ifft, next_pow2, Cpx};
use super::Waveform;
use crate::error::{EattsError, Result};

/// Full linear convolution: output length is len(x) + len(h) - 1.
pub fn fft_convolve(x: &Waveform, h: &Waveform) -> Result<Waveform> {
    if x.sample_rate != h.sample_rate {
        return Err(EattsError::SampleRate {
            expected: x.sample_rate,
            got: h.sample_rate,
        });
    }
    if x.samples.is_empty() || h.samples.is_empty() {
        return Err(EattsError::EmptyInput("fft_convolve with empty signal".into()));
    }
    let out_len = x.samples.len() + h.samples.len() - 1;
    let n = next_pow2(out_len);
    let mut a = vec![Cpx::ZERO; n];
    let mut b = vec![Cpx::ZERO; n];
    for (dst, &s) in a.iter_mut().zip(x.samples.iter()) {
        *dst = Cpx::real(s);
    }
    for (dst, &s) in b.iter_mut().zip(h.samples.iter()) {
        *dst = Cpx::real(s);
    }
    fft(&mut a);
    fft(&mut b);
    for (av, bv) in a.iter_mut().zip(b.iter()) {
        *av = av.mul(*bv);
    }
    ifft(&mut a);
    let samples = a.iter().take(out_len).map(|c| c.re).collect();
    Ok(Waveform::new(samples, x.sample_rate))
}
