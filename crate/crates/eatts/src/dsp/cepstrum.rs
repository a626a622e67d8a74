//! Mel cepstra (orthonormal DCT-II of log-mel frames) and mel-cepstral
//! distortion.

use super::mel::MelSpectrogram;
use crate::error::{EattsError, Result};

/// Cepstral orders kept: 0..=13. Order 0 is stored but excluded from MCD.
pub const CEPSTRUM_ORDER: usize = 14;

/// Frames x order matrix of DCT-II coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MelCepstra {
    pub n_frames: usize,
    pub order: usize,
    pub data: Vec<f64>,
}

impl MelCepstra {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.order..(t + 1) * self.order]
    }
}

/// Orthonormal DCT-II of one frame, truncated to `n_out` coefficients.
pub fn dct_ii_ortho(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        let mut acc = 0.0;
        for (m, &v) in x.iter().enumerate() {
            acc += v * (std::f64::consts::PI * (2 * m + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
        out.push(scale * acc);
    }
    out
}

pub fn mel_cepstrum(mel: &MelSpectrogram) -> Result<MelCepstra> {
    if mel.n_mels < CEPSTRUM_ORDER {
        return Err(EattsError::Parameter(format!(
            "mel_cepstrum needs n_mels >= {CEPSTRUM_ORDER}, got {}",
            mel.n_mels
        )));
    }
    let mut data = Vec::with_capacity(mel.n_frames * CEPSTRUM_ORDER);
    for t in 0..mel.n_frames {
        data.extend(dct_ii_ortho(mel.frame(t), CEPSTRUM_ORDER));
    }
    Ok(MelCepstra {
        n_frames: mel.n_frames,
        order: CEPSTRUM_ORDER,
        data,
    })
}

/// Mel-cepstral distortion in dB: per frame (10/ln10)*sqrt(2*sum_{d=1..13}
/// (a_d-b_d)^2), averaged over min(T_a, T_b) frames. No time alignment.
pub fn mcd(a: &MelCepstra, b: &MelCepstra) -> Result<f64> {
    if a.n_frames == 0 || b.n_frames == 0 {
        return Err(EattsError::EmptyInput("mcd of empty cepstra".into()));
    }
    let frames = a.n_frames.min(b.n_frames);
    let factor = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    for t in 0..frames {
        let (fa, fb) = (a.frame(t), b.frame(t));
        let mut sq = 0.0;
        for d in 1..a.order.min(b.order) {
            let diff = fa[d] - fb[d];
            sq += diff * diff;
        }
        total += factor * (2.0 * sq).sqrt();
    }
    Ok(total / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cepstra_from_rows(rows: Vec<Vec<f64>>) -> MelCepstra {
        let order = rows[0].len();
        MelCepstra {
            n_frames: rows.len(),
            order,
            data: rows.concat(),
        }
    }

    #[test]
    fn dct_of_constant_has_only_order_zero() {
        let frame = vec![3.7; 80];
        let c = dct_ii_ortho(&frame, 14);
        assert!(c[0].abs() > 1.0);
        for &v in &c[1..] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn dct_of_basis_vector_is_unit_coefficient() {
        let n = 80;
        for k in 1..14usize {
            let frame: Vec<f64> = (0..n)
                .map(|m| {
                    (2.0 / n as f64).sqrt()
                        * (std::f64::consts::PI * (2 * m + 1) as f64 * k as f64 / (2 * n) as f64)
                            .cos()
                })
                .collect();
            let c = dct_ii_ortho(&frame, 14);
            for (j, &v) in c.iter().enumerate() {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-10, "k={k} j={j} v={v}");
            }
        }
    }

    #[test]
    fn dct_is_linear() {
        let mut rng = crate::rng::Rng::new(8);
        let a: Vec<f64> = (0..80).map(|_| rng.range(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..80).map(|_| rng.range(-2.0, 2.0)).collect();
        let sum: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        let ca = dct_ii_ortho(&a, 14);
        let cb = dct_ii_ortho(&b, 14);
        let cs = dct_ii_ortho(&sum, 14);
        for i in 0..14 {
            assert!((cs[i] - ca[i] - cb[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn mcd_self_distance_zero() {
        let a = cepstra_from_rows(vec![vec![1.0, 0.5, -0.2, 0.1], vec![0.3, 0.9, 0.0, -1.0]]);
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn unit_delta_in_one_coefficient_closed_form() {
        // b differs from a by exactly 1.0 in coefficient d=1 on every frame:
        // MCD = (10/ln10)*sqrt(2) ~= 6.1419.
        let a = cepstra_from_rows(vec![vec![0.7, 2.0, -0.3, 0.4]; 5]);
        let mut rows_b = vec![vec![0.7, 3.0, -0.3, 0.4]; 5];
        rows_b.iter_mut().for_each(|r| r[0] = -1.3); // order 0 must not matter
        let b = cepstra_from_rows(rows_b);
        let expected = 10.0 / std::f64::consts::LN_10 * 2.0f64.sqrt();
        let got = mcd(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        assert!((expected - 6.1419).abs() < 1e-4);
    }

    #[test]
    fn mcd_symmetric_and_truncates_to_shorter() {
        let a = cepstra_from_rows(vec![vec![0.1, 0.2, 0.3]; 7]);
        let b = cepstra_from_rows(vec![vec![0.4, -0.2, 0.9]; 4]);
        let ab = mcd(&a, &b).unwrap();
        let ba = mcd(&b, &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn mcd_scales_linearly_with_difference() {
        let a = cepstra_from_rows(vec![vec![0.0; 5]; 3]);
        let b = cepstra_from_rows(vec![vec![0.0, 0.5, 0.5, 0.5, 0.5]; 3]);
        let c = cepstra_from_rows(vec![vec![0.0, 1.0, 1.0, 1.0, 1.0]; 3]);
        let d1 = mcd(&a, &b).unwrap();
        let d2 = mcd(&a, &c).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-9);
    }

    #[test]
    fn empty_input_rejected() {
        let a = cepstra_from_rows(vec![vec![0.0; 4]]);
        let empty = MelCepstra {
            n_frames: 0,
            order: 4,
            data: vec![],
        };
        assert!(matches!(mcd(&a, &empty), Err(EattsError::EmptyInput(_))));
    }
}
