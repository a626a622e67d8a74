//! Mono WAV I/O: RIFF PCM 16-bit and IEEE float32.

use super::Waveform;
use crate::error::{EattsError, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| EattsError::io(path.display().to_string(), e))?;
    parse_wav(&bytes).map_err(|detail| EattsError::Parse {
        path: path.display().to_string(),
        detail,
    })
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err("fmt chunk too short".into());
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let (tag, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    let data = data.ok_or("missing data chunk")?;
    if channels != 1 {
        return Err(format!("expected mono, got {channels} channels"));
    }
    let samples: Vec<f64> = match (tag, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => return Err(format!("unsupported format tag {tag} / {bits} bits")),
    };
    Ok(Waveform::new(samples, rate))
}

pub fn write_wav(path: &Path, w: &Waveform, format: WavFormat) -> Result<()> {
    for &s in &w.samples {
        if !s.is_finite() || s.abs() > 4.0 {
            return Err(EattsError::Numeric {
                name: path.display().to_string(),
                detail: format!("sample {s} outside [-4, 4] headroom"),
            });
        }
    }
    let bytes = encode_wav(w, format);
    let mut f = std::fs::File::create(path)
        .map_err(|e| EattsError::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| EattsError::io(path.display().to_string(), e))
}

fn encode_wav(w: &Waveform, format: WavFormat) -> Vec<u8> {
    let (tag, bits): (u16, u16) = match format {
        WavFormat::Pcm16 => (1, 16),
        WavFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_len = w.samples.len() as u32 * bytes_per_sample;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * bytes_per_sample).to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    match format {
        WavFormat::Pcm16 => {
            for &s in &w.samples {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        WavFormat::Float32 => {
            for &s in &w.samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::PIPELINE_RATE;

    #[test]
    fn float32_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("eatts_wav_test_f32");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.wav");
        let samples: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.37).sin() as f32 as f64).collect();
        let w = Waveform::new(samples.clone(), PIPELINE_RATE);
        write_wav(&path, &w, WavFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, PIPELINE_RATE);
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn pcm16_roundtrip_within_quantization() {
        let dir = std::env::temp_dir().join("eatts_wav_test_pcm");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.wav");
        let samples: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.11).sin() * 0.8).collect();
        let w = Waveform::new(samples.clone(), PIPELINE_RATE);
        write_wav(&path, &w, WavFormat::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in back.samples.iter().zip(samples.iter()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn rejects_out_of_headroom_samples() {
        let dir = std::env::temp_dir().join("eatts_wav_test_hr");
        std::fs::create_dir_all(&dir).unwrap();
        let w = Waveform::new(vec![5.0], PIPELINE_RATE);
        assert!(write_wav(&dir.join("t.wav"), &w, WavFormat::Float32).is_err());
    }
}
