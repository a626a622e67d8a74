//! The EATTS1 container: named tensor records with bit-exact round-trip.
//! Used for model checkpoints and persisted mel matrices.
//!
//! Layout: magic "EATTS1", format version u32, then repeated records
//! {name: u32 length + UTF-8, dtype code u8, rank u8, dims u32 each,
//! little-endian raw values}.

use crate::error::{EattsError, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"EATTS1";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;
const DTYPE_U8: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => DTYPE_F32,
            Payload::F64(_) => DTYPE_F64,
            Payload::U64(_) => DTYPE_U64,
            Payload::U8(_) => DTYPE_U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

/// An ordered set of named records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub records: Vec<Record>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, payload: Payload) {
        let rec = Record {
            name: name.into(),
            dims,
            payload,
        };
        debug_assert_eq!(rec.dims.iter().product::<usize>(), rec.payload.len());
        self.records.push(rec);
    }

    pub fn push_f32(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        self.push(name, dims, Payload::F32(data));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) {
        self.push(name, dims, Payload::F64(data));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: Vec<u64>) {
        let n = values.len();
        self.push(name, vec![n], Payload::U64(values));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes = text.as_bytes().to_vec();
        let n = bytes.len();
        self.push(name, vec![n], Payload::U8(bytes));
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| EattsError::Checkpoint(format!("missing record '{name}'")))
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let r = self.get(name)?;
        match &r.payload {
            Payload::F32(v) => Ok((&r.dims, v)),
            _ => Err(EattsError::Checkpoint(format!("record '{name}' is not f32"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let r = self.get(name)?;
        match &r.payload {
            Payload::F64(v) => Ok((&r.dims, v)),
            _ => Err(EattsError::Checkpoint(format!("record '{name}' is not f64"))),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<&[u64]> {
        let r = self.get(name)?;
        match &r.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(EattsError::Checkpoint(format!("record '{name}' is not u64"))),
        }
    }

    pub fn get_u64_scalar(&self, name: &str) -> Result<u64> {
        let v = self.get_u64(name)?;
        if v.len() != 1 {
            return Err(EattsError::Checkpoint(format!(
                "record '{name}' has {} values, expected 1",
                v.len()
            )));
        }
        Ok(v[0])
    }

    pub fn get_text(&self, name: &str) -> Result<String> {
        let r = self.get(name)?;
        match &r.payload {
            Payload::U8(v) => String::from_utf8(v.clone())
                .map_err(|e| EattsError::Checkpoint(format!("record '{name}' not UTF-8: {e}"))),
            _ => Err(EattsError::Checkpoint(format!(
                "record '{name}' is not a text record"
            ))),
        }
    }

    /// Records under `prefix.`, with the prefix stripped: lets one file hold
    /// several model bundles.
    pub fn sub_container(&self, prefix: &str) -> Container {
        let pat = format!("{prefix}.");
        Container {
            records: self
                .records
                .iter()
                .filter(|r| r.name.starts_with(&pat))
                .map(|r| Record {
                    name: r.name[pat.len()..].to_string(),
                    dims: r.dims.clone(),
                    payload: r.payload.clone(),
                })
                .collect(),
        }
    }

    /// Merges another container in under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Container) {
        for r in &other.records {
            self.records.push(Record {
                name: format!("{prefix}.{}", r.name),
                dims: r.dims.clone(),
                payload: r.payload.clone(),
            });
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for rec in &self.records {
            let name = rec.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(rec.payload.dtype());
            out.push(rec.dims.len() as u8);
            for &d in &rec.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &rec.payload {
                Payload::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Payload::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Payload::U64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let bad = |msg: String| EattsError::Checkpoint(msg);
        if bytes.len() < 10 || &bytes[0..6] != MAGIC {
            return Err(bad("missing EATTS1 magic".into()));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut pos = 10;
        let mut records = Vec::new();
        while pos < bytes.len() {
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                if *pos + n > bytes.len() {
                    return Err(EattsError::Checkpoint("truncated record".into()));
                }
                let s = &bytes[*pos..*pos + n];
                *pos += n;
                Ok(s)
            };
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| bad(format!("record name not UTF-8: {e}")))?;
            let dtype = take(&mut pos, 1)?[0];
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = match dtype {
                DTYPE_F32 => {
                    let raw = take(&mut pos, numel * 4)?;
                    Payload::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DTYPE_F64 => {
                    let raw = take(&mut pos, numel * 8)?;
                    Payload::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DTYPE_U64 => {
                    let raw = take(&mut pos, numel * 8)?;
                    Payload::U64(
                        raw.chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DTYPE_U8 => Payload::U8(take(&mut pos, numel)?.to_vec()),
                other => return Err(bad(format!("unknown dtype code {other}"))),
            };
            records.push(Record {
                name,
                dims,
                payload,
            });
        }
        Ok(Container { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| EattsError::io(path.display().to_string(), e))?;
        f.write_all(&self.encode())
            .map_err(|e| EattsError::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Container> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| EattsError::io(path.display().to_string(), e))?;
        Container::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = Rng::new(88);
        let mut c = Container::new();
        let f32s: Vec<f32> = (0..50).map(|_| rng.range(-10.0, 10.0) as f32).collect();
        let f64s: Vec<f64> = (0..24).map(|_| rng.normal() * 1e6).collect();
        c.push_f32("model.w", vec![5, 10], f32s.clone());
        c.push_f64("mel", vec![4, 6], f64s.clone());
        c.push_u64("meta.steps", vec![12345678901234567890u64]);
        let bytes = c.encode();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, c);
        // Byte-level: re-encode equality.
        assert_eq!(back.encode(), bytes);
        let (dims, data) = back.get_f32("model.w").unwrap();
        assert_eq!(dims, &[5, 10]);
        assert_eq!(data, &f32s[..]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::decode(b"NOTFMT").is_err());
        let mut c = Container::new();
        c.push_f64("x", vec![3], vec![1.0, 2.0, 3.0]);
        let bytes = c.encode();
        assert!(Container::decode(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn missing_record_is_an_error() {
        let c = Container::new();
        assert!(matches!(c.get("nope"), Err(EattsError::Checkpoint(_))));
    }
}
