//! Corpus bookkeeping: utterance records and the TSV manifest format.
//!
//! Header: `utt_id speaker_id env_id split wav_path symbols durations`
//! (tab-separated); symbols space-separated, durations comma-separated.

use crate::error::{EattsError, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_HEADER: &str = "utt_id\tspeaker_id\tenv_id\tsplit\twav_path\tsymbols\tdurations";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(EattsError::Parse {
                path: "<manifest>".into(),
                detail: format!("unknown split '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub env_id: String,
    pub split: Split,
    pub wav_path: String,
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
}

impl UtteranceRecord {
    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Speaker,
    Environment,
}

impl GroupBy {
    pub fn key<'a>(&self, rec: &'a UtteranceRecord) -> &'a str {
        match self {
            GroupBy::Speaker => &rec.speaker_id,
            GroupBy::Environment => &rec.env_id,
        }
    }

    pub fn parse(s: &str) -> Result<GroupBy> {
        match s {
            "speaker" => Ok(GroupBy::Speaker),
            "environment" => Ok(GroupBy::Environment),
            other => Err(EattsError::Parameter(format!(
                "group-by must be speaker|environment, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn serialize(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let symbols = r
                .symbols
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let durations = r
                .durations
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.utt_id,
                r.speaker_id,
                r.env_id,
                r.split.as_str(),
                r.wav_path,
                symbols,
                durations
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EattsError::Parse {
            path: "<manifest>".into(),
            detail: "empty manifest".into(),
        })?;
        if header != MANIFEST_HEADER {
            return Err(EattsError::Parse {
                path: "<manifest>".into(),
                detail: format!("unexpected header '{header}'"),
            });
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(EattsError::Parse {
                    path: "<manifest>".into(),
                    detail: format!("line {}: expected 7 fields, got {}", lineno + 2, fields.len()),
                });
            }
            let bad = |what: &str, e: &dyn std::fmt::Display| EattsError::Parse {
                path: "<manifest>".into(),
                detail: format!("line {}: {what}: {e}", lineno + 2),
            };
            let symbols = fields[5]
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|e| bad("symbol", &e)))
                .collect::<Result<Vec<_>>>()?;
            let durations = fields[6]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|e| bad("duration", &e)))
                .collect::<Result<Vec<_>>>()?;
            records.push(UtteranceRecord {
                utt_id: fields[0].to_string(),
                speaker_id: fields[1].to_string(),
                env_id: fields[2].to_string(),
                split: Split::parse(fields[3])?,
                wav_path: fields[4].to_string(),
                symbols,
                durations,
            });
        }
        Ok(Manifest { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())
            .map_err(|e| EattsError::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EattsError::io(path.display().to_string(), e))?;
        Manifest::parse(&text)
    }

    /// Records grouped by speaker or environment, keys sorted.
    pub fn grouped(&self, by: GroupBy) -> BTreeMap<&str, Vec<&UtteranceRecord>> {
        let mut map: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
        for r in &self.records {
            map.entry(by.key(r)).or_default().push(r);
        }
        map
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn find(&self, utt_id: &str) -> Result<&UtteranceRecord> {
        self.records
            .iter()
            .find(|r| r.utt_id == utt_id)
            .ok_or_else(|| EattsError::Lookup(format!("utterance '{utt_id}' not in manifest")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            records: vec![
                UtteranceRecord {
                    utt_id: "u0".into(),
                    speaker_id: "spk0".into(),
                    env_id: "env0".into(),
                    split: Split::Train,
                    wav_path: "wav/u0.wav".into(),
                    symbols: vec![3, 1, 4],
                    durations: vec![20, 25, 18],
                },
                UtteranceRecord {
                    utt_id: "u1".into(),
                    speaker_id: "spk1".into(),
                    env_id: "env0".into(),
                    split: Split::Heldout,
                    wav_path: "wav/u1.wav".into(),
                    symbols: vec![0],
                    durations: vec![90],
                },
            ],
        }
    }

    #[test]
    fn roundtrip_preserves_records() {
        let m = sample();
        let parsed = Manifest::parse(&m.serialize()).unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn grouping_by_environment() {
        let m = sample();
        let groups = m.grouped(GroupBy::Environment);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups["env0"].len(), 2);
        let by_spk = m.grouped(GroupBy::Speaker);
        assert_eq!(by_spk.len(), 2);
    }

    #[test]
    fn rejects_malformed_lines() {
        let text = format!("{MANIFEST_HEADER}\nonly\tthree\tfields\n");
        assert!(Manifest::parse(&text).is_err());
        assert!(Manifest::parse("wrong header\n").is_err());
    }
}
