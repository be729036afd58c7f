//! Binary dataset container for rendered utterances.
//!
//! Carries the frame dimension, phoneme inventory size, a speaker table
//! (latents included, so downstream tools can rebuild oracle metadata),
//! and aligned utterance records. Same CRC discipline as checkpoints.

use std::io::Read;
use std::path::Path;

use crate::harness::checkpoint::{crc32, CheckpointError};
use crate::numerics::Tensor;
use crate::toyworld::{ToySpeaker, Utterance};
use thiserror::Error;

pub const DATA_MAGIC: &[u8; 5] = b"GTTSD";
pub const DATA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic; not a dataset file")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("crc mismatch")]
    CrcMismatch,
    #[error("truncated file")]
    Truncated,
    #[error("record {0}: alignment does not partition the frames")]
    BadAlignment(usize),
    #[error("record {record}: phoneme id {id} out of range (K = {classes})")]
    BadPhoneme {
        record: usize,
        id: usize,
        classes: usize,
    },
    #[error("record {0}: unknown speaker id")]
    BadSpeaker(usize),
}

/// Speaker-table entry.
#[derive(Clone, Debug)]
pub struct SpeakerEntry {
    pub id: usize,
    pub holdout: bool,
    pub speaker: ToySpeaker,
}

/// In-memory dataset file.
#[derive(Clone, Debug, Default)]
pub struct DatasetFile {
    pub channels: usize,
    pub phoneme_classes: usize,
    pub speakers: Vec<SpeakerEntry>,
    pub records: Vec<Utterance>,
}

impl DatasetFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.phoneme_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.speakers.len() as u32).to_le_bytes());
        for s in &self.speakers {
            out.extend_from_slice(&(s.id as u32).to_le_bytes());
            out.push(s.holdout as u8);
            out.extend_from_slice(&s.speaker.rate.to_le_bytes());
            for v in s.speaker.offsets.iter().chain(&s.speaker.scales) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for utt in &self.records {
            out.extend_from_slice(&(utt.speaker as u32).to_le_bytes());
            out.extend_from_slice(&(utt.phonemes.len() as u32).to_le_bytes());
            for &p in &utt.phonemes {
                out.extend_from_slice(&(p as u32).to_le_bytes());
            }
            for &(start, len) in &utt.spans {
                out.extend_from_slice(&(start as u32).to_le_bytes());
                out.extend_from_slice(&(len as u32).to_le_bytes());
            }
            for v in utt.frames.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DatasetFile, DatasetError> {
        if bytes.len() < DATA_MAGIC.len() + 8 + 4 {
            return Err(DatasetError::Truncated);
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if stored != crc32(body) {
            return Err(DatasetError::CrcMismatch);
        }
        let mut r = ByteReader { bytes: body, pos: 0 };
        if r.take(DATA_MAGIC.len())? != DATA_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let channels = r.u32()? as usize;
        let phoneme_classes = r.u32()? as usize;
        let nspk = r.u32()? as usize;
        let mut speakers = Vec::with_capacity(nspk);
        for _ in 0..nspk {
            let id = r.u32()? as usize;
            let holdout = r.u8()? != 0;
            let rate = r.f64()?;
            let mut offsets = Vec::with_capacity(channels);
            for _ in 0..channels {
                offsets.push(r.f64()?);
            }
            let mut scales = Vec::with_capacity(channels);
            for _ in 0..channels {
                scales.push(r.f64()?);
            }
            speakers.push(SpeakerEntry {
                id,
                holdout,
                speaker: ToySpeaker {
                    offsets,
                    scales,
                    rate,
                },
            });
        }
        let nrec = r.u32()? as usize;
        let mut records = Vec::with_capacity(nrec);
        for ri in 0..nrec {
            let speaker = r.u32()? as usize;
            if !speakers.iter().any(|s| s.id == speaker) {
                return Err(DatasetError::BadSpeaker(ri));
            }
            let np = r.u32()? as usize;
            let mut phonemes = Vec::with_capacity(np);
            for _ in 0..np {
                let p = r.u32()? as usize;
                if p >= phoneme_classes {
                    return Err(DatasetError::BadPhoneme {
                        record: ri,
                        id: p,
                        classes: phoneme_classes,
                    });
                }
                phonemes.push(p);
            }
            let mut spans = Vec::with_capacity(np);
            let mut cursor = 0usize;
            for _ in 0..np {
                let start = r.u32()? as usize;
                let len = r.u32()? as usize;
                if start != cursor || len == 0 {
                    return Err(DatasetError::BadAlignment(ri));
                }
                cursor += len;
                spans.push((start, len));
            }
            let total = cursor;
            let mut data = Vec::with_capacity(total * channels);
            for _ in 0..total * channels {
                data.push(r.f64()?);
            }
            records.push(Utterance {
                speaker,
                phonemes,
                spans,
                frames: Tensor::from_vec(&[total, channels], data),
            });
        }
        if r.pos != body.len() {
            return Err(DatasetError::Truncated);
        }
        Ok(DatasetFile {
            channels,
            phoneme_classes,
            speakers,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        super::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetFile, DatasetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        DatasetFile::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.bytes.len() {
            return Err(DatasetError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// The checkpoint error type is re-used by callers that handle both kinds
// of files; keep the conversion cheap and explicit.
impl From<CheckpointError> for DatasetError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => DatasetError::Io(io),
            _ => DatasetError::CrcMismatch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::toyworld::{ToyWorld, WorldConfig};

    fn sample_dataset() -> DatasetFile {
        let world = ToyWorld::generate(WorldConfig {
            num_speakers: 4,
            holdout_speakers: 1,
            ..Default::default()
        })
        .unwrap();
        let mut rng = Rng::new(1).substream("ds");
        let mut records = Vec::new();
        for s in 0..3 {
            records.push(world.render(s, &[0, 1, 2], &mut rng).unwrap());
        }
        let holdout = world.holdout_speakers();
        DatasetFile {
            channels: world.config.channels,
            phoneme_classes: world.config.num_phonemes,
            speakers: (0..world.config.num_speakers)
                .map(|id| SpeakerEntry {
                    id,
                    holdout: holdout.contains(&id),
                    speaker: world.speakers[id].clone(),
                })
                .collect(),
            records,
        }
    }

    #[test]
    fn round_trip() {
        let ds = sample_dataset();
        let restored = DatasetFile::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(restored.records.len(), ds.records.len());
        for (a, b) in restored.records.iter().zip(&ds.records) {
            assert_eq!(a.speaker, b.speaker);
            assert_eq!(a.phonemes, b.phonemes);
            assert_eq!(a.spans, b.spans);
            assert!(a.frames.bit_eq(&b.frames));
        }
    }

    #[test]
    fn corruption_detected() {
        let ds = sample_dataset();
        let mut bytes = ds.to_bytes();
        let mid = bytes.len() / 3;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            DatasetFile::from_bytes(&bytes),
            Err(DatasetError::CrcMismatch)
        ));
    }
}
