//! Versioned binary model file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VARNN1"
//! u64 header length, then the header as JSON
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rows, u32 cols,
//!             rows * cols f64 values
//! ```
//!
//! The header holds the model configuration, the vocabulary (words and
//! labels), the training configuration, the seed and the best validation F.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelParams};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 6] = b"VARNN1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub best_validation_f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, params: ModelParams) -> Result<Self> {
        let ck = Checkpoint { header, params };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        h.config.validate()?;
        self.params.check_config(&h.config)?;
        if self.params.decoder.rows() != h.config.label_count {
            return Err(Error::Schema(format!(
                "header declares {} labels, decoder has {} rows",
                h.config.label_count,
                self.params.decoder.rows()
            )));
        }
        if h.vocabulary.label_count() > h.config.label_count {
            return Err(Error::Schema(format!(
                "vocabulary has {} labels, model has {}",
                h.vocabulary.label_count(),
                h.config.label_count
            )));
        }
        if h.vocabulary.word_count() > h.config.vocab_size {
            return Err(Error::Schema(format!(
                "vocabulary has {} words, embedding has {} rows",
                h.vocabulary.word_count(),
                h.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let tensors = self.params.tensors();
        let mut out = Vec::with_capacity(16 + header.len() + self.params.parameter_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&u32_len(tensors.len())?.to_le_bytes());
        for (name, _, t) in &tensors {
            let (rows, cols) = t.shape();
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(rows)?.to_le_bytes());
            out.extend_from_slice(&u32_len(cols)?.to_le_bytes());
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let header_len = usize::try_from(r.u64()?).map_err(|_| Error::Format("header too large".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        header.config.validate()?;

        let mut params = ModelParams::zeros(&header.config);
        let count = r.u32()? as usize;
        {
            let mut slots = params.tensors_mut();
            if count != slots.len() {
                return Err(Error::Schema(format!(
                    "configuration implies {} tensors, file has {count}",
                    slots.len()
                )));
            }
            for (name, _, slot) in slots.iter_mut() {
                let len = r.u32()? as usize;
                let found = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
                if found != name {
                    return Err(Error::Schema(format!("expected tensor {name}, found {found}")));
                }
                let shape = (r.u32()? as usize, r.u32()? as usize);
                if shape != slot.shape() {
                    return Err(Error::Schema(format!(
                        "tensor {name}: expected shape {:?}, found {shape:?}",
                        slot.shape()
                    )));
                }
                for v in slot.values_mut() {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Checkpoint::new(header, params)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::corpus::parse_conll;
    use crate::math::Rng;
    use crate::network::{predict, Direction, Regime};

    fn sample(cell: CellKind, direction: Direction) -> Checkpoint {
        let corpus = parse_conll("from O\nboston B-dept\nto O\ndenver B-arr\n").unwrap();
        let vocab = Vocabulary::build(&corpus, 1, false);
        let config = ModelConfig {
            embed_dim: 4,
            hidden_dim: 3,
            label_count: vocab.label_count(),
            regime: Regime::Naive,
            ..ModelConfig::new(cell, direction, vocab.word_count())
        };
        let params = ModelParams::init(&config, &mut Rng::new(9)).unwrap();
        let header = CheckpointHeader {
            config,
            vocabulary: vocab,
            train_config: TrainConfig::default(),
            seed: 9,
            best_validation_f: 0.1 + 0.2,
        };
        Checkpoint::new(header, params).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for cell in CellKind::ALL {
            for dir in [Direction::Uni, Direction::Bi] {
                let ck = sample(cell, dir);
                let bytes = ck.to_bytes().unwrap();
                assert_eq!(&bytes[..6], b"VARNN1");
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, ck);
                assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let ck = sample(CellKind::Gru, Direction::Bi);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let tokens = [1, 2, 3, 4, 0];
        let a = predict(&ck.params, &ck.header.config, &tokens).unwrap();
        let b = predict(&back.params, &back.header.config, &tokens).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("varnn-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.bin");
        let ck = sample(CellKind::Lstm, Direction::Uni);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_corruption() {
        let ck = sample(CellKind::Vanilla, Direction::Uni);
        let bytes = ck.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_label_count_mismatch() {
        let ck = sample(CellKind::Vanilla, Direction::Uni);
        let mut header = ck.header.clone();
        header.config.label_count += 1;
        assert!(matches!(
            Checkpoint::new(header.clone(), ck.params.clone()),
            Err(Error::Schema(_))
        ));

        // Same mismatch written by hand: header says L + 1, tensors carry L rows.
        let good = ck.to_bytes().unwrap();
        let old_len = u64::from_le_bytes(good[6..14].try_into().unwrap()) as usize;
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut forged = good[..6].to_vec();
        forged.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        forged.extend_from_slice(&new_header);
        forged.extend_from_slice(&good[14 + old_len..]);
        assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::Schema(_))));
    }
}
