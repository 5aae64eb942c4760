//! Binary encoder checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic            8 bytes  "PEMBCKPT"
//! format_version   u32
//! arch_len         u32, then arch_len bytes of UTF-8 `key=value` text
//! epochs           u32
//! seed             u64
//! trace_len        u32, then per entry: epoch u32, train f64,
//!                  has_heldout u8, heldout f64
//! block_count      u32, then per block: name_len u32, name bytes,
//!                  ndim u32, dims u32 × ndim, values f32 × Π dims
//! ```

use std::fs;
use std::path::Path;

use crate::embedding_net::{ArchitectureConfig, ParamBlock, ParameterSet};
use crate::error::{Error, Result};
use crate::trainer::{EpochLoss, LossTrace};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PEMBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub seed: u64,
    pub loss_history: LossTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: ParameterSet<f32>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(params: ParameterSet<f32>, meta: TrainingMeta) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            params,
            meta,
        }
    }

    pub fn architecture(&self) -> &ArchitectureConfig {
        &self.params.arch
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * ckpt.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&ckpt.format_version.to_le_bytes());
    let arch = ckpt.params.arch.to_text();
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());

    out.extend_from_slice(&ckpt.meta.epochs.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.seed.to_le_bytes());
    let entries = &ckpt.meta.loss_history.entries;
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.epoch as u32).to_le_bytes());
        out.extend_from_slice(&e.train.to_le_bytes());
        out.push(u8::from(e.heldout.is_some()));
        out.extend_from_slice(&e.heldout.unwrap_or(0.0).to_le_bytes());
    }

    out.extend_from_slice(&(ckpt.params.blocks.len() as u32).to_le_bytes());
    for block in &ckpt.params.blocks {
        out.extend_from_slice(&(block.name.len() as u32).to_le_bytes());
        out.extend_from_slice(block.name.as_bytes());
        out.extend_from_slice(&(block.shape.len() as u32).to_le_bytes());
        for &d in &block.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &block.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let arch = ArchitectureConfig::from_text(&r.string("architecture")?)?;

    let epochs = r.u32("epochs")?;
    let seed = r.u64("seed")?;
    let n_entries = r.u32("loss history")? as usize;
    let mut entries = Vec::with_capacity(n_entries.min(1 << 20));
    for _ in 0..n_entries {
        let epoch = r.u32("loss history")? as usize;
        let train = r.f64("loss history")?;
        let has = r.u8("loss history")?;
        let heldout = r.f64("loss history")?;
        entries.push(EpochLoss {
            epoch,
            train,
            heldout: (has != 0).then_some(heldout),
        });
    }

    let n_blocks = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(n_blocks.min(1 << 12));
    for i in 0..n_blocks {
        let what = format!("parameter block {i}");
        let name = r.string(&what)?;
        let ndim = r.u32(&what)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32(&what).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("block too large".into()))?,
            &what,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(ParamBlock { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last block",
            bytes.len() - r.pos
        )));
    }
    let expected = arch.parameter_count()?;
    let got: usize = blocks.iter().map(|b| b.data.len()).sum();
    if expected != got {
        return Err(Error::Checkpoint(format!(
            "architecture implies {expected} parameters, file holds {got}"
        )));
    }
    let params =
        ParameterSet::from_blocks(arch, blocks).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        format_version: version,
        params,
        meta: TrainingMeta {
            epochs,
            seed,
            loss_history: LossTrace { entries },
        },
    })
}

/// Write via a temporary sibling and rename, so readers never see a partial
/// file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_net::init_parameters;

    fn sample() -> Checkpoint {
        let params = init_parameters(&ArchitectureConfig::default(), 99).unwrap();
        Checkpoint::new(
            params,
            TrainingMeta {
                epochs: 1600,
                seed: 0xDEAD_BEEF,
                loss_history: LossTrace {
                    entries: vec![
                        EpochLoss {
                            epoch: 0,
                            train: 0.21,
                            heldout: Some(0.22),
                        },
                        EpochLoss {
                            epoch: 1,
                            train: 0.1 + 1e-17,
                            heldout: None,
                        },
                    ],
                },
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.meta.epochs, 1600);
        for (a, b) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = write_checkpoint(&sample());
        for cut in [0, 5, 12, 40, 300, bytes.len() / 2, bytes.len() - 1] {
            let err = read_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = write_checkpoint(&sample());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let params = init_parameters(&ArchitectureConfig::tiny(), 1).unwrap();
        let mut ckpt = Checkpoint::new(params, TrainingMeta::default());
        ckpt.params.blocks[0].shape = vec![2, 27];
        let bytes = write_checkpoint(&ckpt);
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }
}
