//! Binary checkpoint format: a versioned header (magic, format version,
//! model tag, step counter, full config snapshot) followed by the two
//! named tensor tables (generative then inference parameters), each
//! entry carrying its name, shape, and raw little-endian f64 data.
//!
//! Writing is canonical — same content, same bytes — so saving, loading,
//! and saving again produces an identical file, and two runs with the
//! same config and seed produce identical checkpoints.

use std::path::Path;

use aevb::models::LatentModel;
use aevb::nn::ParamSet;
use aevb::tensor::Tensor;
use aevb::{Error, Result};

const MAGIC: &[u8; 4] = b"AEVB";
const FORMAT_VERSION: u32 = 1;

/// Everything a run needs to restart or evaluate: the model tag, how
/// many optimization steps produced it, the resolved config snapshot,
/// and both parameter tables in their canonical order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_tag: String,
    pub step: u64,
    pub config_text: String,
    pub theta: Vec<(String, Tensor)>,
    pub phi: Vec<(String, Tensor)>,
}

fn ckpt_err(detail: impl Into<String>) -> Error {
    Error::Checkpoint { detail: detail.into() }
}

impl Checkpoint {
    /// Snapshots a model's parameters together with its run context.
    pub fn from_model<M: LatentModel>(model: &M, step: u64, config_text: &str) -> Checkpoint {
        let table = |set: &ParamSet| {
            set.iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>()
        };
        Checkpoint {
            model_tag: model.kind().tag().to_string(),
            step,
            config_text: config_text.to_string(),
            theta: table(model.theta()),
            phi: table(model.phi()),
        }
    }

    /// Copies both tables into a freshly-built model of the same
    /// architecture, insisting on an exact match of names, order, and
    /// shapes — any drift means the config and the checkpoint disagree.
    pub fn install<M: LatentModel>(&self, model: &mut M) -> Result<()> {
        if model.kind().tag() != self.model_tag {
            return Err(ckpt_err(format!(
                "model tag mismatch: checkpoint holds {:?}, target model is {:?}",
                self.model_tag,
                model.kind().tag()
            )));
        }
        install_table("theta", &self.theta, model.theta_mut())?;
        install_table("phi", &self.phi, model.phi_mut())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        assert!(self.model_tag.len() <= u8::MAX as usize, "model tag too long");
        out.push(self.model_tag.len() as u8);
        out.extend_from_slice(self.model_tag.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        write_table(&mut out, &self.theta);
        write_table(&mut out, &self.phi);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(ckpt_err("bad magic: not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let tag_len = r.u8()? as usize;
        let model_tag = r.utf8(tag_len, "model tag")?;
        let step = r.u64()?;
        let cfg_len = r.u32()? as usize;
        let config_text = r.utf8(cfg_len, "config snapshot")?;
        let theta = read_table(&mut r)?;
        let phi = read_table(&mut r)?;
        if r.pos != bytes.len() {
            return Err(ckpt_err(format!(
                "{} trailing bytes after the inference table",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { model_tag, step, config_text, theta, phi })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| ckpt_err(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn install_table(which: &str, entries: &[(String, Tensor)], set: &mut ParamSet) -> Result<()> {
    if entries.len() != set.len() {
        return Err(ckpt_err(format!(
            "{which}: checkpoint has {} tensors, model expects {}",
            entries.len(),
            set.len()
        )));
    }
    for ((name, tensor), (have, slot)) in entries.iter().zip(set.iter_mut()) {
        if name != have {
            return Err(ckpt_err(format!(
                "{which}: checkpoint names {name:?} where the model has {have:?}"
            )));
        }
        if tensor.shape() != slot.shape() {
            return Err(ckpt_err(format!(
                "{which}: tensor {name:?} has shape {:?} in the checkpoint but {:?} in the model",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor.clone();
    }
    Ok(())
}

fn write_table(out: &mut Vec<u8>, entries: &[(String, Tensor)]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        assert!(name.len() <= u16::MAX as usize, "parameter name too long");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        assert!(shape.len() <= u8::MAX as usize, "rank too large");
        out.push(shape.len() as u8);
        for &dim in shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_table(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len, "parameter name")?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
            .collect();
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| ckpt_err(format!("tensor {name:?}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("sized")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("sized")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ckpt_err(format!("{what} is not utf-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aevb::models::FaModel;

    fn sample() -> Checkpoint {
        let model = FaModel::new(3, 2, 5);
        Checkpoint::from_model(&model, 42, "model = fa\nseed = 5\n")
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model_tag, "fa");
        assert_eq!(back.step, 42);
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn install_restores_every_parameter() {
        let src = FaModel::new(3, 2, 5);
        let ckpt = Checkpoint::from_model(&src, 1, "");
        let mut dst = FaModel::new(3, 2, 99);
        assert_ne!(dst.theta().checksum(), src.theta().checksum());
        ckpt.install(&mut dst).unwrap();
        assert_eq!(dst.theta().checksum(), src.theta().checksum());
        assert_eq!(dst.phi().checksum(), src.phi().checksum());
    }

    #[test]
    fn install_rejects_tag_and_shape_mismatches() {
        let ckpt = sample();
        let mut other = FaModel::new(4, 2, 5);
        let err = ckpt.install(&mut other).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
        let mut wrong = aevb::models::VaeModel::new(6, 2, &[4], 0.0, 1);
        let err = ckpt.install(&mut wrong).unwrap_err();
        assert!(err.to_string().contains("tag mismatch"), "{err}");
    }

    #[test]
    fn corrupt_files_are_reported_not_panicked() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
