//! Single-file model archives.
//!
//! Layout: the magic `SJEPACK1`, a little-endian `u32` entry count, then per
//! entry a `u32` name length, the UTF-8 name, a `u64` payload length and the
//! payload. Entries are `config` (TOML), `montage` (montage text), `state`
//! (TOML) and one `tensor/<name>` or `teacher/<name>` per parameter, each a
//! `u64` row count, `u64` column count and little-endian f32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::Montage;
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::pretrain::{PretrainConfig, TrainState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SJEPACK1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    /// Validation loss of this epoch.
    pub validation_loss: f64,
    /// Lowest validation loss of the run so far.
    pub best_validation_loss: f64,
    pub since_improvement: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PretrainConfig,
    pub montage: Montage,
    pub meta: CheckpointMeta,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
}

impl Checkpoint {
    pub fn from_state<T: Scalar>(state: &TrainState<T>, validation_loss: f64) -> Self {
        Self {
            config: state.config.clone(),
            montage: state.montage.clone(),
            meta: CheckpointMeta {
                epoch: state.epoch,
                step: state.step,
                validation_loss,
                best_validation_loss: state.best_val.unwrap_or(validation_loss),
                since_improvement: state.since_improvement,
            },
            student: state.student.cast(),
            teacher: state.teacher.cast(),
        }
    }

    /// Training state with these parameters and a fresh optimizer.
    pub fn to_state<T: Scalar>(&self) -> TrainState<T> {
        TrainState {
            config: self.config.clone(),
            montage: self.montage.clone(),
            student: self.student.cast(),
            teacher: self.teacher.cast(),
            optimizer: Adam::new(self.config.adam),
            step: self.meta.step,
            epoch: self.meta.epoch,
            best_val: Some(self.meta.best_validation_loss),
            since_improvement: self.meta.since_improvement,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<u8>)> = vec![
            ("config".into(), toml::to_string(&self.config).expect("config serializes").into_bytes()),
            ("montage".into(), self.montage.to_text().into_bytes()),
            ("state".into(), toml::to_string(&self.meta).expect("meta serializes").into_bytes()),
        ];
        for (prefix, set) in [("tensor/", &self.student), ("teacher/", &self.teacher)] {
            for (name, t) in set.iter() {
                entries.push((format!("{prefix}{name}"), tensor_blob(t)));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, data) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(&data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |d: &str| Error::format(origin, d.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let n = r.u32().ok_or_else(|| bad("truncated header"))?;
        let (mut config, mut montage, mut meta) = (None, None, None);
        let mut student = ParamSet::new();
        let mut teacher = ParamSet::new();
        for _ in 0..n {
            let len = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated entry"))?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let size = r.u64().ok_or_else(|| bad("truncated entry"))? as usize;
            let data = r.take(size).ok_or_else(|| bad(&format!("entry `{name}` is truncated")))?;
            let text = || std::str::from_utf8(data).map_err(|_| bad(&format!("entry `{name}` is not UTF-8")));
            match name.as_str() {
                "config" => config = Some(toml::from_str(text()?).map_err(|e| bad(&format!("config: {}", e.message())))?),
                "montage" => montage = Some(Montage::parse(text()?)?),
                "state" => meta = Some(toml::from_str(text()?).map_err(|e| bad(&format!("state: {}", e.message())))?),
                other => {
                    let t = read_blob(data).ok_or_else(|| bad(&format!("tensor `{other}` is malformed")))?;
                    if let Some(p) = other.strip_prefix("tensor/") {
                        student.insert(p, t);
                    } else if let Some(p) = other.strip_prefix("teacher/") {
                        teacher.insert(p, t);
                    } else {
                        return Err(bad(&format!("unknown entry `{other}`")));
                    }
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config: config.ok_or_else(|| bad("missing config"))?,
            montage: montage.ok_or_else(|| bad("missing montage"))?,
            meta: meta.ok_or_else(|| bad("missing state"))?,
            student,
            teacher,
        })
    }

    /// Write to a temporary sibling, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn tensor_blob(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_blob(data: &[u8]) -> Option<Tensor<f32>> {
    let mut r = Reader { bytes: data, pos: 0 };
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let payload = r.take(rows.checked_mul(cols)?.checked_mul(4)?)?;
    if r.pos != data.len() {
        return None;
    }
    let values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor::from_vec(rows, cols, values).ok()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::TransformerConfig;

    fn state() -> TrainState<f32> {
        let mut cfg = PretrainConfig::new(1.1875, 0.4);
        cfg.model.encoder = TransformerConfig { depth: 1, ..Default::default() };
        cfg.model.predictor = TransformerConfig { depth: 1, ..Default::default() };
        let montage = Montage::standard_62().spread_subset(5).unwrap();
        let mut s = TrainState::new(cfg, montage).unwrap();
        s.epoch = 7;
        s.step = 70;
        s.best_val = Some(0.1 + 0.2);
        s
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let ckpt = Checkpoint::from_state(&state(), 1.0 / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a").join("best.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.meta.best_validation_loss.to_bits(), (0.1f64 + 0.2).to_bits());
        assert!(!dir.path().join("a").join("best.ckpt.tmp").exists());
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = Checkpoint::from_state(&state(), 0.5).to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, p), Err(Error::Format { .. })));
    }
}
