//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MOLVAECK"
//! version   u32      currently 1
//! n_tasks   u32
//! config    u32 length + UTF-8 text of the RunConfig
//! count     u32      number of tensors
//! tensor*   u32 name length, UTF-8 name, u32 rows, u32 cols, rows·cols f64 (row-major)
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::Model;

use super::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"MOLVAECK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(model: &Model, config: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.config.n_tasks);
    put_str(&mut out, &config.to_text());
    put_u32(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.nrows());
        put_u32(&mut out, p.value.ncols());
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Rebuild the model and its config from [`encode`] output.
pub fn decode(bytes: &[u8]) -> Result<(Model, RunConfig)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_tasks = r.u32()?;
    let config = RunConfig::from_text(&r.string()?)?;
    let mut model = Model::new(config.model_config(n_tasks), 0);
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if model.store.value(id).dim() != (rows, cols) {
            return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
        }
        let data = r.take(rows * cols * 8)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.store.value_mut(id) = Array2::from_shape_vec((rows, cols), values).unwrap();
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, config))
}

pub fn save(path: &Path, model: &Model, config: &RunConfig) -> Result<()> {
    std::fs::write(path, encode(model, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::TaskType;

    #[test]
    fn round_trip_is_exact() {
        let mut config = RunConfig::desk();
        config.hidden_dim = 16;
        config.epochs = 7;
        let model = Model::new(config.model_config(3), 42);
        let bytes = encode(&model, &config);
        let (back, cfg) = decode(&bytes).unwrap();
        assert_eq!(cfg, config);
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode(&back, &cfg), bytes);
        assert_eq!(back.config.task_type, TaskType::Regression);
    }

    #[test]
    fn corruption_is_reported() {
        let config = RunConfig {
            hidden_dim: 8,
            ..RunConfig::desk()
        };
        let bytes = encode(&Model::new(config.model_config(1), 0), &config);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    }
}
