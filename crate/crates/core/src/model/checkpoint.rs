//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic    8 bytes  "LANEGRID"
//! version  u32
//! config   u32 length + UTF-8 JSON of ModelConfig
//! step     u64
//! count    u32
//! count x { name: u32 length + UTF-8, rank: u32, dims: rank x u64, data: prod(dims) x f64 }
//! ```
//!
//! The whole file is parsed before a [`Checkpoint`] is returned; trailing bytes
//! are rejected.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LANEGRID";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        let params = model
            .config()
            .parameter_layout()
            .into_iter()
            .map(|(name, _)| name)
            .zip(model.parameters().iter().cloned())
            .collect();
        Self {
            config: model.config().clone(),
            step,
            params,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let layout = self.config.parameter_layout();
        if layout.len() != self.params.len()
            || layout
                .iter()
                .zip(&self.params)
                .any(|((a, _), (b, _))| a != b)
        {
            return Err(Error::Checkpoint(
                "parameter names do not match the config".into(),
            ));
        }
        Model::from_parameters(
            self.config,
            self.params.into_iter().map(|(_, t)| t).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = r.string("config")?;
        let config: ModelConfig =
            serde_json::from_str(&config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let step = r.u64("step")?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let bytes = r.take(n.saturating_mul(8), "parameter data")?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            step,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint {
        Checkpoint::from_model(&Model::new(ModelConfig::desk()).unwrap(), 17)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let model = back.into_model().unwrap();
        assert_eq!(model.config(), &ModelConfig::desk());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = checkpoint().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = checkpoint().to_bytes().unwrap();
        for cut in [0, 5, 12, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                Checkpoint::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
    }

    #[test]
    fn mismatched_names_are_rejected() {
        let mut ck = checkpoint();
        ck.params[0].0 = "renamed".into();
        assert!(ck.into_model().is_err());
    }
}
