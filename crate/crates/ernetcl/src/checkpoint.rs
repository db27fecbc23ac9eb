//! Checkpoint serialization: a text header holding the format version and
//! model config, then named binary parameter blocks. Round trips are
//! bitwise exact.
//!
//! Block layout per tensor: u32 LE name length, name bytes, u32 LE rank,
//! u64 LE extents, then the f64 LE payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_config_from_kv, model_config_to_kv, parse_kv};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &str = "ERNETCLCKPT 1";
const PARAMS_MARKER: &str = "params";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(model_config_to_kv(&self.config).as_bytes());
        out.extend_from_slice(PARAMS_MARKER.as_bytes());
        out.push(b'\n');
        self.params.visit(&mut |name, t| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.line()? != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic, expected {MAGIC:?}")));
        }
        let mut header = String::new();
        loop {
            let line = cursor.line()?;
            if line == PARAMS_MARKER {
                break;
            }
            header.push_str(line);
            header.push('\n');
        }
        let config = model_config_from_kv(&parse_kv(&header)?)?;
        // Allocate the full structure, then overwrite every tensor in visit
        // order from the blocks.
        let mut throwaway = ChaCha8Rng::seed_from_u64(0);
        let mut params = init_params(&config, &mut throwaway)
            .map_err(|e| Error::Checkpoint(format!("config does not describe a model: {e}")))?;
        let mut failure: Option<Error> = None;
        params.visit_mut(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            if let Err(e) = cursor.read_tensor(&name, tensor) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last parameter block",
                bytes.len() - cursor.pos
            )));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn line(&mut self) -> Result<&str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
        self.pos += end + 1;
        Ok(line)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated parameter block".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn read_tensor(&mut self, expected_name: &str, out: &mut Tensor) -> Result<()> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        if name != expected_name {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} where {expected_name:?} was expected"
            )));
        }
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        if shape != out.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match expected {:?}",
                shape,
                out.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let payload = self.take(numel * 8)?;
        for (v, chunk) in out.values_mut().iter_mut().zip(payload.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}
