//! Binary model container:
//!
//! ```text
//! ENSF-CHECKPOINT 1\n
//! u64 LE length | JSON architecture header
//! u64 LE count  | f64 LE parameters in declared order
//! u64 LE length | JSON training manifest
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LstmArch, LstmModel, RDeepOnetArch, RDeepOnetModel, SurrogateModel, Trainable};
use crate::error::{Error, Result};
use crate::state::RngStream;

const MAGIC: &[u8] = b"ENSF-CHECKPOINT 1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchDescriptor {
    Lstm(LstmArch),
    RDeepOnet(RDeepOnetArch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingManifest {
    pub dataset_sha256: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub scenario: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SurrogateModel,
    pub manifest: TrainingManifest,
}

impl SurrogateModel {
    pub fn descriptor(&self) -> ArchDescriptor {
        match self {
            SurrogateModel::Lstm(m) => ArchDescriptor::Lstm(m.arch.clone()),
            SurrogateModel::RDeepOnet(m) => ArchDescriptor::RDeepOnet(m.arch.clone()),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            SurrogateModel::Lstm(m) => m.flat_params(),
            SurrogateModel::RDeepOnet(m) => m.flat_params(),
        }
    }

    /// A model with the given architecture and parameters.
    pub fn from_parts(arch: ArchDescriptor, params: &[f64]) -> Result<Self> {
        let mut rng = RngStream::new(0, 0);
        Ok(match arch {
            ArchDescriptor::Lstm(a) => {
                let mut m = LstmModel::new(a, &mut rng)?;
                m.set_flat_params(params)?;
                SurrogateModel::Lstm(m)
            }
            ArchDescriptor::RDeepOnet(a) => {
                let mut m = RDeepOnetModel::new(a, &mut rng)?;
                m.set_flat_params(params)?;
                SurrogateModel::RDeepOnet(m)
            }
        })
    }
}

fn write_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| bad("section too large"))?;
        self.take(n)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.model.descriptor()).map_err(|e| bad(e.to_string()))?;
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| bad(e.to_string()))?;
        let params = self.model.flat_params();
        let mut out = MAGIC.to_vec();
        write_section(&mut out, &header);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in &params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        write_section(&mut out, &manifest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(MAGIC.len()).ok() != Some(MAGIC) {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let arch: ArchDescriptor =
            serde_json::from_slice(c.section()?).map_err(|e| bad(format!("header: {e}")))?;
        let n = usize::try_from(c.u64()?).map_err(|_| bad("parameter count too large"))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| bad("parameter count too large"))?)?;
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let manifest: TrainingManifest =
            serde_json::from_slice(c.section()?).map_err(|e| bad(format!("manifest: {e}")))?;
        if c.pos != buf.len() {
            return Err(bad("trailing bytes after manifest"));
        }
        let model = SurrogateModel::from_parts(arch, &params)
            .map_err(|e| bad(format!("architecture/parameters mismatch: {e}")))?;
        Ok(Checkpoint { model, manifest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
