//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `SCALLACK`, format version (u32 LE), header length
//! (u64 LE), a JSON header, then the flat parameter array as f64 LE.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::params::ParamVector;
use crate::surrogate::SurrogateSpec;

pub const MAGIC: &[u8; 8] = b"SCALLACK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Map,
    Surrogate,
}

/// Extra section carried by surrogate checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    pub m: usize,
    pub classes: usize,
    /// File name or identifier of the MAP checkpoint the surrogate mimics.
    pub base_checkpoint: String,
    pub biased: bool,
    pub context_id: String,
    pub sigma0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub spec: NetworkSpec,
    pub seed: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn map(spec: &NetworkSpec, theta: &ParamVector, seed: u64) -> Result<Self> {
        Self::new(
            CheckpointHeader {
                kind: CheckpointKind::Map,
                spec: spec.clone(),
                seed,
                metadata: BTreeMap::new(),
                surrogate: None,
            },
            theta.clone(),
        )
    }

    pub fn surrogate(surrogate: &SurrogateSpec, seed: u64, section: SurrogateSection) -> Result<Self> {
        Self::new(
            CheckpointHeader {
                kind: CheckpointKind::Surrogate,
                spec: surrogate.network.clone(),
                seed,
                metadata: BTreeMap::new(),
                surrogate: Some(section),
            },
            surrogate.phi.clone(),
        )
    }

    pub fn new(header: CheckpointHeader, params: ParamVector) -> Result<Self> {
        if params.len() != header.spec.param_count() {
            return Err(Error::Checkpoint(format!(
                "{} parameters for a network with {}",
                params.len(),
                header.spec.param_count()
            )));
        }
        if (header.kind == CheckpointKind::Surrogate) != header.surrogate.is_some() {
            return Err(Error::Checkpoint("surrogate section must be present exactly for surrogate checkpoints".into()));
        }
        Ok(Self { header, params })
    }

    pub fn with_metadata(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.header.metadata.insert(key.to_string(), value.into());
        self
    }

    /// Rebuilds the surrogate network from a surrogate checkpoint.
    pub fn to_surrogate(&self) -> Result<SurrogateSpec> {
        let s = self
            .header
            .surrogate
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("not a surrogate checkpoint".into()))?;
        SurrogateSpec::new(self.header.spec.clone(), s.classes, s.m, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[20..];
        if rest.len() < header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..header_len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let body = &rest[header_len..];
        let p = header.spec.param_count();
        if body.len() != 8 * p {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * p,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let params = ParamVector::new(values, header.spec.layout().clone())?;
        Self::new(header, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
