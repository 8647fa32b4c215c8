//! Binary model container.
//!
//! ```text
//! "IIDM" | u32 version | u32 header length | header JSON | u32 tensor count
//! per tensor: u16 name length | name | u8 rank | u32 dims[rank] | f32 data
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use iid_tensor::{Parameter, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{UNet, UNetSpec};

pub const MAGIC: &[u8; 4] = b"IIDM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<UNetSpec>,
    pub tensors: Vec<TensorInfo>,
    /// Free-form provenance (training configuration and the like).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub header: ModelHeader,
    pub tensors: Vec<Parameter>,
}

impl ModelWeights {
    /// Weights with a header listing the given tensors.
    pub fn new(arch: Option<UNetSpec>, tensors: Vec<Parameter>) -> Self {
        let infos = tensors
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Self {
            header: ModelHeader {
                arch,
                tensors: infos,
                metadata: serde_json::Value::Null,
            },
            tensors,
        }
    }

    pub fn from_net(net: &UNet) -> Self {
        Self::new(Some(net.spec), net.params.clone())
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.header.metadata = metadata;
        self
    }

    pub fn into_net(self) -> Result<UNet> {
        let spec = self
            .header
            .arch
            .ok_or_else(|| Error::Invalid("model has no architecture header".into()))?;
        UNet::from_parameters(spec, self.tensors)
    }

    /// Header and tensor list agree, and both match the architecture.
    pub fn validate(&self) -> Result<()> {
        if self.header.tensors.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "header lists {} tensors, payload has {}",
                self.header.tensors.len(),
                self.tensors.len()
            )));
        }
        for (info, p) in self.header.tensors.iter().zip(&self.tensors) {
            if info.name != p.name || info.shape != p.value.shape() {
                return Err(Error::Invalid(format!(
                    "tensor {} {:?} does not match header entry {} {:?}",
                    p.name,
                    p.value.shape(),
                    info.name,
                    info.shape
                )));
            }
        }
        if let Some(spec) = &self.header.arch {
            spec.validate()?;
            let expected = spec.parameter_shapes();
            let matches = expected.len() == self.tensors.len()
                && expected
                    .iter()
                    .zip(&self.header.tensors)
                    .all(|((n, s), info)| *n == info.name && s[..] == info.shape[..]);
            if !matches {
                return Err(Error::Invalid(
                    "tensor list does not match the architecture header".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn encode_model(weights: &ModelWeights) -> Result<Vec<u8>> {
    weights.validate()?;
    let header = serde_json::to_vec(&weights.header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(weights.tensors.len() as u32).to_le_bytes());
    for p in &weights.tensors {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Invalid(format!("tensor name too long: {}", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse a model; the error is a human-readable reason.
pub fn decode_model(bytes: &[u8]) -> std::result::Result<ModelWeights, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(&MAGIC[..]) {
        return Err("bad magic".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let hlen = r.u32("header length")? as usize;
    let header: ModelHeader = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| format!("bad header: {e}"))?;
    let count = r.u32("tensor count")? as usize;
    if count != header.tensors.len() {
        return Err(format!(
            "tensor count {count} disagrees with header ({})",
            header.tensors.len()
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
            .map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.take(1, "rank")?[0] as usize;
        if rank != 4 {
            return Err(format!("tensor {name}: unsupported rank {rank}"));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32("dims")? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        tensors.push(Parameter::new(name, value));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let weights = ModelWeights { header, tensors };
    weights.validate().map_err(|e| e.to_string())?;
    Ok(weights)
}

pub fn save_model(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(weights)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Load a model file and build its network.
pub fn load_net(path: impl AsRef<Path>) -> Result<UNet> {
    let path = path.as_ref();
    load_model(path)?
        .into_net()
        .map_err(|e| Error::format(path, e.to_string()))
}
