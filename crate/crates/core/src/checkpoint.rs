//! Binary checkpoint files for parameters and optimizer state.
//!
//! Layout: 4-byte magic `OSCK`, a little-endian u32 header length, a JSON
//! header describing every blob, the raw little-endian f64 blobs in header
//! order (parameters first, then first/second optimizer moments for the
//! entries that have them), and a trailing SHA-256 digest of everything
//! before it. Loads verify magic, digest, and shape bookkeeping, so a
//! restored run is bit-identical to the saved one.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Data;
use crate::error::{CoreError, Result};
use crate::nn::ParamGroup;

const MAGIC: &[u8; 4] = b"OSCK";
const VERSION: u32 = 1;

/// Optimizer snapshot: step count plus per-parameter Adam moments, `None`
/// for parameters that were frozen when the checkpoint was written.
pub type OptimSnapshot = (usize, Vec<Option<(Data, Data)>>);

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    step: usize,
    /// Shape per moment pair; `None` for frozen parameters.
    moments: Vec<Option<Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    params: Vec<ParamHeader>,
    optim: Option<OptimHeader>,
    meta: serde_json::Value,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: Vec<(String, ParamGroup, Data)>,
    pub optim: Option<OptimSnapshot>,
    pub meta: serde_json::Value,
}

fn push_blob(out: &mut Vec<u8>, data: &Data) {
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_blob(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Result<Data> {
    let n: usize = shape.iter().product();
    let end = *offset + n * 8;
    if end > bytes.len() {
        return Err(CoreError::data("checkpoint truncated inside a blob"));
    }
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let at = *offset + i * 8;
        values.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
    }
    *offset = end;
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| CoreError::data(format!("bad blob shape {shape:?}: {e}")))
}

pub fn save(
    path: &Path,
    params: &[(String, ParamGroup, Data)],
    optim: Option<&OptimSnapshot>,
    meta: &serde_json::Value,
) -> Result<()> {
    if let Some((_, moments)) = optim {
        if moments.len() != params.len() {
            return Err(CoreError::config(format!(
                "optimizer tracks {} parameters, model has {}",
                moments.len(),
                params.len()
            )));
        }
    }
    let header = Header {
        version: VERSION,
        params: params
            .iter()
            .map(|(name, group, data)| ParamHeader {
                name: name.clone(),
                group: group.name().to_string(),
                shape: data.shape().to_vec(),
            })
            .collect(),
        optim: optim.map(|(step, moments)| OptimHeader {
            step: *step,
            moments: moments
                .iter()
                .map(|m| m.as_ref().map(|(mom, _)| mom.shape().to_vec()))
                .collect(),
        }),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, data) in params {
        push_blob(&mut out, data);
    }
    if let Some((_, moments)) = optim {
        for pair in moments.iter().flatten() {
            push_blob(&mut out, &pair.0);
            push_blob(&mut out, &pair.1);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CoreError::data(format!(
            "checkpoint {} too short to be valid",
            path.display()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(CoreError::data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let body_len = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != &bytes[body_len..] {
        return Err(CoreError::data(format!(
            "checkpoint {} is corrupt (digest mismatch)",
            path.display()
        )));
    }

    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if header_end > body_len {
        return Err(CoreError::data("checkpoint truncated inside the header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| CoreError::data(format!("malformed checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(CoreError::data(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut offset = header_end;
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let group = ParamGroup::parse(&p.group)?;
        let data = read_blob(&bytes[..body_len], &mut offset, &p.shape)?;
        params.push((p.name.clone(), group, data));
    }
    let optim = match &header.optim {
        None => None,
        Some(o) => {
            let mut moments = Vec::with_capacity(o.moments.len());
            for shape in &o.moments {
                moments.push(match shape {
                    None => None,
                    Some(s) => {
                        let m = read_blob(&bytes[..body_len], &mut offset, s)?;
                        let v = read_blob(&bytes[..body_len], &mut offset, s)?;
                        Some((m, v))
                    }
                });
            }
            Some((o.step, moments))
        }
    };
    if offset != body_len {
        return Err(CoreError::data(format!(
            "checkpoint has {} trailing bytes after declared blobs",
            body_len - offset
        )));
    }
    Ok(Checkpoint {
        params,
        optim,
        meta: header.meta,
    })
}
