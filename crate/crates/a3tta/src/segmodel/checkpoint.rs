//! Checkpoint serialization for models and optimizer state.
//!
//! Layout: a fixed magic string, a format version, a length-prefixed JSON
//! header (architecture, tensor names and shapes, optimizer metadata),
//! then all tensor payloads as little-endian f32 in header order:
//! parameters, buffers, Adam first moments, Adam second moments.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::params::ParameterSet;
use super::{ArchConfig, SegModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 10] = b"a3tta-ckpt";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    t: u64,
    skipped_steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    params: Vec<TensorInfo>,
    buffers: Vec<TensorInfo>,
    adam: Option<AdamMeta>,
}

fn infos<F: Scalar>(items: &[(String, ArrayD<F>)]) -> Vec<TensorInfo> {
    items
        .iter()
        .map(|(name, t)| TensorInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn push_payload<F: Scalar>(out: &mut Vec<u8>, tensors: impl Iterator<Item = F>) {
    for v in tensors {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

/// Writes the model, and optionally its optimizer state, to `path`.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &SegModel<F>,
    adam: Option<&AdamState<F>>,
) -> Result<()> {
    let params = model.parameters();
    let buffers = model.buffers();
    let header = Header {
        arch: model.arch().clone(),
        params: infos(&params.items),
        buffers: infos(&buffers),
        adam: adam.map(|a| AdamMeta {
            config: a.config,
            t: a.t,
            skipped_steps: a.skipped_steps,
        }),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::format(path, format!("header encode: {e}")))?;

    let mut bytes = Vec::with_capacity(64 + header_json.len() + 4 * params.num_scalars());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, t) in &params.items {
        push_payload(&mut bytes, t.iter().copied());
    }
    for (_, t) in &buffers {
        push_payload(&mut bytes, t.iter().copied());
    }
    if let Some(a) = adam {
        let (m, v) = a.moments();
        for t in m {
            push_payload(&mut bytes, t.iter().copied());
        }
        for t in v {
            push_payload(&mut bytes, t.iter().copied());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(path, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn tensors<F: Scalar>(&mut self, infos: &[TensorInfo]) -> Result<Vec<ArrayD<F>>> {
        infos
            .iter()
            .map(|info| {
                let n: usize = info.shape.iter().product();
                let raw = self.take(4 * n)?;
                let data: Vec<F> = raw
                    .chunks_exact(4)
                    .map(|c| F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                    .collect();
                ArrayD::from_shape_vec(IxDyn(&info.shape), data)
                    .map_err(|e| Error::format(self.path, format!("tensor {}: {e}", info.name)))
            })
            .collect()
    }
}

fn to_set<F: Scalar>(infos: &[TensorInfo], tensors: Vec<ArrayD<F>>) -> ParameterSet<F> {
    ParameterSet {
        items: infos
            .iter()
            .map(|i| i.name.clone())
            .zip(tensors)
            .collect(),
    }
}

/// Reads a checkpoint back into a freshly constructed model. Returns the
/// optimizer state when the file carries one.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(SegModel<F>, Option<AdamState<F>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        off: 0,
        path,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let ver = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if ver != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {ver}"),
        ));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::format(path, format!("header decode: {e}")))?;

    let mut model = SegModel::<F>::new(header.arch.clone(), 0)?;
    let params = to_set(&header.params, r.tensors(&header.params)?);
    let buffers = to_set(&header.buffers, r.tensors(&header.buffers)?);
    model.set_parameters(&params)?;
    model.set_buffers(&buffers.items)?;

    let adam = match &header.adam {
        None => None,
        Some(meta) => {
            let m = r.tensors(&header.params)?;
            let v = r.tensors(&header.params)?;
            Some(AdamState::restore(
                &model,
                meta.config,
                m,
                v,
                meta.t,
                meta.skipped_steps,
            )?)
        }
    };
    if r.off != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok((model, adam))
}
