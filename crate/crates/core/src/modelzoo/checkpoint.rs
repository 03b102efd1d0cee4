//! Checkpoint files: `u32` little-endian header length, a JSON header, then
//! every parameter as little-endian `f32` in block order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use viewlab_autodiff::Tensor;

use super::network::{Architecture, DifferentiableMap, Network, Param};
use crate::error::{Error, Result};
use crate::stamp::Stamp;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    architecture: Architecture,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    learnable: Vec<bool>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stamp: Option<Stamp>,
}

const FORMAT: &str = "viewlab-checkpoint-v1";

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    to_bytes_stamped(net, None)
}

pub fn to_bytes_stamped(net: &Network, stamp: Option<&Stamp>) -> Result<Vec<u8>> {
    let params = net.params();
    let header = Header {
        format: FORMAT.to_string(),
        architecture: net.architecture().clone(),
        names: params.iter().map(|p| p.name.clone()).collect(),
        shapes: params.iter().map(|p| p.tensor.shape().to_vec()).collect(),
        learnable: params.iter().map(|p| p.learnable).collect(),
        seed: net.seed(),
        stamp: stamp.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + json.len() + 4 * net.num_params());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in net.flat_params() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn read_header<'b>(bytes: &'b [u8], origin: &Path) -> Result<(Header, &'b [u8])> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 {
        return Err(bad("file too short"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header"))?;
    Ok((serde_json::from_slice(body)?, &bytes[4 + hlen..]))
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Network> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let (header, rest) = read_header(bytes, origin)?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format tag {}", header.format)));
    }
    let mut payload = rest.chunks_exact(4);
    let mut params = Vec::with_capacity(header.shapes.len());
    for ((name, shape), learnable) in header
        .names
        .into_iter()
        .zip(header.shapes)
        .zip(header.learnable)
    {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let chunk = payload.next().ok_or_else(|| bad("truncated payload"))?;
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        params.push(Param {
            name,
            tensor: Tensor::new(shape, data),
            learnable,
        });
    }
    if payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Network::from_parts(header.architecture, params, header.seed)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    save_stamped(net, path, None)
}

pub fn save_stamped(net: &Network, path: &Path, stamp: Option<&Stamp>) -> Result<()> {
    let bytes = to_bytes_stamped(net, stamp)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    from_bytes(&fs::read(path)?, path)
}

/// The provenance recorded in a checkpoint header, if any.
pub fn read_stamp(path: &Path) -> Result<Option<Stamp>> {
    Ok(read_header(&fs::read(path)?, path)?.0.stamp)
}
