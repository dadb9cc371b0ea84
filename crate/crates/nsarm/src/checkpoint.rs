//! Checkpoint container: magic "NSRM", format version, a tensor manifest
//! (name, dtype, shape), then little-endian f32 payloads in manifest order.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::atomic_write;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"NSRM";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered name -> tensor map; ordering is the serialization order.
#[derive(Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.entries.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
        }
        for (_, t) in &self.entries {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic (not an NSRM checkpoint)".into()));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let count = read_u32(&mut cur)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name)
                .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("manifest name is not UTF-8".into()))?;
            let mut dtype = [0u8; 1];
            cur.read_exact(&mut dtype)
                .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
            if dtype[0] != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", dtype[0])));
            }
            let ndim = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut cur)? as usize);
            }
            manifest.push((name, shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                cur.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated payload for {name}")))?;
                data.push(f32::from_le_bytes(buf));
            }
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated field".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Pull a named tensor with an exact shape check, for model loaders.
pub fn take_tensor(
    map: &mut BTreeMap<String, Tensor>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}
