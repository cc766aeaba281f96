//! Checkpoint archive: named parameter arrays plus a JSON metadata record.
//!
//! ```text
//! "ADCK1" | u8 bytes-per-element (4 or 8) | u32 meta length | meta JSON
//! u32 array count | per array: u16 name length, name, u8 ndim, u32 dims, data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

use super::ops::cast;
use super::{NetworkConfig, SegmentationNet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"ADCK1";
const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub epoch: usize,
    /// True when optimizer velocity arrays are stored alongside the weights.
    pub optimizer_state: bool,
    pub class_weights: Vec<f64>,
    pub gamma: Option<f64>,
    /// How the weights were initialized, e.g. `fresh(seed=..)`.
    pub lineage: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F = f32> {
    pub meta: CheckpointMeta,
    pub net: SegmentationNet<F>,
    pub velocity: Option<Vec<Vec<F>>>,
}

fn element_bytes<F>() -> u8 {
    std::mem::size_of::<F>() as u8
}

fn put_array<F: NdFloat>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[F]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        let v = v.to_f64().expect("finite float");
        if element_bytes::<F>() == 4 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint<F: NdFloat>(ckpt: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut meta = ckpt.meta.clone();
    meta.optimizer_state = ckpt.velocity.is_some();
    let meta_json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(element_bytes::<F>());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);

    let net = &ckpt.net;
    let n_vel = ckpt.velocity.as_ref().map_or(0, |v| v.len());
    let count = net.params().len() + net.buffers().len() + n_vel;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for t in net.params().iter().chain(net.buffers()) {
        put_array(&mut out, &t.name, &t.shape, &t.data);
    }
    if let Some(vel) = &ckpt.velocity {
        for (t, v) in net.params().iter().zip(vel) {
            put_array(&mut out, &format!("{VELOCITY_PREFIX}{}", t.name), &t.shape, v);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<F: NdFloat>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "truncated checkpoint"))?;
        Ok(buf)
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "truncated checkpoint"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }
}

pub fn decode_checkpoint<F: NdFloat>(path: &Path, bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
        path,
    };
    if &r.bytes::<5>()? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let [elem] = r.bytes::<1>()?;
    if elem != 4 && elem != 8 {
        return Err(Error::format(path, format!("unsupported element size {elem}")));
    }
    let meta_len = r.u32()?;
    let meta: CheckpointMeta = serde_json::from_slice(&r.vec(meta_len)?)?;
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.bytes()?) as usize;
        let name = String::from_utf8(r.vec(name_len)?)
            .map_err(|_| Error::format(path, "array name is not UTF-8"))?;
        let [ndim] = r.bytes::<1>()?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(r.u32()?);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if elem == 4 {
                f32::from_le_bytes(r.bytes()?) as f64
            } else {
                f64::from_le_bytes(r.bytes()?)
            };
            data.push(cast::<F>(v));
        }
        arrays.push(Tensor { name, shape, data });
    }
    if (r.cur.position() as usize) != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last array"));
    }

    let template = SegmentationNet::<F>::init(&meta.network)?;
    let n_params = template.params().len();
    let n_buffers = template.buffers().len();
    let mut it = arrays.into_iter();
    let params: Vec<_> = it.by_ref().take(n_params).collect();
    let buffers: Vec<_> = it.by_ref().take(n_buffers).collect();
    let rest: Vec<_> = it.collect();
    let net = SegmentationNet::from_parts(meta.network.clone(), params, buffers)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let velocity = if meta.optimizer_state {
        if rest.len() != n_params
            || rest
                .iter()
                .zip(net.params())
                .any(|(v, p)| v.name != format!("{VELOCITY_PREFIX}{}", p.name) || v.shape != p.shape)
        {
            return Err(Error::format(path, "optimizer arrays do not match parameters"));
        }
        Some(rest.into_iter().map(|t| t.data).collect())
    } else {
        if !rest.is_empty() {
            return Err(Error::format(path, "unexpected extra arrays"));
        }
        None
    };
    Ok(Checkpoint {
        meta,
        net,
        velocity,
    })
}

pub fn load_checkpoint<F: NdFloat>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
