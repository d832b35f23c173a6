//! On-disk containers: the `LAPM` float-map format, PNG helpers, and model
//! checkpoints.
//!
//! `LAPM` container (little-endian):
//!
//! ```text
//! magic "LAPM" | u32 version | u32 ndim | u32 dims[ndim] | f32 data (row-major)
//! ```
//!
//! Checkpoint (little-endian):
//!
//! ```text
//! magic "LAPC" | u32 version | u64 json_len | graph JSON |
//! u32 n_params | { u32 name_len | name utf-8 | u32 ndim | u32 dims[] | f32 data }* |
//! u64 fnv1a-64 of all preceding bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerDesc, LayerGraph};

pub const LAPM_MAGIC: [u8; 4] = *b"LAPM";
pub const LAPM_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fnv64_bytes(data: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::integrity("unexpected end of file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// -- LAPM ------------------------------------------------------------------

fn encode_lapm(data: &ArrayD<f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&LAPM_MAGIC);
    buf.extend_from_slice(&LAPM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(data.ndim() as u32).to_le_bytes());
    for &d in data.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn write_lapm(path: &Path, data: &ArrayD<f64>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_lapm(data))?;
    Ok(())
}

pub fn read_lapm(path: &Path) -> Result<ArrayD<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor::new(&bytes);
    if c.take(4)? != LAPM_MAGIC {
        return Err(Error::integrity("not a LAPM container"));
    }
    let version = c.u32()?;
    if version != LAPM_VERSION {
        return Err(Error::integrity(format!(
            "unsupported LAPM version {}",
            version
        )));
    }
    let ndim = c.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::integrity("implausible LAPM rank"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.u32()? as usize);
    }
    let len: usize = dims.iter().product();
    let raw = c.take(len * 4)?;
    if c.pos != bytes.len() {
        return Err(Error::integrity("trailing bytes after LAPM payload"));
    }
    let mut values = Vec::with_capacity(len);
    for chunk in raw.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    ArrayD::from_shape_vec(IxDyn(&dims), values)
        .map_err(|e| Error::integrity(format!("bad LAPM shape: {}", e)))
}

// -- PNG -------------------------------------------------------------------

/// Renders a [0, 1] map as an 8-bit grayscale heatmap.
pub fn save_heatmap_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in map.indexed_iter() {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([byte]));
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("png write failed: {}", e)))
}

/// Loads an 8-bit grayscale PNG into a [0, 1] map.
pub fn load_image_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("png read failed: {}", e)))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    }))
}

// -- Checkpoints -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    input_shape: (usize, usize, usize),
    layers: Vec<LayerDesc>,
}

pub fn save_checkpoint(graph: &LayerGraph, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        input_shape: graph.input_shape,
        layers: graph.to_descs(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Data(format!("checkpoint header encode: {}", e)))?;
    let params = graph.named_params();

    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&fnv64_bytes(&buf).to_le_bytes());
    std::fs::write(path, &buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LayerGraph> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::integrity("checkpoint too short"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv64_bytes(payload) != stored {
        return Err(Error::integrity("checkpoint checksum mismatch"));
    }

    let mut c = Cursor::new(payload);
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::integrity("not a checkpoint file"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::integrity(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let json_len = c.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(json_len)?)
        .map_err(|e| Error::integrity(format!("checkpoint header decode: {}", e)))?;

    let n_params = c.u32()? as usize;
    let mut values: Vec<(String, ArrayD<f64>)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::integrity("parameter name is not utf-8"))?;
        let ndim = c.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = c.take(len * 4)?;
        let mut vals = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            vals.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals)
            .map_err(|e| Error::integrity(format!("bad parameter shape: {}", e)))?;
        values.push((name, arr));
    }
    if c.pos != payload.len() {
        return Err(Error::integrity("trailing bytes in checkpoint"));
    }

    let mut graph = LayerGraph::from_descs(header.input_shape, &header.layers, 0)?;
    let mut by_name: std::collections::BTreeMap<String, ArrayD<f64>> =
        values.into_iter().collect();
    for (name, p) in graph.named_params_mut() {
        let stored = by_name.remove(&name).ok_or_else(|| {
            Error::integrity(format!("checkpoint is missing parameter '{}'", name))
        })?;
        if stored.shape() != p.value.shape() {
            return Err(Error::integrity(format!(
                "parameter '{}' has shape {:?}, expected {:?}",
                name,
                stored.shape(),
                p.value.shape()
            )));
        }
        p.value = stored;
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::integrity(format!(
            "checkpoint carries unknown parameter '{}'",
            name
        )));
    }
    Ok(graph)
}
