//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IRAB" | version: u32 | header_len: u32 | header JSON
//! tensor_count: u32
//! repeated: name_len u32, name utf8, ndim u32, dims u32..., count u64, f64 data
//! ```
//!
//! The header carries the model config and optimizer hyperparameters; the
//! tensor records carry student (and teacher) parameters plus the Adam
//! moment buffers. Round-trips are bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::{build_model, ModelBundle, ModelConfig, OptimizerState};

const MAGIC: &[u8; 4] = b"IRAB";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    has_teacher: bool,
    opt: OptHeader,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::data("truncated checkpoint".to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::data("truncated checkpoint".to_string()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(CoreError::data("corrupt checkpoint: oversized name".to_string()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|_| CoreError::data("truncated checkpoint".to_string()))?;
    let name = String::from_utf8(name)
        .map_err(|_| CoreError::data("corrupt checkpoint: non-utf8 name".to_string()))?;
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let count = read_u64(r)? as usize;
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| CoreError::data("truncated checkpoint".to_string()))?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((name, shape, data))
}

/// Write the bundle and optimizer to `path`.
pub fn save_checkpoint(bundle: &ModelBundle, opt: &OptimizerState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        model: bundle.cfg.clone(),
        has_teacher: bundle.has_teacher(),
        opt: OptHeader {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
        },
    };
    let header_json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;

    let named = bundle.named_parameters();
    let n_tensors = named.len() + 2 * opt.m.len();
    w.write_all(&(n_tensors as u32).to_le_bytes())?;
    for (name, tensor) in &named {
        write_tensor(&mut w, name, &tensor.shape(), &tensor.values())?;
    }
    for (idx, m) in opt.m.iter().enumerate() {
        write_tensor(&mut w, &format!("opt.m.{}", idx), &[m.len()], m)?;
    }
    for (idx, v) in opt.v.iter().enumerate() {
        write_tensor(&mut w, &format!("opt.v.{}", idx), &[v.len()], v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back into a fresh bundle + optimizer.
pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, OptimizerState)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::data("truncated checkpoint".to_string()))?;
    if &magic != MAGIC {
        return Err(CoreError::data(format!(
            "not a checkpoint file (magic {:?})",
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::data(format!(
            "checkpoint format version {} not supported (expected {})",
            version, VERSION
        )));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)
        .map_err(|_| CoreError::data("truncated checkpoint".to_string()))?;
    let header: Header = serde_json::from_slice(&header_buf)?;

    let mut bundle = build_model(&header.model, 0)?;
    if header.has_teacher {
        bundle.init_teacher()?;
    }

    let n_tensors = read_u32(&mut r)? as usize;
    let mut records: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..n_tensors {
        let (name, shape, data) = read_tensor(&mut r)?;
        records.insert(name, (shape, data));
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        records
            .remove(name)
            .ok_or_else(|| CoreError::data(format!("checkpoint missing tensor {:?}", name)))
    };

    for (name, tensor) in bundle.named_parameters() {
        let (shape, data) = take(&name)?;
        if shape != tensor.shape() {
            return Err(CoreError::data(format!(
                "checkpoint tensor {:?} has shape {:?}, model expects {:?}",
                name,
                shape,
                tensor.shape()
            )));
        }
        tensor.set_values(data)?;
    }

    let params = bundle.parameters();
    let mut opt = OptimizerState::new(&params, header.opt.lr);
    opt.beta1 = header.opt.beta1;
    opt.beta2 = header.opt.beta2;
    opt.eps = header.opt.eps;
    opt.step = header.opt.step;
    for idx in 0..params.len() {
        let (_, m) = take(&format!("opt.m.{}", idx))?;
        let (_, v) = take(&format!("opt.v.{}", idx))?;
        if m.len() != opt.m[idx].len() || v.len() != opt.v[idx].len() {
            return Err(CoreError::data(format!(
                "checkpoint moment buffers for parameter {} have the wrong size",
                idx
            )));
        }
        opt.m[idx] = m;
        opt.v[idx] = v;
    }
    if !records.is_empty() {
        let mut extra: Vec<_> = records.keys().cloned().collect();
        extra.sort();
        return Err(CoreError::data(format!(
            "checkpoint carries unexpected tensors: {:?}",
            extra
        )));
    }
    Ok((bundle, opt))
}
