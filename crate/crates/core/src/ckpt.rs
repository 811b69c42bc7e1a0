//! Parameter checkpoints: magic `OW4D`, version u32, then one record per
//! parameter — name length u32, name bytes, rank u32, dims u32 each, f32
//! payload — little-endian, in parameter insertion order. Reading stops at
//! end of file.

use std::path::Path;

use crate::error::Result;
use crate::fileio::{FileWriter, OffsetReader};
use crate::model::Params;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OW4D";
pub const VERSION: u32 = 1;

pub fn save<S: Real>(params: &Params<S>, path: &Path) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    for (name, tensor) in params.iter() {
        let bytes = name.as_bytes();
        w.u32(bytes.len() as u32)?;
        w.bytes(bytes)?;
        w.u32(tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            w.u32(d as u32)?;
        }
        for &v in tensor.data() {
            w.f32(v.f64() as f32)?;
        }
    }
    w.finish()
}

pub fn load<S: Real>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = OffsetReader::open(path)?;
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while r.offset() < r.len() as u64 {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|e| r.error(format!("parameter name not UTF-8: {e}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<S> = r
            .f32_vec(numel, "payload")?
            .into_iter()
            .map(|v| S::of(v as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
