//! Model checkpoint file: little-endian binary, magic "NSCK", version 1,
//! JSON config echo, then every named parameter tensor (including the
//! non-trainable running statistics), so a loaded model reproduces forward
//! outputs bitwise.

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NSCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::format(format!("config encode: {e}")))?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::format(format!("param name too long: {}", p.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.shape.len() as u8])?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &p.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_n(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::format("truncated checkpoint file"))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact_n(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let magic = read_exact_n(&mut r, 4)?;
    if magic != MAGIC {
        return Err(Error::format("bad magic: not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let config_len = read_u32(&mut r)? as usize;
    let config_bytes = read_exact_n(&mut r, config_len)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::format(format!("config decode: {e}")))?;

    let mut model = build_model(config)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.params.len() {
        return Err(Error::format(format!(
            "checkpoint has {count} tensors, config implies {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = {
            let b = read_exact_n(&mut r, 2)?;
            u16::from_le_bytes([b[0], b[1]]) as usize
        };
        let name = String::from_utf8(read_exact_n(&mut r, name_len)?)
            .map_err(|_| Error::format("param name is not UTF-8"))?;
        let rank = read_exact_n(&mut r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = read_exact_n(&mut r, numel * 4)?;

        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::format(format!("unknown tensor {name} in checkpoint")))?;
        let param = model.params.get_mut(id);
        if param.shape != shape {
            return Err(Error::format(format!(
                "tensor {name}: file shape {shape:?} disagrees with config shape {:?}",
                param.shape
            )));
        }
        for (i, v) in param.value.iter_mut().enumerate() {
            let at = i * 4;
            *v = f32::from_le_bytes([payload[at], payload[at + 1], payload[at + 2], payload[at + 3]]);
        }
        let idx = id.0;
        if seen[idx] {
            return Err(Error::format(format!("tensor {name} appears twice")));
        }
        seen[idx] = true;
    }
    Ok(model)
}
