//! Binary checkpoints: versioned header (magic, format version, config
//! hash), the canonical config text, the epoch counter, then named blocks —
//! every parameter and buffer plus optimizer velocities — as shape-prefixed
//! little-endian f64 arrays. Save → load → forward is bitwise.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CsqaError, Result};
use crate::harness::config::RunConfig;
use crate::harness::optimizer::Sgd;
use crate::model::CsqaModel;
use crate::tensor::ParamKind;

const MAGIC: &[u8; 8] = b"CSQACKPT";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub blocks: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_block(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(buf, name);
    put_u32(buf, shape.len() as u32);
    for d in shape {
        put_u64(buf, *d as u64);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CsqaError::Format { path: self.path.clone(), detail: "truncated checkpoint".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CsqaError::Format { path: self.path.clone(), detail: "non-utf8 string".into() })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serialize the model, its buffers, and both optimizers' states.
pub fn save(
    path: &Path,
    config: &RunConfig,
    model: &CsqaModel,
    main_opt: &Sgd,
    aux_opt: &Sgd,
    epoch: usize,
) -> Result<()> {
    let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (_, p) in model.store.iter() {
        blocks.push((p.name.clone(), p.shape.clone(), p.data.clone()));
    }
    for (id, v) in main_opt.state() {
        blocks.push((format!("velocity.{}", model.store.name(id)), vec![v.len()], v.to_vec()));
    }
    for (id, v) in aux_opt.state() {
        blocks.push((format!("velocity.{}", model.store.name(id)), vec![v.len()], v.to_vec()));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, config.hash());
    put_str(&mut buf, &config.to_text());
    put_u32(&mut buf, epoch as u32);
    put_u32(&mut buf, blocks.len() as u32);
    for (name, shape, data) in &blocks {
        put_block(&mut buf, name, shape, data);
    }
    let mut f = std::fs::File::create(path).map_err(|e| CsqaError::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| CsqaError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CsqaError::io(path.display().to_string(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| CsqaError::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(8)? != MAGIC {
        return Err(CsqaError::Format { path: r.path.clone(), detail: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CsqaError::Format {
            path: r.path.clone(),
            detail: format!("unsupported format version {version}"),
        });
    }
    let hash = r.u64()?;
    let config_text = r.string()?;
    let config = RunConfig::parse(&config_text)?;
    if config.hash() != hash {
        return Err(CsqaError::Format {
            path: r.path.clone(),
            detail: "config hash does not match embedded config".into(),
        });
    }
    let epoch = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        blocks.push((name, shape, data));
    }
    Ok(Checkpoint { config, epoch, blocks })
}

/// Rebuild the model (and optionally the optimizers) from a checkpoint.
pub fn restore(path: &Path) -> Result<(RunConfig, CsqaModel, Sgd, Sgd, usize)> {
    let ck = read(path)?;
    let mut model = CsqaModel::new(ck.config.model.clone(), ck.config.seed)?;
    let mut main_opt = Sgd::new(ParamKind::Main);
    let mut aux_opt = Sgd::new(ParamKind::Aux);
    let mut seen = 0usize;
    for (name, shape, data) in &ck.blocks {
        if let Some(vname) = name.strip_prefix("velocity.") {
            let id = model.store.id_by_name(vname).ok_or_else(|| CsqaError::Format {
                path: path.display().to_string(),
                detail: format!("velocity for unknown parameter `{vname}`"),
            })?;
            match model.store.kind(id) {
                ParamKind::Aux => aux_opt.restore(id, data.clone()),
                _ => main_opt.restore(id, data.clone()),
            }
            continue;
        }
        let id = model.store.id_by_name(name).ok_or_else(|| CsqaError::Format {
            path: path.display().to_string(),
            detail: format!("unknown parameter block `{name}`"),
        })?;
        if model.store.shape(id) != shape.as_slice() {
            return Err(CsqaError::Format {
                path: path.display().to_string(),
                detail: format!("shape mismatch for `{name}`: {:?} vs {:?}", model.store.shape(id), shape),
            });
        }
        model.store.data_mut(id).copy_from_slice(data);
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(CsqaError::Format {
            path: path.display().to_string(),
            detail: format!("checkpoint holds {seen} of {} parameter blocks", model.store.len()),
        });
    }
    Ok((ck.config, model, main_opt, aux_opt, ck.epoch))
}
