//! Little-endian weight checkpoints.
//!
//! ```text
//! "CTXP" | version u32 | config_len u32 | config (key=value text)
//! tensor_count u32 | { name_len u16 | name | rows u32 | cols u32 | f32 × rows·cols }*
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

use super::config::ModelConfig;
use super::weights::Weights;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTXP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &Weights, out: &mut W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = w.cfg.to_kv();
    out.write_all(&(cfg.len() as u32).to_le_bytes())?;
    out.write_all(cfg.as_bytes())?;
    out.write_all(&(w.params.len() as u32).to_le_bytes())?;
    for (name, t) in w.names.iter().zip(&w.params) {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&(t.rows() as u32).to_le_bytes())?;
        out.write_all(&(t.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.data().len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Weights> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let cfg = ModelConfig::from_kv(&cfg_text)?;
    let count = read_u32(r)? as usize;
    let mut named = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut nb = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        named.insert(name, Tensor2::from_vec(rows, cols, data)?);
    }
    Weights::from_named(&cfg, named)
}

pub fn save_checkpoint(w: &Weights, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(w, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Weights> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

/// Rounds every parameter to `f32` precision, matching what a checkpoint stores.
pub fn round_to_f32(w: &mut Weights) {
    for p in &mut w.params {
        for v in p.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}
