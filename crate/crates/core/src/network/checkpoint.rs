//! Checkpoint file: magic `LRI3DCKP`, a little-endian `u32` header length,
//! a JSON header, then the parameters as little-endian `f64` in [`Layout`]
//! order.
//!
//! [`Layout`]: super::Layout

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{count_parameters, ModelConfig};

const MAGIC: &[u8; 8] = b"LRI3DCKP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    #[serde(skip)]
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    seed: u64,
    parameters: usize,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.len() != count_parameters(&ckpt.config) {
        return Err(Error::Shape(format!(
            "{} parameters for {}",
            ckpt.params.len(),
            ckpt.config
        )));
    }
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        seed: ckpt.seed,
        parameters: ckpt.params.len(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for p in &ckpt.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    header.config.validate()?;
    if header.parameters != count_parameters(&header.config) {
        return Err(Error::Format("parameter count does not match the configuration".into()));
    }
    let mut params = Vec::with_capacity(header.parameters);
    let mut buf = [0u8; 8];
    for _ in 0..header.parameters {
        r.read_exact(&mut buf)?;
        params.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        seed: header.seed,
        params,
    })
}
