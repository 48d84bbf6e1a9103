//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//! magic `EARTHCKP`, u32 format version, u32 length + UTF-8 JSON of the
//! training config, u64 epoch, f64 best validation RMSE, u64 N, N region
//! names (u32 length + UTF-8), N means, N stds, adjacency and semantic
//! tensors, u64 hidden, u64 channels, u32 parameter count, then per
//! parameter its name and tensor. A tensor is u32 rank, u64 dims, f64 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use earth_core::data::Normalizer;
use earth_core::model::{ModelParams, ParamId};
use earth_core::train::{Checkpoint, TrainConfig, CHECKPOINT_VERSION};

use crate::binary::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EARTHCKP";

pub fn write_checkpoint(w: impl Write, ckpt: &Checkpoint) -> std::io::Result<()> {
    let mut w = Writer(w);
    w.bytes(MAGIC)?;
    w.u32(ckpt.version)?;
    let config = serde_json::to_string(&ckpt.config).map_err(std::io::Error::other)?;
    w.str(&config)?;
    w.u64(ckpt.epoch as u64)?;
    w.f64(ckpt.best_val_rmse)?;
    w.u64(ckpt.region_names.len() as u64)?;
    for name in &ckpt.region_names {
        w.str(name)?;
    }
    w.f64s(&ckpt.normalizer.mean)?;
    w.f64s(&ckpt.normalizer.std)?;
    w.tensor(&ckpt.adjacency)?;
    w.tensor(&ckpt.semantic)?;
    w.u64(ckpt.params.hidden as u64)?;
    w.u64(ckpt.params.channels as u64)?;
    w.u32(ParamId::ALL.len() as u32)?;
    for (id, t) in ckpt.params.iter() {
        w.str(id.name())?;
        w.tensor(t)?;
    }
    w.0.flush()
}

pub fn read_checkpoint(r: impl Read) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader(r);
    if &r.bytes::<8>()? != MAGIC {
        return Err("not a checkpoint (bad magic header)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let config: TrainConfig = serde_json::from_str(&r.str()?).map_err(|e| format!("bad config block: {e}"))?;
    let epoch = r.len()?;
    let best_val_rmse = r.f64()?;
    let n = r.len()?;
    let region_names = (0..n).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
    let normalizer = Normalizer {
        mean: r.f64s(n)?,
        std: r.f64s(n)?,
    };
    let adjacency = r.tensor()?;
    let semantic = r.tensor()?;
    let hidden = r.len()?;
    let channels = r.len()?;
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.str()?;
        let id = ParamId::from_name(&name).ok_or_else(|| format!("unknown parameter `{name}`"))?;
        named.push((id, r.tensor()?));
    }
    if !r.at_end() {
        return Err("trailing bytes after the last parameter".into());
    }
    let params = ModelParams::from_named(hidden, channels, named).map_err(|e| e.to_string())?;
    Ok(Checkpoint {
        version,
        config,
        epoch,
        best_val_rmse,
        normalizer,
        region_names,
        adjacency,
        semantic,
        params,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), ckpt).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|m| Error::file(path, m))
}
