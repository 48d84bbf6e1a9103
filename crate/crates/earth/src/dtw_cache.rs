//! Cached DTW distance matrices.
//!
//! Layout: magic `EARTHDTW`, u32 version, 32-byte SHA-256 of the inputs
//! (see [`dataset_hash`]), u64 N, then N×N little-endian f64 row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use earth_core::data::{EpidemicDataset, SplitKind};
use earth_core::tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::binary::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EARTHDTW";
pub const VERSION: u32 = 1;

/// Hash of what the distances depend on: region names and the training
/// split of every series.
pub fn dataset_hash(ds: &EpidemicDataset) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((ds.regions() as u64).to_le_bytes());
    for name in &ds.region_names {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
    }
    for series in ds.split_series(SplitKind::Train) {
        h.update((series.len() as u64).to_le_bytes());
        for x in series {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn write_cache(w: impl Write, hash: &[u8; 32], distances: &Tensor) -> std::io::Result<()> {
    let mut w = Writer(w);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.bytes(hash)?;
    w.u64(distances.rows() as u64)?;
    w.f64s(distances.data())?;
    w.0.flush()
}

/// The stored hash and matrix.
pub fn read_cache(r: impl Read) -> std::result::Result<([u8; 32], Tensor), String> {
    let mut r = Reader(r);
    if &r.bytes::<8>()? != MAGIC {
        return Err("not a DTW cache (bad magic header)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported DTW cache version {version}"));
    }
    let hash = r.bytes::<32>()?;
    let n = r.len()?;
    if n.checked_mul(n).is_none_or(|nn| nn > 1 << 26) {
        return Err(format!("matrix size {n} is implausibly large"));
    }
    let data = r.f64s(n * n)?;
    if !r.at_end() {
        return Err("trailing bytes after the matrix".into());
    }
    Ok((hash, Tensor::matrix(n, n, data).map_err(|e| e.to_string())?))
}

pub fn save(path: &Path, ds: &EpidemicDataset, distances: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cache(BufWriter::new(file), &dataset_hash(ds), distances).map_err(|e| Error::io(path, e))
}

/// Returns the cached matrix when it exists and matches `ds`, otherwise
/// `None`. A corrupt file is an error.
pub fn load(path: &Path, ds: &EpidemicDataset) -> Result<Option<Tensor>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let (hash, distances) = read_cache(BufReader::new(file)).map_err(|m| Error::file(path, m))?;
    Ok((hash == dataset_hash(ds)).then_some(distances))
}

/// Cached distances for `ds`, computing and storing them on a miss.
pub fn load_or_compute(path: &Path, ds: &EpidemicDataset) -> Result<(Tensor, bool)> {
    if let Some(d) = load(path, ds)? {
        return Ok((d, true));
    }
    let d = earth_core::train::semantic_distances(ds)?;
    save(path, ds, &d)?;
    Ok((d, false))
}
