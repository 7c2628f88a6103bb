//! Binary weight cache.
//!
//! Layout (little endian): magic `b"FLGOPW01"`, version `u32`, dimension
//! `u32`, active node count `u64`, `s` and `p` as `f64`, then the packed
//! upper triangle of pair weights (row-major), the tail array and the collar
//! array.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{NonlocalOperator, OperatorParams};
use crate::error::{Error, Result};
use crate::grid::Grid;

const MAGIC: &[u8; 8] = b"FLGOPW01";
const VERSION: u32 = 1;

/// File name keyed by the grid hash and the exact bits of `s` and `p`.
pub fn cache_file_name(grid: &Grid, params: OperatorParams) -> String {
    format!(
        "{}-{:016x}-{:016x}.bin",
        grid.content_hash(),
        params.s.to_bits(),
        params.p.to_bits()
    )
}

/// Loads the operator from `dir` when a matching cache file exists,
/// otherwise assembles it and writes the cache.
pub fn assemble_cached(grid: &Arc<Grid>, params: OperatorParams, dir: &Path) -> Result<NonlocalOperator> {
    let path = dir.join(cache_file_name(grid, params));
    if path.exists() {
        return load(grid, params, &path);
    }
    let op = NonlocalOperator::assemble(grid, params)?;
    fs::create_dir_all(dir)?;
    save(&op, &path)?;
    Ok(op)
}

fn cache_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Cache {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn save(op: &NonlocalOperator, path: &PathBuf) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(op.grid().dimension() as u32).to_le_bytes())?;
        w.write_all(&(op.len() as u64).to_le_bytes())?;
        w.write_all(&op.params().s.to_le_bytes())?;
        w.write_all(&op.params().p.to_le_bytes())?;
        for v in op.packed_weights().iter().chain(op.tail()).chain(op.collar()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load(grid: &Arc<Grid>, params: OperatorParams, path: &Path) -> Result<NonlocalOperator> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(cache_err(path, "bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != VERSION {
        return Err(cache_err(path, "unsupported version"));
    }
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) as usize != grid.dimension() {
        return Err(cache_err(path, "dimension mismatch"));
    }
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    if n != grid.interior_mask().count() {
        return Err(cache_err(path, "node count mismatch"));
    }
    r.read_exact(&mut b8)?;
    let s = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let p = f64::from_le_bytes(b8);
    if s.to_bits() != params.s.to_bits() || p.to_bits() != params.p.to_bits() {
        return Err(cache_err(path, "parameter mismatch"));
    }
    let mut read_vec = |len: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    };
    let weights = read_vec(n * (n - 1) / 2)?;
    let tail = read_vec(n)?;
    let collar = read_vec(n)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(cache_err(path, "trailing bytes"));
    }
    Ok(NonlocalOperator::from_parts(grid, params, weights, tail, collar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, DomainSpec};

    #[test]
    fn cached_operator_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_grid(&DomainSpec::square((-1.0, 1.0), (-0.4, 0.4), 11)).unwrap();
        let params = OperatorParams::new(0.5, 2.5).unwrap();
        let fresh = NonlocalOperator::assemble(&g, params).unwrap();
        let first = assemble_cached(&g, params, dir.path()).unwrap();
        assert!(dir.path().join(cache_file_name(&g, params)).exists());
        let loaded = assemble_cached(&g, params, dir.path()).unwrap();
        assert_eq!(fresh.packed_weights(), loaded.packed_weights());
        assert_eq!(fresh.tail(), loaded.tail());
        assert_eq!(fresh.collar(), loaded.collar());
        assert_eq!(first.packed_weights(), loaded.packed_weights());
        let u: Vec<f64> = (0..fresh.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = vec![0.0; fresh.len()];
        let mut b = vec![0.0; fresh.len()];
        fresh.apply_compact(&u, &mut a);
        loaded.apply_compact(&u, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_cache_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_grid(&DomainSpec::default_1d()).unwrap();
        let params = OperatorParams::new(0.5, 2.0).unwrap();
        let path = dir.path().join(cache_file_name(&g, params));
        std::fs::write(&path, b"not a cache").unwrap();
        assert!(assemble_cached(&g, params, dir.path()).is_err());
    }
}
