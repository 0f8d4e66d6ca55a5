//! Versioned binary checkpoints.
//!
//! A checkpoint stores the manifold signature (free dim plus per-factor
//! sign/dim), the cluster count, the feature dimension, and every parameter
//! tensor by name and shape. Loading validates all of that against the
//! store freshly built from the active config and rejects any mismatch, so a
//! checkpoint can never be silently applied to the wrong architecture.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::diff::Tensor;
use crate::manifold::ProductManifold;
use crate::params::{ParamRef, ParamStore};

const MAGIC: &[u8; 4] = b"CCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
    #[error("checkpoint signature mismatch: {0}")]
    SignatureMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub free_dim: usize,
    pub factors: Vec<(i64, usize)>,
    pub k: usize,
    pub feature_dim: usize,
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_i64(buf: &mut Vec<u8>, v: i64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save(
    path: &Path,
    manifold: &ProductManifold,
    k: usize,
    feature_dim: usize,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let (free_dim, factors) = manifold.signature();
    push_u64(&mut buf, free_dim as u64);
    push_u64(&mut buf, factors.len() as u64);
    for (sign, dim) in factors {
        push_i64(&mut buf, sign);
        push_u64(&mut buf, dim as u64);
    }
    push_u64(&mut buf, k as u64);
    push_u64(&mut buf, feature_dim as u64);
    push_u64(&mut buf, store.len() as u64);
    for i in 0..store.len() {
        let r = ParamRef(i);
        let name = store.name(r).as_bytes();
        push_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name);
        let t = store.get(r);
        push_u64(&mut buf, t.rows() as u64);
        push_u64(&mut buf, t.cols() as u64);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .buf
            .get(self.at..self.at + n)
            .ok_or(CheckpointError::Corrupt("unexpected end of file"))?;
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, CheckpointError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint into `store`, which must already have the layout the
/// active config produces (same names, shapes, and order).
pub fn load(
    path: &Path,
    expected: &CheckpointMeta,
    store: &mut ParamStore,
) -> Result<(), CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic"));
    }
    if u32::from_le_bytes(r.take(4)?.try_into().unwrap()) != VERSION {
        return Err(CheckpointError::Corrupt("unsupported version"));
    }
    let free_dim = r.u64()? as usize;
    let n_factors = r.u64()? as usize;
    if n_factors > 1 << 16 {
        return Err(CheckpointError::Corrupt("implausible factor count"));
    }
    let mut factors = Vec::with_capacity(n_factors);
    for _ in 0..n_factors {
        let sign = r.i64()?;
        let dim = r.u64()? as usize;
        factors.push((sign, dim));
    }
    let k = r.u64()? as usize;
    let feature_dim = r.u64()? as usize;
    let meta = CheckpointMeta { free_dim, factors, k, feature_dim };
    if meta != *expected {
        return Err(CheckpointError::SignatureMismatch(format!(
            "checkpoint was written for free_dim={}, factors={:?}, k={}, feature_dim={}; \
             the active config expects free_dim={}, factors={:?}, k={}, feature_dim={}",
            meta.free_dim,
            meta.factors,
            meta.k,
            meta.feature_dim,
            expected.free_dim,
            expected.factors,
            expected.k,
            expected.feature_dim,
        )));
    }
    let n_params = r.u64()? as usize;
    if n_params != store.len() {
        return Err(CheckpointError::SignatureMismatch(format!(
            "checkpoint has {} parameters, the active config builds {}",
            n_params,
            store.len()
        )));
    }
    for i in 0..n_params {
        let name_len = r.u64()? as usize;
        if name_len > 1 << 12 {
            return Err(CheckpointError::Corrupt("implausible name length"));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("non-utf8 parameter name"))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let pref = ParamRef(i);
        if name != store.name(pref) || (rows, cols) != store.get(pref).shape() {
            return Err(CheckpointError::SignatureMismatch(format!(
                "parameter {i}: checkpoint has {name} ({rows}x{cols}), config builds {} ({}x{})",
                store.name(pref),
                store.get(pref).rows(),
                store.get(pref).cols()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        store.set(pref, Tensor::new(rows, cols, data));
    }
    if r.at != buf.len() {
        return Err(CheckpointError::Corrupt("trailing bytes"));
    }
    Ok(())
}
