//! Versioned network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IUNT"  u32 version  u32 len  <len bytes of JSON IUNetConfig>
//! u32 record count, then per record:
//!   u32 len  <utf-8 name>  u32 ndim  u64 × ndim dims  f64 × prod(dims)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use iunet_core::{IUNet, IUNetConfig};

pub const MAGIC: &[u8; 4] = b"IUNT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit this network: {0}")]
    Mismatch(String),
}

type CkResult<T> = Result<T, CheckpointError>;

/// Serializes the configuration and every parameter array of `net`.
pub fn to_bytes(net: &IUNet) -> Vec<u8> {
    let cfg = serde_json::to_vec(net.config()).expect("config serializes");
    let params = net.named_params();
    let mut out = Vec::with_capacity(16 + cfg.len() + net.param_bytes() + params.len() * 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(net: &IUNet, path: &Path) -> CkResult<()> {
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&to_bytes(net)).map_err(io_err)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CkResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// A decoded checkpoint: configuration plus `(name, shape, values)` records.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: IUNetConfig,
    pub records: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn from_bytes(bytes: &[u8]) -> CkResult<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.pos = 4;
    let found = r.u32("version")?;
    if found != VERSION {
        return Err(CheckpointError::Version { found });
    }
    let len = r.u32("config length")? as usize;
    let config: IUNetConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let len = r.u32("record name")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| CheckpointError::Corrupt(format!("record {k}: name is not utf-8")))?
            .to_owned();
        let ndim = r.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("record shape")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| n.checked_mul(8));
        let n = n.ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape {shape:?} overflows")))?;
        let data = r.take(n, &name)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        records.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, records })
}

fn read(path: &Path) -> CkResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}

/// Copies the records of `ck` into `net`, which must have the same
/// dimensionality and parameter layout.
pub fn restore(net: &mut IUNet, ck: &Checkpoint) -> CkResult<()> {
    let cfg = net.config();
    if ck.config.dim != cfg.dim {
        return Err(CheckpointError::Mismatch(format!("checkpoint is {}-d, network is {}-d", ck.config.dim, cfg.dim)));
    }
    let specs = net.param_specs();
    if specs.len() != ck.records.len() {
        return Err(CheckpointError::Mismatch(format!("{} parameter arrays, network has {}", ck.records.len(), specs.len())));
    }
    for (spec, (name, shape, _)) in specs.iter().zip(&ck.records) {
        if &spec.name != name || &spec.shape != shape {
            return Err(CheckpointError::Mismatch(format!("{name} {shape:?} where network has {} {:?}", spec.name, spec.shape)));
        }
    }
    for (name, _, data) in &ck.records {
        net.set_param(name, data).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    }
    Ok(())
}

/// Rebuilds the network stored at `path`.
pub fn load(path: &Path) -> CkResult<IUNet> {
    let ck = read(path)?;
    let mut net = IUNet::build(&ck.config, 0).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    restore(&mut net, &ck)?;
    Ok(net)
}

/// Loads the parameters stored at `path` into an existing network.
pub fn load_into(net: &mut IUNet, path: &Path) -> CkResult<()> {
    restore(net, &read(path)?)
}
