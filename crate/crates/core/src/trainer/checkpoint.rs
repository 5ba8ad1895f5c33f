//! Binary checkpoint format.
//!
//! ```text
//! magic "GRACECKP" | u32 version | 32-byte config hash | u64 seed | u64 epoch
//! u32 n_params, then per parameter: name, shape, f64 data
//! u64 adam step, first and second moments in parameter order, f64 learning rate
//! u32 n_log_rows, then 9 f64 per row
//! 32-byte SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian; floats are stored as raw bits.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Adam, EpochLog};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GRACECKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Hex SHA-256 of the canonical training configuration.
    pub config_hash: String,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam: Adam,
    pub log: Vec<EpochLog>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &s in t.shape() {
            self.u64(s as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("unexpected end of file".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self, limit: usize) -> std::result::Result<usize, String> {
        let n = self.u64()? as usize;
        if n > limit {
            return Err(format!("implausible length {n}"));
        }
        Ok(n)
    }
    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(format!("implausible tensor rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len(self.buf.len())?);
        }
        let n: usize = shape.iter().product();
        if n * 8 > self.buf.len() - self.pos {
            return Err("unexpected end of file".into());
        }
        let data = (0..n).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

fn hex_to_bytes(h: &str) -> Option<[u8; 32]> {
    if h.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&h[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.extend_from_slice(&hex_to_bytes(&self.config_hash).unwrap_or([0; 32]));
        w.u64(self.seed);
        w.u64(self.epoch as u64);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            w.tensor(t);
        }
        w.u64(self.adam.step);
        for t in self.adam.first.iter().chain(&self.adam.second) {
            w.tensor(t);
        }
        w.f64(self.adam.lr);
        w.u32(self.log.len() as u32);
        for row in &self.log {
            for v in row.values() {
                w.f64(v);
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        if buf.len() < MAGIC.len() + 4 + 32 || &buf[..8] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}, expected {VERSION}"));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err("checksum mismatch (file is truncated or corrupt)".into());
        }
        let config_hash = r.take(32)?.iter().map(|b| format!("{b:02x}")).collect();
        let seed = r.u64()?;
        let epoch = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8")?;
            params.push((name, r.tensor()?));
        }
        let step = r.u64()?;
        let first = (0..n).map(|_| r.tensor()).collect::<std::result::Result<Vec<_>, _>>()?;
        let second = (0..n).map(|_| r.tensor()).collect::<std::result::Result<Vec<_>, _>>()?;
        let lr = r.f64()?;
        let rows = r.u32()? as usize;
        let mut log = Vec::with_capacity(rows.min(1 << 16));
        for _ in 0..rows {
            let mut v = [0.0; 9];
            for x in &mut v {
                *x = r.f64()?;
            }
            log.push(EpochLog::from_values(v));
        }
        if r.pos != body.len() {
            return Err("trailing bytes after checkpoint body".into());
        }
        for ((_, p), (m, s)) in params.iter().zip(first.iter().zip(&second)) {
            if p.shape() != m.shape() || p.shape() != s.shape() {
                return Err("optimizer moments do not match parameter shapes".into());
            }
        }
        Ok(Self {
            config_hash,
            seed,
            epoch,
            params,
            adam: Adam::restore(lr, step, first, second),
            log,
        })
    }
}

/// Writes through a temporary file and renames, so readers never see a partial file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected_hash`, a different config hash is an error.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&buf).map_err(|msg| Error::Checkpoint {
        path: path.into(),
        msg,
    })?;
    if let Some(h) = expected_hash {
        if h != ckpt.config_hash {
            return Err(Error::Checkpoint {
                path: path.into(),
                msg: format!("config hash {} does not match the current configuration {h}", ckpt.config_hash),
            });
        }
    }
    Ok(ckpt)
}
