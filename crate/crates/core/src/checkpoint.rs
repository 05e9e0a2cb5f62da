//! Flat binary checkpoint, version 1.
//!
//! All integers are `u64` little-endian, all parameters `f64` little-endian.
//!
//! ```text
//! "VOSCKPT1"                     8-byte magic
//! n                              number of backbone layer sizes
//! size_0 … size_{n-1}            [d, hidden…, m]
//! K                              number of ID classes
//! m                              feature dimension (repeats size_{n-1})
//! phi_hidden                     φ hidden width
//! flags                          bit 0 cls bias, bit 1 extra class, bit 2 constant w
//! parameters                     every tensor of Model::tensors(), in order
//! ```
//!
//! Nothing follows the last parameter.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, VosError};
use crate::network::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"VOSCKPT1";

const FLAG_CLS_BIAS: u64 = 1;
const FLAG_EXTRA_CLASS: u64 = 1 << 1;
const FLAG_CONSTANT_W: u64 = 1 << 2;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(64 + 8 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    let mut put = |v: u64| out.extend_from_slice(&v.to_le_bytes());
    put(cfg.layer_sizes.len() as u64);
    cfg.layer_sizes.iter().for_each(|&s| put(s as u64));
    put(cfg.num_classes as u64);
    put(cfg.feature_dim() as u64);
    put(cfg.phi_hidden as u64);
    let mut flags = 0;
    if cfg.cls_bias {
        flags |= FLAG_CLS_BIAS;
    }
    if cfg.extra_class {
        flags |= FLAG_EXTRA_CLASS;
    }
    if cfg.constant_w {
        flags |= FLAG_CONSTANT_W;
    }
    put(flags);
    for t in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            VosError::Checkpoint(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&c| c <= 1 << 32)
            .ok_or_else(|| VosError::Checkpoint(format!("implausible {what}: {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(VosError::Checkpoint("bad magic".into()));
    }
    let n = cur.count("layer count")?;
    let layer_sizes = (0..n).map(|_| cur.count("layer size")).collect::<Result<Vec<_>>>()?;
    let num_classes = cur.count("class count")?;
    let m = cur.count("feature dim")?;
    let phi_hidden = cur.count("phi width")?;
    let flags = cur.u64()?;
    if flags & !(FLAG_CLS_BIAS | FLAG_EXTRA_CLASS | FLAG_CONSTANT_W) != 0 {
        return Err(VosError::Checkpoint(format!("unknown flags {flags:#x}")));
    }
    let config = ModelConfig {
        layer_sizes,
        num_classes,
        phi_hidden,
        cls_bias: flags & FLAG_CLS_BIAS != 0,
        extra_class: flags & FLAG_EXTRA_CLASS != 0,
        constant_w: flags & FLAG_CONSTANT_W != 0,
    };
    config.validate().map_err(|e| VosError::Checkpoint(e.to_string()))?;
    if config.feature_dim() != m {
        return Err(VosError::Checkpoint(format!("feature dim {m} disagrees with layer sizes")));
    }
    let mut model = Model::zeros(config)?;
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = cur.f64()?;
        }
    }
    if cur.pos != bytes.len() {
        return Err(VosError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
