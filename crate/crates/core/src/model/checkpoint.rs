//! Binary checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic  "MRNCKPT\0"
//! u32    version
//! config u32 blocks_per_stage, u32 k, u32 w, u8 block kind, u8 topology,
//!        u32 num_classes, u32 C, u32 H, u32 W
//! u32    tensor count
//! tensor u32 name length, name (UTF-8), u32 rank, u64 dims…, f64 data…
//! ```
//!
//! Tensors cover every parameter, every running mean/variance pair, and any
//! extra named tensors the caller attaches (e.g. input normalisation).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{build_network, BlockKind, Network, NetworkConfig, Topology};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Caller-supplied tensors, in the order they were stored.
    pub extras: Vec<(String, Tensor)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.rank());
        for &d in t.shape() {
            self.0.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} while reading {what}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("name length")?;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::format(self.path, format!("non UTF-8 name before byte {}", self.pos)))?
            .to_string();
        let rank = self.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("dimension")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::format(self.path, format!("tensor `{name}` shape {shape:?} exceeds file")))?;
        let raw = self.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(self.path, format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

/// Serialise a network plus extra named tensors.
pub fn encode_checkpoint(network: &Network, extras: &[(String, Tensor)]) -> Vec<u8> {
    let cfg = network.config();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    w.u32(cfg.blocks_per_stage);
    w.u32(cfg.k);
    w.u32(cfg.w);
    w.u8(match cfg.block_kind {
        BlockKind::Basic => 0,
        BlockKind::Bottleneck => 1,
    });
    w.u8(match cfg.topology {
        Topology::Residual => 0,
        Topology::Plain => 1,
    });
    w.u32(cfg.num_classes);
    for d in cfg.input_shape {
        w.u32(d);
    }
    let count = network.params().len() + 2 * network.running_stats().len() + extras.len();
    w.u32(count);
    for p in network.params() {
        w.tensor(&p.name, &p.value);
    }
    for (name, rs) in network.running_names().iter().zip(network.running_stats()) {
        let c = rs.mean.len();
        w.tensor(
            &format!("{name}.running_mean"),
            &Tensor::new(vec![c], rs.mean.clone()).expect("shape"),
        );
        w.tensor(
            &format!("{name}.running_var"),
            &Tensor::new(vec![c], rs.var.clone()).expect("shape"),
        );
    }
    for (name, t) in extras {
        w.tensor(name, t);
    }
    w.0
}

/// Parse bytes produced by [`encode_checkpoint`]. `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let blocks_per_stage = r.u32("config")?;
    let k = r.u32("config")?;
    let w = r.u32("config")?;
    let block_kind = match r.u8("config")? {
        0 => BlockKind::Basic,
        1 => BlockKind::Bottleneck,
        b => return Err(Error::format(path, format!("unknown block kind tag {b}"))),
    };
    let topology = match r.u8("config")? {
        0 => Topology::Residual,
        1 => Topology::Plain,
        b => return Err(Error::format(path, format!("unknown topology tag {b}"))),
    };
    let num_classes = r.u32("config")?;
    let input_shape = [r.u32("config")?, r.u32("config")?, r.u32("config")?];
    let config = NetworkConfig {
        blocks_per_stage,
        k,
        w,
        block_kind,
        num_classes,
        input_shape,
        topology,
    };
    config
        .validate()
        .map_err(|e| Error::format(path, format!("stored config invalid: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, format!("duplicate tensor `{name}`")));
        }
        order.push(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut network = build_network(&config, 0)?;
    let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::format(
                path,
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    };
    for p in network.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Arc::new(fetch(&p.name, &shape)?);
    }
    let names = network.running_names().to_vec();
    for (name, rs) in names.iter().zip(network.running_stats_mut()) {
        let c = [rs.mean.len()];
        rs.mean = fetch(&format!("{name}.running_mean"), &c)?.into_data();
        rs.var = fetch(&format!("{name}.running_var"), &c)?.into_data();
    }
    let extras = order
        .into_iter()
        .filter_map(|n| tensors.remove(&n).map(|t| (n, t)))
        .collect();
    Ok(Checkpoint { network, extras })
}

pub fn save_checkpoint(path: &Path, network: &Network, extras: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(network, extras))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
