//! Binary serialization: compressed-cache files and checkpoint containers.
//!
//! A context compressed once is reusable across many questions, so the
//! cache format is normative and bit-exact: little-endian, f32 payloads,
//! row-major, no padding. Checkpoints (base parameters, adapters, whole
//! training states) share the same magic/version/config-hash discipline in
//! a named-tensor container. All writes go through a temp file and rename
//! so concurrent readers never observe a partial file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::compressor::CompressedCache;
use crate::config::ModelConfig;
use crate::error::{KvdError, Result};
use crate::model::LayerKv;
use crate::numerics::Tensor;

/// Magic for compressed-cache files.
pub const CACHE_MAGIC: &[u8; 4] = b"KVD1";
/// Magic for checkpoint containers.
pub const CKPT_MAGIC: &[u8; 4] = b"KVDC";
pub const FORMAT_VERSION: u16 = 1;

/// What a checkpoint container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    BaseParams,
    Adapters,
    TrainState,
}

impl CheckpointKind {
    fn code(self) -> u16 {
        match self {
            CheckpointKind::BaseParams => 0,
            CheckpointKind::Adapters => 1,
            CheckpointKind::TrainState => 2,
        }
    }

    fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(CheckpointKind::BaseParams),
            1 => Some(CheckpointKind::Adapters),
            2 => Some(CheckpointKind::TrainState),
            _ => None,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| KvdError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| KvdError::io(&tmp, e))?;
    f.sync_all().map_err(|e| KvdError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| KvdError::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader {
            buf,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn bad(&self, detail: impl Into<String>) -> KvdError {
        KvdError::BadFormat {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.bad(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Exact byte size of a cache file for the given geometry.
pub fn cache_file_size(cfg: &ModelConfig, sink_count: usize, k: usize) -> usize {
    let rows = sink_count + k;
    // magic + version + hash + 4 u16 dims + k + origin
    let header = 4 + 2 + 8 + 4 * 2 + 4 + 4;
    header + rows * 4 + k * 4 + cfg.n_layers * 2 * rows * cfg.d_model * 4
}

/// Serializes a compressed cache. Same cache, same bytes.
pub fn save_cache(cache: &CompressedCache, cfg: &ModelConfig, path: &Path) -> Result<u64> {
    let rows = cache.rows();
    let k = cache.scores.len();
    if rows != cache.sink_count + k {
        return Err(KvdError::InvalidArg(format!(
            "cache rows {rows} != sinks {} + scores {k}",
            cache.sink_count
        )));
    }
    let mut buf = Vec::with_capacity(cache_file_size(cfg, cache.sink_count, k));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&cfg.arch_hash().to_le_bytes());
    buf.extend_from_slice(&(cfg.n_layers as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.n_heads as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.head_dim as u16).to_le_bytes());
    buf.extend_from_slice(&(cache.sink_count as u16).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(cache.origin_len as u32).to_le_bytes());
    for &p in &cache.position_ids {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    for &s in &cache.scores {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for layer in &cache.layers {
        if layer.keys.shape() != (rows, cfg.d_model) || layer.values.shape() != (rows, cfg.d_model)
        {
            return Err(KvdError::InvalidArg("cache layer shape mismatch".into()));
        }
        for &v in layer.keys.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    Ok(buf.len() as u64)
}

/// Loads and validates a cache file against the loading model's config.
pub fn load_cache(path: &Path, cfg: &ModelConfig) -> Result<CompressedCache> {
    let buf = fs::read(path).map_err(|e| KvdError::io(path, e))?;
    let mut r = Reader::new(&buf, path);
    let magic = r.take(4)?;
    if magic != CACHE_MAGIC {
        return Err(r.bad(format!("bad magic {magic:02x?}, expected {CACHE_MAGIC:02x?}")));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    if hash != cfg.arch_hash() {
        return Err(KvdError::ConfigMismatch {
            path: path.display().to_string(),
            found: hash,
            expected: cfg.arch_hash(),
        });
    }
    let n_layers = r.u16()? as usize;
    let n_heads = r.u16()? as usize;
    let head_dim = r.u16()? as usize;
    if n_layers != cfg.n_layers || n_heads != cfg.n_heads || head_dim != cfg.head_dim {
        return Err(r.bad(format!(
            "geometry {n_layers}l/{n_heads}h/{head_dim}d does not match model"
        )));
    }
    let sink_count = r.u16()? as usize;
    let k = r.u32()? as usize;
    let origin_len = r.u32()? as usize;
    let rows = sink_count + k;
    if rows > origin_len {
        return Err(r.bad(format!("{rows} retained rows from a {origin_len}-token context")));
    }
    let mut position_ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        position_ids.push(r.u32()?);
    }
    let scores = r.f32s(k)?;
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let keys = Tensor::new(rows, d, r.f32s(rows * d)?);
        let values = Tensor::new(rows, d, r.f32s(rows * d)?);
        layers.push(LayerKv { keys, values });
    }
    r.done()?;
    Ok(CompressedCache {
        layers,
        position_ids,
        scores,
        sink_count,
        origin_len,
    })
}

/// One checkpoint payload: named f32 tensors plus named u64 scalars
/// (optimizer step counters, rng positions).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub scalars: BTreeMap<String, u64>,
}

const TAG_TENSOR: u8 = 0;
const TAG_U64: u8 = 1;

/// Writes a checkpoint container.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    kind: CheckpointKind,
    ckpt: &Checkpoint,
) -> Result<u64> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&kind.code().to_le_bytes());
    buf.extend_from_slice(&cfg.arch_hash().to_le_bytes());
    buf.extend_from_slice(&((ckpt.tensors.len() + ckpt.scalars.len()) as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(TAG_TENSOR);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (name, &v) in &ckpt.scalars {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(TAG_U64);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)?;
    Ok(buf.len() as u64)
}

/// Reads a checkpoint container, refusing version, kind, or config-hash
/// mismatches.
pub fn load_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    kind: CheckpointKind,
) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| KvdError::io(path, e))?;
    let mut r = Reader::new(&buf, path);
    let magic = r.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(r.bad(format!("bad magic {magic:02x?}, expected {CKPT_MAGIC:02x?}")));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let code = r.u16()?;
    match CheckpointKind::from_code(code) {
        Some(k) if k == kind => {}
        Some(other) => {
            return Err(r.bad(format!("checkpoint holds {other:?}, expected {kind:?}")))
        }
        None => return Err(r.bad(format!("unknown checkpoint kind {code}"))),
    }
    let hash = r.u64()?;
    if hash != cfg.arch_hash() {
        return Err(KvdError::ConfigMismatch {
            path: path.display().to_string(),
            found: hash,
            expected: cfg.arch_hash(),
        });
    }
    let count = r.u32()? as usize;
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.bad("entry name is not utf-8"))?
            .to_string();
        let tag = r.take(1)?[0];
        match tag {
            TAG_TENSOR => {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let data = r.f32s(rows * cols)?;
                ckpt.tensors.insert(name, Tensor::new(rows, cols, data));
            }
            TAG_U64 => {
                let v = r.u64()?;
                ckpt.scalars.insert(name, v);
            }
            other => return Err(r.bad(format!("unknown entry tag {other}"))),
        }
    }
    r.done()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_cache(cfg: &ModelConfig, sinks: usize, k: usize, origin: usize) -> CompressedCache {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = sinks + k;
        CompressedCache {
            layers: (0..cfg.n_layers)
                .map(|_| LayerKv {
                    keys: Tensor::randn(rows, cfg.d_model, 1.0, &mut rng),
                    values: Tensor::randn(rows, cfg.d_model, 1.0, &mut rng),
                })
                .collect(),
            position_ids: (0..rows as u32).collect(),
            scores: (0..k).map(|i| i as f32 / 7.0 - 0.4).collect(),
            sink_count: sinks,
            origin_len: origin,
        }
    }

    #[test]
    fn roundtrip_is_bitwise_identity() {
        let cfg = ModelConfig::default();
        let cache = sample_cache(&cfg, 4, 20, 100);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.kvc");
        let p2 = dir.path().join("b.kvc");
        save_cache(&cache, &cfg, &p1).unwrap();
        let loaded = load_cache(&p1, &cfg).unwrap();
        assert_eq!(loaded, cache);
        save_cache(&loaded, &cfg, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn file_size_matches_layout_arithmetic() {
        let cfg = ModelConfig::default();
        let cache = sample_cache(&cfg, 4, 20, 100);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.kvc");
        let written = save_cache(&cache, &cfg, &p).unwrap();
        assert_eq!(written as usize, cache_file_size(&cfg, 4, 20));
        assert_eq!(fs::metadata(&p).unwrap().len(), written);
    }

    #[test]
    fn bad_magic_rejected() {
        let cfg = ModelConfig::default();
        let cache = sample_cache(&cfg, 2, 6, 30);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.kvc");
        save_cache(&cache, &cfg, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_cache(&p, &cfg),
            Err(KvdError::BadFormat { .. })
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let cfg = ModelConfig::default();
        let cache = sample_cache(&cfg, 2, 6, 30);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.kvc");
        save_cache(&cache, &cfg, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_cache(&p, &cfg),
            Err(KvdError::BadFormat { .. })
        ));
        // Trailing garbage is also rejected.
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0, 0, 0]);
        fs::write(&p, padded).unwrap();
        assert!(load_cache(&p, &cfg).is_err());
    }

    #[test]
    fn config_hash_guards_cross_model_loads() {
        let cfg = ModelConfig::default();
        let cache = sample_cache(&cfg, 2, 6, 30);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.kvc");
        save_cache(&cache, &cfg, &p).unwrap();
        let other = ModelConfig {
            d_model: 128,
            head_dim: 32,
            ..Default::default()
        };
        assert!(matches!(
            load_cache(&p, &other),
            Err(KvdError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_with_scalars() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ckpt = Checkpoint::default();
        ckpt.tensors
            .insert("w".into(), Tensor::randn(3, 5, 1.0, &mut rng));
        ckpt.tensors
            .insert("b".into(), Tensor::randn(1, 5, 1.0, &mut rng));
        ckpt.scalars.insert("step".into(), 42);
        ckpt.scalars.insert("rng.pos".into(), u64::MAX - 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        save_checkpoint(&p, &cfg, CheckpointKind::TrainState, &ckpt).unwrap();
        let loaded = load_checkpoint(&p, &cfg, CheckpointKind::TrainState).unwrap();
        assert_eq!(loaded, ckpt);
        // Wrong kind refused.
        assert!(load_checkpoint(&p, &cfg, CheckpointKind::Adapters).is_err());
    }

    #[test]
    fn stored_ratio_tracks_retention() {
        // File size at retention rho stays within [rho_eff, rho_eff + 0.02]
        // of the full-cache file size, rho_eff = (k + sinks) / N.
        let cfg = ModelConfig::default();
        let n = 1024;
        let sinks = cfg.sink_count;
        for rho in [0.1, 0.25, 0.5] {
            let k = crate::compressor::retained_count(rho, n - sinks);
            let part = cache_file_size(&cfg, sinks, k) as f64;
            let full = cache_file_size(&cfg, sinks, n - sinks) as f64;
            let rho_eff = (k + sinks) as f64 / n as f64;
            let ratio = part / full;
            assert!(
                ratio >= rho_eff - 1e-9 && ratio <= rho_eff + 0.02,
                "rho {rho}: ratio {ratio} vs rho_eff {rho_eff}"
            );
        }
    }
}
