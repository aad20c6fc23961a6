//! Checkpoint files: one line of JSON header, then the parameters as
//! little-endian `f32` in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layout, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

fn manifest(cfg: &ModelConfig) -> Vec<ManifestEntry> {
    let mut offset = 0;
    layout(cfg)
        .named()
        .into_iter()
        .map(|(name, shape)| {
            let e = ManifestEntry {
                name,
                shape: shape.clone(),
                offset,
            };
            offset += shape.iter().product::<usize>();
            e
        })
        .collect()
}

/// Serializes `params` for `cfg` into checkpoint bytes.
pub fn checkpoint_bytes(params: &ModelParams<f32>, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let manifest = manifest(cfg);
    let leaves = params.named();
    if leaves.len() != manifest.len()
        || leaves
            .iter()
            .zip(&manifest)
            .any(|((n, t), m)| *n != m.name || t.shape() != m.shape.as_slice())
    {
        return Err(Error::Checkpoint("parameters do not match the config layout".into()));
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        manifest,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in leaves {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(params, cfg)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parses checkpoint bytes into the stored config and parameters.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>)> {
    let (header, data) = split(bytes)?;
    let cfg = header.config.clone();
    let params = params_from(&header, data, &cfg)?;
    Ok((cfg, params))
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok((header, &bytes[nl + 1..]))
}

fn params_from(header: &CheckpointHeader, data: &[u8], cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let want = manifest(cfg);
    if want.len() != header.manifest.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, config needs {}",
            header.manifest.len(),
            want.len()
        )));
    }
    for (w, h) in want.iter().zip(&header.manifest) {
        if w != h {
            return Err(Error::Checkpoint(format!(
                "manifest mismatch at {}: stored {:?}@{}, expected {}: {:?}@{}",
                h.name, h.shape, h.offset, w.name, w.shape, w.offset
            )));
        }
    }
    let total: usize = want.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    if data.len() < total * 4 {
        return Err(Error::Checkpoint(format!(
            "truncated: {} data bytes, expected {}",
            data.len(),
            total * 4
        )));
    }
    if data.len() > total * 4 {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the data section",
            data.len() - total * 4
        )));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut it = want.iter();
    Ok(layout(cfg).map(|_, shape| {
        let m = it.next().expect("manifest matches layout");
        let n: usize = shape.iter().product();
        Tensor::new(shape.clone(), floats[m.offset..m.offset + n].to_vec()).expect("layout shape")
    }))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Loads the stored tensors under a different config, e.g. another repeat
/// count. Every tensor shape `cfg` implies must match the file.
pub fn load_checkpoint_as(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path)?;
    let (header, data) = split(&bytes)?;
    params_from(&header, data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ModelParams<f32>) {
        let mut cfg = ModelConfig::new(Variant::Cotformer, (1, 2, 1), 3, 8, 2, 16, 8);
        cfg.ln_per_repeat = true;
        cfg.depth_embedding = true;
        let p = ModelParams::random(&cfg, &mut ChaCha8Rng::seed_from_u64(0), 1.0);
        (cfg, p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, p) = setup();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&p, &cfg, &a).unwrap();
        let (cfg2, q) = load_checkpoint(&a).unwrap();
        assert_eq!(cfg, cfg2);
        for ((_, x), (_, y)) in p.named().iter().zip(q.named()) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        save_checkpoint(&q, &cfg2, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn other_repeat_counts_load() {
        let (cfg, p) = setup();
        let bytes = checkpoint_bytes(&p, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        let mut more = cfg.clone();
        more.n_repeat = 7;
        assert_eq!(load_checkpoint_as(&path, &more).unwrap(), p);
        let mut wider = cfg.clone();
        wider.d_ff = 64;
        assert!(matches!(load_checkpoint_as(&path, &wider), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (cfg, p) = setup();
        let bytes = checkpoint_bytes(&p, &cfg).unwrap();
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(m)) if m.contains("truncated")));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_checkpoint(&extra).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'#';
        assert!(matches!(parse_checkpoint(&corrupt), Err(Error::Checkpoint(m)) if m.contains("corrupt")));
        let text = String::from_utf8_lossy(&bytes).replacen("\"format_version\":1", "\"format_version\":9", 1);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut versioned = text.as_bytes()[..text.find('\n').unwrap()].to_vec();
        versioned.extend_from_slice(&bytes[nl..]);
        assert!(matches!(parse_checkpoint(&versioned), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(parse_checkpoint(b"no newline").is_err());
    }

    #[test]
    fn mismatched_params_are_not_saved() {
        let (cfg, p) = setup();
        let mut other = cfg.clone();
        other.ln_per_repeat = false;
        assert!(checkpoint_bytes(&p, &other).is_err());
    }
}
