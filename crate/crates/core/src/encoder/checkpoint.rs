//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "RDVC"
//! version u32      format version, currently 1
//! config  u32 len + UTF-8 key=value lines (one per line)
//! count   u32      number of parameter groups
//! group   u32 len + UTF-8 name
//!         u32 ndim, then ndim x u64 dims
//!         numel x f64 raw values
//! ```
//!
//! Groups are written in the canonical `EncoderParams::groups` order, but
//! the loader matches by name so externally converted files may order them
//! freely.

use super::{EncoderParams, ModelConfig};
use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;
use rand::rngs::StdRng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RDVC";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &EncoderParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config_text = config.to_kv_lines().join("\n");
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    let groups = params.groups();
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (name, tensor) in groups {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display(), e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                reason: format!(
                    "truncated file: wanted {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint {
            reason: "invalid UTF-8 in header".into(),
        })
    }
}

fn read_groups(path: &Path) -> Result<(ModelConfig, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint {
            reason: "bad magic (not a checkpoint file)".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            reason: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let config_text = r.string()?;
    let mut config = ModelConfig::default();
    for (i, line) in config_text.lines().enumerate() {
        let Some((k, v)) = line.split_once(" = ") else {
            return Err(Error::Checkpoint {
                reason: format!("malformed config line {}: '{line}'", i + 1),
            });
        };
        if !config.apply_kv(k.trim(), v.trim())? {
            return Err(Error::Checkpoint {
                reason: format!("unknown config key '{k}'"),
            });
        }
    }
    config.validate()?;

    let count = r.u32()? as usize;
    let mut groups = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if groups.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint {
                reason: format!("duplicate group '{name}'"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            reason: format!("{} trailing bytes after last group", bytes.len() - r.pos),
        });
    }
    Ok((config, groups))
}

fn fill_params(
    params: &mut EncoderParams,
    mut stored: BTreeMap<String, Tensor>,
    allow_head_mismatch: bool,
) -> Result<bool> {
    let mut head_reinit = false;
    for (name, slot) in params.groups_mut() {
        let Some(tensor) = stored.remove(&name) else {
            return Err(Error::Checkpoint {
                reason: format!("missing group '{name}'"),
            });
        };
        if tensor.shape() != slot.shape() {
            let is_head = name.starts_with("head.");
            if allow_head_mismatch && is_head {
                // Fine-tune path: keep the freshly initialized head.
                head_reinit = true;
                continue;
            }
            return Err(Error::Checkpoint {
                reason: format!(
                    "group '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = tensor;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Checkpoint {
            reason: format!("unexpected group '{name}'"),
        });
    }
    Ok(head_reinit)
}

/// Load a checkpoint exactly as saved: the stored config decides every
/// shape.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, EncoderParams)> {
    let (config, stored) = read_groups(path)?;
    let mut params = EncoderParams::skeleton(&config)?;
    fill_params(&mut params, stored, false)?;
    Ok((config, params))
}

/// Load a checkpoint into a (possibly different) target configuration.
///
/// Every group must match the target shapes except the classification head:
/// a head shape mismatch keeps the freshly initialized head instead, which
/// is the fine-tune path when the subclass count changes. Returns the
/// parameters and whether the head was re-initialized.
pub fn load_checkpoint_into(
    path: &Path,
    target: &ModelConfig,
    rng: &mut StdRng,
) -> Result<(EncoderParams, bool)> {
    let (_, stored) = read_groups(path)?;
    let mut params = EncoderParams::init(target, rng)?;
    let head_reinit = fill_params(&mut params, stored, true)?;
    Ok((params, head_reinit))
}

impl EncoderParams {
    /// All-zero parameter tensors with the shapes `config` dictates. Used as
    /// the fill target when loading checkpoints.
    pub(crate) fn skeleton(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_dim();
        let hidden = config.mlp_ratio * d;
        let zero_affine = |rows: usize, cols: usize| super::Affine {
            weight: Tensor::zeros(vec![rows, cols]),
            bias: Tensor::zeros(vec![cols]),
        };
        Ok(EncoderParams {
            patch_proj: (0..config.fusion_mode.num_streams())
                .map(|_| zero_affine(p, d))
                .collect(),
            class_token: Tensor::zeros(vec![1, d]),
            pos_embed: Tensor::zeros(vec![config.seq_len(), d]),
            blocks: (0..config.num_layers)
                .map(|_| super::BlockParams {
                    norm1_gain: Tensor::zeros(vec![d]),
                    norm1_bias: Tensor::zeros(vec![d]),
                    query: zero_affine(d, d),
                    key: zero_affine(d, d),
                    value: zero_affine(d, d),
                    out: zero_affine(d, d),
                    norm2_gain: Tensor::zeros(vec![d]),
                    norm2_bias: Tensor::zeros(vec![d]),
                    fc1: zero_affine(d, hidden),
                    fc2: zero_affine(hidden, d),
                })
                .collect(),
            norm_gain: Tensor::zeros(vec![d]),
            norm_bias: Tensor::zeros(vec![d]),
            head: zero_affine(d, config.head_width()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params_pair() -> (ModelConfig, EncoderParams) {
        let config = ModelConfig::tiny();
        let mut rng = StdRng::seed_from_u64(100);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        (config, params)
    }

    #[test]
    fn round_trip_is_exact() {
        let (config, params) = params_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let (loaded_config, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded, params);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE republished").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint { reason }) => assert!(reason.contains("magic")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unsupported_version() {
        let (config, params) = params_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint { reason }) => assert!(reason.contains("version 99")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_file() {
        let (config, params) = params_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn head_mismatch_keeps_fresh_head_and_rest_of_weights() {
        let (config, params) = params_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();

        // Same backbone, different subclass count: head widths differ.
        let target = ModelConfig {
            num_subclasses: 3,
            ..config.clone()
        };
        let mut rng = StdRng::seed_from_u64(7);
        let (loaded, head_reinit) = load_checkpoint_into(&path, &target, &mut rng).unwrap();
        assert!(head_reinit);
        assert_eq!(loaded.head.weight.shape(), &[8, 24]);
        assert_eq!(loaded.blocks[0].query.weight, params.blocks[0].query.weight);
        assert_eq!(loaded.patch_proj[2].weight, params.patch_proj[2].weight);

        // Matching config reports no re-initialization.
        let (same, head_reinit) = load_checkpoint_into(&path, &config, &mut rng).unwrap();
        assert!(!head_reinit);
        assert_eq!(same, params);
    }

    #[test]
    fn backbone_mismatch_is_an_error_even_in_lenient_mode() {
        let (config, params) = params_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let target = ModelConfig {
            embed_dim: 16,
            ..config
        };
        let mut rng = StdRng::seed_from_u64(8);
        match load_checkpoint_into(&path, &target, &mut rng) {
            Err(Error::Checkpoint { reason }) => assert!(reason.contains("shape")),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
