//! Weight files: the 8-byte magic `FABFIXW1`, a little-endian `u32` manifest
//! length, a UTF-8 JSON manifest, then every parameter block as little-endian
//! `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Architecture, KERNEL_SIZE, ModelWeights};

pub const WEIGHT_MAGIC: &[u8; 8] = b"FABFIXW1";
const FORMAT_NAME: &str = "fabfix-weights";
const DTYPE: &str = "f32-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub dtype: String,
    pub kernel_size: usize,
    pub architecture: Architecture,
    pub blocks: Vec<BlockEntry>,
    pub seed: u64,
    /// Free-form training metadata (role, epochs, losses).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl WeightManifest {
    fn describe(weights: &ModelWeights<f32>, seed: u64, metadata: serde_json::Value) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            dtype: DTYPE.into(),
            kernel_size: KERNEL_SIZE,
            architecture: weights.architecture(),
            blocks: weights
                .blocks()
                .into_iter()
                .map(|b| BlockEntry {
                    name: b.name,
                    shape: b.shape,
                })
                .collect(),
            seed,
            metadata,
        }
    }

    fn check_against_architecture(&self) -> Result<()> {
        if self.format != FORMAT_NAME || self.dtype != DTYPE {
            return Err(Error::format(
                12,
                format!(
                    "manifest declares format `{}` / dtype `{}`",
                    self.format, self.dtype
                ),
            ));
        }
        self.architecture.validate()?;
        if self.kernel_size != KERNEL_SIZE {
            return Err(Error::Shape(format!(
                "manifest kernel size {} but this build uses {KERNEL_SIZE}",
                self.kernel_size
            )));
        }
        let expected = self.architecture.block_shapes();
        if expected.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "manifest lists {} blocks, architecture has {}",
                self.blocks.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&self.blocks) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::Shape(format!(
                    "manifest block `{}` {:?} but architecture expects `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        Ok(())
    }
}

pub fn encode_weights(
    weights: &ModelWeights<f32>,
    seed: u64,
    metadata: serde_json::Value,
) -> Vec<u8> {
    let manifest = WeightManifest::describe(weights, seed, metadata);
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * weights.param_count());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for block in weights.blocks() {
        for v in block.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the header and manifest, returning the manifest and payload offset.
/// Shape problems surface here, before any payload is touched.
pub fn decode_manifest(bytes: &[u8]) -> Result<(WeightManifest, usize)> {
    if bytes.len() < 8 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(Error::format(0, "missing FABFIXW1 magic"));
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated manifest length"))?
        .try_into()
        .expect("four bytes");
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| {
        Error::format(
            bytes.len() as u64,
            format!("truncated manifest: {len} bytes declared"),
        )
    })?;
    let manifest: WeightManifest = serde_json::from_slice(json).map_err(|e| {
        Error::format(
            12 + e.column() as u64,
            format!("invalid manifest json: {e}"),
        )
    })?;
    manifest.check_against_architecture()?;
    Ok((manifest, 12 + len))
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ModelWeights<f32>, WeightManifest)> {
    let (manifest, mut pos) = decode_manifest(bytes)?;
    let mut weights = ModelWeights::<f32>::zeros(manifest.architecture)?;
    let need = 4 * weights.param_count();
    if bytes.len() < pos + need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {need} bytes", bytes.len() - pos),
        ));
    }
    if bytes.len() > pos + need {
        return Err(Error::format(
            (pos + need) as u64,
            "trailing bytes after payload",
        ));
    }
    for block in weights.blocks_mut() {
        for v in block.iter_mut() {
            *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("four bytes"));
            pos += 4;
        }
    }
    Ok((weights, manifest))
}

pub fn save_weights(
    weights: &ModelWeights<f32>,
    seed: u64,
    metadata: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(weights, seed, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelWeights<f32>, WeightManifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
