//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "GECA" | version u32 | config length u32 + UTF-8 JSON |
//!   tensor count u32 | per tensor: name length u32 + UTF-8 name,
//!   rank u32, extents u64 each, dtype u8 (0 = f32), raw LE f32 payload.
//!
//! Save/load round-trips every tensor bitwise; unknown versions and short
//! reads are rejected as corrupt artifacts.

use std::fs;
use std::io::{Cursor, Read, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainConfig;
use crate::error::{GecaError, Result};
use crate::grid::ChannelLayout;
use crate::optim::Adam;
use crate::rule::ThetaParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GECA";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug)]
pub struct Checkpoint {
    /// Resolved run configuration, JSON text.
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
            for &ext in &tensor.shape {
                out.extend_from_slice(&(ext as u64).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(GecaError::Corrupt(format!(
                "bad magic {:?}, not a geca checkpoint",
                magic
            )));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(GecaError::Corrupt(format!(
                "unsupported checkpoint version {} (expected {})",
                version, VERSION
            )));
        }
        let cfg_len = read_u32(&mut cur)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        read_exact(&mut cur, &mut cfg)?;
        let config_json = String::from_utf8(cfg)
            .map_err(|_| GecaError::Corrupt("config echo is not UTF-8".into()))?;
        let count = read_u32(&mut cur)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut cur, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| GecaError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let ext = read_u64(&mut cur)? as usize;
                numel = numel.saturating_mul(ext);
                shape.push(ext);
            }
            let mut dtype = [0u8; 1];
            read_exact(&mut cur, &mut dtype)?;
            if dtype[0] != DTYPE_F32 {
                return Err(GecaError::Corrupt(format!(
                    "unknown dtype code {} for tensor {}",
                    dtype[0], name
                )));
            }
            let mut raw = vec![0u8; numel * 4];
            read_exact(&mut cur, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            config_json,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        Checkpoint::decode(&bytes)
    }
}

/// Everything needed to rebuild a model and resume its run, echoed into the
/// checkpoint as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub layout: ChannelLayout,
    pub heads: usize,
    pub cond_dim: usize,
    pub n_labels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
}

/// Write parameters plus optimizer state under the meta echo.
pub fn save_model(path: &Path, meta: &ModelMeta, params: &ThetaParams, adam: &Adam) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    tensors.extend(adam.export_state());
    let ckpt = Checkpoint {
        config_json: serde_json::to_string_pretty(meta)
            .map_err(|e| GecaError::Corrupt(format!("meta serialization failed: {e}")))?,
        tensors,
    };
    ckpt.save(path)
}

/// Rebuild (meta, params, optimizer) from a checkpoint file.
pub fn load_model(path: &Path) -> Result<(ModelMeta, ThetaParams, Adam)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: ModelMeta = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| GecaError::Corrupt(format!("bad checkpoint meta: {e}")))?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ThetaParams::init(meta.layout, meta.heads, meta.cond_dim, meta.n_labels, &mut rng)?;
    for (name, tensor) in params.named_mut() {
        let stored = ckpt.tensor(name).ok_or_else(|| {
            GecaError::Corrupt(format!("checkpoint is missing tensor {name}"))
        })?;
        if stored.shape != tensor.shape {
            return Err(GecaError::Corrupt(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                stored.shape, tensor.shape
            )));
        }
        *tensor = stored.clone();
    }
    let mut adam = Adam::new(crate::optim::AdamConfig {
        lr: meta.train.learning_rate,
        ..Default::default()
    });
    adam.import_state(meta.step, &ckpt.tensors);
    Ok((meta, params, adam))
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| GecaError::Corrupt("checkpoint truncated".into()))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
