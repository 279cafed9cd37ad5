//! Portable checkpoint container: a JSON metadata block followed by raw
//! little-endian f64 parameter payloads in metadata order.
//!
//! ```text
//! bytes 0..4   magic "DDSE"
//! bytes 4..8   container version (u32 LE)
//! bytes 8..16  metadata length (u64 LE)
//! ...          metadata JSON (UTF-8)
//! ...          parameter data, f64 LE, concatenated in metadata order
//! ```

use super::params::ParamSet;
use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;
use ndarray::ArrayD;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DDSE";
const VERSION: u32 = 1;

/// Training-time facts a consumer needs to run inference correctly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainMeta {
    pub step_mode: String,        // "single" | "multi"
    pub noisy_input_mode: String, // "zeros" | "gaussian"
    pub joint_mode: bool,
    pub seed: u64,
    pub epochs: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    pub num_classes: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub schedule_fingerprint: String,
    pub train: TrainMeta,
    params: Vec<ParamEntry>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(
        denoiser: DenoiserConfig,
        schedule: ScheduleSpec,
        schedule_fingerprint: String,
        train: TrainMeta,
        params: ParamSet,
    ) -> Self {
        let entries = params
            .iter()
            .map(|(name, arr)| ParamEntry {
                name: name.to_string(),
                shape: arr.shape().to_vec(),
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                format_version: VERSION,
                denoiser,
                schedule,
                schedule_fingerprint,
                train,
                params: entries,
            },
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::format(format!("metadata serialization failed: {e}")))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        for entry in &self.meta.params {
            let arr = self.params.get(&entry.name);
            for v in arr.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|_| Error::format("truncated checkpoint: missing magic"))?;
        if &magic != MAGIC {
            return Err(Error::format("not a didsee checkpoint (bad magic)"));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u64buf)?;
        let json_len = u64::from_le_bytes(u64buf) as usize;
        let mut json = vec![0u8; json_len];
        f.read_exact(&mut json)
            .map_err(|_| Error::format("truncated checkpoint: metadata cut short"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)
            .map_err(|e| Error::format(format!("bad checkpoint metadata: {e}")))?;
        let mut params = ParamSet::new();
        let mut buf8 = [0u8; 8];
        for entry in &meta.params {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                f.read_exact(&mut buf8).map_err(|_| {
                    Error::format(format!("truncated checkpoint: parameter {}", entry.name))
                })?;
                data.push(f64::from_le_bytes(buf8));
            }
            let arr = ArrayD::from_shape_vec(entry.shape.clone(), data)
                .map_err(|e| Error::format(format!("bad shape for {}: {e}", entry.name)))?;
            params.insert(&entry.name, arr);
        }
        Ok(Checkpoint { meta, params })
    }
}
