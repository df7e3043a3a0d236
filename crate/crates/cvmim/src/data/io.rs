//! Dataset directory format: `manifest.json` (config echo, splits, cameras)
//! plus `poses.bin` — a 16-byte magic+version header ("CVMIMDS1" padded),
//! a u64 record count, then little-endian records of
//! (sequence id u64, frame u32, view id u32, 26 f64).

use super::camera::CameraPose;
use super::dataset::{DatasetConfig, MultiViewDataset, RenderRecord, Split};
use super::pose::{Pose2D, POSE2D_DIM};
use crate::error::{CvmimError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CVMIMDS1";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 8 + 4 + 4 + POSE2D_DIM * 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub cameras: Vec<CameraPose>,
    pub aug_cameras: Vec<CameraPose>,
    pub splits: BTreeMap<String, Split>,
    pub record_count: u64,
}

pub fn save_dataset(dataset: &MultiViewDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        config: dataset.config.clone(),
        cameras: dataset.cameras.clone(),
        aug_cameras: dataset.aug_cameras.clone(),
        splits: dataset.splits.clone(),
        record_count: dataset.renders.len() as u64,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;

    let mut buf = Vec::with_capacity(HEADER_LEN + 8 + dataset.renders.len() * RECORD_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[0u8; 8]); // pad header to 16 bytes
    buf.extend_from_slice(&(dataset.renders.len() as u64).to_le_bytes());
    for r in &dataset.renders {
        buf.extend_from_slice(&r.seq.to_le_bytes());
        buf.extend_from_slice(&r.frame.to_le_bytes());
        buf.extend_from_slice(&r.view.to_le_bytes());
        for v in r.pose.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(dir.join("poses.bin"))?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_renders(dir: &Path, expected_count: u64) -> Result<Vec<RenderRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join("poses.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN + 8 {
        return Err(CvmimError::Dataset("poses.bin truncated header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(CvmimError::Dataset(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            MAGIC
        )));
    }
    let count = u64::from_le_bytes(bytes[HEADER_LEN..HEADER_LEN + 8].try_into().unwrap());
    if count != expected_count {
        return Err(CvmimError::Dataset(format!(
            "record count {count} does not match manifest {expected_count}"
        )));
    }
    let body = &bytes[HEADER_LEN + 8..];
    if body.len() != count as usize * RECORD_LEN {
        return Err(CvmimError::Dataset(format!(
            "poses.bin body is {} bytes, expected {}",
            body.len(),
            count as usize * RECORD_LEN
        )));
    }
    let mut renders = Vec::with_capacity(count as usize);
    for chunk in body.chunks_exact(RECORD_LEN) {
        let seq = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let frame = u32::from_le_bytes(chunk[8..12].try_into().unwrap());
        let view = u32::from_le_bytes(chunk[12..16].try_into().unwrap());
        let mut flat = [0.0f64; POSE2D_DIM];
        for (i, v) in flat.iter_mut().enumerate() {
            *v = f64::from_le_bytes(chunk[16 + i * 8..24 + i * 8].try_into().unwrap());
        }
        renders.push(RenderRecord {
            seq,
            frame,
            view,
            pose: Pose2D::from_flat(&flat)?,
        });
    }
    Ok(renders)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&json)?)
}
