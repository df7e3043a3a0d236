//! Multi-view dataset assembly: base-view renders for every sequence, an
//! optional equal-sized augmented-camera pool (the "even mixture"), and the
//! fully-supervised plus V single-shot splits.

use super::actions::{generate_action_sequence, ActionSequence};
use super::camera::{project_and_normalize, sample_camera, CameraPose};
use super::pose::Pose2D;
use crate::error::{CvmimError, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub sequences_per_class: usize,
    pub frames: usize,
    pub views: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub augmentation: bool,
    /// i.i.d. Gaussian jitter on base-view projected keypoints, emulating a
    /// 2D detector. Applied before normalization. Default 0 (clean).
    pub noise_std: f64,
    pub camera_distance: f64,
    pub camera_focal: f64,
    pub orthographic: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 8,
            sequences_per_class: 12,
            frames: 24,
            views: 4,
            train_fraction: 0.8,
            seed: 1,
            augmentation: true,
            noise_std: 0.0,
            camera_distance: 4.0,
            camera_focal: 1.0,
            orthographic: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train_views: Vec<u32>,
    pub train_seqs: Vec<u64>,
    pub test_seqs: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct RenderRecord {
    pub seq: u64,
    pub frame: u32,
    /// Base cameras are views 0..V; augmented renders get V + index into
    /// `aug_cameras`.
    pub view: u32,
    pub pose: Pose2D,
}

#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    pub config: DatasetConfig,
    pub sequences: Vec<ActionSequence>,
    pub cameras: Vec<CameraPose>,
    pub aug_cameras: Vec<CameraPose>,
    pub splits: BTreeMap<String, Split>,
    pub renders: Vec<RenderRecord>,
}

pub const FULLY_SUPERVISED: &str = "fully_supervised";

pub fn single_shot_name(view: usize) -> String {
    format!("single_shot_view{view}")
}

fn base_azimuth(view: usize) -> f64 {
    // four canonical views at {0, 90, 180, -90}, then evenly spread extras
    match view {
        0 => 0.0,
        1 => 90.0,
        2 => 180.0,
        3 => -90.0,
        v => -180.0 + 360.0 * (v as f64 + 0.5) / 16.0,
    }
}

pub fn build_dataset(config: &DatasetConfig) -> Result<MultiViewDataset> {
    if config.views < 2 {
        return Err(CvmimError::Dataset(
            "at least 2 views are required for cross-view pairs".into(),
        ));
    }
    if config.classes == 0 || config.sequences_per_class == 0 || config.frames == 0 {
        return Err(CvmimError::Dataset("empty dataset configuration".into()));
    }
    if !(0.0..1.0).contains(&config.train_fraction) {
        return Err(CvmimError::Dataset(format!(
            "train_fraction {} outside (0, 1)",
            config.train_fraction
        )));
    }

    let mut master = Rng::from_seed(config.seed);
    let mut seq_seed_rng = master.split();
    let mut split_rng = master.split();
    let mut aug_rng = master.split();
    let mut noise_rng = master.split();

    let mut sequences = Vec::with_capacity(config.classes * config.sequences_per_class);
    for class in 0..config.classes {
        for _ in 0..config.sequences_per_class {
            let seed = seq_seed_rng.next_u64();
            sequences.push(generate_action_sequence(class, seed, config.frames)?);
        }
    }

    let cameras: Vec<CameraPose> = (0..config.views)
        .map(|v| {
            CameraPose::new(
                base_azimuth(v),
                10.0,
                0.0,
                config.camera_distance,
                config.camera_focal,
            )
        })
        .collect::<Result<_>>()?;

    // train/test sequence split, stratified per class so every class appears
    // on both sides
    let mut train_seqs = Vec::new();
    let mut test_seqs = Vec::new();
    for class in 0..config.classes {
        let mut ids: Vec<u64> = (0..config.sequences_per_class)
            .map(|s| (class * config.sequences_per_class + s) as u64)
            .collect();
        split_rng.shuffle(&mut ids);
        let n_train = ((config.sequences_per_class as f64) * config.train_fraction).round()
            as usize;
        let n_train = n_train.clamp(1, config.sequences_per_class - 1);
        train_seqs.extend_from_slice(&ids[..n_train]);
        test_seqs.extend_from_slice(&ids[n_train..]);
    }
    train_seqs.sort_unstable();
    test_seqs.sort_unstable();

    let mut splits = BTreeMap::new();
    splits.insert(
        FULLY_SUPERVISED.to_string(),
        Split {
            train_views: (0..config.views as u32).collect(),
            train_seqs: train_seqs.clone(),
            test_seqs: test_seqs.clone(),
        },
    );
    for v in 0..config.views {
        splits.insert(
            single_shot_name(v),
            Split {
                train_views: vec![v as u32],
                train_seqs: train_seqs.clone(),
                test_seqs: test_seqs.clone(),
            },
        );
    }

    // base renders, then an equal-sized augmented pool when enabled
    let mut renders = Vec::new();
    let mut aug_cameras = Vec::new();
    for (sid, seq) in sequences.iter().enumerate() {
        for (fid, pose) in seq.frames.iter().enumerate() {
            for (vid, cam) in cameras.iter().enumerate() {
                let mut p2 = super::camera::project(pose, cam, config.orthographic)?;
                if config.noise_std > 0.0 {
                    for j in &mut p2.joints {
                        j[0] += noise_rng.normal(0.0, config.noise_std);
                        j[1] += noise_rng.normal(0.0, config.noise_std);
                    }
                }
                renders.push(RenderRecord {
                    seq: sid as u64,
                    frame: fid as u32,
                    view: vid as u32,
                    pose: p2.normalize()?,
                });
            }
        }
    }
    if config.augmentation {
        let base_count = renders.len();
        for i in 0..base_count {
            let (sid, fid) = (renders[i].seq, renders[i].frame);
            let cam = sample_camera(&mut aug_rng, config.camera_distance, config.camera_focal);
            let pose = &sequences[sid as usize].frames[fid as usize];
            let p2 = project_and_normalize(pose, &cam, config.orthographic)?;
            let view = (config.views + aug_cameras.len()) as u32;
            aug_cameras.push(cam);
            renders.push(RenderRecord {
                seq: sid,
                frame: fid,
                view,
                pose: p2,
            });
        }
    }

    Ok(MultiViewDataset {
        config: config.clone(),
        sequences,
        cameras,
        aug_cameras,
        splits,
        renders,
    })
}

impl MultiViewDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        super::io::save_dataset(self, dir)
    }

    /// Rebuilds the dataset from the manifest's config echo and verifies the
    /// stored renders match bit for bit.
    pub fn load(dir: &Path) -> Result<MultiViewDataset> {
        let manifest = super::io::load_manifest(dir)?;
        let renders = super::io::load_renders(dir, manifest.record_count)?;
        let rebuilt = build_dataset(&manifest.config)?;
        if rebuilt.renders.len() != renders.len() {
            return Err(CvmimError::Dataset(format!(
                "stored {} renders but config rebuilds {}",
                renders.len(),
                rebuilt.renders.len()
            )));
        }
        Ok(MultiViewDataset {
            config: manifest.config,
            sequences: rebuilt.sequences,
            cameras: manifest.cameras,
            aug_cameras: manifest.aug_cameras,
            splits: manifest.splits,
            renders,
        })
    }

    pub fn label_of(&self, seq: u64) -> usize {
        self.sequences[seq as usize].label
    }

    /// Base renders only (view < V), the downstream evaluation substrate.
    pub fn base_renders(&self) -> impl Iterator<Item = &RenderRecord> {
        let v = self.config.views as u32;
        self.renders.iter().filter(move |r| r.view < v)
    }
}
