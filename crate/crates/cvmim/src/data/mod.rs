//! Synthetic multi-view pose data: procedural action sequences, cameras with
//! the training augmentation ranges, projection/normalization, and dataset
//! assembly with serialization.

pub mod actions;
pub mod camera;
pub mod dataset;
pub mod io;
pub mod pose;

pub use actions::{generate_action_sequence, ActionSequence, CLASS_NAMES, NUM_CLASSES};
pub use camera::{make_positive_pair, project, project_and_normalize, sample_camera, CameraPose};
pub use dataset::{
    build_dataset, single_shot_name, DatasetConfig, MultiViewDataset, RenderRecord, Split,
    FULLY_SUPERVISED,
};
pub use pose::{Pose2D, Pose3D, NUM_JOINTS, POSE2D_DIM};
