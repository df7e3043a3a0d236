//! 13-joint skeletons in 3D world coordinates and normalized 2D image
//! coordinates.
//!
//! Joint order: head, l/r shoulder, l/r elbow, l/r wrist, l/r hip, l/r knee,
//! l/r ankle. The "neck" used for normalization is the shoulder midpoint and
//! is not stored as a joint.

use crate::error::{CvmimError, Result};

pub const NUM_JOINTS: usize = 13;
pub const POSE2D_DIM: usize = NUM_JOINTS * 2; // 26

pub const HEAD: usize = 0;
pub const L_SHOULDER: usize = 1;
pub const R_SHOULDER: usize = 2;
pub const L_ELBOW: usize = 3;
pub const R_ELBOW: usize = 4;
pub const L_WRIST: usize = 5;
pub const R_WRIST: usize = 6;
pub const L_HIP: usize = 7;
pub const R_HIP: usize = 8;
pub const L_KNEE: usize = 9;
pub const R_KNEE: usize = 10;
pub const L_ANKLE: usize = 11;
pub const R_ANKLE: usize = 12;

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: [Vec3; NUM_JOINTS],
}

impl Pose3D {
    pub fn mid_hip(&self) -> Vec3 {
        mid(self.joints[L_HIP], self.joints[R_HIP])
    }

    pub fn all_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Pose3D {
        let mut out = self.clone();
        for j in &mut out.joints {
            for c in j.iter_mut() {
                *c *= s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub joints: [[f64; 2]; NUM_JOINTS],
}

impl Pose2D {
    pub fn mid_hip(&self) -> [f64; 2] {
        mid2(self.joints[L_HIP], self.joints[R_HIP])
    }

    pub fn neck(&self) -> [f64; 2] {
        mid2(self.joints[L_SHOULDER], self.joints[R_SHOULDER])
    }

    /// Translate mid-hip to the origin and scale so |neck − mid-hip| = 1.
    pub fn normalize(&self) -> Result<Pose2D> {
        let mh = self.mid_hip();
        let neck = self.neck();
        let torso = ((neck[0] - mh[0]).powi(2) + (neck[1] - mh[1]).powi(2)).sqrt();
        if torso < 1e-12 {
            return Err(CvmimError::Domain {
                op: "normalize",
                detail: "zero torso: neck coincides with mid-hip".into(),
            });
        }
        let mut out = self.clone();
        for j in &mut out.joints {
            j[0] = (j[0] - mh[0]) / torso;
            j[1] = (j[1] - mh[1]) / torso;
        }
        Ok(out)
    }

    pub fn flatten(&self) -> [f64; POSE2D_DIM] {
        let mut out = [0.0; POSE2D_DIM];
        for (i, j) in self.joints.iter().enumerate() {
            out[2 * i] = j[0];
            out[2 * i + 1] = j[1];
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Pose2D> {
        if flat.len() != POSE2D_DIM {
            return Err(CvmimError::InvalidArgument(format!(
                "flat pose must have {POSE2D_DIM} values, got {}",
                flat.len()
            )));
        }
        let mut joints = [[0.0; 2]; NUM_JOINTS];
        for (i, j) in joints.iter_mut().enumerate() {
            j[0] = flat[2 * i];
            j[1] = flat[2 * i + 1];
        }
        Ok(Pose2D { joints })
    }
}

pub fn mid(a: Vec3, b: Vec3) -> Vec3 {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]
}

fn mid2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Rotation about the x axis (pitch), right-handed, angle in radians.
pub fn rot_x(v: Vec3, a: f64) -> Vec3 {
    let (s, c) = a.sin_cos();
    [v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]]
}

/// Rotation about the y axis (yaw).
pub fn rot_y(v: Vec3, a: f64) -> Vec3 {
    let (s, c) = a.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// Rotation about the z axis (roll).
pub fn rot_z(v: Vec3, a: f64) -> Vec3 {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}
