//! Camera model, perspective projection, and positive-pair construction.
//!
//! Extrinsics rotate the pose about its mid-hip by (azimuth, elevation, roll)
//! and translate it by `distance` along the camera axis (+z). Perspective
//! projection is u = focal·X/Z, v = focal·Y/Z; orthographic mode drops the
//! depth division for analytic tests.

use super::pose::*;
use crate::error::{CvmimError, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub roll_deg: f64,
    pub distance: f64,
    pub focal: f64,
}

impl CameraPose {
    pub fn new(
        azimuth_deg: f64,
        elevation_deg: f64,
        roll_deg: f64,
        distance: f64,
        focal: f64,
    ) -> Result<Self> {
        if !(-180.0..=180.0).contains(&azimuth_deg) {
            return Err(CvmimError::InvalidArgument(format!(
                "azimuth {azimuth_deg} outside [-180, 180]"
            )));
        }
        if !(-90.0..=90.0).contains(&elevation_deg) || !(-90.0..=90.0).contains(&roll_deg) {
            return Err(CvmimError::InvalidArgument(format!(
                "elevation {elevation_deg} / roll {roll_deg} outside [-90, 90]"
            )));
        }
        if distance <= 0.0 || focal <= 0.0 {
            return Err(CvmimError::InvalidArgument(format!(
                "distance {distance} and focal {focal} must be positive"
            )));
        }
        Ok(CameraPose {
            azimuth_deg,
            elevation_deg,
            roll_deg,
            distance,
            focal,
        })
    }
}

/// Azimuth ~ U(−180, 180), elevation ~ U(−30, 30), roll ~ U(−30, 30);
/// distance and focal are fixed configuration defaults.
pub fn sample_camera(rng: &mut Rng, distance: f64, focal: f64) -> CameraPose {
    CameraPose {
        azimuth_deg: rng.uniform(-180.0, 180.0),
        elevation_deg: rng.uniform(-30.0, 30.0),
        roll_deg: rng.uniform(-30.0, 30.0),
        distance,
        focal,
    }
}

/// Project one world point given the subject mid-hip (the rotation pivot).
pub fn project_point(
    point: Vec3,
    mid_hip: Vec3,
    cam: &CameraPose,
    orthographic: bool,
) -> Result<[f64; 2]> {
    let az = cam.azimuth_deg.to_radians();
    let el = cam.elevation_deg.to_radians();
    let roll = cam.roll_deg.to_radians();
    let p = sub(point, mid_hip);
    let p = rot_z(rot_x(rot_y(p, az), el), roll);
    if orthographic {
        Ok([cam.focal * p[0], cam.focal * p[1]])
    } else {
        let z = p[2] + cam.distance;
        if z <= 0.0 {
            return Err(CvmimError::Domain {
                op: "project",
                detail: format!("point behind camera (Z = {z})"),
            });
        }
        Ok([cam.focal * p[0] / z, cam.focal * p[1] / z])
    }
}

/// Raw (unnormalized) projection of all joints.
pub fn project(pose: &Pose3D, cam: &CameraPose, orthographic: bool) -> Result<Pose2D> {
    let mh = pose.mid_hip();
    let mut joints = [[0.0; 2]; NUM_JOINTS];
    for (i, &j) in pose.joints.iter().enumerate() {
        joints[i] = project_point(j, mh, cam, orthographic).map_err(|_| CvmimError::Domain {
            op: "project",
            detail: format!("joint {i} behind camera"),
        })?;
    }
    Ok(Pose2D { joints })
}

pub fn project_and_normalize(
    pose: &Pose3D,
    cam: &CameraPose,
    orthographic: bool,
) -> Result<Pose2D> {
    project(pose, cam, orthographic)?.normalize()
}

/// Two projections of the identical 3D pose, used as (x, x⁺).
/// Equal cameras are only accepted when `allow_equal` is set; identity-view
/// pairs are excluded from training by default.
pub fn make_positive_pair(
    pose: &Pose3D,
    cam_i: &CameraPose,
    cam_j: &CameraPose,
    allow_equal: bool,
    orthographic: bool,
) -> Result<(Pose2D, Pose2D)> {
    if cam_i == cam_j && !allow_equal {
        return Err(CvmimError::InvalidArgument(
            "identity-view pair requested without allow_equal".into(),
        ));
    }
    Ok((
        project_and_normalize(pose, cam_i, orthographic)?,
        project_and_normalize(pose, cam_j, orthographic)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::actions::generate_action_sequence;

    fn test_pose() -> Pose3D {
        generate_action_sequence(3, 5, 4).unwrap().frames[2].clone()
    }

    fn cam(az: f64, el: f64, roll: f64, dist: f64) -> CameraPose {
        CameraPose::new(az, el, roll, dist, 1.0).unwrap()
    }

    #[test]
    fn midhip_on_axis_projects_to_origin() {
        let pose = test_pose();
        let c = cam(37.0, 12.0, -5.0, 4.0);
        let mh = project_point(pose.mid_hip(), pose.mid_hip(), &c, false).unwrap();
        assert!(mh[0].abs() < 1e-12 && mh[1].abs() < 1e-12);
    }

    #[test]
    fn opposite_azimuths_mirror_at_large_distance() {
        let pose = test_pose();
        let a = 40.0;
        let p1 = project(&pose, &cam(a, 0.0, 0.0, 400.0), false).unwrap();
        let p2 = project(&pose, &cam(a - 180.0, 0.0, 0.0, 400.0), false).unwrap();
        for (j1, j2) in p1.joints.iter().zip(&p2.joints) {
            assert!((j1[0] + j2[0]).abs() < 1e-3, "{} vs {}", j1[0], j2[0]);
        }
    }

    #[test]
    fn behind_camera_rejected() {
        // side view: the abducted jumping-jack arms span the depth axis
        let pose = test_pose();
        let err = project(&pose, &cam(90.0, 0.0, 0.0, 0.05), false).unwrap_err();
        assert!(err.to_string().contains("behind camera"));
    }

    #[test]
    fn normalization_invariant_to_3d_scale() {
        // exact (up to fp) in the orthographic limit; perspective leaves
        // only second-order foreshortening at distance x100
        let pose = test_pose();
        let camera = cam(25.0, 10.0, 5.0, 400.0);
        let ortho_base = project_and_normalize(&pose, &camera, true).unwrap();
        let persp_base = project_and_normalize(&pose, &camera, false).unwrap();
        for s in [0.5, 0.8, 1.5, 2.0] {
            let ortho = project_and_normalize(&pose.scaled(s), &camera, true).unwrap();
            let persp = project_and_normalize(&pose.scaled(s), &camera, false).unwrap();
            for (a, b) in ortho_base.joints.iter().zip(&ortho.joints) {
                assert!(
                    (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9,
                    "ortho scale {s}"
                );
            }
            // residual first-order foreshortening ~ extent/distance
            for (a, b) in persp_base.joints.iter().zip(&persp.joints) {
                assert!(
                    (a[0] - b[0]).abs() < 5e-3 && (a[1] - b[1]).abs() < 5e-3,
                    "persp scale {s}"
                );
            }
        }
    }

    #[test]
    fn orthographic_matches_large_distance_limit() {
        let pose = test_pose();
        let persp = project_and_normalize(&pose, &cam(30.0, 10.0, 0.0, 4.0e4), false).unwrap();
        let ortho = project_and_normalize(&pose, &cam(30.0, 10.0, 0.0, 4.0), true).unwrap();
        for (a, b) in persp.joints.iter().zip(&ortho.joints) {
            assert!((a[0] - b[0]).abs() < 1e-4 && (a[1] - b[1]).abs() < 1e-4);
        }
    }

    #[test]
    fn sample_camera_ranges() {
        let mut rng = Rng::from_seed(0);
        let n = 100_000;
        let (mut az_min, mut az_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let c = sample_camera(&mut rng, 4.0, 1.0);
            az_min = az_min.min(c.azimuth_deg);
            az_max = az_max.max(c.azimuth_deg);
            assert!(c.elevation_deg.abs() <= 30.0 && c.roll_deg.abs() <= 30.0);
        }
        assert!(az_min <= -178.0 && az_max >= 178.0, "{az_min} {az_max}");
    }

    #[test]
    fn sample_camera_deterministic() {
        let mut r1 = Rng::from_seed(5);
        let mut r2 = Rng::from_seed(5);
        assert_eq!(
            sample_camera(&mut r1, 4.0, 1.0),
            sample_camera(&mut r2, 4.0, 1.0)
        );
    }

    #[test]
    fn azimuth_ks_statistic_against_uniform() {
        let mut rng = Rng::from_seed(1);
        let n = 100_000;
        let mut samples: Vec<f64> = (0..n)
            .map(|_| sample_camera(&mut rng, 4.0, 1.0).azimuth_deg)
            .collect();
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, &x) in samples.iter().enumerate() {
            let cdf = (x + 180.0) / 360.0;
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        assert!(ks <= 0.01, "KS statistic {ks}");
    }

    #[test]
    fn positive_pair_shares_source_and_rejects_identity() {
        let pose = test_pose();
        let c1 = cam(0.0, 10.0, 0.0, 4.0);
        let c2 = cam(90.0, 10.0, 0.0, 4.0);
        let (a, b) = make_positive_pair(&pose, &c1, &c2, false, false).unwrap();
        assert_ne!(a, b);
        assert!(make_positive_pair(&pose, &c1, &c1, false, false).is_err());
        let (a, b) = make_positive_pair(&pose, &c1, &c1, true, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_range_enforced() {
        assert!(CameraPose::new(200.0, 0.0, 0.0, 4.0, 1.0).is_err());
        assert!(CameraPose::new(0.0, 95.0, 0.0, 4.0, 1.0).is_err());
        assert!(CameraPose::new(0.0, 0.0, 0.0, -1.0, 1.0).is_err());
    }
}
