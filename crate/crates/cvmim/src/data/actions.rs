//! Procedural action-sequence generator.
//!
//! Each of the K = 8 classes is a distinct sinusoidal joint-angle program
//! (wave, squat, lunge, jumping-jack, bow, twist, kick, reach) driving a
//! fixed-bone-length skeleton via forward kinematics. Per-seed jitter
//! perturbs amplitudes/phases by up to ±15% and bone lengths by up to ±10%,
//! emulating subject variation. Bone lengths are constant across the frames
//! of one sequence.

use super::pose::*;
use crate::error::{CvmimError, Result};
use crate::rng::Rng;

pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "wave",
    "squat",
    "lunge",
    "jumping-jack",
    "bow",
    "twist",
    "kick",
    "reach",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence {
    pub frames: Vec<Pose3D>,
    pub label: usize,
    pub subject_seed: u64,
}

/// Skeleton proportions in meters; constant within a sequence.
#[derive(Debug, Clone)]
struct Bones {
    hip_half: f64,
    shoulder_half: f64,
    torso: f64,
    head: f64,
    upper_arm: f64,
    forearm: f64,
    thigh: f64,
    shin: f64,
    hip_height: f64,
}

impl Bones {
    fn jittered(rng: &mut Rng) -> Bones {
        let mut j = |base: f64| base * rng.uniform(0.9, 1.1);
        Bones {
            hip_half: j(0.12),
            shoulder_half: j(0.18),
            torso: j(0.50),
            head: j(0.25),
            upper_arm: j(0.28),
            forearm: j(0.26),
            thigh: j(0.42),
            shin: j(0.41),
            hip_height: j(0.90),
        }
    }
}

/// One sinusoidal angle channel: base + amp·sin(2π·freq·t + phase).
#[derive(Debug, Clone, Copy)]
struct Channel {
    base: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Channel {
    const ZERO: Channel = Channel {
        base: 0.0,
        amp: 0.0,
        freq: 0.0,
        phase: 0.0,
    };

    fn at(&self, t: f64) -> f64 {
        self.base + self.amp * (2.0 * std::f64::consts::PI * self.freq * t + self.phase).sin()
    }

    fn jittered(&self, rng: &mut Rng) -> Channel {
        Channel {
            base: self.base,
            amp: self.amp * rng.uniform(0.85, 1.15),
            freq: self.freq,
            phase: self.phase + rng.uniform(-0.15, 0.15),
        }
    }
}

fn ch(base: f64, amp: f64, freq: f64, phase: f64) -> Channel {
    Channel {
        base,
        amp,
        freq,
        phase,
    }
}

/// The angle channels of one action program. Angles in radians; swing is in
/// the sagittal plane (positive = forward), abduction in the frontal plane.
#[derive(Debug, Clone)]
struct Program {
    l_arm_swing: Channel,
    r_arm_swing: Channel,
    l_arm_abduct: Channel,
    r_arm_abduct: Channel,
    l_elbow: Channel,
    r_elbow: Channel,
    l_thigh_swing: Channel,
    r_thigh_swing: Channel,
    l_leg_abduct: Channel,
    r_leg_abduct: Channel,
    l_knee: Channel,
    r_knee: Channel,
    torso_pitch: Channel,
    torso_yaw: Channel,
    pelvis_bob: Channel,
}

impl Program {
    fn neutral() -> Program {
        Program {
            l_arm_swing: Channel::ZERO,
            r_arm_swing: Channel::ZERO,
            l_arm_abduct: ch(0.1, 0.0, 0.0, 0.0),
            r_arm_abduct: ch(0.1, 0.0, 0.0, 0.0),
            l_elbow: ch(0.15, 0.0, 0.0, 0.0),
            r_elbow: ch(0.15, 0.0, 0.0, 0.0),
            l_thigh_swing: Channel::ZERO,
            r_thigh_swing: Channel::ZERO,
            l_leg_abduct: ch(0.06, 0.0, 0.0, 0.0),
            r_leg_abduct: ch(0.06, 0.0, 0.0, 0.0),
            l_knee: ch(0.08, 0.0, 0.0, 0.0),
            r_knee: ch(0.08, 0.0, 0.0, 0.0),
            torso_pitch: Channel::ZERO,
            torso_yaw: Channel::ZERO,
            pelvis_bob: Channel::ZERO,
        }
    }

    fn for_class(class_id: usize) -> Program {
        let mut p = Program::neutral();
        match class_id {
            0 => {
                // wave: right arm raised, forearm oscillating
                p.r_arm_abduct = ch(2.4, 0.25, 1.0, 0.0);
                p.r_elbow = ch(1.2, 0.7, 2.0, 0.0);
            }
            1 => {
                // squat: deep knee bends with matching pelvis drop
                p.l_knee = ch(0.9, 0.8, 1.0, 0.0);
                p.r_knee = ch(0.9, 0.8, 1.0, 0.0);
                p.l_thigh_swing = ch(0.6, 0.55, 1.0, 0.0);
                p.r_thigh_swing = ch(0.6, 0.55, 1.0, 0.0);
                p.pelvis_bob = ch(-0.15, 0.14, 1.0, std::f64::consts::FRAC_PI_2);
                p.l_arm_swing = ch(1.3, 0.1, 1.0, 0.0);
                p.r_arm_swing = ch(1.3, 0.1, 1.0, 0.0);
            }
            2 => {
                // lunge: legs split front/back, oscillating
                p.l_thigh_swing = ch(0.5, 0.5, 1.0, 0.0);
                p.r_thigh_swing = ch(-0.5, 0.5, 1.0, std::f64::consts::PI);
                p.l_knee = ch(0.5, 0.4, 1.0, 0.0);
                p.r_knee = ch(0.3, 0.25, 1.0, std::f64::consts::PI);
                p.pelvis_bob = ch(-0.08, 0.06, 2.0, 0.0);
            }
            3 => {
                // jumping-jack: full arm and leg abduction, bobbing
                p.l_arm_abduct = ch(1.4, 1.3, 1.0, 0.0);
                p.r_arm_abduct = ch(1.4, 1.3, 1.0, 0.0);
                p.l_leg_abduct = ch(0.35, 0.3, 1.0, 0.0);
                p.r_leg_abduct = ch(0.35, 0.3, 1.0, 0.0);
                p.pelvis_bob = ch(0.0, 0.05, 2.0, 0.0);
            }
            4 => {
                // bow: torso pitches forward and back
                p.torso_pitch = ch(0.55, 0.55, 0.75, -std::f64::consts::FRAC_PI_2);
                p.l_arm_swing = ch(0.3, 0.15, 0.75, 0.0);
                p.r_arm_swing = ch(0.3, 0.15, 0.75, 0.0);
            }
            5 => {
                // twist: torso yaw oscillation with arms out
                p.torso_yaw = ch(0.0, 1.0, 1.0, 0.0);
                p.l_arm_abduct = ch(1.5, 0.08, 1.0, 0.0);
                p.r_arm_abduct = ch(1.5, 0.08, 1.0, 0.0);
            }
            6 => {
                // kick: right leg swings high, knee extends at apex
                p.r_thigh_swing = ch(0.5, 1.0, 1.0, 0.0);
                p.r_knee = ch(0.55, 0.5, 1.0, std::f64::consts::PI);
                p.l_arm_swing = ch(0.4, 0.25, 1.0, std::f64::consts::PI);
                p.pelvis_bob = ch(0.0, 0.02, 1.0, 0.0);
            }
            7 => {
                // reach: both arms stretch overhead, slight heel raise
                p.l_arm_abduct = ch(2.6, 0.4, 0.75, 0.0);
                p.r_arm_abduct = ch(2.6, 0.4, 0.75, 0.0);
                p.l_elbow = ch(0.05, 0.04, 0.75, 0.0);
                p.r_elbow = ch(0.05, 0.04, 0.75, 0.0);
                p.pelvis_bob = ch(0.02, 0.03, 0.75, 0.0);
            }
            _ => unreachable!("class_id checked by caller"),
        }
        p
    }

    fn jittered(&self, rng: &mut Rng) -> Program {
        Program {
            l_arm_swing: self.l_arm_swing.jittered(rng),
            r_arm_swing: self.r_arm_swing.jittered(rng),
            l_arm_abduct: self.l_arm_abduct.jittered(rng),
            r_arm_abduct: self.r_arm_abduct.jittered(rng),
            l_elbow: self.l_elbow.jittered(rng),
            r_elbow: self.r_elbow.jittered(rng),
            l_thigh_swing: self.l_thigh_swing.jittered(rng),
            r_thigh_swing: self.r_thigh_swing.jittered(rng),
            l_leg_abduct: self.l_leg_abduct.jittered(rng),
            r_leg_abduct: self.r_leg_abduct.jittered(rng),
            l_knee: self.l_knee.jittered(rng),
            r_knee: self.r_knee.jittered(rng),
            torso_pitch: self.torso_pitch.jittered(rng),
            torso_yaw: self.torso_yaw.jittered(rng),
            pelvis_bob: self.pelvis_bob.jittered(rng),
        }
    }
}

/// Limb direction from rest (straight down) after sagittal swing and frontal
/// abduction, in the body frame, then rotated by torso yaw into world.
fn limb_dir(swing: f64, abduct_signed: f64, yaw: f64) -> Vec3 {
    let v = [0.0, -1.0, 0.0];
    let v = rot_x(v, swing);
    let v = rot_z(v, abduct_signed);
    rot_y(v, yaw)
}

fn pose_at(bones: &Bones, prog: &Program, t: f64) -> Pose3D {
    let pitch = prog.torso_pitch.at(t);
    let yaw = prog.torso_yaw.at(t);
    let pelvis = [0.0, bones.hip_height + prog.pelvis_bob.at(t), 0.0];

    // torso up direction after pitch (forward = +z) and yaw
    let up = rot_y(rot_x([0.0, 1.0, 0.0], pitch), yaw);
    let lateral = rot_y([1.0, 0.0, 0.0], yaw);

    let shoulder_center = add(pelvis, scale(up, bones.torso));
    let head = add(shoulder_center, scale(up, bones.head));
    let l_sh = add(shoulder_center, scale(lateral, bones.shoulder_half));
    let r_sh = add(shoulder_center, scale(lateral, -bones.shoulder_half));
    let l_hip = add(pelvis, scale(lateral, bones.hip_half));
    let r_hip = add(pelvis, scale(lateral, -bones.hip_half));

    // arms: abduction lifts away from the body (left = +z rotation toward +x)
    let la_dir = limb_dir(prog.l_arm_swing.at(t), -prog.l_arm_abduct.at(t), yaw);
    let ra_dir = limb_dir(prog.r_arm_swing.at(t), prog.r_arm_abduct.at(t), yaw);
    let l_el = add(l_sh, scale(la_dir, bones.upper_arm));
    let r_el = add(r_sh, scale(ra_dir, bones.upper_arm));
    // elbow flexion bends the forearm forward relative to the upper arm
    let lf_dir = rot_y(
        rot_x(
            rot_z([0.0, -1.0, 0.0], -prog.l_arm_abduct.at(t)),
            prog.l_arm_swing.at(t) + prog.l_elbow.at(t),
        ),
        yaw,
    );
    let rf_dir = rot_y(
        rot_x(
            rot_z([0.0, -1.0, 0.0], prog.r_arm_abduct.at(t)),
            prog.r_arm_swing.at(t) + prog.r_elbow.at(t),
        ),
        yaw,
    );
    let l_wr = add(l_el, scale(lf_dir, bones.forearm));
    let r_wr = add(r_el, scale(rf_dir, bones.forearm));

    // legs (yaw of the pelvis left at zero: only the torso twists)
    let lt_dir = limb_dir(prog.l_thigh_swing.at(t), -prog.l_leg_abduct.at(t), 0.0);
    let rt_dir = limb_dir(prog.r_thigh_swing.at(t), prog.r_leg_abduct.at(t), 0.0);
    let l_kn = add(l_hip, scale(lt_dir, bones.thigh));
    let r_kn = add(r_hip, scale(rt_dir, bones.thigh));
    let ls_dir = limb_dir(
        prog.l_thigh_swing.at(t) - prog.l_knee.at(t),
        -prog.l_leg_abduct.at(t),
        0.0,
    );
    let rs_dir = limb_dir(
        prog.r_thigh_swing.at(t) - prog.r_knee.at(t),
        prog.r_leg_abduct.at(t),
        0.0,
    );
    let l_an = add(l_kn, scale(ls_dir, bones.shin));
    let r_an = add(r_kn, scale(rs_dir, bones.shin));

    let mut joints = [[0.0; 3]; NUM_JOINTS];
    joints[HEAD] = head;
    joints[L_SHOULDER] = l_sh;
    joints[R_SHOULDER] = r_sh;
    joints[L_ELBOW] = l_el;
    joints[R_ELBOW] = r_el;
    joints[L_WRIST] = l_wr;
    joints[R_WRIST] = r_wr;
    joints[L_HIP] = l_hip;
    joints[R_HIP] = r_hip;
    joints[L_KNEE] = l_kn;
    joints[R_KNEE] = r_kn;
    joints[L_ANKLE] = l_an;
    joints[R_ANKLE] = r_an;
    Pose3D { joints }
}

/// Deterministic in (class_id, seed, frames).
pub fn generate_action_sequence(
    class_id: usize,
    seed: u64,
    frames: usize,
) -> Result<ActionSequence> {
    if class_id >= NUM_CLASSES {
        return Err(CvmimError::InvalidArgument(format!(
            "class_id {class_id} >= {NUM_CLASSES}"
        )));
    }
    if frames < 1 {
        return Err(CvmimError::InvalidArgument("frames must be >= 1".into()));
    }
    let mut rng = Rng::from_seed(seed ^ (class_id as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let bones = Bones::jittered(&mut rng);
    let prog = Program::for_class(class_id).jittered(&mut rng);
    let poses = (0..frames)
        .map(|f| pose_at(&bones, &prog, f as f64 / 30.0))
        .collect();
    Ok(ActionSequence {
        frames: poses,
        label: class_id,
        subject_seed: seed,
    })
}
