//! Forward kinematics of a 6-revolute-joint serial arm, the tabletop
//! workspace it reaches over, and random target spawning.
//!
//! The chain is described joint by joint: each joint rotates about a fixed
//! axis expressed in its parent frame, then translates by a fixed link vector
//! to the next frame. The end effector sits at `ee_offset` from the last
//! frame. Positions are accumulated with unit quaternions; an independent
//! homogeneous-matrix implementation lives in the test suite and must agree
//! to 1e-9 m.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReachError, Result};

/// Number of revolute joints in the arm.
pub const JOINT_COUNT: usize = 6;

/// One revolute joint: rotation about `axis` (unit vector in the parent
/// frame) followed by the fixed translation to the next frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: [f64; 3],
    pub translation: [f64; 3],
}

/// Rigid transform of joint 1 relative to the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    /// Row-major rotation matrix, world-from-base.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for BasePose {
    fn default() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }
}

/// Full arm description: six joints, base pose, end-effector offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub base_pose: BasePose,
    pub ee_offset: [f64; 3],
}

impl KinematicChain {
    /// The canonical default arm: axis lines (z, y, y, z, y, z), link lengths
    /// 0.30/0.35/0.30/0.10/0.10 m plus an 0.08 m end-effector offset, mounted
    /// at the world origin with z up and a −90° base yaw so that the bounded
    /// joint ranges fold the arm over the +y half-plane where targets spawn.
    /// Joints 3 and 5 point along −y so they flex in the same sense as the
    /// shoulder pitch, giving the elbow-like workspace the joint bounds
    /// assume.
    pub fn default_chain() -> Self {
        let axis_z = [0.0, 0.0, 1.0];
        let axis_y = [0.0, 1.0, 0.0];
        let axis_ny = [0.0, -1.0, 0.0];
        Self {
            joints: vec![
                Joint { axis: axis_z, translation: [0.0, 0.0, 0.30] },
                Joint { axis: axis_y, translation: [0.0, 0.0, 0.35] },
                Joint { axis: axis_ny, translation: [0.0, 0.0, 0.30] },
                Joint { axis: axis_z, translation: [0.0, 0.0, 0.10] },
                Joint { axis: axis_ny, translation: [0.0, 0.0, 0.10] },
                Joint { axis: axis_z, translation: [0.0, 0.0, 0.0] },
            ],
            base_pose: BasePose {
                rotation: [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
                translation: [0.0, 0.0, 0.0],
            },
            ee_offset: [0.0, 0.0, 0.08],
        }
    }

    /// Checks the structural invariants: exactly six joints, unit axes,
    /// finite translations, orthonormal right-handed base rotation.
    pub fn validate(&self) -> Result<()> {
        if self.joints.len() != JOINT_COUNT {
            return Err(ReachError::Dimension {
                what: "kinematic chain joints",
                expected: JOINT_COUNT,
                got: self.joints.len(),
            });
        }
        for (i, joint) in self.joints.iter().enumerate() {
            let norm = norm3(&joint.axis);
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-12 {
                return Err(ReachError::InvalidConfig(format!(
                    "joint {} axis is not a unit vector (norm {norm})",
                    i + 1
                )));
            }
            if !joint.translation.iter().all(|v| v.is_finite()) {
                return Err(ReachError::NonFinite(format!("joint {} translation", i + 1)));
            }
        }
        if !self.ee_offset.iter().all(|v| v.is_finite()) {
            return Err(ReachError::NonFinite("ee_offset".into()));
        }
        if !self.base_pose.translation.iter().all(|v| v.is_finite()) {
            return Err(ReachError::NonFinite("base_pose.translation".into()));
        }
        validate_rotation(&self.base_pose.rotation)?;
        Ok(())
    }

    /// Sum of all link lengths plus the end-effector offset: a global
    /// Lipschitz constant of the forward map (per radian, summed over
    /// joints), and the radius of the arm's reachable sphere.
    pub fn total_length(&self) -> f64 {
        self.joints.iter().map(|j| norm3(&j.translation)).sum::<f64>() + norm3(&self.ee_offset)
    }
}

fn validate_rotation(m: &[[f64; 3]; 3]) -> Result<()> {
    for row in m {
        for v in row {
            if !v.is_finite() {
                return Err(ReachError::NonFinite("base_pose.rotation".into()));
            }
        }
    }
    // R Rᵀ must be the identity.
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-9 {
                return Err(ReachError::InvalidConfig(
                    "base_pose.rotation is not orthonormal".into(),
                ));
            }
        }
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if (det - 1.0).abs() > 1e-9 {
        return Err(ReachError::InvalidConfig(
            "base_pose.rotation must be right-handed (det +1)".into(),
        ));
    }
    Ok(())
}

/// Six joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(pub [f64; JOINT_COUNT]);

impl JointVector {
    pub fn zero() -> Self {
        Self([0.0; JOINT_COUNT])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Tabletop workspace: where targets may spawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableGeometry {
    /// World z of the tabletop.
    pub surface_height: f64,
    /// Sampling rectangle, meters.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Targets never spawn within this radius of the arm's base (the empty
    /// semicircle in the scatter plots).
    pub base_exclusion_radius: f64,
    /// Height of the cylinder center above the surface.
    pub target_height: f64,
}

impl Default for TableGeometry {
    fn default() -> Self {
        Self {
            surface_height: 0.0,
            x_range: [-0.8, 0.8],
            y_range: [0.15, 0.85],
            base_exclusion_radius: 0.25,
            target_height: 0.10,
        }
    }
}

impl TableGeometry {
    pub fn validate(&self) -> Result<()> {
        let finite = self.surface_height.is_finite()
            && self.x_range.iter().all(|v| v.is_finite())
            && self.y_range.iter().all(|v| v.is_finite())
            && self.base_exclusion_radius.is_finite()
            && self.target_height.is_finite();
        if !finite {
            return Err(ReachError::NonFinite("table geometry".into()));
        }
        if self.x_range[0] >= self.x_range[1] || self.y_range[0] >= self.y_range[1] {
            return Err(ReachError::InvalidConfig(
                "table sampling ranges must be non-degenerate (low < high)".into(),
            ));
        }
        if self.base_exclusion_radius < 0.0 {
            return Err(ReachError::InvalidConfig(
                "base_exclusion_radius must be ≥ 0".into(),
            ));
        }
        // The rectangle minus the exclusion disk must have positive area. The
        // disk is convex, so the accepted region is non-empty exactly when
        // the farthest rectangle corner lies strictly outside the disk.
        let farthest = self
            .x_range
            .iter()
            .flat_map(|&x| self.y_range.iter().map(move |&y| x.hypot(y)))
            .fold(0.0f64, f64::max);
        if farthest <= self.base_exclusion_radius {
            return Err(ReachError::InvalidConfig(
                "sampling rectangle lies entirely inside the base exclusion disk".into(),
            ));
        }
        Ok(())
    }

    /// World z of spawned targets.
    pub fn target_z(&self) -> f64 {
        self.surface_height + self.target_height
    }
}

/// Cylinder center in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetPosition {
    pub p: [f64; 3],
}

/// End-effector world position for the given joint angles.
///
/// Applies the base pose, then each joint's rotation and link translation in
/// order, then the end-effector offset. Deterministic and smooth in `q`.
pub fn forward_kinematics(chain: &KinematicChain, q: &JointVector) -> Result<[f64; 3]> {
    chain.validate()?;
    if !q.is_finite() {
        return Err(ReachError::NonFinite("joint vector".into()));
    }
    let mut orient = quat_from_matrix(&chain.base_pose.rotation);
    let mut pos = chain.base_pose.translation;
    for (joint, &angle) in chain.joints.iter().zip(q.0.iter()) {
        orient = quat_mul(&orient, &quat_from_axis_angle(&joint.axis, angle));
        let step = quat_rotate(&orient, &joint.translation);
        pos[0] += step[0];
        pos[1] += step[1];
        pos[2] += step[2];
    }
    let tip = quat_rotate(&orient, &chain.ee_offset);
    Ok([pos[0] + tip[0], pos[1] + tip[1], pos[2] + tip[2]])
}

/// World positions of the base and each successive frame origin, ending with
/// the end-effector center (8 points for a 6-joint chain). Used to draw the
/// arm; the last element equals `forward_kinematics`.
pub fn frame_positions(chain: &KinematicChain, q: &JointVector) -> Result<Vec<[f64; 3]>> {
    chain.validate()?;
    if !q.is_finite() {
        return Err(ReachError::NonFinite("joint vector".into()));
    }
    let mut points = Vec::with_capacity(chain.joints.len() + 2);
    let mut orient = quat_from_matrix(&chain.base_pose.rotation);
    let mut pos = chain.base_pose.translation;
    points.push(pos);
    for (joint, &angle) in chain.joints.iter().zip(q.0.iter()) {
        orient = quat_mul(&orient, &quat_from_axis_angle(&joint.axis, angle));
        let step = quat_rotate(&orient, &joint.translation);
        pos[0] += step[0];
        pos[1] += step[1];
        pos[2] += step[2];
        points.push(pos);
    }
    let tip = quat_rotate(&orient, &chain.ee_offset);
    points.push([pos[0] + tip[0], pos[1] + tip[1], pos[2] + tip[2]]);
    Ok(points)
}

/// Uniform target over the sampling rectangle, rejection-sampled against the
/// base exclusion disk. Draws x then y per attempt; deterministic given the
/// rng state. The geometry invariant guarantees termination.
pub fn sample_target(geom: &TableGeometry, rng: &mut ChaCha20Rng) -> TargetPosition {
    use rand::Rng;
    loop {
        let x = rng.random_range(geom.x_range[0]..geom.x_range[1]);
        let y = rng.random_range(geom.y_range[0]..geom.y_range[1]);
        if x.hypot(y) > geom.base_exclusion_radius {
            return TargetPosition { p: [x, y, geom.target_z()] };
        }
    }
}

/// Euclidean 3-D distance from the end effector to the target center.
pub fn distance_to_target(ee: &[f64; 3], target: &TargetPosition) -> f64 {
    let dx = ee[0] - target.p[0];
    let dy = ee[1] - target.p[1];
    let dz = ee[2] - target.p[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

// --- quaternion helpers (w, x, y, z), unit quaternions only -----------------

fn quat_from_axis_angle(axis: &[f64; 3], angle: f64) -> [f64; 4] {
    let half = 0.5 * angle;
    let s = half.sin();
    [half.cos(), axis[0] * s, axis[1] * s, axis[2] * s]
}

fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_rotate(q: &[f64; 4], v: &[f64; 3]) -> [f64; 3] {
    // v + 2 q⃗ × (q⃗ × v + w v)
    let u = [q[1], q[2], q[3]];
    let t = [
        2.0 * (u[1] * v[2] - u[2] * v[1]),
        2.0 * (u[2] * v[0] - u[0] * v[2]),
        2.0 * (u[0] * v[1] - u[1] * v[0]),
    ];
    [
        v[0] + q[0] * t[0] + u[1] * t[2] - u[2] * t[1],
        v[1] + q[0] * t[1] + u[2] * t[0] - u[0] * t[2],
        v[2] + q[0] * t[2] + u[0] * t[1] - u[1] * t[0],
    ]
}

/// Shepperd's method: rotation matrix (row-major) → unit quaternion.
fn quat_from_matrix(m: &[[f64; 3]; 3]) -> [f64; 4] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    }
}
