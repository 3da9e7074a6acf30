//! 21-joint, 26-DOF kinematic hand model: forward kinematics, analytical
//! Jacobian, and bone-length calibration.
//!
//! The pose vector packs 3 global translation entries (mm), 3 global rotation
//! entries (fixed-axis XYZ, radians) and 20 joint angles (radians). The wrist
//! carries the global transform; every other joint hangs off its parent by a
//! fixed-direction offset scaled by the bone length, followed by that joint's
//! own rotations.

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 21;
pub const POSE_DOF: usize = 26;
pub const ANGULAR_DOF: usize = 20;
/// Pose-vector index of the first angular DOF.
pub const ANGULAR_OFFSET: usize = 6;

/// Fingertip joint indices in the default joint order.
pub const FINGERTIPS: [usize; 5] = [4, 8, 12, 16, 20];

const DEFAULT_SKELETON_TOML: &str = include_str!("../config/skeleton.toml");

/// Local rotation axis of an angular DOF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Vector3<f64> {
        match self {
            Axis::X => Vector3::x(),
            Axis::Y => Vector3::y(),
            Axis::Z => Vector3::z(),
        }
    }

    fn rotation(self, angle: f64) -> Matrix3<f64> {
        let axis = match self {
            Axis::X => Vector3::x_axis(),
            Axis::Y => Vector3::y_axis(),
            Axis::Z => Vector3::z_axis(),
        };
        Rotation3::from_axis_angle(&axis, angle).into_inner()
    }
}

/// One angular DOF applied at a joint: which pose slot drives it and about
/// which local axis it rotates.
#[derive(Debug, Clone, Copy)]
pub struct AngularDof {
    pub pose_index: usize,
    pub axis: Axis,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Unit direction from the parent to this joint in the parent's frame.
    pub rest_direction: Vector3<f64>,
    /// Distance to the parent joint, mm. Zero for the wrist.
    pub bone_length: f64,
    /// Rotations applied at this joint, in application order.
    pub dofs: Vec<AngularDof>,
}

/// The full pose vector Θ: global translation, global rotation, joint angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub [f64; POSE_DOF]);

impl Pose {
    pub fn rest() -> Self {
        Pose([0.0; POSE_DOF])
    }

    pub fn global_translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn set_global_translation(&mut self, t: Vector3<f64>) {
        self.0[0] = t.x;
        self.0[1] = t.y;
        self.0[2] = t.z;
    }

    /// Fixed-axis XYZ rotation angles, radians.
    pub fn global_rotation(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    /// The 20 joint angles, indexed by pose slot minus [`ANGULAR_OFFSET`].
    pub fn angles(&self) -> &[f64] {
        &self.0[ANGULAR_OFFSET..]
    }

    pub fn as_slice(&self) -> &[f64; POSE_DOF] {
        &self.0
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinitePose { index }),
            None => Ok(()),
        }
    }
}

/// Global 3D joint positions, mm, camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointPositions(pub [Vector3<f64>; JOINT_COUNT]);

impl JointPositions {
    pub fn zeros() -> Self {
        JointPositions([Vector3::zeros(); JOINT_COUNT])
    }
}

/// Joint hierarchy, bone lengths, DOF map and joint-angle limits.
#[derive(Debug, Clone)]
pub struct Skeleton {
    joints: Vec<Joint>,
    limits_lower: [f64; ANGULAR_DOF],
    limits_upper: [f64; ANGULAR_DOF],
    root_joint: usize,
    /// `descendants[a][j]` is true when `j` lies strictly below `a` in the tree.
    descendants: Vec<[bool; JOINT_COUNT]>,
}

/// Forward-kinematics evaluation with the per-DOF world axes needed by the
/// analytical Jacobian.
pub(crate) struct FkEval {
    pub positions: [Vector3<f64>; JOINT_COUNT],
    /// World rotation axis and owning joint per angular DOF (slot - 6).
    pub dof_axes: [(Vector3<f64>, usize); ANGULAR_DOF],
}

impl Skeleton {
    /// The built-in hand model (see `config/skeleton.toml`).
    pub fn default_hand() -> Skeleton {
        Skeleton::from_config_str(DEFAULT_SKELETON_TOML).expect("embedded skeleton config is valid")
    }

    /// Parses and validates a skeleton config. Unknown fields are rejected.
    pub fn from_config_str(text: &str) -> Result<Skeleton> {
        let config: SkeletonConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("skeleton config: {e}")))?;
        config.build()
    }

    pub fn from_config_file(path: &std::path::Path) -> Result<Skeleton> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Skeleton::from_config_str(&text)
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn root_joint(&self) -> usize {
        self.root_joint
    }

    pub fn limits_lower(&self) -> &[f64; ANGULAR_DOF] {
        &self.limits_lower
    }

    pub fn limits_upper(&self) -> &[f64; ANGULAR_DOF] {
        &self.limits_upper
    }

    /// Rest offset of the root joint from the wrist, in the wrist frame.
    pub fn root_rest_offset(&self) -> Vector3<f64> {
        let mut offset = Vector3::zeros();
        let mut j = self.root_joint;
        while let Some(parent) = self.joints[j].parent {
            offset += self.joints[j].rest_direction * self.joints[j].bone_length;
            j = parent;
        }
        offset
    }

    /// Copy with every bone length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Skeleton {
        let mut out = self.clone();
        for joint in &mut out.joints {
            joint.bone_length *= factor;
        }
        out
    }

    /// Global 3D positions of all 21 joints for the given pose.
    pub fn forward_kinematics(&self, pose: &Pose) -> Result<JointPositions> {
        Ok(JointPositions(self.fk_eval(pose)?.positions))
    }

    pub(crate) fn fk_eval(&self, pose: &Pose) -> Result<FkEval> {
        pose.validate()?;
        let mut positions = [Vector3::zeros(); JOINT_COUNT];
        let mut rotations = [Matrix3::identity(); JOINT_COUNT];
        let mut dof_axes = [(Vector3::zeros(), 0usize); ANGULAR_DOF];

        positions[0] = pose.global_translation();
        rotations[0] = global_rotation_matrix(pose.global_rotation());

        for (j, joint) in self.joints.iter().enumerate().skip(1) {
            let parent = joint.parent.expect("non-wrist joints have parents");
            let parent_rot = rotations[parent];
            positions[j] =
                positions[parent] + parent_rot * (joint.rest_direction * joint.bone_length);
            let mut rot = parent_rot;
            for dof in &joint.dofs {
                // Axis in world space, before this DOF's own rotation applies.
                dof_axes[dof.pose_index - ANGULAR_OFFSET] = (rot * dof.axis.unit(), j);
                rot *= dof.axis.rotation(pose.0[dof.pose_index]);
            }
            rotations[j] = rot;
        }
        Ok(FkEval {
            positions,
            dof_axes,
        })
    }

    /// Analytical Jacobian of all joint coordinates with respect to the pose,
    /// as a 63×26 matrix (rows are x, y, z per joint in joint order).
    pub fn fk_jacobian(&self, pose: &Pose) -> Result<DMatrix<f64>> {
        let eval = self.fk_eval(pose)?;
        let mut jac = DMatrix::zeros(3 * JOINT_COUNT, POSE_DOF);

        for j in 0..JOINT_COUNT {
            for c in 0..3 {
                jac[(3 * j + c, c)] = 1.0;
            }
        }

        // Global rotation columns. With R = Rz·Ry·Rx the effective world axes
        // are Rz·Ry·x̂, Rz·ŷ and ẑ; every joint pivots about the wrist.
        let rot = pose.global_rotation();
        let rz = Axis::Z.rotation(rot.z);
        let axes = [
            rz * Axis::Y.rotation(rot.y) * Vector3::x(),
            rz * Vector3::y(),
            Vector3::z(),
        ];
        let wrist = eval.positions[0];
        for (k, axis) in axes.iter().enumerate() {
            for j in 0..JOINT_COUNT {
                let d = axis.cross(&(eval.positions[j] - wrist));
                for c in 0..3 {
                    jac[(3 * j + c, 3 + k)] = d[c];
                }
            }
        }

        for slot in 0..ANGULAR_DOF {
            let (axis, owner) = eval.dof_axes[slot];
            let pivot = eval.positions[owner];
            for j in 0..JOINT_COUNT {
                if !self.descendants[owner][j] {
                    continue;
                }
                let d = axis.cross(&(eval.positions[j] - pivot));
                for c in 0..3 {
                    jac[(3 * j + c, ANGULAR_OFFSET + slot)] = d[c];
                }
            }
        }
        Ok(jac)
    }

    /// Sets each bone length to the mean distance between its endpoint joints
    /// across the given frames.
    pub fn calibrate_bone_lengths(&self, frames: &[JointPositions]) -> Result<Skeleton> {
        if frames.is_empty() {
            return Err(Error::InvalidInput(
                "calibration requires at least one frame".into(),
            ));
        }
        let mut out = self.clone();
        for (j, joint) in self.joints.iter().enumerate() {
            let Some(parent) = joint.parent else { continue };
            let mean = frames
                .iter()
                .map(|f| (f.0[j] - f.0[parent]).norm())
                .sum::<f64>()
                / frames.len() as f64;
            if !mean.is_finite() || mean <= 0.0 {
                return Err(Error::CalibrationFailure(format!(
                    "bone `{}` came out as {mean} mm",
                    joint.name
                )));
            }
            out.joints[j].bone_length = mean;
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.joints.len() != JOINT_COUNT {
            return Err(Error::Format(format!(
                "expected {JOINT_COUNT} joints, got {}",
                self.joints.len()
            )));
        }
        let mut seen = [false; ANGULAR_DOF];
        let mut is_parent = vec![false; self.joints.len()];
        for (j, joint) in self.joints.iter().enumerate() {
            match joint.parent {
                None if j != 0 => {
                    return Err(Error::Format(format!(
                        "joint `{}` has no parent but is not the wrist",
                        joint.name
                    )));
                }
                Some(p) if p >= j => {
                    return Err(Error::Format(format!(
                        "joint `{}` must be listed after its parent",
                        joint.name
                    )));
                }
                Some(p) => {
                    is_parent[p] = true;
                    if !(joint.bone_length.is_finite() && joint.bone_length > 0.0) {
                        return Err(Error::Format(format!(
                            "joint `{}` has non-positive bone length",
                            joint.name
                        )));
                    }
                }
                None => {}
            }
            for dof in &joint.dofs {
                let slot = dof.pose_index;
                if !(ANGULAR_OFFSET..POSE_DOF).contains(&slot) {
                    return Err(Error::Format(format!("DOF slot {slot} out of range")));
                }
                if seen[slot - ANGULAR_OFFSET] {
                    return Err(Error::Format(format!("DOF slot {slot} assigned twice")));
                }
                seen[slot - ANGULAR_OFFSET] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "DOF slot {} is unassigned",
                missing + ANGULAR_OFFSET
            )));
        }
        for (j, joint) in self.joints.iter().enumerate() {
            if !is_parent[j] && !joint.dofs.is_empty() {
                return Err(Error::Format(format!(
                    "leaf joint `{}` must have zero DOF",
                    joint.name
                )));
            }
        }
        for slot in 0..ANGULAR_DOF {
            if self.limits_lower[slot] >= self.limits_upper[slot] {
                return Err(Error::Format(format!(
                    "limits for DOF slot {} are not ordered",
                    slot + ANGULAR_OFFSET
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn global_rotation_matrix(angles: Vector3<f64>) -> Matrix3<f64> {
    Axis::Z.rotation(angles.z) * Axis::Y.rotation(angles.y) * Axis::X.rotation(angles.x)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonConfig {
    root_joint: String,
    joints: Vec<JointConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointConfig {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    #[serde(default)]
    offset: Option<[f64; 3]>,
    #[serde(default)]
    bone_length: Option<f64>,
    #[serde(default)]
    dofs: Vec<DofConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DofConfig {
    slot: usize,
    axis: Axis,
    limits: [f64; 2],
}

impl SkeletonConfig {
    fn build(self) -> Result<Skeleton> {
        let mut joints = Vec::with_capacity(self.joints.len());
        let mut limits_lower = [0.0; ANGULAR_DOF];
        let mut limits_upper = [0.0; ANGULAR_DOF];
        let mut names = Vec::new();

        for entry in &self.joints {
            if names.contains(&entry.name) {
                return Err(Error::Format(format!("duplicate joint `{}`", entry.name)));
            }
            let parent = match &entry.parent {
                None => None,
                Some(name) => Some(names.iter().position(|n| n == name).ok_or_else(|| {
                    Error::Format(format!(
                        "joint `{}` references unknown or later parent `{name}`",
                        entry.name
                    ))
                })?),
            };
            let (rest_direction, bone_length) = match (parent, entry.offset) {
                (None, _) => (Vector3::zeros(), 0.0),
                (Some(_), None) => {
                    return Err(Error::Format(format!(
                        "joint `{}` is missing its offset",
                        entry.name
                    )));
                }
                (Some(_), Some(o)) => {
                    let offset = Vector3::new(o[0], o[1], o[2]);
                    let norm = offset.norm();
                    if !(norm.is_finite() && norm > 0.0) {
                        return Err(Error::Format(format!(
                            "joint `{}` has a degenerate offset",
                            entry.name
                        )));
                    }
                    (offset / norm, entry.bone_length.unwrap_or(norm))
                }
            };
            let mut dofs = Vec::with_capacity(entry.dofs.len());
            for dof in &entry.dofs {
                if (ANGULAR_OFFSET..POSE_DOF).contains(&dof.slot) {
                    limits_lower[dof.slot - ANGULAR_OFFSET] = dof.limits[0];
                    limits_upper[dof.slot - ANGULAR_OFFSET] = dof.limits[1];
                }
                dofs.push(AngularDof {
                    pose_index: dof.slot,
                    axis: dof.axis,
                });
            }
            joints.push(Joint {
                name: entry.name.clone(),
                parent,
                rest_direction,
                bone_length,
                dofs,
            });
            names.push(entry.name.clone());
        }

        let root_joint = names
            .iter()
            .position(|n| *n == self.root_joint)
            .ok_or_else(|| Error::Format(format!("unknown root joint `{}`", self.root_joint)))?;

        let n = joints.len();
        let mut descendants = vec![[false; JOINT_COUNT]; n];
        for j in 0..n.min(JOINT_COUNT) {
            let mut a = joints[j].parent;
            while let Some(p) = a {
                descendants[p][j] = true;
                a = joints[p].parent;
            }
        }

        let skeleton = Skeleton {
            joints,
            limits_lower,
            limits_upper,
            root_joint,
            descendants,
        };
        skeleton.validate()?;
        Ok(skeleton)
    }
}
