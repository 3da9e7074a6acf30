//! The kinematic pose-tracking energy and its minimization.
//!
//! Per frame, the tracker fits the 26-DOF pose to the predicted 3D joint
//! positions and 2D heatmap maxima, regularized by a one-sided quadratic
//! joint-limit penalty and a constant-velocity temporal prior:
//!
//!   E(Θ) = w_p3 · Σ‖M(Θ)_j − p^G_j‖² + w_p2 · Σ‖π(M(Θ)_j) − φ_j‖²
//!        + w_l · E_lim(Θ) + w_t · ‖(Θ − Θ')  − (Θ' − Θ'')‖²
//!
//! Minimization runs a fixed number of conditioned gradient-descent steps:
//! each step solves the gradient against the damped Gauss-Newton curvature,
//! and a backtracking halving line search guarantees the energy never
//! increases.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::camera::{Camera, RootLocation};
use crate::error::{Error, Result};
use crate::localization::{Heatmap, argmax};
use crate::skeleton::{
    ANGULAR_DOF, ANGULAR_OFFSET, JOINT_COUNT, JointPositions, POSE_DOF, Pose, Skeleton,
};

/// Fixed iteration count of the per-frame descent.
pub const DESCENT_ITERATIONS: usize = 20;
/// Maximum halvings of the line-search step before giving up on an iteration.
pub const MAX_HALVINGS: usize = 8;

/// Joints closer to the camera plane than this are dropped from the 2D term.
const Z_EPS: f64 = 1e-6;
/// Per-iteration step caps. Keeps a near-singular curvature direction from
/// jumping across angle branches in a single step.
const MAX_STEP_MM: f64 = 100.0;
const MAX_STEP_RAD: f64 = 0.5;

/// Term weights of the tracking energy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyWeights {
    pub pos_3d: f64,
    pub pos_2d: f64,
    pub limits: f64,
    pub temporal: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            pos_3d: 0.01,
            pos_2d: 5e-7,
            limits: 0.03,
            temporal: 1e-3,
        }
    }
}

impl EnergyWeights {
    pub fn from_config_str(text: &str) -> Result<EnergyWeights> {
        toml::from_str(text).map_err(|e| Error::Format(format!("weights config: {e}")))
    }
}

/// Per-frame stand-in for the learned predictors: root-relative 3D positions,
/// per-joint 2D heatmaps, the image-level root heatmap, and the resolved root.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Root-relative joint positions p^L, mm.
    pub local_positions: [Vector3<f64>; JOINT_COUNT],
    pub joint_heatmaps: Vec<Heatmap>,
    /// Image-level root-position heatmap consumed by the localizer.
    pub root_heatmap: Heatmap,
    pub root: RootLocation,
    /// Backprojected root r, mm.
    pub root_3d: Vector3<f64>,
    pub validity_mask: [bool; JOINT_COUNT],
}

impl Observation {
    /// Global positions p^G = p^L + r.
    pub fn global_positions(&self) -> [Vector3<f64>; JOINT_COUNT] {
        self.local_positions.map(|p| p + self.root_3d)
    }

    pub fn valid_joint_count(&self) -> usize {
        self.validity_mask.iter().filter(|&&m| m).count()
    }
}

/// Pose history threaded through per-frame tracking.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackerState {
    pub theta_prev: Option<Pose>,
    pub theta_prev2: Option<Pose>,
    pub frame_index: u64,
}

impl TrackerState {
    pub fn new() -> TrackerState {
        TrackerState::default()
    }

    fn advanced(&self, pose: Pose) -> TrackerState {
        TrackerState {
            theta_prev2: self.theta_prev,
            theta_prev: Some(pose),
            frame_index: self.frame_index + 1,
        }
    }

    /// The temporal term needs two frames of history.
    fn temporal_history(&self) -> Option<(&Pose, &Pose)> {
        match (&self.theta_prev, &self.theta_prev2) {
            (Some(p1), Some(p2)) => Some((p1, p2)),
            _ => None,
        }
    }
}

/// Per-frame fit targets: global 3D positions and heatmap maxima of the valid
/// joints, extracted once per frame (the maxima are constant during the inner
/// optimization).
struct FitTargets {
    positions: [Option<Vector3<f64>>; JOINT_COUNT],
    image_points: [Option<Vector2<f64>>; JOINT_COUNT],
}

impl FitTargets {
    fn from_observation(obs: &Observation) -> Result<FitTargets> {
        if obs.joint_heatmaps.len() != JOINT_COUNT {
            return Err(Error::InvalidInput(format!(
                "expected {JOINT_COUNT} joint heatmaps, got {}",
                obs.joint_heatmaps.len()
            )));
        }
        if obs.valid_joint_count() == 0 {
            return Err(Error::NoData);
        }
        let global = obs.global_positions();
        let mut positions = [None; JOINT_COUNT];
        let mut image_points = [None; JOINT_COUNT];
        for j in 0..JOINT_COUNT {
            if !obs.validity_mask[j] {
                continue;
            }
            if !global[j].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite prediction for joint {j}"
                )));
            }
            positions[j] = Some(global[j]);
            image_points[j] = Some(argmax(&obs.joint_heatmaps[j])?.0);
        }
        Ok(FitTargets {
            positions,
            image_points,
        })
    }
}

struct Evaluation {
    value: f64,
    gradient: [f64; POSE_DOF],
    /// Gauss-Newton curvature used to condition the descent step.
    curvature: Option<DMatrix<f64>>,
}

fn evaluate(
    skeleton: &Skeleton,
    pose: &Pose,
    targets: &FitTargets,
    history: Option<(&Pose, &Pose)>,
    camera: &Camera,
    weights: &EnergyWeights,
    with_gradient: bool,
) -> Result<Evaluation> {
    let mut value = 0.0;
    let mut gradient = [0.0; POSE_DOF];
    let mut curvature = if with_gradient {
        Some(DMatrix::zeros(POSE_DOF, POSE_DOF))
    } else {
        None
    };

    let fk = skeleton.forward_kinematics(pose)?;
    let jacobian = if with_gradient {
        Some(skeleton.fk_jacobian(pose)?)
    } else {
        None
    };

    for j in 0..JOINT_COUNT {
        let m = fk.0[j];
        if let Some(target) = targets.positions[j] {
            let r = m - target;
            value += weights.pos_3d * r.norm_squared();
            if let Some(jac) = &jacobian {
                let h = curvature.as_mut().unwrap();
                for i in 0..POSE_DOF {
                    let col_i =
                        Vector3::new(jac[(3 * j, i)], jac[(3 * j + 1, i)], jac[(3 * j + 2, i)]);
                    gradient[i] += 2.0 * weights.pos_3d * col_i.dot(&r);
                    for k in i..POSE_DOF {
                        let col_k =
                            Vector3::new(jac[(3 * j, k)], jac[(3 * j + 1, k)], jac[(3 * j + 2, k)]);
                        h[(i, k)] += 2.0 * weights.pos_3d * col_i.dot(&col_k);
                    }
                }
            }
        }
        if let Some(phi) = targets.image_points[j] {
            if m.z <= Z_EPS {
                continue;
            }
            let uv = camera.project(m)?;
            let e = uv - phi;
            value += weights.pos_2d * e.norm_squared();
            if let Some(jac) = &jacobian {
                // rows of dπ/dp at m
                let du = Vector3::new(camera.fx / m.z, 0.0, -camera.fx * m.x / (m.z * m.z));
                let dv = Vector3::new(0.0, camera.fy / m.z, -camera.fy * m.y / (m.z * m.z));
                let mut proj = [[0.0; POSE_DOF]; 2];
                for i in 0..POSE_DOF {
                    let col =
                        Vector3::new(jac[(3 * j, i)], jac[(3 * j + 1, i)], jac[(3 * j + 2, i)]);
                    proj[0][i] = du.dot(&col);
                    proj[1][i] = dv.dot(&col);
                    gradient[i] += 2.0 * weights.pos_2d * (e.x * proj[0][i] + e.y * proj[1][i]);
                }
                let h = curvature.as_mut().unwrap();
                for i in 0..POSE_DOF {
                    for k in i..POSE_DOF {
                        h[(i, k)] += 2.0
                            * weights.pos_2d
                            * (proj[0][i] * proj[0][k] + proj[1][i] * proj[1][k]);
                    }
                }
            }
        }
    }

    let lower = skeleton.limits_lower();
    let upper = skeleton.limits_upper();
    for slot in 0..ANGULAR_DOF {
        let theta = pose.0[ANGULAR_OFFSET + slot];
        let excess = if theta < lower[slot] {
            theta - lower[slot]
        } else if theta > upper[slot] {
            theta - upper[slot]
        } else {
            continue;
        };
        value += weights.limits * excess * excess;
        gradient[ANGULAR_OFFSET + slot] += 2.0 * weights.limits * excess;
        if let Some(h) = curvature.as_mut() {
            let i = ANGULAR_OFFSET + slot;
            h[(i, i)] += 2.0 * weights.limits;
        }
    }

    if let Some((prev, prev2)) = history {
        for i in 0..POSE_DOF {
            let d = pose.0[i] - 2.0 * prev.0[i] + prev2.0[i];
            value += weights.temporal * d * d;
            gradient[i] += 2.0 * weights.temporal * d;
            if let Some(h) = curvature.as_mut() {
                h[(i, i)] += 2.0 * weights.temporal;
            }
        }
    }

    if let Some(h) = curvature.as_mut() {
        h.fill_lower_triangle_with_upper_triangle();
    }

    Ok(Evaluation {
        value,
        gradient,
        curvature,
    })
}

/// Folds each joint angle back within π of its limit midpoint. Forward
/// kinematics is 2π-periodic per angle, so this leaves the data terms
/// untouched while never increasing the limit penalty; it keeps coupled
/// descent steps from settling in a wrapped angle branch.
fn rebranch_angles(pose: &mut Pose, skeleton: &Skeleton) {
    use std::f64::consts::TAU;
    for slot in 0..ANGULAR_DOF {
        let mid = 0.5 * (skeleton.limits_lower()[slot] + skeleton.limits_upper()[slot]);
        let theta = &mut pose.0[ANGULAR_OFFSET + slot];
        if (*theta - mid).abs() > TAU / 2.0 {
            *theta -= TAU * ((*theta - mid) / TAU).round();
        }
    }
}

/// Step direction conditioned by the damped Gauss-Newton curvature. The
/// damping starts at a scale-aware epsilon and grows until the factorization
/// succeeds.
fn conditioned_step(curvature: &DMatrix<f64>, gradient: &[f64; POSE_DOF]) -> [f64; POSE_DOF] {
    let g = DVector::from_column_slice(gradient);
    let scale = 1.0 + curvature.diagonal().amax();
    let mut damping = 1e-9 * scale;
    for _ in 0..12 {
        let damped = curvature + DMatrix::identity(POSE_DOF, POSE_DOF) * damping;
        if let Some(chol) = damped.cholesky() {
            let d = chol.solve(&g);
            let mut out = [0.0; POSE_DOF];
            for i in 0..POSE_DOF {
                out[i] = d[i];
            }
            return out;
        }
        damping *= 10.0;
    }
    // curvature unusable; fall back to a plain gradient step
    let mut out = [0.0; POSE_DOF];
    for i in 0..POSE_DOF {
        out[i] = gradient[i] / scale;
    }
    out
}

/// Energy value and its analytical gradient for a pose against one frame's
/// observation and tracking history.
pub fn energy(
    skeleton: &Skeleton,
    pose: &Pose,
    obs: &Observation,
    state: &TrackerState,
    camera: &Camera,
    weights: &EnergyWeights,
) -> Result<(f64, [f64; POSE_DOF])> {
    let targets = FitTargets::from_observation(obs)?;
    let eval = evaluate(
        skeleton,
        pose,
        &targets,
        state.temporal_history(),
        camera,
        weights,
        true,
    )?;
    Ok((eval.value, eval.gradient))
}

/// Runs the fixed-iteration conditioned descent from `init` and returns the
/// final pose. The returned energy never exceeds the initial energy.
pub fn optimize_pose(
    skeleton: &Skeleton,
    obs: &Observation,
    state: &TrackerState,
    camera: &Camera,
    weights: &EnergyWeights,
    init: &Pose,
) -> Result<Pose> {
    let targets = FitTargets::from_observation(obs)?;
    init.validate()?;
    let history = state.temporal_history();

    let mut pose = *init;
    for _ in 0..DESCENT_ITERATIONS {
        let eval = evaluate(skeleton, &pose, &targets, history, camera, weights, true)?;
        let mut step = conditioned_step(eval.curvature.as_ref().unwrap(), &eval.gradient);
        let mut shrink = 1.0f64;
        for (i, s) in step.iter().enumerate() {
            let cap = if i < 3 { MAX_STEP_MM } else { MAX_STEP_RAD };
            if s.abs() > cap {
                shrink = shrink.min(cap / s.abs());
            }
        }
        for s in &mut step {
            *s *= shrink;
        }
        let mut alpha = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let mut trial = pose;
            for i in 0..POSE_DOF {
                trial.0[i] -= alpha * step[i];
            }
            rebranch_angles(&mut trial, skeleton);
            let trial_value =
                evaluate(skeleton, &trial, &targets, history, camera, weights, false)?.value;
            if trial_value <= eval.value {
                pose = trial;
                break;
            }
            alpha *= 0.5;
        }
    }
    Ok(pose)
}

/// Tracks one frame: warm-starts the descent from the previous pose (or from
/// a root-aligned rest pose on the first frame) and advances the state. An
/// observation with no valid joints makes the tracker coast on its previous
/// pose.
pub fn track_frame(
    skeleton: &Skeleton,
    obs: &Observation,
    state: &TrackerState,
    camera: &Camera,
    weights: &EnergyWeights,
) -> Result<(Pose, TrackerState)> {
    let init = match state.theta_prev {
        Some(p) => p,
        None => initial_alignment(skeleton, obs),
    };
    let pose = match optimize_pose(skeleton, obs, state, camera, weights, &init) {
        Ok(p) => p,
        Err(Error::NoData) => init,
        Err(e) => return Err(e),
    };
    let next = state.advanced(pose);
    Ok((pose, next))
}

/// Rest pose with the global translation chosen so the skeleton's root joint
/// lands on the observed root.
pub fn initial_alignment(skeleton: &Skeleton, obs: &Observation) -> Pose {
    let mut pose = Pose::rest();
    pose.set_global_translation(obs.root_3d - skeleton.root_rest_offset());
    pose
}

/// Convenience wrapper: track an entire observation sequence from scratch and
/// return the per-frame poses and FK positions.
pub fn track_sequence(
    skeleton: &Skeleton,
    observations: &[Observation],
    camera: &Camera,
    weights: &EnergyWeights,
) -> Result<(Vec<Pose>, Vec<JointPositions>)> {
    let mut state = TrackerState::new();
    let mut poses = Vec::with_capacity(observations.len());
    let mut positions = Vec::with_capacity(observations.len());
    for obs in observations {
        let (pose, next) = track_frame(skeleton, obs, &state, camera, weights)?;
        positions.push(skeleton.forward_kinematics(&pose)?);
        poses.push(pose);
        state = next;
    }
    Ok((poses, positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::FINGERTIPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Camera whose projection maps the even-integer rest template to exact
    /// integer pixels at z = 750: u = cx + x/2, v = cy + y/2.
    fn exact_camera() -> Camera {
        Camera {
            fx: 375.0,
            fy: 375.0,
            ..Camera::default()
        }
    }

    /// Observation whose 3D targets and heatmap maxima agree exactly with the
    /// forward kinematics of `pose` (requires integer-pixel projections).
    fn exact_observation(skeleton: &Skeleton, camera: &Camera, pose: &Pose) -> Observation {
        let fk = skeleton.forward_kinematics(pose).unwrap();
        let root = fk.0[skeleton.root_joint()];
        let mut heatmaps = Vec::with_capacity(JOINT_COUNT);
        for j in 0..JOINT_COUNT {
            let uv = camera.project(fk.0[j]).unwrap();
            assert!(
                (uv.x - uv.x.round()).abs() < 1e-9 && (uv.y - uv.y.round()).abs() < 1e-9,
                "exact_observation needs integer projections"
            );
            let mut h = Heatmap::zeros(camera.width, camera.height, 1.0);
            h.set(uv.x.round() as usize, uv.y.round() as usize, 1.0);
            heatmaps.push(h);
        }
        Observation {
            local_positions: fk.0.map(|p| p - root),
            joint_heatmaps: heatmaps,
            root_heatmap: Heatmap::zeros(40, 30, 8.0),
            root: RootLocation {
                u: camera.project(root).unwrap().x,
                v: camera.project(root).unwrap().y,
                z: root.z,
                confidence: 1.0,
            },
            root_3d: root,
            validity_mask: [true; JOINT_COUNT],
        }
    }

    fn exact_pose() -> Pose {
        let mut pose = Pose::rest();
        pose.set_global_translation(Vector3::new(0.0, 0.0, 750.0));
        pose
    }

    #[test]
    fn energy_and_gradient_vanish_at_the_global_minimum() {
        let skeleton = Skeleton::default_hand();
        let camera = exact_camera();
        let pose = exact_pose();
        let obs = exact_observation(&skeleton, &camera, &pose);
        let state = TrackerState {
            theta_prev: Some(pose),
            theta_prev2: Some(pose),
            frame_index: 2,
        };
        let (value, gradient) = energy(
            &skeleton,
            &pose,
            &obs,
            &state,
            &camera,
            &EnergyWeights::default(),
        )
        .unwrap();
        assert_eq!(value, 0.0);
        assert!(gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn limit_penalty_arithmetic() {
        let skeleton = Skeleton::default_hand();
        let camera = exact_camera();
        let mut pose = exact_pose();
        let obs = exact_observation(&skeleton, &camera, &pose);
        let state = TrackerState::new();

        // push one DOF 0.1 rad past its upper limit and isolate the limit term
        let slot = 8; // thumb mid flexion
        let over = skeleton.limits_upper()[slot - ANGULAR_OFFSET] + 0.1;
        pose.0[slot] = over;
        let limits_only = EnergyWeights {
            pos_3d: 0.0,
            pos_2d: 0.0,
            limits: 0.03,
            temporal: 0.0,
        };
        let (value, gradient) =
            energy(&skeleton, &pose, &obs, &state, &camera, &limits_only).unwrap();
        assert!((value - 3e-4).abs() < 1e-12, "limit energy {value}");
        assert!((gradient[slot] - 2.0 * 0.03 * 0.1).abs() < 1e-12);
    }

    fn random_pose_in_limits(skeleton: &Skeleton, rng: &mut ChaCha8Rng) -> Pose {
        let mut pose = Pose::rest();
        pose.0[0] = rng.random_range(-40.0..40.0);
        pose.0[1] = rng.random_range(-40.0..40.0);
        pose.0[2] = rng.random_range(450.0..650.0);
        for k in 3..6 {
            pose.0[k] = rng.random_range(-0.4..0.4);
        }
        for slot in 0..ANGULAR_DOF {
            let lo = skeleton.limits_lower()[slot] + 1e-3;
            let hi = skeleton.limits_upper()[slot] - 1e-3;
            pose.0[ANGULAR_OFFSET + slot] = rng.random_range(lo..hi);
        }
        pose
    }

    fn noisy_observation(
        skeleton: &Skeleton,
        camera: &Camera,
        pose: &Pose,
        rng: &mut ChaCha8Rng,
    ) -> Observation {
        let fk = skeleton.forward_kinematics(pose).unwrap();
        let root = fk.0[skeleton.root_joint()];
        let mut heatmaps = Vec::with_capacity(JOINT_COUNT);
        for j in 0..JOINT_COUNT {
            let uv = camera.project(fk.0[j]).unwrap();
            let mut h = Heatmap::zeros(40, 30, 8.0);
            let cx = ((uv.x / 8.0).round() as usize).min(39);
            let cy = ((uv.y / 8.0).round() as usize).min(29);
            h.set(cx, cy, 1.0);
            heatmaps.push(h);
        }
        let noise = |rng: &mut ChaCha8Rng| {
            Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            )
        };
        Observation {
            local_positions: fk.0.map(|p| p - root + noise(rng)),
            joint_heatmaps: heatmaps,
            root_heatmap: Heatmap::zeros(40, 30, 8.0),
            root: RootLocation {
                u: 0.0,
                v: 0.0,
                z: root.z,
                confidence: 1.0,
            },
            root_3d: root + noise(rng),
            validity_mask: [true; JOINT_COUNT],
        }
    }

    #[test]
    fn gradient_matches_finite_differences_for_each_term() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);

        let only = |f: fn(&mut EnergyWeights)| {
            let mut w = EnergyWeights {
                pos_3d: 0.0,
                pos_2d: 0.0,
                limits: 0.0,
                temporal: 0.0,
            };
            f(&mut w);
            w
        };
        let variants = [
            only(|w| w.pos_3d = 0.01),
            only(|w| w.pos_2d = 5e-7),
            only(|w| w.limits = 0.03),
            only(|w| w.temporal = 1e-3),
            EnergyWeights::default(),
        ];

        for _ in 0..5 {
            let truth = random_pose_in_limits(&skeleton, &mut rng);
            let obs = noisy_observation(&skeleton, &camera, &truth, &mut rng);
            let pose = random_pose_in_limits(&skeleton, &mut rng);
            let state = TrackerState {
                theta_prev: Some(random_pose_in_limits(&skeleton, &mut rng)),
                theta_prev2: Some(random_pose_in_limits(&skeleton, &mut rng)),
                frame_index: 2,
            };
            for weights in &variants {
                let (_, grad) = energy(&skeleton, &pose, &obs, &state, &camera, weights).unwrap();
                for i in 0..POSE_DOF {
                    let h = if i < 3 { 1e-3 } else { 1e-6 };
                    let mut lo = pose;
                    let mut hi = pose;
                    lo.0[i] -= h;
                    hi.0[i] += h;
                    let (e_lo, _) = energy(&skeleton, &lo, &obs, &state, &camera, weights).unwrap();
                    let (e_hi, _) = energy(&skeleton, &hi, &obs, &state, &camera, weights).unwrap();
                    let fd = (e_hi - e_lo) / (2.0 * h);
                    let denom = grad[i].abs().max(fd.abs());
                    if denom < 1e-12 {
                        continue;
                    }
                    assert!(
                        ((grad[i] - fd) / denom).abs() < 1e-4,
                        "param {i}: analytical {} vs fd {fd}",
                        grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn optimizer_holds_still_at_the_global_minimum() {
        let skeleton = Skeleton::default_hand();
        let camera = exact_camera();
        let pose = exact_pose();
        let obs = exact_observation(&skeleton, &camera, &pose);
        let state = TrackerState {
            theta_prev: Some(pose),
            theta_prev2: Some(pose),
            frame_index: 2,
        };
        let out = optimize_pose(
            &skeleton,
            &obs,
            &state,
            &camera,
            &EnergyWeights::default(),
            &pose,
        )
        .unwrap();
        for i in 0..POSE_DOF {
            assert!((out.0[i] - pose.0[i]).abs() < 1e-9, "entry {i} drifted");
        }
    }

    #[test]
    fn recovers_from_angle_perturbation() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let truth = random_pose_in_limits(&skeleton, &mut rng);
        let obs = {
            // noise-free observation of the truth
            let mut o = noisy_observation(&skeleton, &camera, &truth, &mut rng);
            let fk = skeleton.forward_kinematics(&truth).unwrap();
            let root = fk.0[skeleton.root_joint()];
            o.local_positions = fk.0.map(|p| p - root);
            o.root_3d = root;
            o
        };
        let mut init = truth;
        for slot in 0..ANGULAR_DOF {
            init.0[ANGULAR_OFFSET + slot] += rng.random_range(-0.05..0.05);
        }
        let state = TrackerState::new();
        let out = optimize_pose(
            &skeleton,
            &obs,
            &state,
            &camera,
            &EnergyWeights::default(),
            &init,
        )
        .unwrap();
        let fk_truth = skeleton.forward_kinematics(&truth).unwrap();
        let fk_out = skeleton.forward_kinematics(&out).unwrap();
        let mean = (0..JOINT_COUNT)
            .map(|j| (fk_out.0[j] - fk_truth.0[j]).norm())
            .sum::<f64>()
            / JOINT_COUNT as f64;
        assert!(mean < 2.0, "mean joint error {mean} mm");
    }

    #[test]
    fn masked_fingertip_stays_kinematically_consistent() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let truth = random_pose_in_limits(&skeleton, &mut rng);
        // noise-free observation of the truth, index fingertip hidden
        let mut obs = noisy_observation(&skeleton, &camera, &truth, &mut rng);
        let fk_truth = skeleton.forward_kinematics(&truth).unwrap();
        let root = fk_truth.0[skeleton.root_joint()];
        obs.local_positions = fk_truth.0.map(|p| p - root);
        obs.root_3d = root;
        obs.validity_mask[FINGERTIPS[1]] = false;

        let state = TrackerState::new();
        let init = initial_alignment(&skeleton, &obs);
        let out = optimize_pose(
            &skeleton,
            &obs,
            &state,
            &camera,
            &EnergyWeights::default(),
            &init,
        )
        .unwrap();
        let fk = skeleton.forward_kinematics(&out).unwrap();
        let tip = FINGERTIPS[1];
        let parent = skeleton.joints()[tip].parent.unwrap();
        let bone = skeleton.joints()[tip].bone_length;
        assert!(((fk.0[tip] - fk.0[parent]).norm() - bone).abs() < 1e-9);
        // the unobserved distal DOF must not escape its limits
        for slot in 0..ANGULAR_DOF {
            let theta = out.0[ANGULAR_OFFSET + slot];
            assert!(theta >= skeleton.limits_lower()[slot] - 1e-6);
            assert!(theta <= skeleton.limits_upper()[slot] + 1e-6);
        }
    }

    #[test]
    fn descent_is_monotone_on_noisy_observations() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let weights = EnergyWeights::default();
        for _ in 0..10 {
            let truth = random_pose_in_limits(&skeleton, &mut rng);
            let obs = noisy_observation(&skeleton, &camera, &truth, &mut rng);
            let init = random_pose_in_limits(&skeleton, &mut rng);
            let state = TrackerState {
                theta_prev: Some(random_pose_in_limits(&skeleton, &mut rng)),
                theta_prev2: Some(random_pose_in_limits(&skeleton, &mut rng)),
                frame_index: 2,
            };
            let out = optimize_pose(&skeleton, &obs, &state, &camera, &weights, &init).unwrap();
            let (e_init, _) = energy(&skeleton, &init, &obs, &state, &camera, &weights).unwrap();
            let (e_out, _) = energy(&skeleton, &out, &obs, &state, &camera, &weights).unwrap();
            assert!(e_out <= e_init);
        }
    }

    #[test]
    fn constant_observations_reach_a_fixed_point() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let truth = random_pose_in_limits(&skeleton, &mut rng);
        let obs = noisy_observation(&skeleton, &camera, &truth, &mut rng);
        let weights = EnergyWeights::default();

        let mut state = TrackerState::new();
        let mut last: Option<Pose> = None;
        let mut final_step = f64::INFINITY;
        for _ in 0..10 {
            let (pose, next) = track_frame(&skeleton, &obs, &state, &camera, &weights).unwrap();
            if let Some(prev) = last {
                final_step = (0..POSE_DOF)
                    .map(|i| (pose.0[i] - prev.0[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
            last = Some(pose);
            state = next;
        }
        assert!(final_step < 1e-6, "still moving by {final_step}");
    }

    #[test]
    fn temporal_term_damps_acceleration_on_a_step_change() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let pose_a = random_pose_in_limits(&skeleton, &mut rng);
        let mut pose_b = pose_a;
        pose_b.0[0] += 40.0;
        pose_b.0[14] += 0.4;
        let obs_a = noisy_observation(&skeleton, &camera, &pose_a, &mut rng);
        let obs_b = noisy_observation(&skeleton, &camera, &pose_b, &mut rng);

        let accel_sum = |weights: &EnergyWeights| {
            let mut state = TrackerState::new();
            let mut poses = Vec::new();
            for t in 0..15 {
                let obs = if t < 5 { &obs_a } else { &obs_b };
                let (pose, next) = track_frame(&skeleton, obs, &state, &camera, weights).unwrap();
                poses.push(pose);
                state = next;
            }
            poses
                .windows(3)
                .map(|w| {
                    (0..POSE_DOF)
                        .map(|i| (w[2].0[i] - 2.0 * w[1].0[i] + w[0].0[i]).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
        };

        let smooth = accel_sum(&EnergyWeights::default());
        let no_temporal = EnergyWeights {
            temporal: 0.0,
            ..EnergyWeights::default()
        };
        let raw = accel_sum(&no_temporal);
        assert!(
            smooth < raw,
            "temporal prior must reduce acceleration: {smooth} vs {raw}"
        );
    }

    #[test]
    fn first_two_frames_ignore_the_temporal_term() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let pose = random_pose_in_limits(&skeleton, &mut rng);
        let obs = noisy_observation(&skeleton, &camera, &pose, &mut rng);
        let weights = EnergyWeights::default();

        // with only one frame of history the temporal term must contribute
        // nothing, whatever the history says
        let state_one = TrackerState {
            theta_prev: Some(random_pose_in_limits(&skeleton, &mut rng)),
            theta_prev2: None,
            frame_index: 1,
        };
        let state_none = TrackerState::new();
        let (a, _) = energy(&skeleton, &pose, &obs, &state_one, &camera, &weights).unwrap();
        let (b, _) = energy(&skeleton, &pose, &obs, &state_none, &camera, &weights).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_mask_coasts() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let pose = random_pose_in_limits(&skeleton, &mut rng);
        let mut obs = noisy_observation(&skeleton, &camera, &pose, &mut rng);
        obs.validity_mask = [false; JOINT_COUNT];
        let weights = EnergyWeights::default();

        assert!(matches!(
            optimize_pose(
                &skeleton,
                &obs,
                &TrackerState::new(),
                &camera,
                &weights,
                &pose
            ),
            Err(Error::NoData)
        ));

        let prev = random_pose_in_limits(&skeleton, &mut rng);
        let state = TrackerState {
            theta_prev: Some(prev),
            theta_prev2: None,
            frame_index: 1,
        };
        let (out, next) = track_frame(&skeleton, &obs, &state, &camera, &weights).unwrap();
        assert_eq!(out, prev);
        assert_eq!(next.frame_index, 2);
    }
}
