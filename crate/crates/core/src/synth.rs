//! Synthetic observation generator: a seeded, geometry-only stand-in for the
//! learned per-frame predictors, plus the ground truth to evaluate against.
//!
//! Motion is a per-DOF sinusoid clipped to the joint limits; the root follows
//! a sinusoidal 3D path. Per frame the generator emits root-relative joint
//! positions, per-joint heatmaps, the root heatmap, and the resolved root,
//! optionally corrupted by uniform position noise, fingertip occlusions, and
//! root-heatmap outliers.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, RootLocation};
use crate::error::{Error, Result};
use crate::localization::Heatmap;
use crate::optimizer::Observation;
use crate::skeleton::{
    ANGULAR_DOF, ANGULAR_OFFSET, FINGERTIPS, JOINT_COUNT, JointPositions, POSE_DOF, Pose, Skeleton,
    global_rotation_matrix,
};

/// One sinusoidal degree of freedom: `center + amplitude · sin(2πt/period + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub center: f64,
    pub amplitude: f64,
    /// Period in frames.
    pub period: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn constant(value: f64) -> Sinusoid {
        Sinusoid {
            center: value,
            amplitude: 0.0,
            period: 1.0,
            phase: 0.0,
        }
    }

    pub fn at(&self, frame: usize) -> f64 {
        self.center
            + self.amplitude
                * (std::f64::consts::TAU * frame as f64 / self.period + self.phase).sin()
    }
}

/// Grid dimensions and grid-to-image scale of generated heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSpec {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
}

impl HeatmapSpec {
    /// 40×30 grid over a 320×240 image.
    pub fn coarse() -> HeatmapSpec {
        HeatmapSpec {
            width: 40,
            height: 30,
            scale: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub seed: u64,
    /// Sinusoids for pose slots 3..26 (global rotation, then joint angles);
    /// joint angles are clipped to the skeleton limits.
    pub motion: Vec<Sinusoid>,
    /// Root trajectory per axis, mm.
    pub root_path: [Sinusoid; 3],
    /// Uniform half-width of the per-joint position noise, mm.
    pub position_noise_mm: f64,
    /// Uniform half-width of the root position noise, mm.
    pub root_noise_mm: f64,
    /// Probability that a fingertip is occluded in a frame.
    pub occlusion_rate: f64,
    /// Probability that the root heatmap maximum jumps to a random location.
    pub outlier_rate: f64,
    /// Gaussian blob width, heatmap grid px.
    pub heatmap_sigma: f64,
    /// Isotropic bone-length scale β applied to the ground-truth hand.
    pub shape_scale: f64,
    pub root_heatmap: HeatmapSpec,
    pub joint_heatmap: HeatmapSpec,
    /// Externally supplied ground-truth poses, overriding the motion model.
    pub explicit_poses: Option<Vec<Pose>>,
}

impl SynthConfig {
    /// Default motion for the given skeleton: every DOF oscillates inside its
    /// limits with staggered periods and the root sweeps a gentle 3D path in
    /// front of the camera. Noise defaults to ±25 mm on joints and root;
    /// occlusions and outliers are off.
    pub fn new(skeleton: &Skeleton, frames: usize, seed: u64) -> SynthConfig {
        let mut motion = Vec::with_capacity(POSE_DOF - 3);
        let rot_amp = [0.25, 0.2, 0.3];
        let rot_period = [170.0, 140.0, 190.0];
        let rot_phase = [0.0, 0.7, 1.3];
        for k in 0..3 {
            motion.push(Sinusoid {
                center: 0.0,
                amplitude: rot_amp[k],
                period: rot_period[k],
                phase: rot_phase[k],
            });
        }
        for slot in 0..ANGULAR_DOF {
            let lo = skeleton.limits_lower()[slot];
            let hi = skeleton.limits_upper()[slot];
            let margin = 0.05 * (hi - lo);
            motion.push(Sinusoid {
                center: 0.0f64.clamp(lo + margin, hi - margin),
                amplitude: 0.35 * 0.5 * (hi - lo),
                period: 60.0 + 7.0 * slot as f64,
                phase: 0.37 * slot as f64,
            });
        }
        SynthConfig {
            frames,
            seed,
            motion,
            root_path: [
                Sinusoid {
                    center: 0.0,
                    amplitude: 25.0,
                    period: 160.0,
                    phase: 0.0,
                },
                Sinusoid {
                    center: -10.0,
                    amplitude: 20.0,
                    period: 190.0,
                    phase: 0.9,
                },
                Sinusoid {
                    center: 550.0,
                    amplitude: 60.0,
                    period: 150.0,
                    phase: 0.6,
                },
            ],
            position_noise_mm: 25.0,
            root_noise_mm: 25.0,
            occlusion_rate: 0.0,
            outlier_rate: 0.0,
            heatmap_sigma: 2.0,
            shape_scale: 1.0,
            root_heatmap: HeatmapSpec::coarse(),
            joint_heatmap: HeatmapSpec::coarse(),
            explicit_poses: None,
        }
    }

    /// Same motion with all noise and corruption off.
    pub fn noiseless(skeleton: &Skeleton, frames: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            position_noise_mm: 0.0,
            root_noise_mm: 0.0,
            occlusion_rate: 0.0,
            outlier_rate: 0.0,
            ..SynthConfig::new(skeleton, frames, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("occlusion_rate", self.occlusion_rate),
            ("outlier_rate", self.outlier_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} must be in [0, 1]")));
            }
        }
        if self.heatmap_sigma <= 0.0 {
            return Err(Error::InvalidInput("heatmap_sigma must be positive".into()));
        }
        if self.motion.len() != POSE_DOF - 3 {
            return Err(Error::InvalidInput(format!(
                "motion model needs {} sinusoids, got {}",
                POSE_DOF - 3,
                self.motion.len()
            )));
        }
        if self.position_noise_mm < 0.0 || self.root_noise_mm < 0.0 {
            return Err(Error::InvalidInput("noise half-widths must be >= 0".into()));
        }
        if self.shape_scale <= 0.0 {
            return Err(Error::InvalidInput("shape_scale must be positive".into()));
        }
        if let Some(poses) = &self.explicit_poses
            && poses.len() < self.frames
        {
            return Err(Error::InvalidInput(
                "explicit pose trajectory shorter than the sequence".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth of a generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<Pose>,
    pub positions: Vec<JointPositions>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub observations: Vec<Observation>,
    pub ground_truth: GroundTruth,
}

/// Renders a Gaussian blob of the given amplitude onto a fresh heatmap. The
/// center and sigma are in heatmap grid px.
pub fn gaussian_heatmap(
    spec: &HeatmapSpec,
    center: Vector2<f64>,
    sigma: f64,
    amplitude: f64,
) -> Heatmap {
    let mut heatmap = Heatmap::zeros(spec.width, spec.height, spec.scale);
    let denom = 2.0 * sigma * sigma;
    for row in 0..spec.height {
        for col in 0..spec.width {
            let d2 = (col as f64 - center.x).powi(2) + (row as f64 - center.y).powi(2);
            heatmap.set(col, row, (amplitude * (-d2 / denom).exp()) as f32);
        }
    }
    heatmap
}

/// Generates a deterministic observation sequence with ground truth.
pub fn generate_sequence(
    skeleton: &Skeleton,
    camera: &Camera,
    config: &SynthConfig,
) -> Result<SynthSequence> {
    config.validate()?;
    let truth_skeleton = skeleton.scaled(config.shape_scale);
    let root_offset = truth_skeleton.root_rest_offset();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut observations = Vec::with_capacity(config.frames);
    let mut gt_poses = Vec::with_capacity(config.frames);
    let mut gt_positions = Vec::with_capacity(config.frames);
    // Persistent forward shift applied when a frame would put joints behind
    // the camera.
    let mut z_adjust = 0.0;

    for t in 0..config.frames {
        let mut tries = 0;
        let (pose, positions) = loop {
            let candidate = match &config.explicit_poses {
                Some(poses) => poses[t],
                None => {
                    let mut pose = Pose::rest();
                    for (k, sinusoid) in config.motion.iter().enumerate() {
                        let slot = 3 + k;
                        let mut value = sinusoid.at(t);
                        if slot >= ANGULAR_OFFSET {
                            let i = slot - ANGULAR_OFFSET;
                            value = value.clamp(
                                truth_skeleton.limits_lower()[i],
                                truth_skeleton.limits_upper()[i],
                            );
                        }
                        pose.0[slot] = value;
                    }
                    let root_target = Vector3::new(
                        config.root_path[0].at(t),
                        config.root_path[1].at(t),
                        config.root_path[2].at(t) + z_adjust,
                    );
                    let rot = global_rotation_matrix(pose.global_rotation());
                    pose.set_global_translation(root_target - rot * root_offset);
                    pose
                }
            };
            let positions = truth_skeleton.forward_kinematics(&candidate)?;
            if positions.0.iter().all(|p| p.z > 1.0) {
                break (candidate, positions);
            }
            tries += 1;
            if config.explicit_poses.is_some() || tries >= 10 {
                return Err(Error::InvalidInput(format!(
                    "frame {t} places joints behind the camera"
                )));
            }
            z_adjust += 100.0;
        };

        let root_true = positions.0[truth_skeleton.root_joint()];

        // Draw order is fixed so that streams stay comparable across noise
        // settings sharing a seed.
        let uniform = |rng: &mut ChaCha8Rng, half_width: f64| -> Vector3<f64> {
            Vector3::new(
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ) * half_width
        };
        let mut local_positions = [Vector3::zeros(); JOINT_COUNT];
        for j in 0..JOINT_COUNT {
            local_positions[j] =
                positions.0[j] - root_true + uniform(&mut rng, config.position_noise_mm);
        }
        let root_noisy = root_true + uniform(&mut rng, config.root_noise_mm);
        if root_noisy.z <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "frame {t}: root noise pushed the root behind the camera"
            )));
        }

        let mut validity_mask = [true; JOINT_COUNT];
        let mut occluded = [false; FINGERTIPS.len()];
        for (i, &tip) in FINGERTIPS.iter().enumerate() {
            occluded[i] = config.occlusion_rate > 0.0 && rng.random_bool(config.occlusion_rate);
            if occluded[i] {
                validity_mask[tip] = false;
            }
        }

        let mut joint_heatmaps = Vec::with_capacity(JOINT_COUNT);
        for (j, position) in positions.0.iter().enumerate() {
            let uv = camera.project(*position)?;
            let amplitude = match FINGERTIPS.iter().position(|&tip| tip == j) {
                Some(i) if occluded[i] => 0.02 + 0.07 * rng.random_range(0.0..1.0),
                _ => 1.0,
            };
            joint_heatmaps.push(gaussian_heatmap(
                &config.joint_heatmap,
                uv / config.joint_heatmap.scale,
                config.heatmap_sigma,
                amplitude,
            ));
        }

        let root_uv_true = camera.project(root_true)?;
        let root_heatmap = if config.outlier_rate > 0.0 && rng.random_bool(config.outlier_rate) {
            // localization failure: a weak spurious maximum somewhere random,
            // the true root barely visible beneath it
            let spurious = Vector2::new(
                rng.random_range(0.0..config.root_heatmap.width as f64),
                rng.random_range(0.0..config.root_heatmap.height as f64),
            );
            let amplitude = 0.03 + 0.06 * rng.random_range(0.0..1.0);
            let mut h = gaussian_heatmap(
                &config.root_heatmap,
                spurious,
                config.heatmap_sigma,
                amplitude,
            );
            let faint = gaussian_heatmap(
                &config.root_heatmap,
                root_uv_true / config.root_heatmap.scale,
                config.heatmap_sigma,
                0.02,
            );
            for (a, b) in h.values.iter_mut().zip(&faint.values) {
                *a = a.max(*b);
            }
            h
        } else {
            gaussian_heatmap(
                &config.root_heatmap,
                root_uv_true / config.root_heatmap.scale,
                config.heatmap_sigma,
                1.0,
            )
        };

        let root_uv = camera.project(root_noisy)?;
        observations.push(Observation {
            local_positions,
            joint_heatmaps,
            root_heatmap,
            root: RootLocation {
                u: root_uv.x,
                v: root_uv.y,
                z: root_noisy.z,
                confidence: 1.0,
            },
            root_3d: root_noisy,
            validity_mask,
        });
        gt_poses.push(pose);
        gt_positions.push(positions);
    }

    Ok(SynthSequence {
        observations,
        ground_truth: GroundTruth {
            poses: gt_poses,
            positions: gt_positions,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::argmax;
    use crate::optimizer::{EnergyWeights, track_sequence};

    #[test]
    fn noiseless_observations_reproduce_ground_truth() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let config = SynthConfig::noiseless(&skeleton, 30, 9);
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        for (obs, truth) in seq.observations.iter().zip(&seq.ground_truth.positions) {
            let global = obs.global_positions();
            for j in 0..JOINT_COUNT {
                assert!((global[j] - truth.0[j]).norm() < 1e-9);
            }
            assert!(obs.validity_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn noiseless_tracking_recovers_ground_truth() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let config = SynthConfig::noiseless(&skeleton, 20, 15);
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        let (_, positions) = track_sequence(
            &skeleton,
            &seq.observations,
            &camera,
            &EnergyWeights::default(),
        )
        .unwrap();
        for (t, (pred, truth)) in positions
            .iter()
            .zip(&seq.ground_truth.positions)
            .enumerate()
            .skip(3)
        {
            let mean = (0..JOINT_COUNT)
                .map(|j| (pred.0[j] - truth.0[j]).norm())
                .sum::<f64>()
                / JOINT_COUNT as f64;
            assert!(mean < 1e-3, "frame {t}: mean error {mean} mm");
        }
    }

    #[test]
    fn position_noise_is_bounded_by_both_contributions() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut config = SynthConfig::new(&skeleton, 40, 21);
        config.position_noise_mm = 25.0;
        config.root_noise_mm = 25.0;
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        let mut max_dev: f64 = 0.0;
        for (obs, truth) in seq.observations.iter().zip(&seq.ground_truth.positions) {
            let global = obs.global_positions();
            for j in 0..JOINT_COUNT {
                for c in 0..3 {
                    max_dev = max_dev.max((global[j][c] - truth.0[j][c]).abs());
                }
            }
        }
        assert!(max_dev <= 50.0 + 1e-9, "deviation {max_dev} mm");
        assert!(max_dev > 10.0, "noise should actually show up");
    }

    #[test]
    fn gaussian_blob_arithmetic() {
        let spec = HeatmapSpec {
            width: 40,
            height: 30,
            scale: 8.0,
        };
        let h = gaussian_heatmap(&spec, Vector2::new(10.0, 10.0), 2.0, 1.0);
        let expected = (-4.0f64 / 8.0).exp();
        assert!((h.at(12, 10) as f64 - expected).abs() < 1e-6);
        assert!((h.at(10, 10) as f64 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn heatmap_maxima_stay_near_projected_truth() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let config = SynthConfig::new(&skeleton, 60, 33);
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        for (obs, truth) in seq.observations.iter().zip(&seq.ground_truth.positions) {
            for j in 0..JOINT_COUNT {
                if !obs.validity_mask[j] {
                    continue;
                }
                let (uv, _) = argmax(&obs.joint_heatmaps[j]).unwrap();
                let proj = camera.project(truth.0[j]).unwrap();
                let scale = obs.joint_heatmaps[j].grid_to_image_scale;
                assert!(
                    (uv - proj).norm() / scale <= 0.5 * 2.0f64.sqrt() + 1e-9,
                    "joint {j} maximum {uv:?} far from {proj:?}"
                );
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_sequences() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut config = SynthConfig::new(&skeleton, 25, 42);
        config.occlusion_rate = 0.2;
        config.outlier_rate = 0.2;
        let a = generate_sequence(&skeleton, &camera, &config).unwrap();
        let b = generate_sequence(&skeleton, &camera, &config).unwrap();
        assert_eq!(a, b);
        config.seed = 43;
        let c = generate_sequence(&skeleton, &camera, &config).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn occlusions_mask_fingertips_and_weaken_their_heatmaps() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut config = SynthConfig::new(&skeleton, 80, 55);
        config.occlusion_rate = 0.5;
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        let mut saw_occlusion = false;
        for obs in &seq.observations {
            for &tip in &FINGERTIPS {
                if !obs.validity_mask[tip] {
                    saw_occlusion = true;
                    let (_, likelihood) = argmax(&obs.joint_heatmaps[tip]).unwrap();
                    assert!(likelihood < 0.1, "occluded tip likelihood {likelihood}");
                }
            }
            for j in 0..JOINT_COUNT {
                if !FINGERTIPS.contains(&j) {
                    assert!(obs.validity_mask[j], "only fingertips may be occluded");
                }
            }
        }
        assert!(saw_occlusion);
    }

    #[test]
    fn outlier_frames_have_weak_misplaced_root_maxima() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut config = SynthConfig::new(&skeleton, 100, 77);
        config.outlier_rate = 0.3;
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        let mut outliers = 0;
        for (obs, truth) in seq.observations.iter().zip(&seq.ground_truth.positions) {
            let (uv, likelihood) = argmax(&obs.root_heatmap).unwrap();
            let proj = camera.project(truth.0[skeleton.root_joint()]).unwrap();
            if likelihood < 0.1 {
                outliers += 1;
            } else {
                assert!((uv - proj).norm() <= 8.0, "clean frame maximum drifted");
            }
        }
        assert!(outliers > 10, "expected outlier frames, saw {outliers}");
    }

    #[test]
    fn explicit_pose_trajectories_are_honored() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut pose = Pose::rest();
        pose.set_global_translation(Vector3::new(0.0, 0.0, 600.0));
        let mut config = SynthConfig::noiseless(&skeleton, 4, 1);
        config.explicit_poses = Some(vec![pose; 4]);
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        assert_eq!(seq.ground_truth.poses, vec![pose; 4]);
    }

    #[test]
    fn behind_camera_trajectories_are_shifted_or_rejected() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut config = SynthConfig::noiseless(&skeleton, 3, 1);
        config.root_path[2] = Sinusoid::constant(-200.0);
        // the motion model may shift the trajectory forward
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        assert!(
            seq.ground_truth
                .positions
                .iter()
                .all(|f| f.0.iter().all(|p| p.z > 0.0))
        );

        // an explicit trajectory behind the camera is an error
        let mut bad = Pose::rest();
        bad.set_global_translation(Vector3::new(0.0, 0.0, -500.0));
        config.explicit_poses = Some(vec![bad; 3]);
        assert!(matches!(
            generate_sequence(&skeleton, &camera, &config),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn shape_scale_scales_the_ground_truth_hand() {
        let skeleton = Skeleton::default_hand();
        let camera = Camera::default();
        let mut config = SynthConfig::noiseless(&skeleton, 5, 3);
        config.shape_scale = 1.2;
        let seq = generate_sequence(&skeleton, &camera, &config).unwrap();
        let calibrated = skeleton
            .calibrate_bone_lengths(&seq.ground_truth.positions)
            .unwrap();
        for (orig, cal) in skeleton.joints().iter().zip(calibrated.joints()) {
            if orig.parent.is_some() {
                assert!((cal.bone_length - 1.2 * orig.bone_length).abs() < 1e-9);
            }
        }
    }
}
