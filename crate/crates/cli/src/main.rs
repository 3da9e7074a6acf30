//! Pipeline driver: synthesize observation streams, track them, evaluate
//! against ground truth, and run the energy-term ablation.
//!
//! Every subcommand is reproducible from its flags and seed alone. Error
//! classes map to distinct exit codes: 2 invalid input, 3 i/o, 4 malformed
//! stream/config, 5 missing ground truth, 6 camera mismatch.

#![allow(clippy::needless_range_loop)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use handkin_core::Error;
use handkin_core::camera::Camera;
use handkin_core::eval::{MetricReport, TrackVariant, ablation_csv, ablation_report};
use handkin_core::localization::LocalizerState;
use handkin_core::optimizer::{EnergyWeights, TrackerState, track_frame};
use handkin_core::skeleton::{JOINT_COUNT, JointPositions, POSE_DOF, Pose, Skeleton};
use handkin_core::stream::{ObservationStream, read_observation_stream, write_observation_stream};
use handkin_core::synth::{SynthConfig, generate_sequence};

#[derive(Parser)]
#[command(name = "handkin", version, about = "kinematic hand tracking pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic observation stream.
    Synth(SynthArgs),
    /// Track an observation stream and write per-frame poses.
    Track(TrackArgs),
    /// Evaluate tracked poses against the stream's ground truth.
    Eval(EvalArgs),
    /// Compare tracking variants on one stream.
    Ablate(AblateArgs),
    /// Check analytical energy gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Skeleton config (TOML); built-in hand when omitted.
    #[arg(long, env = "HANDKIN_SKELETON")]
    skeleton: Option<PathBuf>,
    /// Camera config (TOML); built-in 320x240 camera when omitted.
    #[arg(long, env = "HANDKIN_CAMERA")]
    camera: Option<PathBuf>,
    /// Energy-weight config (TOML); built-in defaults when omitted.
    #[arg(long, env = "HANDKIN_WEIGHTS")]
    weights: Option<PathBuf>,
}

impl CommonArgs {
    fn skeleton(&self) -> Result<Skeleton, Error> {
        match &self.skeleton {
            Some(path) => Skeleton::from_config_file(path),
            None => Ok(Skeleton::default_hand()),
        }
    }

    fn camera(&self) -> Result<Camera, Error> {
        match &self.camera {
            Some(path) => Camera::from_config_file(path),
            None => Ok(Camera::default()),
        }
    }

    fn weights(&self) -> Result<EnergyWeights, Error> {
        match &self.weights {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                EnergyWeights::from_config_str(&text)
            }
            None => Ok(EnergyWeights::default()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output stream path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "HANDKIN_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Uniform half-width of per-joint position noise, mm.
    #[arg(long, default_value_t = 25.0)]
    noise_mm: f64,
    /// Uniform half-width of root position noise, mm.
    #[arg(long, default_value_t = 25.0)]
    root_noise_mm: f64,
    /// Probability a fingertip is occluded per frame.
    #[arg(long, default_value_t = 0.0)]
    occlusion_rate: f64,
    /// Probability the root heatmap maximum jumps to a random location.
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    /// Isotropic hand-size scale applied to the ground truth.
    #[arg(long, default_value_t = 1.0)]
    shape_scale: f64,
    /// Omit ground truth from the stream.
    #[arg(long)]
    no_ground_truth: bool,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input observation stream.
    #[arg(long)]
    stream: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Tracking variant: full | 3d_only | 2d_only | raw_predictions.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Calibrate bone lengths from this many ground-truth frames first.
    #[arg(long, default_value_t = 0)]
    calibrate_frames: usize,
    /// Decay factor for uncertain root maxima.
    #[arg(long, default_value_t = 0.98)]
    delta: f64,
    /// Root-heatmap likelihood below which a jumping maximum is uncertain.
    #[arg(long, default_value_t = 0.1)]
    conf_threshold: f64,
    /// Jump distance (px) beyond which a low-likelihood maximum is uncertain.
    #[arg(long, default_value_t = 30.0)]
    jump_threshold: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Observation stream carrying ground truth.
    #[arg(long)]
    stream: PathBuf,
    /// poses.csv produced by `track`.
    #[arg(long)]
    poses: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Observation stream carrying ground truth.
    #[arg(long)]
    stream: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, env = "HANDKIN_SEED", default_value_t = 2024)]
    seed: u64,
    /// Number of random configurations to test.
    #[arg(long, default_value_t = 100)]
    configs: usize,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Track(args) => run_track(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_)
        | Error::NonFinitePose { .. }
        | Error::BehindCamera { .. }
        | Error::InvalidDepth { .. }
        | Error::DepthHole { .. }
        | Error::NoData
        | Error::CalibrationFailure(_) => 2,
        Error::Io { .. } => 3,
        Error::Format(_) => 4,
        Error::MissingGroundTruth => 5,
        Error::CameraMismatch => 6,
    }
}

fn run_synth(args: SynthArgs) -> Result<(), Error> {
    let skeleton = args.common.skeleton()?;
    let camera = args.common.camera()?;
    let mut config = SynthConfig::new(&skeleton, args.frames, args.seed);
    config.position_noise_mm = args.noise_mm;
    config.root_noise_mm = args.root_noise_mm;
    config.occlusion_rate = args.occlusion_rate;
    config.outlier_rate = args.outlier_rate;
    config.shape_scale = args.shape_scale;

    let started = Instant::now();
    let seq = generate_sequence(&skeleton, &camera, &config)?;
    let ground_truth = (!args.no_ground_truth).then_some(&seq.ground_truth);
    write_observation_stream(&args.out, &seq.observations, ground_truth, &camera)?;
    println!(
        "wrote {} frames to {} in {:.1} ms (seed {}, noise ±{} mm, root ±{} mm, occlusion {}, outliers {})",
        args.frames,
        args.out.display(),
        started.elapsed().as_secs_f64() * 1e3,
        args.seed,
        args.noise_mm,
        args.root_noise_mm,
        args.occlusion_rate,
        args.outlier_rate,
    );
    Ok(())
}

/// Writes `data` to `dir/name` atomically via a temp file and rename.
fn write_atomic(dir: &Path, name: &str, data: &str) -> Result<PathBuf, Error> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, data).map_err(|e| Error::Io {
        path: tmp.clone(),
        source: e,
    })?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

fn load_stream(args: &CommonArgs, path: &Path) -> Result<(ObservationStream, Camera), Error> {
    // with an explicit camera config the header must agree; otherwise the
    // header camera is authoritative
    let expected = match &args.camera {
        Some(p) => Some(Camera::from_config_file(p)?),
        None => None,
    };
    let stream = read_observation_stream(path, expected.as_ref())?;
    let camera = stream.camera.clone();
    Ok((stream, camera))
}

fn run_track(args: TrackArgs) -> Result<(), Error> {
    let mut skeleton = args.common.skeleton()?;
    let weights = args.common.weights()?;
    let variant = TrackVariant::from_name(&args.variant)?;
    let (stream, camera) = load_stream(&args.common, &args.stream)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    if args.calibrate_frames > 0 {
        let gt = stream.require_ground_truth()?;
        let n = args.calibrate_frames.min(gt.positions.len());
        skeleton = skeleton.calibrate_bone_lengths(&gt.positions[..n])?;
        println!("calibrated bone lengths from {n} ground-truth frames");
    }

    let effective = variant.weights(&weights);
    let mut tracker = TrackerState::new();
    let mut localizer = LocalizerState {
        delta: args.delta,
        confidence_threshold: args.conf_threshold,
        jump_threshold: args.jump_threshold,
        ..LocalizerState::default()
    };
    let mut poses_csv = String::from("frame");
    for i in 0..POSE_DOF {
        let _ = write!(poses_csv, ",theta{i}");
    }
    for j in 0..JOINT_COUNT {
        let _ = write!(poses_csv, ",j{j}x,j{j}y,j{j}z");
    }
    poses_csv.push('\n');
    let mut root_csv = String::from("frame,u,v,confidence,frames_since_confident\n");

    let mut localization_ms = 0.0;
    let mut tracking_ms = 0.0;
    for (t, obs) in stream.observations.iter().enumerate() {
        let start = Instant::now();
        let (root, next_localizer) = localizer.update(&obs.root_heatmap)?;
        localizer = next_localizer;
        localization_ms += start.elapsed().as_secs_f64() * 1e3;
        let _ = writeln!(
            root_csv,
            "{t},{},{},{},{}",
            root.u, root.v, root.confidence, localizer.frames_since_confident
        );

        let start = Instant::now();
        let positions = if variant == TrackVariant::RawPredictions {
            JointPositions(obs.global_positions())
        } else {
            let (pose, next) = track_frame(&skeleton, obs, &tracker, &camera, &effective)?;
            tracker = next;
            let fk = skeleton.forward_kinematics(&pose)?;
            let _ = write!(poses_csv, "{t}");
            for v in pose.as_slice() {
                let _ = write!(poses_csv, ",{v}");
            }
            for p in &fk.0 {
                let _ = write!(poses_csv, ",{},{},{}", p.x, p.y, p.z);
            }
            poses_csv.push('\n');
            fk
        };
        if variant == TrackVariant::RawPredictions {
            let _ = write!(poses_csv, "{t}");
            for _ in 0..POSE_DOF {
                let _ = write!(poses_csv, ",nan");
            }
            for p in &positions.0 {
                let _ = write!(poses_csv, ",{},{},{}", p.x, p.y, p.z);
            }
            poses_csv.push('\n');
        }
        tracking_ms += start.elapsed().as_secs_f64() * 1e3;
    }

    let frames = stream.observations.len().max(1);
    let mut timing_csv = String::from("stage,total_ms,mean_ms_per_frame\n");
    for (stage, total) in [
        ("localization", localization_ms),
        ("pose_tracking", tracking_ms),
        ("total", localization_ms + tracking_ms),
    ] {
        let _ = writeln!(timing_csv, "{stage},{total},{}", total / frames as f64);
    }

    write_atomic(&args.out, "poses.csv", &poses_csv)?;
    write_atomic(&args.out, "root_track.csv", &root_csv)?;
    write_atomic(&args.out, "timing.csv", &timing_csv)?;
    println!(
        "tracked {} frames ({}) — localization {:.3} ms/frame, pose tracking {:.3} ms/frame",
        stream.observations.len(),
        variant.name(),
        localization_ms / frames as f64,
        tracking_ms / frames as f64,
    );
    Ok(())
}

fn parse_poses_csv(path: &Path) -> Result<Vec<JointPositions>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("frame,theta0") {
                return Err(Error::Format("unrecognized poses.csv header".into()));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + POSE_DOF + 3 * JOINT_COUNT {
            return Err(Error::Format(format!(
                "poses.csv line {}: expected {} fields, got {}",
                i + 1,
                1 + POSE_DOF + 3 * JOINT_COUNT,
                fields.len()
            )));
        }
        let mut positions = JointPositions::zeros();
        for j in 0..JOINT_COUNT {
            let base = 1 + POSE_DOF + 3 * j;
            let mut coords = [0.0; 3];
            for (c, coord) in coords.iter_mut().enumerate() {
                *coord = fields[base + c]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("poses.csv line {}: {e}", i + 1)))?;
            }
            positions.0[j] = Vector3::new(coords[0], coords[1], coords[2]);
        }
        out.push(positions);
    }
    Ok(out)
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let (stream, camera) = load_stream(&args.common, &args.stream)?;
    let truth = stream.require_ground_truth()?;
    let pred = parse_poses_csv(&args.poses)?;
    if pred.len() != truth.positions.len() {
        return Err(Error::InvalidInput(format!(
            "poses file has {} frames, stream has {}",
            pred.len(),
            truth.positions.len()
        )));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let thresholds_3d: Vec<f64> = (0..=120).map(|i| i as f64 * 0.5).collect();
    let thresholds_2d: Vec<f64> = (0..=60).map(|i| i as f64 * 0.5).collect();
    let report = MetricReport::compute(
        &pred,
        &truth.positions,
        &camera,
        &thresholds_3d,
        &thresholds_2d,
    )?;
    report.write_csv_files(&args.out)?;
    println!(
        "evaluated {} frames — mean 3D {:.4} mm (median {:.4}), mean 2D {:.3} px, fingertips {:.4} mm",
        pred.len(),
        report.summary_3d.mean,
        report.summary_3d.median,
        report.summary_2d.mean,
        report.summary_fingertip.mean,
    );
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<(), Error> {
    let skeleton = args.common.skeleton()?;
    let weights = args.common.weights()?;
    let (stream, camera) = load_stream(&args.common, &args.stream)?;
    let truth = stream.require_ground_truth()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let rows = ablation_report(
        &skeleton,
        &camera,
        &stream.observations,
        &truth.positions,
        &weights,
        &TrackVariant::ALL,
    )?;
    write_atomic(&args.out, "ablation.csv", &ablation_csv(&rows))?;
    println!("variant            fingertip_mm   jitter_mm");
    for row in &rows {
        println!(
            "{:<18} {:>12.3} {:>11.3}",
            row.variant.name(),
            row.mean_fingertip_mm,
            row.mean_jitter_mm
        );
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    use handkin_core::localization::Heatmap;
    use handkin_core::optimizer::{Observation, energy};
    use handkin_core::skeleton::{ANGULAR_DOF, ANGULAR_OFFSET};
    use rand::{Rng, SeedableRng};

    let skeleton = args.common.skeleton()?;
    let camera = args.common.camera()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);

    let random_pose = |rng: &mut rand_chacha::ChaCha8Rng| {
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
    };

    let variants = [
        (
            "pos_3d",
            EnergyWeights {
                pos_3d: 0.01,
                pos_2d: 0.0,
                limits: 0.0,
                temporal: 0.0,
            },
        ),
        (
            "pos_2d",
            EnergyWeights {
                pos_3d: 0.0,
                pos_2d: 5e-7,
                limits: 0.0,
                temporal: 0.0,
            },
        ),
        (
            "limits",
            EnergyWeights {
                pos_3d: 0.0,
                pos_2d: 0.0,
                limits: 0.03,
                temporal: 0.0,
            },
        ),
        (
            "temporal",
            EnergyWeights {
                pos_3d: 0.0,
                pos_2d: 0.0,
                limits: 0.0,
                temporal: 1e-3,
            },
        ),
        ("total", EnergyWeights::default()),
    ];
    let mut worst = [0.0f64; 5];

    for case in 0..args.configs {
        let truth = random_pose(&mut rng);
        let fk = skeleton.forward_kinematics(&truth)?;
        let root = fk.0[skeleton.root_joint()];
        let mut heatmaps = Vec::with_capacity(JOINT_COUNT);
        for j in 0..JOINT_COUNT {
            let uv = camera.project(fk.0[j])?;
            let mut h = Heatmap::zeros(40, 30, 8.0);
            let cx = ((uv.x / 8.0).round() as usize).min(39);
            let cy = ((uv.y / 8.0).round() as usize).min(29);
            h.set(cx, cy, 1.0);
            heatmaps.push(h);
        }
        let noise = |rng: &mut rand_chacha::ChaCha8Rng| {
            Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            )
        };
        let obs = Observation {
            local_positions: fk.0.map(|p| p - root + noise(&mut rng)),
            joint_heatmaps: heatmaps,
            root_heatmap: Heatmap::zeros(40, 30, 8.0),
            root: handkin_core::camera::RootLocation {
                u: 0.0,
                v: 0.0,
                z: root.z,
                confidence: 1.0,
            },
            root_3d: root + noise(&mut rng),
            validity_mask: [true; JOINT_COUNT],
        };
        let mut pose = random_pose(&mut rng);
        if case % 2 == 1 {
            pose.0[ANGULAR_OFFSET + case % ANGULAR_DOF] =
                skeleton.limits_upper()[case % ANGULAR_DOF] + 0.3;
        }
        let state = TrackerState {
            theta_prev: Some(random_pose(&mut rng)),
            theta_prev2: Some(random_pose(&mut rng)),
            frame_index: 2,
        };
        for (k, (_, weights)) in variants.iter().enumerate() {
            let (_, grad) = energy(&skeleton, &pose, &obs, &state, &camera, weights)?;
            let mut fd = [0.0; POSE_DOF];
            for i in 0..POSE_DOF {
                let h = if i < 3 { 1e-3 } else { 1e-6 };
                let mut lo = pose;
                let mut hi = pose;
                lo.0[i] -= h;
                hi.0[i] += h;
                let (e_lo, _) = energy(&skeleton, &lo, &obs, &state, &camera, weights)?;
                let (e_hi, _) = energy(&skeleton, &hi, &obs, &state, &camera, weights)?;
                fd[i] = (e_hi - e_lo) / (2.0 * h);
            }
            let diff: f64 = (0..POSE_DOF)
                .map(|i| (grad[i] - fd[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = (0..POSE_DOF)
                .map(|i| grad[i].powi(2).max(fd[i].powi(2)))
                .sum::<f64>()
                .sqrt();
            if scale > 1e-12 {
                worst[k] = worst[k].max(diff / scale);
            }
        }
    }

    let mut failed = false;
    for ((name, _), value) in variants.iter().zip(&worst) {
        let ok = *value < 1e-4;
        failed |= !ok;
        println!(
            "{name:<10} max relative gradient error {value:.3e}  [{}]",
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::InvalidInput(
            "analytical gradient disagrees with finite differences".into(),
        ));
    }
    Ok(())
}
