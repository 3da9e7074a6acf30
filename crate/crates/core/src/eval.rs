//! Error metrics, threshold curves, and the tracking-variant ablation.

use std::fmt::Write as _;
use std::path::Path;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::optimizer::{EnergyWeights, Observation, track_sequence};
use crate::skeleton::{FINGERTIPS, JOINT_COUNT, JointPositions, Skeleton};

/// Mean 3D Euclidean distance (mm) between predicted and ground-truth joints
/// over the given joint subset.
pub fn joint_error_3d(
    pred: &JointPositions,
    truth: &JointPositions,
    subset: &[usize],
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("empty joint subset".into()));
    }
    let mut sum = 0.0;
    for &j in subset {
        if j >= JOINT_COUNT {
            return Err(Error::InvalidInput(format!("joint index {j} out of range")));
        }
        sum += (pred.0[j] - truth.0[j]).norm();
    }
    Ok(sum / subset.len() as f64)
}

/// Mean 2D reprojection distance (px) over the subset. Joints that do not
/// project (at or behind the camera plane) are skipped; if none project the
/// error is infinite.
pub fn joint_error_2d(
    pred: &JointPositions,
    truth: &JointPositions,
    camera: &Camera,
    subset: &[usize],
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("empty joint subset".into()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for &j in subset {
        if j >= JOINT_COUNT {
            return Err(Error::InvalidInput(format!("joint index {j} out of range")));
        }
        let (Ok(a), Ok(b)) = (camera.project(pred.0[j]), camera.project(truth.0[j])) else {
            continue;
        };
        sum += (a - b).norm();
        n += 1;
    }
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(sum / n as f64)
}

/// Fraction of errors at or below each threshold. Thresholds must be sorted
/// ascending.
pub fn threshold_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("no errors to summarize".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("thresholds must be sorted".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let correct = errors.iter().filter(|&&e| e <= t).count();
            (t, correct as f64 / errors.len() as f64)
        })
        .collect())
}

/// All-joint subset, in joint order.
pub fn all_joints() -> Vec<usize> {
    (0..JOINT_COUNT).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerFrameErrors {
    pub frame: usize,
    pub mean_3d_mm: f64,
    pub mean_2d_px: f64,
    pub fingertip_3d_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> MetricSummary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MetricSummary {
            mean,
            median,
            std: var.sqrt(),
        }
    }
}

/// Per-frame errors, threshold curves, and summaries for one tracked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_frame: Vec<PerFrameErrors>,
    pub curve_3d: Vec<(f64, f64)>,
    pub curve_2d: Vec<(f64, f64)>,
    pub summary_3d: MetricSummary,
    pub summary_2d: MetricSummary,
    pub summary_fingertip: MetricSummary,
}

impl MetricReport {
    pub fn compute(
        pred: &[JointPositions],
        truth: &[JointPositions],
        camera: &Camera,
        thresholds_3d: &[f64],
        thresholds_2d: &[f64],
    ) -> Result<MetricReport> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidInput(
                "prediction and ground-truth lengths differ".into(),
            ));
        }
        if pred.is_empty() {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        let joints = all_joints();
        let mut per_frame = Vec::with_capacity(pred.len());
        for (t, (p, g)) in pred.iter().zip(truth).enumerate() {
            per_frame.push(PerFrameErrors {
                frame: t,
                mean_3d_mm: joint_error_3d(p, g, &joints)?,
                mean_2d_px: joint_error_2d(p, g, camera, &joints)?,
                fingertip_3d_mm: joint_error_3d(p, g, &FINGERTIPS)?,
            });
        }
        let errs_3d: Vec<f64> = per_frame.iter().map(|e| e.mean_3d_mm).collect();
        let errs_2d: Vec<f64> = per_frame.iter().map(|e| e.mean_2d_px).collect();
        let errs_tip: Vec<f64> = per_frame.iter().map(|e| e.fingertip_3d_mm).collect();
        Ok(MetricReport {
            curve_3d: threshold_curve(&errs_3d, thresholds_3d)?,
            curve_2d: threshold_curve(&errs_2d, thresholds_2d)?,
            summary_3d: MetricSummary::of(&errs_3d),
            summary_2d: MetricSummary::of(&errs_2d),
            summary_fingertip: MetricSummary::of(&errs_tip),
            per_frame,
        })
    }

    pub fn per_frame_csv(&self) -> String {
        let mut out = String::from("frame,mean_3d_mm,mean_2d_px,fingertip_3d_mm\n");
        for e in &self.per_frame {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.frame, e.mean_3d_mm, e.mean_2d_px, e.fingertip_3d_mm
            );
        }
        out
    }

    pub fn curve_csv(curve: &[(f64, f64)]) -> String {
        let mut out = String::from("threshold,fraction\n");
        for (t, f) in curve {
            let _ = writeln!(out, "{t},{f}");
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,median,std\n");
        for (name, s) in [
            ("mean_3d_mm", self.summary_3d),
            ("mean_2d_px", self.summary_2d),
            ("fingertip_3d_mm", self.summary_fingertip),
        ] {
            let _ = writeln!(out, "{name},{},{},{}", s.mean, s.median, s.std);
        }
        out
    }

    /// Writes `per_frame.csv`, `curve_3d.csv`, `curve_2d.csv`, `summary.csv`.
    pub fn write_csv_files(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, data: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, data).map_err(|e| Error::io(path, e))
        };
        write("per_frame.csv", self.per_frame_csv())?;
        write("curve_3d.csv", Self::curve_csv(&self.curve_3d))?;
        write("curve_2d.csv", Self::curve_csv(&self.curve_2d))?;
        write("summary.csv", self.summary_csv())
    }
}

/// Tracking variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackVariant {
    Full,
    ThreeDOnly,
    TwoDOnly,
    RawPredictions,
}

impl TrackVariant {
    pub const ALL: [TrackVariant; 4] = [
        TrackVariant::Full,
        TrackVariant::ThreeDOnly,
        TrackVariant::TwoDOnly,
        TrackVariant::RawPredictions,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrackVariant::Full => "full",
            TrackVariant::ThreeDOnly => "3d_only",
            TrackVariant::TwoDOnly => "2d_only",
            TrackVariant::RawPredictions => "raw_predictions",
        }
    }

    pub fn from_name(name: &str) -> Result<TrackVariant> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant `{name}`")))
    }

    pub fn weights(&self, base: &EnergyWeights) -> EnergyWeights {
        let mut w = *base;
        match self {
            TrackVariant::Full | TrackVariant::RawPredictions => {}
            TrackVariant::ThreeDOnly => w.pos_2d = 0.0,
            TrackVariant::TwoDOnly => w.pos_3d = 0.0,
        }
        w
    }
}

/// Per-frame joint positions produced by one tracking variant. The raw
/// variant returns the predictions p^G unchanged.
pub fn run_variant(
    skeleton: &Skeleton,
    camera: &Camera,
    observations: &[Observation],
    weights: &EnergyWeights,
    variant: TrackVariant,
) -> Result<Vec<JointPositions>> {
    if variant == TrackVariant::RawPredictions {
        return Ok(observations
            .iter()
            .map(|o| JointPositions(o.global_positions()))
            .collect());
    }
    let (_, positions) = track_sequence(skeleton, observations, camera, &variant.weights(weights))?;
    Ok(positions)
}

/// Mean frame-to-frame joint displacement, mm. Measures jitter plus true
/// motion.
pub fn jitter(positions: &[JointPositions]) -> f64 {
    if positions.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for w in positions.windows(2) {
        sum += (0..JOINT_COUNT)
            .map(|j| (w[1].0[j] - w[0].0[j]).norm())
            .sum::<f64>()
            / JOINT_COUNT as f64;
    }
    sum / (positions.len() - 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: TrackVariant,
    pub mean_fingertip_mm: f64,
    pub mean_jitter_mm: f64,
}

/// Runs each variant over the same observations and reports the average
/// fingertip error and jitter.
pub fn ablation_report(
    skeleton: &Skeleton,
    camera: &Camera,
    observations: &[Observation],
    truth: &[JointPositions],
    weights: &EnergyWeights,
    variants: &[TrackVariant],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let positions = run_variant(skeleton, camera, observations, weights, variant)?;
        let mut sum = 0.0;
        for (p, g) in positions.iter().zip(truth) {
            sum += joint_error_3d(p, g, &FINGERTIPS)?;
        }
        rows.push(AblationRow {
            variant,
            mean_fingertip_mm: sum / positions.len().max(1) as f64,
            mean_jitter_mm: jitter(&positions),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mean_fingertip_error_mm,mean_jitter_mm\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            row.variant.name(),
            row.mean_fingertip_mm,
            row.mean_jitter_mm
        );
    }
    out
}
