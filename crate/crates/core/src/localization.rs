//! Root-localization post-processing: heatmap maxima extraction, confidence
//! gating, and decay extrapolation across uncertain frames.
//!
//! A frame's maximum is *uncertain* when its likelihood is below the
//! confidence threshold AND it jumped more than the jump threshold from the
//! previous maximum. Uncertain frames advance the track by a decayed unit step
//! along the last confident direction instead of trusting the raw maximum.

use nalgebra::Vector2;

use crate::camera::{Frame, RootLocation};
use crate::error::{Error, Result};

/// A keypoint-likelihood grid, row-major, with a grid-to-image pixel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major values in [0, 1].
    pub values: Vec<f32>,
    /// Heatmap px -> image px.
    pub grid_to_image_scale: f64,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize, grid_to_image_scale: f64) -> Heatmap {
        Heatmap {
            width,
            height,
            values: vec![0.0; width * height],
            grid_to_image_scale,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.values[y * self.width + x] = value;
    }
}

/// Image-space location and likelihood of the heatmap maximum. Ties break to
/// the lowest row, then the lowest column; NaN cells are ignored.
pub fn argmax(heatmap: &Heatmap) -> Result<(Vector2<f64>, f64)> {
    if heatmap.values.is_empty() {
        return Err(Error::InvalidInput("empty heatmap".into()));
    }
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in heatmap.values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    let (idx, value) = best.ok_or_else(|| Error::InvalidInput("all-NaN heatmap".into()))?;
    let col = (idx % heatmap.width) as f64;
    let row = (idx / heatmap.width) as f64;
    Ok((
        Vector2::new(col, row) * heatmap.grid_to_image_scale,
        value as f64,
    ))
}

/// Maxima history threaded through [`LocalizerState::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerState {
    /// Last confident maximum φ_(c-1) and the one before it φ_(c-2), image px.
    pub last_confident: Option<(Vector2<f64>, Vector2<f64>)>,
    /// Frames elapsed since the last confident maximum.
    pub frames_since_confident: u32,
    /// The track's previous output φ_(t-1).
    pub previous_maximum: Option<Vector2<f64>>,
    /// Decay factor applied per uncertain frame.
    pub delta: f64,
    pub confidence_threshold: f64,
    /// Uncertainty jump threshold, image px.
    pub jump_threshold: f64,
}

impl Default for LocalizerState {
    fn default() -> Self {
        LocalizerState {
            last_confident: None,
            frames_since_confident: 0,
            previous_maximum: None,
            delta: 0.98,
            confidence_threshold: 0.1,
            jump_threshold: 30.0,
        }
    }
}

impl LocalizerState {
    /// Processes one root heatmap and returns the tracked root location (depth
    /// still unresolved) together with the advanced state.
    ///
    /// The first frame seeds the whole history with the raw maximum and is
    /// always confident. An uncertain frame with degenerate confident history
    /// holds position.
    pub fn update(&self, heatmap: &Heatmap) -> Result<(RootLocation, LocalizerState)> {
        let (raw, likelihood) = argmax(heatmap)?;
        let mut next = self.clone();

        let confident = match self.previous_maximum {
            None => true,
            Some(prev) => {
                likelihood >= self.confidence_threshold
                    || (raw - prev).norm() <= self.jump_threshold
            }
        };

        let output = if confident {
            let prev_confident = self.last_confident.map_or(raw, |(c1, _)| c1);
            next.last_confident = Some((raw, prev_confident));
            next.frames_since_confident = 0;
            raw
        } else {
            let prev = self.previous_maximum.expect("uncertain implies history");
            next.frames_since_confident = self.frames_since_confident + 1;
            let k = next.frames_since_confident;
            let (c1, c2) = self.last_confident.expect("seeded on first frame");
            let dir = c1 - c2;
            let norm = dir.norm();
            if norm > 0.0 {
                prev + self.delta.powi(k as i32) * (dir / norm)
            } else {
                prev
            }
        };
        next.previous_maximum = Some(output);

        Ok((
            RootLocation {
                u: output.x,
                v: output.y,
                z: 0.0,
                confidence: likelihood,
            },
            next,
        ))
    }
}

/// Depth at an image pixel, falling back to the median of valid depths in its
/// 5×5 neighborhood when the pixel itself is invalid.
pub fn root_depth_lookup(frame: &Frame, u: f64, v: f64) -> Result<f64> {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    if !(u >= 0.0 && v >= 0.0 && u < w && v < h) {
        return Err(Error::InvalidInput(format!(
            "lookup pixel ({u}, {v}) outside {w}×{h} frame"
        )));
    }
    let (x, y) = (u.round() as i64, v.round() as i64);
    let direct = frame.depth.at(x as usize, y as usize);
    if direct > 0.0 {
        return Ok(direct);
    }
    let mut neighborhood = Vec::with_capacity(25);
    for dy in -2..=2 {
        for dx in -2..=2 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let z = frame.depth.at(nx as usize, ny as usize);
            if z > 0.0 {
                neighborhood.push(z);
            }
        }
    }
    if neighborhood.is_empty() {
        return Err(Error::DepthHole { u, v });
    }
    neighborhood.sort_by(|a, b| a.total_cmp(b));
    let n = neighborhood.len();
    Ok(if n % 2 == 1 {
        neighborhood[n / 2]
    } else {
        0.5 * (neighborhood[n / 2 - 1] + neighborhood[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{ColorImage, DepthImage};
    use approx::assert_relative_eq;

    fn heatmap_with_peak(peak: (usize, usize), value: f32, scale: f64) -> Heatmap {
        let mut h = Heatmap::zeros(40, 30, scale);
        h.set(peak.0, peak.1, value);
        h
    }

    #[test]
    fn argmax_scales_to_image_coordinates() {
        let h = heatmap_with_peak((5, 7), 1.0, 8.0);
        let (uv, lik) = argmax(&h).unwrap();
        assert_eq!(uv, Vector2::new(40.0, 56.0));
        assert_eq!(lik, 1.0);
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_row_then_column() {
        let mut h = Heatmap::zeros(40, 30, 1.0);
        h.values.fill(0.25);
        let (uv, lik) = argmax(&h).unwrap();
        assert_eq!(uv, Vector2::new(0.0, 0.0));
        assert_relative_eq!(lik, 0.25, epsilon = 1e-6);

        let mut h = Heatmap::zeros(40, 30, 1.0);
        h.set(2, 3, 0.9);
        h.set(4, 1, 0.9);
        let (uv, _) = argmax(&h).unwrap();
        assert_eq!(uv, Vector2::new(4.0, 1.0), "lower row wins");
    }

    #[test]
    fn argmax_rejects_all_nan() {
        let mut h = Heatmap::zeros(4, 4, 1.0);
        h.values.fill(f32::NAN);
        assert!(matches!(argmax(&h), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn confident_updates_pass_the_raw_maximum_through() {
        let state = LocalizerState::default();
        let (loc, state) = state
            .update(&heatmap_with_peak((10, 10), 0.9, 8.0))
            .unwrap();
        assert_eq!((loc.u, loc.v), (80.0, 80.0));
        assert_eq!(state.frames_since_confident, 0);
        let (loc, state) = state
            .update(&heatmap_with_peak((30, 20), 0.9, 8.0))
            .unwrap();
        assert_eq!((loc.u, loc.v), (240.0, 160.0));
        assert_eq!(state.frames_since_confident, 0);
        assert_eq!(
            state.last_confident,
            Some((Vector2::new(240.0, 160.0), Vector2::new(80.0, 80.0)))
        );
    }

    #[test]
    fn decay_extrapolation_arithmetic() {
        // φ_(t-1) = (100, 100), φ_(c-1) = (98, 100), φ_(c-2) = (96, 100),
        // one uncertain frame already seen; the next one makes k = 2.
        let state = LocalizerState {
            last_confident: Some((Vector2::new(98.0, 100.0), Vector2::new(96.0, 100.0))),
            frames_since_confident: 1,
            previous_maximum: Some(Vector2::new(100.0, 100.0)),
            ..LocalizerState::default()
        };
        // low likelihood far from the previous maximum -> uncertain
        let heatmap = heatmap_with_peak((35, 2), 0.05, 8.0);
        let (loc, next) = state.update(&heatmap).unwrap();
        assert_eq!(next.frames_since_confident, 2);
        assert_relative_eq!(loc.u, 100.0 + 0.98 * 0.98, epsilon = 1e-12);
        assert_relative_eq!(loc.v, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn low_likelihood_near_previous_maximum_stays_confident() {
        let state = LocalizerState {
            last_confident: Some((Vector2::new(80.0, 80.0), Vector2::new(78.0, 80.0))),
            frames_since_confident: 0,
            previous_maximum: Some(Vector2::new(80.0, 80.0)),
            ..LocalizerState::default()
        };
        // likelihood 0.05 but only 8 px away -> both conditions needed for
        // uncertainty, so this is confident.
        let (loc, next) = state
            .update(&heatmap_with_peak((11, 10), 0.05, 8.0))
            .unwrap();
        assert_eq!((loc.u, loc.v), (88.0, 80.0));
        assert_eq!(next.frames_since_confident, 0);
    }

    #[test]
    fn uncertain_run_steps_decay_exactly() {
        let mut state = LocalizerState::default();
        // two confident frames moving in +u build the direction history
        state = state
            .update(&heatmap_with_peak((10, 10), 1.0, 8.0))
            .unwrap()
            .1;
        state = state
            .update(&heatmap_with_peak((11, 10), 1.0, 8.0))
            .unwrap()
            .1;

        let outlier = heatmap_with_peak((35, 25), 0.02, 8.0);
        let mut prev = Vector2::new(88.0, 80.0);
        let mut last_step = f64::INFINITY;
        for k in 1..=6 {
            let (loc, next) = state.update(&outlier).unwrap();
            let step = (Vector2::new(loc.u, loc.v) - prev).norm();
            assert_relative_eq!(step, 0.98f64.powi(k), epsilon = 1e-12);
            assert!(step < last_step, "steps must shrink");
            last_step = step;
            prev = Vector2::new(loc.u, loc.v);
            state = next;
        }
        // a confident frame resets the run
        let (_, state) = state
            .update(&heatmap_with_peak((12, 10), 1.0, 8.0))
            .unwrap();
        assert_eq!(state.frames_since_confident, 0);
    }

    #[test]
    fn degenerate_direction_holds_position() {
        // fresh track: first frame seeds φ_(c-1) = φ_(c-2)
        let state = LocalizerState::default();
        let (_, state) = state
            .update(&heatmap_with_peak((10, 10), 1.0, 8.0))
            .unwrap();
        let (loc, _) = state
            .update(&heatmap_with_peak((35, 25), 0.02, 8.0))
            .unwrap();
        assert_eq!((loc.u, loc.v), (80.0, 80.0));
    }

    #[test]
    fn without_outliers_track_equals_raw_argmax() {
        let mut state = LocalizerState::default();
        for i in 0..20 {
            let peak = ((5 + i) % 40, (3 + 2 * i) % 30);
            let heatmap = heatmap_with_peak(peak, 1.0, 8.0);
            let (raw, _) = argmax(&heatmap).unwrap();
            let (loc, next) = state.update(&heatmap).unwrap();
            assert_eq!(Vector2::new(loc.u, loc.v), raw);
            state = next;
        }
    }

    fn frame_with_depth(depth: DepthImage) -> Frame {
        Frame::new(ColorImage::zeros(depth.width, depth.height), depth).unwrap()
    }

    #[test]
    fn depth_lookup_returns_direct_hit() {
        let mut depth = DepthImage::zeros(320, 240);
        depth.set(100, 80, 512.0);
        let frame = frame_with_depth(depth);
        assert_eq!(root_depth_lookup(&frame, 100.0, 80.0).unwrap(), 512.0);
    }

    #[test]
    fn depth_lookup_falls_back_to_neighborhood_median() {
        let mut depth = DepthImage::zeros(320, 240);
        depth.set(99, 80, 400.0);
        depth.set(101, 80, 500.0);
        depth.set(100, 82, 600.0);
        let frame = frame_with_depth(depth);
        assert_eq!(root_depth_lookup(&frame, 100.0, 80.0).unwrap(), 500.0);
    }

    #[test]
    fn depth_lookup_reports_holes() {
        let frame = frame_with_depth(DepthImage::zeros(320, 240));
        assert!(matches!(
            root_depth_lookup(&frame, 100.0, 80.0),
            Err(Error::DepthHole { .. })
        ));
        assert!(matches!(
            root_depth_lookup(&frame, -1.0, 80.0),
            Err(Error::InvalidInput(_))
        ));
    }
}
