//! Versioned binary stream formats.
//!
//! Observation stream (`HOBS`, version 1, little-endian):
//!
//! ```text
//! magic b"HOBS" | version u32 | camera (fx fy cx cy f32, width height u32,
//! color-to-depth rotation 9 f32 row-major, translation 3 f32) |
//! joint_count u32 | root heatmap (w u32, h u32, scale f32) |
//! joint heatmap (w u32, h u32, scale f32) | flags u32 (bit 0: ground truth) |
//! frame_count u32
//! ```
//!
//! Per frame: root heatmap values, 21 joint heatmaps, p^L (63 f32), root
//! (u v z confidence f32), r (3 f32), validity mask (21 bytes), and, when
//! flagged, the ground-truth pose (26 f32) and positions (63 f32).
//!
//! Frame stream (`HFRM`, version 1): camera fields, width/height u32,
//! frame_count u32, then per frame RGB bytes and depth f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::camera::{Camera, ColorImage, DepthImage, Frame, RigidTransform, RootLocation};
use crate::error::{Error, Result};
use crate::localization::Heatmap;
use crate::optimizer::Observation;
use crate::skeleton::{JOINT_COUNT, JointPositions, Pose};
use crate::synth::GroundTruth;

const OBS_MAGIC: &[u8; 4] = b"HOBS";
const FRAME_MAGIC: &[u8; 4] = b"HFRM";
const VERSION: u32 = 1;

/// A decoded observation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStream {
    pub camera: Camera,
    pub observations: Vec<Observation>,
    pub ground_truth: Option<GroundTruth>,
}

impl ObservationStream {
    pub fn require_ground_truth(&self) -> Result<&GroundTruth> {
        self.ground_truth.as_ref().ok_or(Error::MissingGroundTruth)
    }
}

struct Encoder<W: Write> {
    out: W,
}

impl<W: Write> Encoder<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f64) -> std::io::Result<()> {
        self.out.write_all(&(v as f32).to_le_bytes())
    }

    fn f32_exact(&mut self, v: f32) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }

    fn camera(&mut self, camera: &Camera) -> std::io::Result<()> {
        self.f32(camera.fx)?;
        self.f32(camera.fy)?;
        self.f32(camera.cx)?;
        self.f32(camera.cy)?;
        self.u32(camera.width as u32)?;
        self.u32(camera.height as u32)?;
        for r in 0..3 {
            for c in 0..3 {
                self.f32(camera.color_to_depth.rotation[(r, c)])?;
            }
        }
        for c in 0..3 {
            self.f32(camera.color_to_depth.translation[c])?;
        }
        Ok(())
    }

    fn heatmap_values(&mut self, heatmap: &Heatmap) -> std::io::Result<()> {
        for &v in &heatmap.values {
            self.f32_exact(v)?;
        }
        Ok(())
    }

    fn vec3(&mut self, v: Vector3<f64>) -> std::io::Result<()> {
        self.f32(v.x)?;
        self.f32(v.y)?;
        self.f32(v.z)
    }
}

struct Decoder<R: Read> {
    input: R,
}

impl<R: Read> Decoder<R> {
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut buf = [0u8; 4];
        self.input.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f32(&mut self) -> std::io::Result<f32> {
        let mut buf = [0u8; 4];
        self.input.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }

    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(self.f32()? as f64)
    }

    fn camera(&mut self) -> std::io::Result<Camera> {
        let fx = self.f64()?;
        let fy = self.f64()?;
        let cx = self.f64()?;
        let cy = self.f64()?;
        let width = self.u32()? as usize;
        let height = self.u32()? as usize;
        let mut rotation = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rotation[(r, c)] = self.f64()?;
            }
        }
        let translation = Vector3::new(self.f64()?, self.f64()?, self.f64()?);
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            color_to_depth: RigidTransform {
                rotation,
                translation,
            },
        })
    }

    fn vec3(&mut self) -> std::io::Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

/// The cameras agree after rounding through the stream's f32 encoding.
fn camera_matches(expected: &Camera, stored: &Camera) -> bool {
    let f = |a: f64, b: f64| (a as f32) == (b as f32);
    f(expected.fx, stored.fx)
        && f(expected.fy, stored.fy)
        && f(expected.cx, stored.cx)
        && f(expected.cy, stored.cy)
        && expected.width == stored.width
        && expected.height == stored.height
        && (0..3).all(|r| {
            (0..3).all(|c| {
                f(
                    expected.color_to_depth.rotation[(r, c)],
                    stored.color_to_depth.rotation[(r, c)],
                )
            })
        })
        && (0..3).all(|c| {
            f(
                expected.color_to_depth.translation[c],
                stored.color_to_depth.translation[c],
            )
        })
}

fn heatmap_spec_of(h: &Heatmap) -> (u32, u32, f32) {
    (
        h.width as u32,
        h.height as u32,
        h.grid_to_image_scale as f32,
    )
}

/// Serializes an observation sequence, with optional ground truth, to `path`.
pub fn write_observation_stream(
    path: &Path,
    observations: &[Observation],
    ground_truth: Option<&GroundTruth>,
    camera: &Camera,
) -> Result<()> {
    if let Some(gt) = ground_truth
        && (gt.poses.len() != observations.len() || gt.positions.len() != observations.len())
    {
        return Err(Error::InvalidInput(
            "ground truth length does not match the observations".into(),
        ));
    }
    for obs in observations {
        if obs.joint_heatmaps.len() != JOINT_COUNT {
            return Err(Error::InvalidInput(format!(
                "expected {JOINT_COUNT} joint heatmaps per frame"
            )));
        }
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = Encoder {
        out: BufWriter::new(file),
    };
    let io_err = |e: std::io::Error| Error::io(path, e);

    enc.out.write_all(OBS_MAGIC).map_err(io_err)?;
    enc.u32(VERSION).map_err(io_err)?;
    enc.camera(camera).map_err(io_err)?;
    enc.u32(JOINT_COUNT as u32).map_err(io_err)?;

    let root_spec = observations
        .first()
        .map(|o| heatmap_spec_of(&o.root_heatmap))
        .unwrap_or((0, 0, 1.0));
    let joint_spec = observations
        .first()
        .map(|o| heatmap_spec_of(&o.joint_heatmaps[0]))
        .unwrap_or((0, 0, 1.0));
    for (w, h, scale) in [root_spec, joint_spec] {
        enc.u32(w).map_err(io_err)?;
        enc.u32(h).map_err(io_err)?;
        enc.f32_exact(scale).map_err(io_err)?;
    }
    enc.u32(ground_truth.is_some() as u32).map_err(io_err)?;
    enc.u32(observations.len() as u32).map_err(io_err)?;

    for (t, obs) in observations.iter().enumerate() {
        if heatmap_spec_of(&obs.root_heatmap) != root_spec
            || obs
                .joint_heatmaps
                .iter()
                .any(|h| heatmap_spec_of(h) != joint_spec)
        {
            return Err(Error::InvalidInput(format!(
                "frame {t}: heatmap dimensions differ from the header"
            )));
        }
        enc.heatmap_values(&obs.root_heatmap).map_err(io_err)?;
        for h in &obs.joint_heatmaps {
            enc.heatmap_values(h).map_err(io_err)?;
        }
        for p in &obs.local_positions {
            enc.vec3(*p).map_err(io_err)?;
        }
        enc.f32(obs.root.u).map_err(io_err)?;
        enc.f32(obs.root.v).map_err(io_err)?;
        enc.f32(obs.root.z).map_err(io_err)?;
        enc.f32(obs.root.confidence).map_err(io_err)?;
        enc.vec3(obs.root_3d).map_err(io_err)?;
        let mask: Vec<u8> = obs.validity_mask.iter().map(|&m| m as u8).collect();
        enc.out.write_all(&mask).map_err(io_err)?;
        if let Some(gt) = ground_truth {
            for &v in gt.poses[t].as_slice() {
                enc.f32(v).map_err(io_err)?;
            }
            for p in &gt.positions[t].0 {
                enc.vec3(*p).map_err(io_err)?;
            }
        }
    }
    enc.out.flush().map_err(io_err)?;
    Ok(())
}

/// Reads an observation stream, optionally validating the header camera
/// against an expected one.
pub fn read_observation_stream(
    path: &Path,
    expected_camera: Option<&Camera>,
) -> Result<ObservationStream> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder {
        input: BufReader::new(file),
    };
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    dec.input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != OBS_MAGIC {
        return Err(Error::Format("not an observation stream".into()));
    }
    let version = dec.u32().map_err(io_err)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported observation stream version {version}"
        )));
    }
    let camera = dec.camera().map_err(io_err)?;
    if let Some(expected) = expected_camera
        && !camera_matches(expected, &camera)
    {
        return Err(Error::CameraMismatch);
    }
    let joint_count = dec.u32().map_err(io_err)? as usize;
    if joint_count != JOINT_COUNT {
        return Err(Error::Format(format!(
            "expected {JOINT_COUNT} joints, stream has {joint_count}"
        )));
    }
    let mut specs = [(0usize, 0usize, 0f64); 2];
    for spec in &mut specs {
        let w = dec.u32().map_err(io_err)? as usize;
        let h = dec.u32().map_err(io_err)? as usize;
        let scale = dec.f32().map_err(io_err)? as f64;
        *spec = (w, h, scale);
    }
    let [root_spec, joint_spec] = specs;
    let flags = dec.u32().map_err(io_err)?;
    let has_gt = flags & 1 != 0;
    let frame_count = dec.u32().map_err(io_err)? as usize;

    let read_heatmap = |dec: &mut Decoder<BufReader<File>>,
                        (w, h, scale): (usize, usize, f64)|
     -> Result<Heatmap> {
        let mut heatmap = Heatmap::zeros(w, h, scale);
        for v in &mut heatmap.values {
            *v = dec.f32().map_err(io_err)?;
        }
        Ok(heatmap)
    };

    let mut observations = Vec::with_capacity(frame_count);
    let mut gt_poses = Vec::new();
    let mut gt_positions = Vec::new();
    for _ in 0..frame_count {
        let root_heatmap = read_heatmap(&mut dec, root_spec)?;
        let mut joint_heatmaps = Vec::with_capacity(JOINT_COUNT);
        for _ in 0..JOINT_COUNT {
            joint_heatmaps.push(read_heatmap(&mut dec, joint_spec)?);
        }
        let mut local_positions = [Vector3::zeros(); JOINT_COUNT];
        for p in &mut local_positions {
            *p = dec.vec3().map_err(io_err)?;
        }
        let root = RootLocation {
            u: dec.f64().map_err(io_err)?,
            v: dec.f64().map_err(io_err)?,
            z: dec.f64().map_err(io_err)?,
            confidence: dec.f64().map_err(io_err)?,
        };
        let root_3d = dec.vec3().map_err(io_err)?;
        let mut mask_bytes = [0u8; JOINT_COUNT];
        dec.input.read_exact(&mut mask_bytes).map_err(io_err)?;
        let mut validity_mask = [false; JOINT_COUNT];
        for (m, &b) in validity_mask.iter_mut().zip(&mask_bytes) {
            *m = b != 0;
        }
        observations.push(Observation {
            local_positions,
            joint_heatmaps,
            root_heatmap,
            root,
            root_3d,
            validity_mask,
        });
        if has_gt {
            let mut pose = Pose::rest();
            for v in &mut pose.0 {
                *v = dec.f64().map_err(io_err)?;
            }
            let mut positions = JointPositions::zeros();
            for p in &mut positions.0 {
                *p = dec.vec3().map_err(io_err)?;
            }
            gt_poses.push(pose);
            gt_positions.push(positions);
        }
    }
    // trailing bytes mean a malformed stream
    let mut trailing = [0u8; 1];
    match dec.input.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Format("trailing bytes after the last frame".into())),
        Err(e) => return Err(Error::io(path, e)),
    }

    Ok(ObservationStream {
        camera,
        observations,
        ground_truth: has_gt.then_some(GroundTruth {
            poses: gt_poses,
            positions: gt_positions,
        }),
    })
}

/// Serializes registered frames to `path`.
pub fn write_frame_stream(path: &Path, camera: &Camera, frames: &[Frame]) -> Result<()> {
    let (w, h) = match frames.first() {
        Some(f) => (f.width(), f.height()),
        None => (0, 0),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = Encoder {
        out: BufWriter::new(file),
    };
    let io_err = |e: std::io::Error| Error::io(path, e);

    enc.out.write_all(FRAME_MAGIC).map_err(io_err)?;
    enc.u32(VERSION).map_err(io_err)?;
    enc.camera(camera).map_err(io_err)?;
    enc.u32(w as u32).map_err(io_err)?;
    enc.u32(h as u32).map_err(io_err)?;
    enc.u32(frames.len() as u32).map_err(io_err)?;
    for (t, frame) in frames.iter().enumerate() {
        if frame.width() != w || frame.height() != h {
            return Err(Error::InvalidInput(format!(
                "frame {t} dimensions differ from the first frame"
            )));
        }
        for px in &frame.color.pixels {
            enc.out.write_all(px).map_err(io_err)?;
        }
        for &z in &frame.depth.values {
            enc.f32(z).map_err(io_err)?;
        }
    }
    enc.out.flush().map_err(io_err)?;
    Ok(())
}

/// Reads a frame stream written by [`write_frame_stream`].
pub fn read_frame_stream(path: &Path) -> Result<(Camera, Vec<Frame>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder {
        input: BufReader::new(file),
    };
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    dec.input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != FRAME_MAGIC {
        return Err(Error::Format("not a frame stream".into()));
    }
    let version = dec.u32().map_err(io_err)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported frame stream version {version}"
        )));
    }
    let camera = dec.camera().map_err(io_err)?;
    let w = dec.u32().map_err(io_err)? as usize;
    let h = dec.u32().map_err(io_err)? as usize;
    let count = dec.u32().map_err(io_err)? as usize;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let mut color = ColorImage::zeros(w, h);
        for px in &mut color.pixels {
            dec.input.read_exact(px).map_err(io_err)?;
        }
        let mut depth = DepthImage::zeros(w, h);
        for z in &mut depth.values {
            *z = dec.f64().map_err(io_err)?;
        }
        frames.push(Frame::new(color, depth)?);
    }
    Ok((camera, frames))
}
