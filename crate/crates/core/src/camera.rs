//! Pinhole camera geometry: projection, 2.5D backprojection, colored-depth
//! registration and depth-dependent cropping.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Side length of the normalized crop, px.
pub const CROP_SIZE: usize = 128;
/// Depth value written for invalid pixels inside a normalized crop, mm.
pub const INVALID_DEPTH_SENTINEL: f64 = 10_000.0;
/// Resolution every registered frame is downsampled to.
pub const REGISTERED_WIDTH: usize = 320;
pub const REGISTERED_HEIGHT: usize = 240;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Pinhole intrinsics plus the color-to-depth extrinsic used by registration.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub color_to_depth: RigidTransform,
}

impl Default for Camera {
    /// The default working-stream camera: 320×240, fx = fy = 475.
    fn default() -> Self {
        Camera {
            fx: 475.0,
            fy: 475.0,
            cx: 160.0,
            cy: 120.0,
            width: REGISTERED_WIDTH,
            height: REGISTERED_HEIGHT,
            color_to_depth: RigidTransform::identity(),
        }
    }
}

impl Camera {
    pub fn from_config_str(text: &str) -> Result<Camera> {
        let config: CameraConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("camera config: {e}")))?;
        config.build()
    }

    pub fn from_config_file(path: &std::path::Path) -> Result<Camera> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Camera::from_config_str(&text)
    }

    /// Intrinsics rescaled to a new resolution.
    pub fn scaled_to(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            color_to_depth: self.color_to_depth,
        }
    }

    /// Projects a camera-space point (mm) onto the image plane (px).
    pub fn project(&self, point: Vector3<f64>) -> Result<Vector2<f64>> {
        if point.z <= 0.0 {
            return Err(Error::BehindCamera { z: point.z });
        }
        Ok(Vector2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    /// Lifts a 2.5D pixel location back to camera space.
    pub fn backproject_uvz(&self, u: f64, v: f64, z: f64) -> Result<Vector3<f64>> {
        if z <= 0.0 {
            return Err(Error::InvalidDepth { z });
        }
        Ok(Vector3::new(
            (u - self.cx) * z / self.fx,
            (v - self.cy) * z / self.fy,
            z,
        ))
    }

    pub fn backproject(&self, root: &RootLocation) -> Result<Vector3<f64>> {
        self.backproject_uvz(root.u, root.v, root.z)
    }
}

/// 2.5D hand-root location with the detection confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootLocation {
    pub u: f64,
    pub v: f64,
    /// Depth at the root pixel, mm. Zero while still unresolved.
    pub z: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        ColorImage {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: [u8; 3]) {
        self.pixels[y * self.width + x] = value;
    }
}

/// Depth image in mm; zero marks an invalid measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, z: f64) -> Self {
        DepthImage {
            width,
            height,
            values: vec![z; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, z: f64) {
        self.values[y * self.width + x] = z;
    }
}

/// A registered color + depth frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub color: ColorImage,
    pub depth: DepthImage,
}

impl Frame {
    pub fn new(color: ColorImage, depth: DepthImage) -> Result<Frame> {
        if color.width != depth.width || color.height != depth.height {
            return Err(Error::InvalidInput(
                "color and depth dimensions differ".into(),
            ));
        }
        Ok(Frame { color, depth })
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Registers the color image onto the depth image through the camera's
/// color-to-depth transform and downsamples to 320×240.
///
/// The output lives on the depth-camera grid. Each valid depth pixel is lifted
/// to 3D, mapped into the color camera and assigned the nearest color sample.
/// When several depth pixels compete for one color pixel, the nearest depth
/// wins and the occluded pixels keep their depth with a zeroed color.
pub fn register_colored_depth(
    camera: &Camera,
    color: &ColorImage,
    depth: &DepthImage,
) -> Result<Frame> {
    let (w, h) = (camera.width, camera.height);
    if color.width != w || color.height != h || depth.width != w || depth.height != h {
        return Err(Error::InvalidInput(format!(
            "expected {w}×{h} inputs, got color {}×{} and depth {}×{}",
            color.width, color.height, depth.width, depth.height
        )));
    }
    if w % REGISTERED_WIDTH != 0
        || h % REGISTERED_HEIGHT != 0
        || w / REGISTERED_WIDTH != h / REGISTERED_HEIGHT
    {
        return Err(Error::InvalidInput(format!(
            "camera resolution {w}×{h} is not an integer multiple of {REGISTERED_WIDTH}×{REGISTERED_HEIGHT}"
        )));
    }

    // Depth pixel -> color pixel mapping plus a z-buffer over the color grid.
    let mut mapping: Vec<Option<(usize, f64)>> = vec![None; w * h];
    let mut color_zbuf = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            let z = depth.at(x, y);
            if z <= 0.0 {
                continue;
            }
            let p_depth = camera.backproject_uvz(x as f64, y as f64, z)?;
            let p_color = camera.color_to_depth.apply_inverse(p_depth);
            if p_color.z <= 0.0 {
                continue;
            }
            let uv = camera.project(p_color)?;
            let (cu, cv) = (uv.x.round(), uv.y.round());
            if cu < 0.0 || cv < 0.0 || cu >= w as f64 || cv >= h as f64 {
                continue;
            }
            let idx = cv as usize * w + cu as usize;
            mapping[y * w + x] = Some((idx, p_color.z));
            if p_color.z < color_zbuf[idx] {
                color_zbuf[idx] = p_color.z;
            }
        }
    }

    let mut full_color = ColorImage::zeros(w, h);
    let mut full_depth = DepthImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let z = depth.at(x, y);
            if z <= 0.0 {
                continue;
            }
            full_depth.set(x, y, z);
            if let Some((idx, zc)) = mapping[y * w + x]
                && zc <= color_zbuf[idx] + 1e-6
            {
                full_color.pixels[y * w + x] = color.pixels[idx];
            }
        }
    }

    // Downsample: nearest for depth, block average for color.
    let f = w / REGISTERED_WIDTH;
    if f == 1 {
        return Frame::new(full_color, full_depth);
    }
    let mut out_color = ColorImage::zeros(REGISTERED_WIDTH, REGISTERED_HEIGHT);
    let mut out_depth = DepthImage::zeros(REGISTERED_WIDTH, REGISTERED_HEIGHT);
    for y in 0..REGISTERED_HEIGHT {
        for x in 0..REGISTERED_WIDTH {
            out_depth.set(x, y, full_depth.at(x * f, y * f));
            let mut acc = [0u32; 3];
            for dy in 0..f {
                for dx in 0..f {
                    let px = full_color.at(x * f + dx, y * f + dy);
                    for c in 0..3 {
                        acc[c] += px[c] as u32;
                    }
                }
            }
            let n = (f * f) as u32;
            out_color.set(
                x,
                y,
                [(acc[0] / n) as u8, (acc[1] / n) as u8, (acc[2] / n) as u8],
            );
        }
    }
    Frame::new(out_color, out_depth)
}

/// Normalized hand crop: RGB plus root-relative depth at a fixed 128×128.
#[derive(Debug, Clone, PartialEq)]
pub struct CroppedFrame {
    /// Interleaved `[r, g, b, depth - root_depth]` per pixel, row-major.
    pub data: Vec<f32>,
    /// Top-left corner of the crop window in the source frame, px.
    pub crop_origin: (f64, f64),
    pub crop_side: f64,
    pub root_depth: f64,
}

impl CroppedFrame {
    pub fn channel_at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * CROP_SIZE + x) * 4 + c]
    }
}

/// Crop-side constant giving a window that spans roughly 300 mm at the root.
pub fn default_crop_constant(camera: &Camera) -> f64 {
    camera.fx * 300.0
}

/// Depth-dependent crop around the root: side length `k_crop / z`, bilinear
/// color, nearest depth, root depth subtracted from valid depths.
pub fn crop(
    frame: &Frame,
    root: &RootLocation,
    camera: &Camera,
    k_crop: f64,
) -> Result<CroppedFrame> {
    if root.z <= 0.0 {
        return Err(Error::InvalidDepth { z: root.z });
    }
    if frame.width() != camera.width || frame.height() != camera.height {
        return Err(Error::InvalidInput(
            "frame dimensions do not match the camera".into(),
        ));
    }
    let side = (k_crop / root.z).round().max(1.0);
    let origin = (root.u - side / 2.0, root.v - side / 2.0);
    let step = side / CROP_SIZE as f64;

    let mut data = vec![0.0f32; CROP_SIZE * CROP_SIZE * 4];
    for oy in 0..CROP_SIZE {
        for ox in 0..CROP_SIZE {
            let src_u = origin.0 + (ox as f64 + 0.5) * step;
            let src_v = origin.1 + (oy as f64 + 0.5) * step;
            let rgb = bilinear_rgb(&frame.color, src_u, src_v);
            let idx = (oy * CROP_SIZE + ox) * 4;
            data[idx] = rgb[0];
            data[idx + 1] = rgb[1];
            data[idx + 2] = rgb[2];

            let (nu, nv) = (src_u.round(), src_v.round());
            let in_bounds =
                nu >= 0.0 && nv >= 0.0 && nu < frame.width() as f64 && nv < frame.height() as f64;
            let z = if in_bounds {
                frame.depth.at(nu as usize, nv as usize)
            } else {
                0.0
            };
            data[idx + 3] = if z > 0.0 {
                (z - root.z) as f32
            } else {
                INVALID_DEPTH_SENTINEL as f32
            };
        }
    }
    Ok(CroppedFrame {
        data,
        crop_origin: origin,
        crop_side: side,
        root_depth: root.z,
    })
}

/// Bilinear sample with zero padding outside the image.
fn bilinear_rgb(image: &ColorImage, u: f64, v: f64) -> [f32; 3] {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = (u - u0) as f32;
    let fv = (v - v0) as f32;
    let mut out = [0.0f32; 3];
    for (dx, dy, weight) in [
        (0.0, 0.0, (1.0 - fu) * (1.0 - fv)),
        (1.0, 0.0, fu * (1.0 - fv)),
        (0.0, 1.0, (1.0 - fu) * fv),
        (1.0, 1.0, fu * fv),
    ] {
        let x = u0 + dx;
        let y = v0 + dy;
        if x < 0.0 || y < 0.0 || x >= image.width as f64 || y >= image.height as f64 {
            continue;
        }
        let px = image.at(x as usize, y as usize);
        for c in 0..3 {
            out[c] += weight * px[c] as f32;
        }
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraConfig {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(default)]
    color_to_depth: Option<TransformConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformConfig {
    /// Row-major 3×3 rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl CameraConfig {
    fn build(self) -> Result<Camera> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Format("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Format("resolution must be positive".into()));
        }
        let color_to_depth = match self.color_to_depth {
            None => RigidTransform::identity(),
            Some(t) => RigidTransform {
                rotation: Matrix3::from_fn(|r, c| t.rotation[r][c]),
                translation: Vector3::new(t.translation[0], t.translation[1], t.translation[2]),
            },
        };
        Ok(Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            color_to_depth,
        })
    }
}
