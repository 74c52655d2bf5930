//! Posed multi-view scene data: manifest loading, pinhole cameras, image
//! buffers with bilinear lookup, and unit-sphere normalization.

pub mod png_io;

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{vec3, Mat3, Vec3};

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: io::Error,
    },
    #[error("missing image {path}: {source}")]
    MissingImage {
        path: PathBuf,
        source: io::Error,
    },
    #[error("bad image {0}: {1}")]
    BadImage(PathBuf, String),
    #[error("manifest parse error: {0}")]
    BadManifest(String),
    #[error("frame {frame}: invalid rotation (orthonormality error {err:.2e}, det {det:.6})")]
    InvalidRotation { frame: usize, err: f64, det: f64 },
    #[error("frame {frame}: invalid intrinsics: {reason}")]
    InvalidIntrinsics { frame: usize, reason: String },
    #[error("frame {frame}: image is {got_w}x{got_h} but camera declares {want_w}x{want_h}")]
    DimensionMismatch {
        frame: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("frame {frame}: auxiliary map {kind} has mismatched dimensions")]
    AuxDimensionMismatch { frame: usize, kind: &'static str },
    #[error("dataset needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {frame}: camera center inside the unit sphere after normalization (|o| = {norm:.4})")]
    CameraInsideUnitSphere { frame: usize, norm: f64 },
    #[error("radius hint must be positive, got {0}")]
    BadRadiusHint(f64),
}

/// Pinhole camera: world-to-camera rotation/translation plus intrinsics.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        k: Mat3,
        r: Mat3,
        t: Vec3,
        width: usize,
        height: usize,
    ) -> Result<CameraModel, SceneError> {
        let cam = CameraModel { k, r, t, width, height };
        cam.validate(0)?;
        Ok(cam)
    }

    pub fn validate(&self, frame: usize) -> Result<(), SceneError> {
        let err = self.r.orthonormality_error();
        let det = self.r.det();
        if err > ROTATION_TOL || (det - 1.0).abs() > 1e-4 {
            return Err(SceneError::InvalidRotation { frame, err, det });
        }
        if self.k.m[0][0] <= 0.0 || self.k.m[1][1] <= 0.0 {
            return Err(SceneError::InvalidIntrinsics {
                frame,
                reason: format!("non-positive focal ({}, {})", self.k.m[0][0], self.k.m[1][1]),
            });
        }
        if self.width < 2 || self.height < 2 {
            return Err(SceneError::InvalidIntrinsics {
                frame,
                reason: format!("image size {}x{} below 2x2", self.width, self.height),
            });
        }
        Ok(())
    }

    /// Camera center in world coordinates: -R^T t.
    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    /// Project a world point: returns pixel coordinates and camera-frame
    /// depth, or `None` when the point is behind the camera.
    pub fn project_point(&self, x: Vec3) -> Option<([f64; 2], f64)> {
        let cam = self.r * x + self.t;
        if cam.z <= 0.0 {
            return None;
        }
        let g = self.k * cam;
        Some(([g.x / g.z, g.y / g.z], cam.z))
    }

    /// World-space unit direction of the ray through pixel (px, py).
    /// Pixel coordinates are continuous with texel centers at integers.
    pub fn pixel_ray_dir(&self, px: f64, py: f64) -> Vec3 {
        let k_inv = self.k.inverse().expect("intrinsics invertible");
        let cam_dir = k_inv * vec3(px, py, 1.0);
        (self.r.transpose() * cam_dir).normalized()
    }
}

/// Row-major linear RGB image, channels in [0,1].
#[derive(Debug, Clone)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, rgb: Vec<[f64; 3]>) -> ImageBuffer {
        assert_eq!(rgb.len(), width * height);
        ImageBuffer { width, height, rgb }
    }

    pub fn constant(width: usize, height: usize, c: [f64; 3]) -> ImageBuffer {
        ImageBuffer::new(width, height, vec![c; width * height])
    }

    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }

    /// Bilinear lookup at continuous pixel coordinates. `None` when the
    /// position falls outside [0, w-1] x [0, h-1] ("out of view").
    pub fn sample_color(&self, px: f64, py: f64) -> Option<[f64; 3]> {
        if !(0.0..=(self.width - 1) as f64).contains(&px)
            || !(0.0..=(self.height - 1) as f64).contains(&py)
        {
            return None;
        }
        let x0 = (px.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (py.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = px - x0 as f64;
        let fy = py - y0 as f64;
        let c00 = self.texel(x0, y0);
        let c10 = self.texel(x1, y0);
        let c01 = self.texel(x0, y1);
        let c11 = self.texel(x1, y1);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = c00[ch] * (1.0 - fx) + c10[ch] * fx;
            let bot = c01[ch] * (1.0 - fx) + c11[ch] * fx;
            out[ch] = top * (1.0 - fy) + bot * fy;
        }
        Some(out)
    }
}

/// One posed view with optional ground-truth auxiliaries.
#[derive(Debug, Clone)]
pub struct ViewFrame {
    pub camera: CameraModel,
    pub image: ImageBuffer,
    /// Per-pixel unit normals; zero vector marks background/invalid pixels.
    pub gt_normals: Option<Vec<Vec3>>,
    pub specular_mask: Option<Vec<bool>>,
}

/// A loaded multi-view dataset, normalized so the object fits the unit
/// sphere. `norm_scale`/`norm_center` record the applied transform:
/// x_normalized = norm_scale * (x_original - norm_center).
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub frames: Vec<ViewFrame>,
    pub norm_scale: f64,
    pub norm_center: Vec3,
    pub gt_mesh_path: Option<PathBuf>,
}

impl SceneDataset {
    pub fn num_views(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frames.len() < 2 {
            return Err(SceneError::TooFewFrames(self.frames.len()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let c = f.camera.center();
            if c.norm() <= 1.0 {
                return Err(SceneError::CameraInsideUnitSphere { frame: i, norm: c.norm() });
            }
        }
        Ok(())
    }

    /// Map a point from normalized space back to the manifest's original
    /// world space.
    pub fn to_original_space(&self, x: Vec3) -> Vec3 {
        x / self.norm_scale + self.norm_center
    }
}

/// On-disk scene manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<ManifestFrame>,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_radius_hint")]
    pub radius_hint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mesh: Option<String>,
}

fn default_radius_hint() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image: String,
    pub k: [f64; 9],
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_normals: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specular_mask: Option<String>,
}

/// Load a scene from its manifest, applying unit-sphere normalization when
/// the manifest requests it.
pub fn load_scene(manifest_path: &Path) -> Result<SceneDataset, SceneError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| SceneError::Io {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| SceneError::BadManifest(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, mf) in manifest.frames.iter().enumerate() {
        let camera = CameraModel {
            k: Mat3::from_row_major(&mf.k),
            r: Mat3::from_row_major(&mf.r),
            t: Vec3::from_array(mf.t),
            width: mf.width,
            height: mf.height,
        };
        camera.validate(i)?;

        let img = png_io::read_png(&base.join(&mf.image))?;
        if img.width != mf.width || img.height != mf.height {
            return Err(SceneError::DimensionMismatch {
                frame: i,
                got_w: img.width,
                got_h: img.height,
                want_w: mf.width,
                want_h: mf.height,
            });
        }
        let image = ImageBuffer::new(img.width, img.height, img.to_rgb());

        let gt_normals = match &mf.gt_normals {
            Some(p) => {
                let n = png_io::read_png(&base.join(p))?;
                if n.width != mf.width || n.height != mf.height {
                    return Err(SceneError::AuxDimensionMismatch { frame: i, kind: "gt_normals" });
                }
                Some(png_io::decode_normal_map(&n))
            }
            None => None,
        };
        let specular_mask = match &mf.specular_mask {
            Some(p) => {
                let m = png_io::read_png(&base.join(p))?;
                if m.width != mf.width || m.height != mf.height {
                    return Err(SceneError::AuxDimensionMismatch {
                        frame: i,
                        kind: "specular_mask",
                    });
                }
                Some(m.to_gray().iter().map(|&g| g > 127.0 / 255.0).collect())
            }
            None => None,
        };

        frames.push(ViewFrame { camera, image, gt_normals, specular_mask });
    }

    let mut dataset = SceneDataset {
        frames,
        norm_scale: 1.0,
        norm_center: Vec3::ZERO,
        gt_mesh_path: manifest.gt_mesh.as_ref().map(|p| base.join(p)),
    };
    if manifest.normalize {
        dataset = normalize_scene(dataset, manifest.radius_hint)?;
    }
    dataset.validate()?;
    Ok(dataset)
}

/// Rescale the scene so the origin-centered bounding sphere of radius
/// `radius_hint` maps to the unit sphere. Cameras are transformed so every
/// projection is unchanged.
pub fn normalize_scene(
    mut dataset: SceneDataset,
    radius_hint: f64,
) -> Result<SceneDataset, SceneError> {
    if !(radius_hint > 0.0) {
        return Err(SceneError::BadRadiusHint(radius_hint));
    }
    let center = Vec3::ZERO;
    let scale = 1.0 / radius_hint;
    for frame in &mut dataset.frames {
        // x_cam = R x + T = rho * (R x') + (R c + T); dividing by rho keeps
        // pixels fixed and rescales depth consistently.
        let t_new = (frame.camera.r * center + frame.camera.t) * scale;
        frame.camera.t = t_new;
    }
    dataset.norm_scale = dataset.norm_scale * scale;
    dataset.norm_center = dataset.norm_center + center / scale;
    Ok(dataset)
}
