//! Synthetic glossy-scene generator: analytic SDF shapes shaded with a
//! checkered diffuse term plus Blinn-Phong and mirror-environment specular
//! terms, sphere-traced into posed views with ground-truth normals,
//! specular masks and a marching-cubes ground-truth mesh.
//!
//! The mirror term looks up an environment gradient along the reflection
//! direction, which makes highlight positions slide across views; that is
//! the multi-view inconsistency the reflection score is built to catch.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::{reflect_direction, vec3, Mat3, Vec3};
use crate::mesh::{marching_cubes, sample_grid, TriangleMesh};
use crate::render::DEFAULT_BACKGROUND;
use crate::scene::{png_io, CameraModel, ImageBuffer, Manifest, ManifestFrame, SceneDataset, SceneError, ViewFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseShape {
    Sphere,
    SphereBox,
    Torus,
}

/// Everything that defines a generated scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub shape: BaseShape,
    pub checker_freq: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
    /// 0 disables both specular terms (fully diffuse scene).
    pub specular_strength: f64,
    pub shininess: f64,
    pub light_pos: [f64; 3],
    pub env_bottom: [f64; 3],
    pub env_top: [f64; 3],
    pub view_count: usize,
    pub hemisphere_radius: f64,
    pub image_size: usize,
    /// Focal length as a multiple of the image size.
    pub focal_scale: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            shape: BaseShape::Sphere,
            checker_freq: 3.0,
            albedo_a: [0.85, 0.35, 0.25],
            albedo_b: [0.25, 0.45, 0.85],
            specular_strength: 0.7,
            shininess: 48.0,
            light_pos: [2.0, 1.5, 3.0],
            env_bottom: [0.05, 0.08, 0.12],
            env_top: [0.9, 0.85, 0.7],
            view_count: 24,
            hemisphere_radius: 3.0,
            image_size: 64,
            focal_scale: 1.45,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn glossy_sphere(seed: u64) -> SceneSpec {
        SceneSpec { seed, ..Default::default() }
    }

    pub fn diffuse_sphere(seed: u64) -> SceneSpec {
        SceneSpec { specular_strength: 0.0, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.view_count < 8 {
            return Err(format!("view_count {} below 8", self.view_count));
        }
        if self.hemisphere_radius <= 1.0 {
            return Err("cameras must sit outside the unit object".into());
        }
        if self.image_size < 8 {
            return Err("image_size too small".into());
        }
        Ok(())
    }

    /// Signed distance of the base shape.
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self.shape {
            BaseShape::Sphere => p.norm() - 0.55,
            BaseShape::SphereBox => {
                let s = (p - vec3(-0.18, 0.0, 0.0)).norm() - 0.42;
                let b = box_sdf(p - vec3(0.3, 0.05, 0.0), vec3(0.22, 0.28, 0.45));
                s.min(b)
            }
            BaseShape::Torus => {
                let q = vec3((p.x * p.x + p.y * p.y).sqrt() - 0.42, p.z, 0.0);
                (q.x * q.x + q.y * q.y).sqrt() - 0.16
            }
        }
    }

    /// Unit gradient by central differences (exact enough for shading and
    /// ground-truth normals).
    pub fn sdf_normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-5;
        let g = vec3(
            self.sdf(p + vec3(h, 0.0, 0.0)) - self.sdf(p - vec3(h, 0.0, 0.0)),
            self.sdf(p + vec3(0.0, h, 0.0)) - self.sdf(p - vec3(0.0, h, 0.0)),
            self.sdf(p + vec3(0.0, 0.0, h)) - self.sdf(p - vec3(0.0, 0.0, h)),
        );
        g.try_normalized(1e-12).unwrap_or(vec3(0.0, 0.0, 1.0))
    }

    /// Smooth 3D checker in [0,1]: 0.5 at cell boundaries, hard parity in
    /// the interiors. The transition band spans roughly a pixel at the
    /// default framing so bilinear lookups reconstruct it consistently
    /// across views.
    fn checker(&self, p: Vec3) -> f64 {
        let f = self.checker_freq;
        let s = (std::f64::consts::PI * f * p.x).sin()
            * (std::f64::consts::PI * f * p.y).sin()
            * (std::f64::consts::PI * f * p.z).sin();
        let t = (s / 0.3).clamp(-1.0, 1.0);
        0.5 + 0.5 * (t * (3.0 - t * t) / 2.0)
    }

    fn env(&self, dir: Vec3) -> Vec3 {
        let t = (dir.z + 1.0) / 2.0;
        Vec3::from_array(self.env_bottom) * (1.0 - t) + Vec3::from_array(self.env_top) * t
    }

    /// Shade a surface point seen from `eye`; also returns the fraction of
    /// radiance contributed by the two specular terms.
    pub fn shade(&self, p: Vec3, eye: Vec3) -> (Vec3, f64) {
        let n = self.sdf_normal(p);
        let v = (eye - p).normalized();
        let l = (Vec3::from_array(self.light_pos) - p).normalized();
        let mix = self.checker(p);
        let albedo = Vec3::from_array(self.albedo_a) * (1.0 - mix) + Vec3::from_array(self.albedo_b) * mix;
        let ambient = 0.25;
        let diffuse = 0.65 * n.dot(l).max(0.0);
        let base = albedo * (ambient + diffuse);

        let h = (l + v).normalized();
        let blinn = 0.25 * self.specular_strength * n.dot(h).max(0.0).powf(self.shininess);
        let mirror_dir = reflect_direction(-v, n);
        let mirror = self.env(mirror_dir) * (0.75 * self.specular_strength);

        let spec = vec3(blinn, blinn, blinn) + mirror;
        let total = base + spec;
        let spec_sum = spec.x + spec.y + spec.z;
        let total_sum = (total.x + total.y + total.z).max(1e-9);
        let color = vec3(
            total.x.clamp(0.0, 1.0),
            total.y.clamp(0.0, 1.0),
            total.z.clamp(0.0, 1.0),
        );
        (color, spec_sum / total_sum)
    }

    /// Sphere trace from `origin` along `dir`; hit distance or `None`.
    pub fn trace(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..256 {
            let p = origin + dir * t;
            let d = self.sdf(p);
            if d < 1e-5 {
                return Some(t);
            }
            t += d;
            if t > self.hemisphere_radius * 2.0 + 2.0 {
                return None;
            }
        }
        None
    }
}

fn box_sdf(p: Vec3, half: Vec3) -> f64 {
    let q = vec3(p.x.abs() - half.x, p.y.abs() - half.y, p.z.abs() - half.z);
    let outside = vec3(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

/// Cameras on a Fibonacci spiral over the upper hemisphere, looking at the
/// origin with texel centers on integer pixel coordinates.
pub fn hemisphere_cameras(spec: &SceneSpec) -> Vec<CameraModel> {
    let n = spec.view_count;
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        // z in [0.2, 0.92]: skip the pole and the equator
        let z = 0.2 + (0.92 - 0.2) * ((i as f64 + 0.5) / n as f64);
        let ring = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        let origin = vec3(ring * phi.cos(), ring * phi.sin(), z) * spec.hemisphere_radius;
        cams.push(look_at_camera(origin, spec));
    }
    cams
}

fn look_at_camera(origin: Vec3, spec: &SceneSpec) -> CameraModel {
    let fwd = (-origin).normalized();
    let up = if fwd.z.abs() > 0.99 { vec3(0.0, 1.0, 0.0) } else { vec3(0.0, 0.0, 1.0) };
    let right = fwd.cross(up).normalized();
    let down = fwd.cross(right);
    let r = Mat3::from_rows(right, down, fwd);
    let size = spec.image_size;
    let focal = spec.focal_scale * size as f64;
    let c = (size - 1) as f64 / 2.0;
    CameraModel {
        k: Mat3::from_row_major(&[focal, 0.0, c, 0.0, focal, c, 0.0, 0.0, 1.0]),
        r,
        t: -(r * origin),
        width: size,
        height: size,
    }
}

/// A generated scene plus its ground-truth assets.
pub struct GeneratedScene {
    pub dataset: SceneDataset,
    pub gt_mesh: TriangleMesh,
}

/// Ray-trace all views of the spec. Supersampled 3x3 for color; normals and
/// masks come from the center ray.
pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene, String> {
    spec.validate()?;
    let cameras = hemisphere_cameras(spec);
    let size = spec.image_size;
    let frames: Vec<ViewFrame> = cameras
        .into_par_iter()
        .map(|camera| {
            let eye = camera.center();
            let mut rgb = vec![[0.0f64; 3]; size * size];
            let mut normals = vec![Vec3::ZERO; size * size];
            let mut mask = vec![false; size * size];
            for idx in 0..size * size {
                let px = (idx % size) as f64;
                let py = (idx / size) as f64;
                // 3x3 supersampling
                let mut acc = Vec3::ZERO;
                for sy in 0..3 {
                    for sx in 0..3 {
                        let dir = camera.pixel_ray_dir(
                            px - 0.5 + (sx as f64 + 0.5) / 3.0,
                            py - 0.5 + (sy as f64 + 0.5) / 3.0,
                        );
                        let c = match spec.trace(eye, dir) {
                            Some(t) => spec.shade(eye + dir * t, eye).0,
                            None => Vec3::from_array(DEFAULT_BACKGROUND),
                        };
                        acc += c;
                    }
                }
                rgb[idx] = (acc / 9.0).to_array();
                let center_dir = camera.pixel_ray_dir(px, py);
                if let Some(t) = spec.trace(eye, center_dir) {
                    let p = eye + center_dir * t;
                    normals[idx] = spec.sdf_normal(p);
                    let (_, spec_frac) = spec.shade(p, eye);
                    mask[idx] = spec_frac > 0.1;
                }
            }
            ViewFrame {
                camera,
                image: ImageBuffer::new(size, size, rgb),
                gt_normals: Some(normals),
                specular_mask: Some(mask),
            }
        })
        .collect();

    let grid = sample_grid(
        &|pts: &[[f64; 3]]| pts.iter().map(|p| spec.sdf(Vec3::from_array(*p))).collect(),
        vec3(-1.0, -1.0, -1.0),
        vec3(1.0, 1.0, 1.0),
        [256, 256, 256],
    );
    let gt_mesh = marching_cubes(&grid, 0.0);

    Ok(GeneratedScene {
        dataset: SceneDataset {
            frames,
            norm_scale: 1.0,
            norm_center: Vec3::ZERO,
            gt_mesh_path: None,
        },
        gt_mesh,
    })
}

/// Write a generated scene as a full manifest directory: images, 16-bit
/// normal maps, masks, binary PLY ground-truth mesh and manifest.json.
pub fn write_scene(scene: &GeneratedScene, out_dir: &Path) -> Result<(), SceneError> {
    fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SceneError + '_ {
        move |e| SceneError::Io { path: path.to_path_buf(), source: e }
    }
    for sub in ["images", "normals", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut frames = Vec::new();
    for (i, frame) in scene.dataset.frames.iter().enumerate() {
        let image_rel = format!("images/view_{i:03}.png");
        let normals_rel = format!("normals/view_{i:03}.png");
        let mask_rel = format!("masks/view_{i:03}.png");
        let (w, h) = (frame.image.width, frame.image.height);
        png_io::write_rgb8(&out_dir.join(&image_rel), w, h, &frame.image.rgb)?;
        let encoded: Vec<[f64; 3]> = frame
            .gt_normals
            .as_ref()
            .unwrap()
            .iter()
            .map(|n| [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0])
            .collect();
        png_io::write_rgb16(&out_dir.join(&normals_rel), w, h, &encoded)?;
        png_io::write_mask8(&out_dir.join(&mask_rel), w, h, frame.specular_mask.as_ref().unwrap())?;
        frames.push(ManifestFrame {
            image: image_rel,
            k: frame.camera.k.to_row_major(),
            r: frame.camera.r.to_row_major(),
            t: frame.camera.t.to_array(),
            width: w,
            height: h,
            gt_normals: Some(normals_rel),
            specular_mask: Some(mask_rel),
        });
    }
    crate::mesh::ply::write_binary(&scene.gt_mesh, &out_dir.join("gt_mesh.ply"))
        .map_err(|e| SceneError::BadManifest(format!("gt mesh write failed: {e}")))?;
    let manifest = Manifest {
        frames,
        normalize: false,
        radius_hint: 1.0,
        gt_mesh: Some("gt_mesh.ply".into()),
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(io_err(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec { view_count: 8, image_size: 32, ..Default::default() }
    }

    #[test]
    fn diffuse_scene_has_empty_masks() {
        let spec = SceneSpec { specular_strength: 0.0, ..small_spec() };
        let scene = generate_scene(&spec).unwrap();
        for frame in &scene.dataset.frames {
            assert!(frame.specular_mask.as_ref().unwrap().iter().all(|&m| !m));
        }
    }

    #[test]
    fn glossy_scene_has_specular_pixels() {
        let scene = generate_scene(&small_spec()).unwrap();
        let any: usize = scene
            .dataset
            .frames
            .iter()
            .map(|f| f.specular_mask.as_ref().unwrap().iter().filter(|&&m| m).count())
            .sum();
        assert!(any > 20, "glossy scene should mask specular pixels, got {any}");
    }

    #[test]
    fn gt_normals_unit_on_foreground() {
        let scene = generate_scene(&small_spec()).unwrap();
        for frame in &scene.dataset.frames {
            for n in frame.gt_normals.as_ref().unwrap() {
                if n.norm() > 0.0 {
                    assert!((n.norm() - 1.0).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn cameras_outside_unit_sphere_and_object_in_frame() {
        let spec = small_spec();
        let scene = generate_scene(&spec).unwrap();
        scene.dataset.validate().unwrap();
        for frame in &scene.dataset.frames {
            // the object center projects near the image center
            let ([px, py], _) = frame.camera.project_point(Vec3::ZERO).unwrap();
            let c = (spec.image_size - 1) as f64 / 2.0;
            assert!((px - c).abs() < 1.0 && (py - c).abs() < 1.0);
        }
    }

    #[test]
    fn specular_pixels_vary_across_views_diffuse_interiors_do_not() {
        // construction target: the mirror term moves across views while the
        // diffuse shading is view-independent
        let glossy = generate_scene(&SceneSpec { image_size: 48, ..Default::default() }).unwrap();
        let spec = SceneSpec { image_size: 48, ..Default::default() };

        // pick specular-mask pixels of view 0, reproject their surface
        // points into other views and look at the color spread
        let frame0 = &glossy.dataset.frames[0];
        let eye0 = frame0.camera.center();
        let mut max_diff: f64 = 0.0;
        let size = spec.image_size;
        'outer: for idx in 0..size * size {
            if !frame0.specular_mask.as_ref().unwrap()[idx] {
                continue;
            }
            let px = (idx % size) as f64;
            let py = (idx / size) as f64;
            let dir = frame0.camera.pixel_ray_dir(px, py);
            let Some(t) = spec.trace(eye0, dir) else { continue };
            let p = eye0 + dir * t;
            let c0 = frame0.image.sample_color(px, py).unwrap();
            for other in &glossy.dataset.frames[1..] {
                let eye = other.camera.center();
                // only views that actually see the point
                let to = (p - eye).norm();
                if spec.trace(eye, (p - eye).normalized()).map(|t| (t - to).abs() < 0.01) != Some(true)
                {
                    continue;
                }
                let Some(([qx, qy], _)) = other.camera.project_point(p) else { continue };
                let Some(c1) = other.image.sample_color(qx, qy) else { continue };
                for ch in 0..3 {
                    max_diff = max_diff.max((c0[ch] - c1[ch]).abs());
                }
                if max_diff >= 0.1 {
                    break 'outer;
                }
            }
        }
        assert!(max_diff >= 0.1, "specular pixels should differ across views, max {max_diff}");

        // diffuse scene: checker interiors agree across views
        let diffuse_spec = SceneSpec {
            specular_strength: 0.0,
            image_size: 48,
            ..Default::default()
        };
        let diffuse = generate_scene(&diffuse_spec).unwrap();
        let frame0 = &diffuse.dataset.frames[0];
        let eye0 = frame0.camera.center();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for idx in 0..size * size {
            let px = (idx % size) as f64;
            let py = (idx / size) as f64;
            let dir = frame0.camera.pixel_ray_dir(px, py);
            let Some(t) = diffuse_spec.trace(eye0, dir) else { continue };
            let p = eye0 + dir * t;
            // checker interior: far from the smooth transition band
            let s = (std::f64::consts::PI * diffuse_spec.checker_freq * p.x).sin()
                * (std::f64::consts::PI * diffuse_spec.checker_freq * p.y).sin()
                * (std::f64::consts::PI * diffuse_spec.checker_freq * p.z).sin();
            if s.abs() < 0.75 {
                continue;
            }
            // skip silhouette-adjacent pixels
            let n = diffuse_spec.sdf_normal(p);
            if n.dot((eye0 - p).normalized()) < 0.6 {
                continue;
            }
            let c0 = frame0.image.sample_color(px, py).unwrap();
            for other in &diffuse.dataset.frames[1..] {
                let eye = other.camera.center();
                let to = (p - eye).norm();
                if diffuse_spec
                    .trace(eye, (p - eye).normalized())
                    .map(|t| (t - to).abs() < 0.005)
                    != Some(true)
                {
                    continue;
                }
                let n_dot = n.dot((eye - p).normalized());
                if n_dot < 0.6 {
                    continue;
                }
                let Some(([qx, qy], _)) = other.camera.project_point(p) else { continue };
                if qx < 1.0 || qy < 1.0 || qx > (size - 2) as f64 || qy > (size - 2) as f64 {
                    continue;
                }
                let Some(c1) = other.image.sample_color(qx, qy) else { continue };
                for ch in 0..3 {
                    worst = worst.max((c0[ch] - c1[ch]).abs());
                }
                checked += 1;
            }
        }
        assert!(checked > 50, "need enough diffuse interior pairs, got {checked}");
        assert!(worst <= 0.02, "diffuse interiors must agree across views, worst {worst}");
    }

    #[test]
    fn scene_roundtrip_through_manifest() {
        let dir = std::env::temp_dir().join("refneus_synth_roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        let spec = SceneSpec { view_count: 8, image_size: 16, ..Default::default() };
        let scene = generate_scene(&spec).unwrap();
        write_scene(&scene, &dir).unwrap();
        let loaded = crate::scene::load_scene(&dir.join("manifest.json")).unwrap();
        assert_eq!(loaded.num_views(), 8);
        assert!(loaded.gt_mesh_path.is_some());
        // 8-bit quantization bounds the color error
        for (a, b) in loaded.frames.iter().zip(scene.dataset.frames.iter()) {
            for (ca, cb) in a.image.rgb.iter().zip(b.image.rgb.iter()) {
                for ch in 0..3 {
                    assert!((ca[ch] - cb[ch]).abs() <= 0.5 / 255.0 + 1e-9);
                }
            }
            assert!(a.specular_mask.as_ref().unwrap() == b.specular_mask.as_ref().unwrap());
        }
        let mesh = crate::mesh::ply::read(&loaded.gt_mesh_path.clone().unwrap()).unwrap();
        assert_eq!(mesh.triangles.len(), scene.gt_mesh.triangles.len());
    }

    #[test]
    fn gt_mesh_silhouette_matches_analytic() {
        // ray-tracing the gt mesh reproduces the analytic silhouette within
        // one pixel everywhere
        let spec = SceneSpec { view_count: 8, image_size: 32, ..Default::default() };
        let scene = generate_scene(&spec).unwrap();
        let bvh = crate::bvh::Bvh::build(&scene.gt_mesh).unwrap();
        let frame = &scene.dataset.frames[0];
        let eye = frame.camera.center();
        let size = spec.image_size;
        let analytic = |x: f64, y: f64| spec.trace(eye, frame.camera.pixel_ray_dir(x, y)).is_some();
        for yy in 0..size {
            for xx in 0..size {
                let mesh_hit = bvh
                    .raycast(eye, frame.camera.pixel_ray_dir(xx as f64, yy as f64))
                    .is_some();
                let ana = analytic(xx as f64, yy as f64);
                if mesh_hit != ana {
                    let mut near_edge = false;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (xx as i64 + dx, yy as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= size as i64 || ny >= size as i64 {
                                continue;
                            }
                            if analytic(nx as f64, ny as f64) != ana {
                                near_edge = true;
                            }
                        }
                    }
                    assert!(near_edge, "silhouette mismatch away from boundary at ({xx},{yy})");
                }
            }
        }
    }
}
