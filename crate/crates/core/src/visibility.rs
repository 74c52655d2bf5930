//! Surface-point extraction along rays from discrete SDF samples and
//! per-view visibility classification by ray casting the intermediate mesh.

use crate::bvh::Bvh;
use crate::math::Vec3;
use crate::scene::CameraModel;

/// Slack added to the occlusion test: the intermediate mesh sits off the
/// true zero level set by up to a marching-cubes cell, so the strict
/// distance comparison would mark almost everything occluded. Two cells at
/// the 128 lattice over [-1,1].
pub const VIS_EPS_DEFAULT: f64 = 2.0 * (2.0 / 128.0);

/// First ray/surface intersection recovered from samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub t: f64,
    pub valid: bool,
}

impl SurfaceHit {
    pub fn invalid() -> SurfaceHit {
        SurfaceHit { point: Vec3::ZERO, t: 0.0, valid: false }
    }
}

/// Per-view visibility of a surface point.
#[derive(Debug, Clone)]
pub struct VisibilityMask {
    pub visible: Vec<bool>,
    pub visible_count: usize,
}

/// Indices j where the sampled field crosses zero inside [t_j, t_{j+1}]:
/// strict sign change, with exact zeros attached to the interval on their
/// left so a zero sample never produces two crossings.
pub fn sign_change_intervals(f: &[f64]) -> Vec<usize> {
    debug_assert!(f.len() >= 2);
    let mut out = Vec::new();
    for j in 0..f.len() - 1 {
        if f[j] * f[j + 1] < 0.0 || (f[j + 1] == 0.0 && f[j] != 0.0) {
            out.push(j);
        }
    }
    out
}

/// Parameter of the zero crossing by linear interpolation across one
/// sign-changing interval.
pub fn interpolate_crossing(t_j: f64, t_j1: f64, f_j: f64, f_j1: f64) -> f64 {
    debug_assert!(f_j != f_j1);
    (f_j * t_j1 - f_j1 * t_j) / (f_j - f_j1)
}

/// First (minimum-t) interpolated crossing along a sampled ray.
pub fn first_surface_hit(origin: Vec3, dir: Vec3, t: &[f64], f: &[f64]) -> SurfaceHit {
    debug_assert_eq!(t.len(), f.len());
    if t.len() < 2 {
        return SurfaceHit::invalid();
    }
    let crossings = sign_change_intervals(f);
    let Some(&j) = crossings.first() else {
        return SurfaceHit::invalid();
    };
    let t_star = interpolate_crossing(t[j], t[j + 1], f[j], f[j + 1]);
    SurfaceHit {
        point: origin + dir * t_star,
        t: t_star,
        valid: true,
    }
}

/// First-hit distance from `origin` along `dir` on the mesh, via the
/// acceleration structure.
pub fn raycast_mesh(bvh: &Bvh, origin: Vec3, dir: Vec3) -> Option<f64> {
    bvh.raycast(origin, dir)
}

/// Classify which views see the surface point: a view is visible when the
/// point projects inside its image with positive depth and no mesh hit lies
/// closer than the point (within `eps` slack; a raycast miss means nothing
/// occludes). The anchor view is always counted visible so the score's
/// denominator never empties.
pub fn classify_visibility(
    point: Vec3,
    cameras: &[CameraModel],
    anchor_view: usize,
    bvh: &Bvh,
    eps: f64,
) -> VisibilityMask {
    let mut visible = Vec::with_capacity(cameras.len());
    for (j, cam) in cameras.iter().enumerate() {
        if j == anchor_view {
            visible.push(true);
            continue;
        }
        let v = match cam.project_point(point) {
            None => false,
            Some(([px, py], _depth)) => {
                let in_image = px >= 0.0
                    && py >= 0.0
                    && px <= (cam.width - 1) as f64
                    && py <= (cam.height - 1) as f64;
                if !in_image {
                    false
                } else {
                    let origin = cam.center();
                    let to_point = point - origin;
                    let dist = to_point.norm();
                    match to_point.try_normalized(1e-12) {
                        None => true,
                        Some(dir) => match raycast_mesh(bvh, origin, dir) {
                            None => true,
                            Some(hit) => dist <= hit + eps,
                        },
                    }
                }
            }
        };
        visible.push(v);
    }
    let visible_count = visible.iter().filter(|v| **v).count();
    VisibilityMask { visible, visible_count }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::{icosphere, Bvh};
    use crate::math::vec3;
    use crate::scene::CameraModel;
    use crate::Mat3;

    #[test]
    fn sign_changes_basic() {
        assert_eq!(sign_change_intervals(&[1.0, 0.5, -0.5, -1.0]), vec![1]);
        assert_eq!(sign_change_intervals(&[1.0, 0.5, 0.25]), Vec::<usize>::new());
        assert_eq!(sign_change_intervals(&[1.0, -1.0, 1.0]), vec![0, 1]);
    }

    #[test]
    fn exact_zero_attaches_left() {
        // zero at index 1: one crossing in interval 0, none in interval 1
        assert_eq!(sign_change_intervals(&[1.0, 0.0, -1.0]), vec![0]);
        // double zero collapses to the first interval only
        assert_eq!(sign_change_intervals(&[1.0, 0.0, 0.0]), vec![0]);
        // leading zero has no left interval and is skipped
        assert_eq!(sign_change_intervals(&[0.0, 1.0, 2.0]), Vec::<usize>::new());
    }

    #[test]
    fn crossing_interpolation_examples() {
        let t = interpolate_crossing(1.0, 2.0, 0.2, -0.3);
        assert!((t - 1.4).abs() < 1e-12);
        let mid = interpolate_crossing(3.0, 5.0, 1.0, -1.0);
        assert!((mid - 4.0).abs() < 1e-12);
        // exact on a linear field: f(t) = a - b t
        let (a, b) = (0.73, 1.31);
        let (t0, t1) = (0.1, 1.7);
        let root = interpolate_crossing(t0, t1, a - b * t0, a - b * t1);
        assert!((root - a / b).abs() < 1e-6);
    }

    #[test]
    fn first_hit_picks_minimum_t() {
        let origin = vec3(0.0, 0.0, 0.0);
        let dir = vec3(0.0, 0.0, 1.0);
        let t = [1.0, 2.0, 3.0, 4.0];
        let f = [0.2, -0.3, 0.4, -0.1];
        let hit = first_surface_hit(origin, dir, &t, &f);
        assert!(hit.valid);
        assert!((hit.t - 1.4).abs() < 1e-12);
        assert!((hit.point - vec3(0.0, 0.0, 1.4)).norm() < 1e-12);

        let none = first_surface_hit(origin, dir, &t, &[1.0, 0.5, 0.25, 0.125]);
        assert!(!none.valid);

        let single = first_surface_hit(origin, dir, &[1.0, 2.0], &[1.0, -1.0]);
        assert!(single.valid && (single.t - 1.5).abs() < 1e-12);
    }

    #[test]
    fn hit_point_on_ray_within_bounds() {
        let origin = vec3(0.3, -0.2, 0.0);
        let dir = vec3(0.0, 1.0, 0.0);
        let t = [0.5, 1.0, 1.5];
        let f = [0.4, 0.1, -0.2];
        let hit = first_surface_hit(origin, dir, &t, &f);
        assert!(hit.valid);
        assert!(hit.t > t[0] && hit.t < *t.last().unwrap());
        assert!((hit.point - (origin + dir * hit.t)).norm() < 1e-12);
    }

    fn look_at(origin: Vec3, n: usize) -> CameraModel {
        let fwd = (-origin).normalized();
        let up = if fwd.z.abs() > 0.99 { vec3(0.0, 1.0, 0.0) } else { vec3(0.0, 0.0, 1.0) };
        let right = fwd.cross(up).normalized();
        let down = fwd.cross(right);
        let r = Mat3::from_rows(right, down, fwd);
        CameraModel {
            k: Mat3::from_row_major(&[
                40.0,
                0.0,
                (n - 1) as f64 / 2.0,
                0.0,
                40.0,
                (n - 1) as f64 / 2.0,
                0.0,
                0.0,
                1.0,
            ]),
            r,
            t: -(r * origin),
            width: n,
            height: n,
        }
    }

    #[test]
    fn sphere_occlusion_classification() {
        let mesh = icosphere(3);
        let bvh = Bvh::build(&mesh).unwrap();
        let cameras = vec![
            look_at(vec3(0.0, 0.0, 3.0), 64),  // sees the north pole
            look_at(vec3(0.0, 0.0, -3.0), 64), // occluded by the south side
            look_at(vec3(3.0, 0.0, 0.5), 64),  // oblique but visible
        ];
        let point = vec3(0.0, 0.0, 1.0);
        let mask = classify_visibility(point, &cameras, 0, &bvh, VIS_EPS_DEFAULT);
        assert!(mask.visible[0]);
        assert!(!mask.visible[1], "south camera should be occluded");
        assert!(mask.visible_count >= 1);
    }

    #[test]
    fn off_frustum_view_is_invisible() {
        let mesh = icosphere(2);
        let bvh = Bvh::build(&mesh).unwrap();
        // camera looking away from the point: projection behind camera
        let away = look_at(vec3(0.0, 0.0, -3.0), 64);
        let point = vec3(0.0, 0.0, -5.0);
        let mask = classify_visibility(point, &[away.clone(), away], 0, &bvh, VIS_EPS_DEFAULT);
        assert!(!mask.visible[1]);
    }

    #[test]
    fn anchor_always_visible() {
        let mesh = icosphere(2);
        let bvh = Bvh::build(&mesh).unwrap();
        let cam = look_at(vec3(0.0, 0.0, 3.0), 64);
        // point on the far side: occluded for everyone, but the anchor rule holds
        let point = vec3(0.0, 0.0, -1.0);
        let mask = classify_visibility(point, &[cam.clone(), cam], 0, &bvh, VIS_EPS_DEFAULT);
        assert!(mask.visible[0]);
        assert!(!mask.visible[1]);
        assert_eq!(mask.visible_count, 1);
    }
}
