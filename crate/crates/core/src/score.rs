//! Explicit multi-view reflection score: project a surface point into the
//! views that see it, gather pixel colors, and measure how far the anchor
//! view's color sits from the rest under the set's own covariance. Pixels
//! whose color disagrees across views (reflections) score high; consistent
//! pixels bottom out at the floor.

use rayon::prelude::*;

use crate::bvh::Bvh;
use crate::math::{Mat3, Vec3};
use crate::render::{render_ray, RenderParams, SceneField};
use crate::rng;
use crate::scene::ViewFrame;
use crate::visibility::{classify_visibility, first_surface_hit, VisibilityMask};

/// Covariance regularizer added to the diagonal.
pub const COV_REG: f64 = 1e-4;

/// Score knobs. The floor turns the photometric weight 1/beta^2 into plain
/// L1 on consistent pixels while still down-weighting reflective ones.
#[derive(Debug, Clone, Copy)]
pub struct ScoreParams {
    pub gamma: f64,
    pub beta_floor: f64,
    pub eps_vis: f64,
    pub use_visibility: bool,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            gamma: 5.0,
            beta_floor: 1.0,
            eps_vis: crate::visibility::VIS_EPS_DEFAULT,
            use_visibility: true,
        }
    }
}

/// Colors gathered for one surface point.
#[derive(Debug, Clone)]
pub struct ColorSet {
    pub anchor: [f64; 3],
    /// (view id, color) for every visible view other than the anchor.
    pub others: Vec<(usize, [f64; 3])>,
    pub cov: Mat3,
    pub cov_inv: Mat3,
}

/// Per-ray reflection score.
#[derive(Debug, Clone, Copy)]
pub struct ReflectionScore {
    /// Floored score used as the photometric variance.
    pub beta_sq: f64,
    /// Pre-floor value.
    pub raw: f64,
    /// Views that participated (anchor included).
    pub visible_count: usize,
}

impl ReflectionScore {
    pub fn floor(params: &ScoreParams) -> ReflectionScore {
        ReflectionScore { beta_sq: params.beta_floor, raw: 0.0, visible_count: 1 }
    }
}

/// Sample covariance of a color population, regularized on the diagonal.
/// Fewer than three samples carry no usable spread: identity fallback.
pub fn empirical_covariance(colors: &[[f64; 3]]) -> Mat3 {
    if colors.len() < 3 {
        return Mat3::IDENTITY;
    }
    let n = colors.len() as f64;
    let mut mean = [0.0; 3];
    for c in colors {
        for k in 0..3 {
            mean[k] += c[k];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = [[0.0; 3]; 3];
    for c in colors {
        let d = [c[0] - mean[0], c[1] - mean[1], c[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += COV_REG;
    }
    Mat3 { m: cov }
}

/// Covariance-normalized distance between two colors.
pub fn mahalanobis(a: [f64; 3], b: [f64; 3], cov_inv: &Mat3) -> f64 {
    let d = Vec3::from_array([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
    let q = d.dot(*cov_inv * d);
    q.max(0.0).sqrt()
}

/// gamma times the mean Mahalanobis distance from the anchor to each other
/// visible color; zero when the anchor is the only visible view.
pub fn mahalanobis_mean_score(
    anchor: [f64; 3],
    others: &[[f64; 3]],
    cov_inv: &Mat3,
    gamma: f64,
) -> f64 {
    if others.is_empty() {
        return 0.0;
    }
    let sum: f64 = others.iter().map(|c| mahalanobis(anchor, *c, cov_inv)).sum();
    gamma * sum / others.len() as f64
}

/// Project the point into a view and fetch its bilinear color; `None` when
/// behind the camera or off-image.
fn projected_color(frame: &ViewFrame, point: Vec3) -> Option<[f64; 3]> {
    let ([px, py], _) = frame.camera.project_point(point)?;
    frame.image.sample_color(px, py)
}

/// Gather the color set for a surface point. With a mesh snapshot and
/// visibility enabled, occluded views are dropped; otherwise every
/// in-frustum view participates. The anchor view always participates.
pub fn gather_colors(
    point: Vec3,
    anchor_view: usize,
    frames: &[ViewFrame],
    bvh: Option<&Bvh>,
    params: &ScoreParams,
) -> Option<ColorSet> {
    let anchor = projected_color(&frames[anchor_view], point)?;
    let mask: Option<VisibilityMask> = match (bvh, params.use_visibility) {
        (Some(b), true) => {
            let cams: Vec<_> = frames.iter().map(|f| f.camera.clone()).collect();
            Some(classify_visibility(point, &cams, anchor_view, b, params.eps_vis))
        }
        _ => None,
    };
    let mut population = vec![anchor];
    let mut others = Vec::new();
    for (j, frame) in frames.iter().enumerate() {
        if j == anchor_view {
            continue;
        }
        if let Some(m) = &mask {
            if !m.visible[j] {
                continue;
            }
        }
        if let Some(c) = projected_color(frame, point) {
            population.push(c);
            others.push((j, c));
        }
    }
    let cov = empirical_covariance(&population);
    let cov_inv = cov.inverse().unwrap_or(Mat3::IDENTITY);
    Some(ColorSet { anchor, others, cov, cov_inv })
}

/// Full per-ray score: gather, covariance, floored Mahalanobis mean.
pub fn reflection_score(
    point: Vec3,
    anchor_view: usize,
    frames: &[ViewFrame],
    bvh: Option<&Bvh>,
    params: &ScoreParams,
) -> ReflectionScore {
    let Some(set) = gather_colors(point, anchor_view, frames, bvh, params) else {
        return ReflectionScore::floor(params);
    };
    let colors: Vec<[f64; 3]> = set.others.iter().map(|(_, c)| *c).collect();
    let raw = mahalanobis_mean_score(set.anchor, &colors, &set.cov_inv, params.gamma);
    ReflectionScore {
        beta_sq: raw.max(params.beta_floor),
        raw,
        visible_count: set.others.len() + 1,
    }
}

/// Per-pixel score map of one view: rays that hit the surface get their
/// reflection score, background pixels sit at the floor. Deterministic
/// (midpoint sampling, per-pixel streams).
pub fn score_map(
    field: &dyn SceneField,
    frames: &[ViewFrame],
    view: usize,
    bvh: Option<&Bvh>,
    score_params: &ScoreParams,
    render_params: &RenderParams,
    seed: u64,
) -> Vec<f64> {
    let cam = &frames[view].camera;
    let origin = cam.center();
    let render_params = RenderParams { jitter: false, ..*render_params };
    (0..cam.width * cam.height)
        .into_par_iter()
        .map(|idx| {
            let px = (idx % cam.width) as f64;
            let py = (idx / cam.width) as f64;
            let dir = cam.pixel_ray_dir(px, py);
            let mut stream = rng::stream(seed, "score-pixel", idx as u64);
            let out = render_ray(field, origin, dir, &render_params, &mut stream);
            if out.t_samples.len() < 2 {
                return score_params.beta_floor;
            }
            let hit = first_surface_hit(origin, dir, &out.t_samples, &out.f_samples);
            if !hit.valid {
                return score_params.beta_floor;
            }
            reflection_score(hit.point, view, frames, bvh, score_params).beta_sq
        })
        .collect()
}

/// Write a score map as 16-bit grayscale with a JSON sidecar recording the
/// normalization range and scoring constants.
pub fn write_score_map(
    scores: &[f64],
    width: usize,
    height: usize,
    params: &ScoreParams,
    ablation: &str,
    path: &std::path::Path,
) -> Result<(), crate::scene::SceneError> {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let normalized: Vec<f64> = scores.iter().map(|s| (s - lo) / (hi - lo)).collect();
    crate::scene::png_io::write_gray16(path, width, height, &normalized)?;
    let sidecar = serde_json::json!({
        "min": lo,
        "max": hi,
        "gamma": params.gamma,
        "beta_sq_min": params.beta_floor,
        "ablation": ablation,
    });
    let side_path = path.with_extension("json");
    std::fs::write(&side_path, serde_json::to_string_pretty(&sidecar).unwrap()).map_err(|e| {
        crate::scene::SceneError::Io { path: side_path, source: e }
    })?;
    Ok(())
}

/// Cholesky check used by tests: SPD iff all pivots are positive.
pub fn cholesky3_ok(m: &Mat3) -> bool {
    let a = &m.m;
    let l00sq = a[0][0];
    if l00sq <= 0.0 {
        return false;
    }
    let l00 = l00sq.sqrt();
    let l10 = a[1][0] / l00;
    let l20 = a[2][0] / l00;
    let l11sq = a[1][1] - l10 * l10;
    if l11sq <= 0.0 {
        return false;
    }
    let l11 = l11sq.sqrt();
    let l21 = (a[2][1] - l20 * l10) / l11;
    let l22sq = a[2][2] - l20 * l20 - l21 * l21;
    l22sq > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use crate::rng;

    #[test]
    fn covariance_of_identical_colors_is_regularized_diagonal() {
        let colors = vec![[0.3, 0.5, 0.7]; 5];
        let cov = empirical_covariance(&colors);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { COV_REG } else { 0.0 };
                assert!((cov.m[i][j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn covariance_matches_hand_computation() {
        let mut colors = Vec::new();
        for _ in 0..5 {
            colors.push([0.0, 0.0, 0.0]);
            colors.push([1.0, 0.0, 0.0]);
        }
        let cov = empirical_covariance(&colors);
        let n = 10.0;
        let expect = 0.25 * (n / (n - 1.0)) + COV_REG;
        assert!((cov.m[0][0] - expect).abs() < 1e-12, "{} vs {expect}", cov.m[0][0]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(cov.m[i][j].abs() < 1e-15, "off-diagonal should be zero");
                }
            }
        }
    }

    #[test]
    fn covariance_spd_on_random_sets_and_identity_fallback() {
        let mut r = rng::stream(11, "cov", 0);
        for _ in 0..1000 {
            let n = 3 + rng::uniform_index(&mut r, 20);
            let colors: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng::uniform(&mut r),
                        rng::uniform(&mut r),
                        rng::uniform(&mut r),
                    ]
                })
                .collect();
            let cov = empirical_covariance(&colors);
            assert!(cholesky3_ok(&cov), "covariance not SPD: {cov:?}");
        }
        assert_eq!(empirical_covariance(&[[0.1, 0.2, 0.3]]), Mat3::IDENTITY);
        assert_eq!(
            empirical_covariance(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]),
            Mat3::IDENTITY
        );
    }

    #[test]
    fn mahalanobis_cases() {
        let id = Mat3::IDENTITY;
        assert_eq!(mahalanobis([0.2, 0.4, 0.6], [0.2, 0.4, 0.6], &id), 0.0);
        let d = mahalanobis([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], &id);
        assert!((d - 1.0).abs() < 1e-12);
        let cov = Mat3::from_row_major(&[4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let inv = cov.inverse().unwrap();
        let d = mahalanobis([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], &inv);
        assert!((d - 0.5).abs() < 1e-12);
        // symmetry
        let a = [0.1, 0.9, 0.4];
        let b = [0.7, 0.2, 0.5];
        assert!((mahalanobis(a, b, &inv) - mahalanobis(b, a, &inv)).abs() < 1e-15);
    }

    #[test]
    fn mahalanobis_scales_inversely_with_sigma() {
        let a = [0.8, 0.1, 0.3];
        let b = [0.2, 0.5, 0.9];
        let euclid = {
            let d: [f64; 3] = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        };
        for sigma in [0.5, 1.0, 2.0] {
            let cov = Mat3::from_row_major(&[
                sigma * sigma,
                0.0,
                0.0,
                0.0,
                sigma * sigma,
                0.0,
                0.0,
                0.0,
                sigma * sigma,
            ]);
            let inv = cov.inverse().unwrap();
            let d = mahalanobis(a, b, &inv);
            assert!((d - euclid / sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_score_matches_hand_value() {
        let anchor = [1.0, 1.0, 1.0];
        let others = vec![[0.0, 0.0, 0.0]; 3];
        let raw = mahalanobis_mean_score(anchor, &others, &Mat3::IDENTITY, 5.0);
        assert!((raw - 5.0 * 3.0f64.sqrt()).abs() < 1e-9, "raw {raw}");
        // gamma linearity
        let doubled = mahalanobis_mean_score(anchor, &others, &Mat3::IDENTITY, 10.0);
        assert!((doubled - 2.0 * raw).abs() < 1e-9);
        // empty set scores zero
        assert_eq!(mahalanobis_mean_score(anchor, &[], &Mat3::IDENTITY, 5.0), 0.0);
    }

    #[test]
    fn score_invariances() {
        // ordering of the other views must not matter, and removing a view
        // only changes the score through the mean
        let anchor = [0.9, 0.8, 0.1];
        let a = [0.2, 0.3, 0.4];
        let b = [0.5, 0.1, 0.8];
        let c = [0.7, 0.7, 0.2];
        let inv = Mat3::IDENTITY;
        let s_abc = mahalanobis_mean_score(anchor, &[a, b, c], &inv, 5.0);
        let s_cab = mahalanobis_mean_score(anchor, &[c, a, b], &inv, 5.0);
        assert!((s_abc - s_cab).abs() < 1e-12);
        let s_ab = mahalanobis_mean_score(anchor, &[a, b], &inv, 5.0);
        let da = mahalanobis(anchor, a, &inv);
        let db = mahalanobis(anchor, b, &inv);
        assert!((s_ab - 5.0 * (da + db) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn score_invariant_under_global_channel_permutation() {
        let perm = |c: [f64; 3]| [c[2], c[0], c[1]];
        let anchor = [0.9, 0.2, 0.4];
        let others = [[0.1, 0.3, 0.8], [0.4, 0.6, 0.2], [0.2, 0.9, 0.5], [0.3, 0.3, 0.3]];
        let population: Vec<[f64; 3]> =
            std::iter::once(anchor).chain(others.iter().copied()).collect();
        let cov = empirical_covariance(&population);
        let raw = mahalanobis_mean_score(anchor, &others, &cov.inverse().unwrap(), 5.0);

        let population_p: Vec<[f64; 3]> = population.iter().map(|c| perm(*c)).collect();
        let others_p: Vec<[f64; 3]> = others.iter().map(|c| perm(*c)).collect();
        let cov_p = empirical_covariance(&population_p);
        let raw_p =
            mahalanobis_mean_score(perm(anchor), &others_p, &cov_p.inverse().unwrap(), 5.0);
        assert!((raw - raw_p).abs() < 1e-9, "{raw} vs {raw_p}");
    }

    #[test]
    fn floored_score_for_consistent_colors() {
        use crate::scene::{CameraModel, ImageBuffer, ViewFrame};
        use crate::Mat3 as M;
        // two cameras staring at the origin over uniform images: every
        // projected color matches, so the raw score vanishes and the floor
        // holds
        let mk = |origin: Vec3| {
            let fwd = (-origin).normalized();
            let up = vec3(0.0, 0.0, 1.0);
            let right = fwd.cross(up).normalized();
            let down = fwd.cross(right);
            let r = M::from_rows(right, down, fwd);
            ViewFrame {
                camera: CameraModel {
                    k: M::from_row_major(&[8.0, 0.0, 3.5, 0.0, 8.0, 3.5, 0.0, 0.0, 1.0]),
                    r,
                    t: -(r * origin),
                    width: 8,
                    height: 8,
                },
                image: ImageBuffer::constant(8, 8, [0.6, 0.6, 0.6]),
                gt_normals: None,
                specular_mask: None,
            }
        };
        let frames = vec![mk(vec3(3.0, 0.0, 0.3)), mk(vec3(-3.0, 0.2, 0.4)), mk(vec3(0.0, 3.0, 0.5))];
        let params = ScoreParams::default();
        let score = reflection_score(vec3(0.0, 0.0, 0.0), 0, &frames, None, &params);
        assert!(score.raw < 1e-9);
        assert_eq!(score.beta_sq, params.beta_floor);
        assert!(score.visible_count >= 2);
    }
}
