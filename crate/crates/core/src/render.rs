//! SDF volume rendering: ray/unit-sphere bounds, stratified and importance
//! sampling, the logistic alpha from signed distances, and compositing of
//! color, normal and depth along rays.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

use crate::field::{
    surface_normal_from_grad, DeviationParam, RadianceNetwork, RadianceWorkspace, SdfNetwork,
    SdfWorkspace,
};
use crate::linalg::Mat;
use crate::math::{reflect_direction, Real, Vec3};
use crate::rng;
use crate::scene::{png_io, CameraModel, SceneError};

pub const DEGENERATE_NORMAL_EPS: f64 = 1e-8;

/// A ray clipped to the unit sphere that bounds the normalized scene.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Build a ray through the unit sphere; `None` when it misses (tangent
    /// grazes count as misses).
    pub fn through_unit_sphere(origin: Vec3, dir: Vec3) -> Option<Ray> {
        let (near, far) = ray_unit_sphere_bounds(origin, dir)?;
        Some(Ray { origin, dir, near, far })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Chord of the unit sphere cut by the ray, clamped to non-negative t.
pub fn ray_unit_sphere_bounds(origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let b = origin.dot(dir);
    let c = origin.norm_sq() - 1.0;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq).max(0.0);
    let far = -b + sq;
    if far <= near + 1e-9 {
        return None;
    }
    Some((near, far))
}

/// Stratified samples over [near, far]: one draw per equal sub-interval.
/// Without jitter every draw sits at its stratum midpoint.
pub fn sample_coarse(
    near: f64,
    far: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
    jitter: bool,
) -> Vec<f64> {
    debug_assert!(n >= 2 && far > near);
    let step = (far - near) / n as f64;
    (0..n)
        .map(|k| {
            let u = if jitter { rng::uniform(rng) } else { 0.5 };
            near + (k as f64 + u) * step
        })
        .collect()
}

/// Importance samples by inverse CDF over the piecewise-constant histogram
/// spanned by consecutive coarse samples (mass of a bin comes from its left
/// sample's weight; all-zero weights fall back to uniform over the full
/// interval). Returns the merged, sorted union with the coarse samples.
pub fn sample_fine(
    near: f64,
    far: f64,
    coarse_t: &[f64],
    coarse_weights: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
    jitter: bool,
) -> Vec<f64> {
    debug_assert_eq!(coarse_t.len(), coarse_weights.len());
    let nc = coarse_t.len();
    let mut fine = Vec::with_capacity(n);
    let mut mass: Vec<f64> = (0..nc.saturating_sub(1))
        .map(|k| coarse_weights[k].max(0.0))
        .collect();
    if let Some(last) = mass.last_mut() {
        *last += coarse_weights[nc - 1].max(0.0);
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 || mass.is_empty() {
        for k in 0..n {
            let u = if jitter { rng::uniform(rng) } else { 0.5 };
            fine.push(near + (k as f64 + u) / n as f64 * (far - near));
        }
    } else {
        let mut cdf = Vec::with_capacity(mass.len() + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for m in &mass {
            acc += m / total;
            cdf.push(acc);
        }
        *cdf.last_mut().unwrap() = 1.0;
        for k in 0..n {
            let du = if jitter { rng::uniform(rng) } else { 0.5 };
            let u = (k as f64 + du) / n as f64;
            let mut lo = 0;
            let mut hi = cdf.len() - 1;
            while lo + 1 < hi {
                let mid = (lo + hi) / 2;
                if cdf[mid] <= u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let denom = (cdf[lo + 1] - cdf[lo]).max(1e-12);
            let frac = (u - cdf[lo]) / denom;
            fine.push(coarse_t[lo] + frac * (coarse_t[lo + 1] - coarse_t[lo]));
        }
        fine.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    // merge two sorted lists
    let mut merged = Vec::with_capacity(nc + n);
    let (mut i, mut j) = (0, 0);
    while i < nc || j < fine.len() {
        if j >= fine.len() || (i < nc && coarse_t[i] <= fine[j]) {
            merged.push(coarse_t[i]);
            i += 1;
        } else {
            merged.push(fine[j]);
            j += 1;
        }
    }
    merged
}

/// Numerically stable logistic.
#[inline]
pub fn sigmoid<S: Real>(z: S) -> S {
    if z.to_f64() >= 0.0 {
        S::ONE / (S::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::ONE + e)
    }
}

/// Opacity of one sample interval from the logistic CDF of its endpoint
/// signed distances: max((Phi(f_i) - Phi(f_next)) / Phi(f_i), 0).
#[inline]
pub fn alpha_from_sdf<S: Real>(f_i: S, f_next: S, sharpness: S) -> S {
    let phi_i = sigmoid(sharpness * f_i);
    let phi_n = sigmoid(sharpness * f_next);
    ((phi_i - phi_n) / phi_i).max(S::ZERO)
}

/// Alpha plus its partial derivatives w.r.t. (f_i, f_next, sharpness).
/// The clamped branch has zero gradient.
#[inline]
pub fn alpha_from_sdf_grad<S: Real>(f_i: S, f_next: S, sharpness: S) -> (S, S, S, S) {
    let phi_i = sigmoid(sharpness * f_i);
    let phi_n = sigmoid(sharpness * f_next);
    let u = (phi_i - phi_n) / phi_i;
    if u.to_f64() <= 0.0 {
        return (S::ZERO, S::ZERO, S::ZERO, S::ZERO);
    }
    let ratio = phi_n / phi_i;
    let d_fi = sharpness * ratio * (S::ONE - phi_i);
    let d_fn = -(sharpness * ratio * (S::ONE - phi_n));
    let d_s = ratio * (f_i * (S::ONE - phi_i) - f_next * (S::ONE - phi_n));
    (u, d_fi, d_fn, d_s)
}

/// Per-sample compositing weights T_i * alpha_i with the running product
/// transmittance. Returns the weight sum.
pub fn weights_from_alphas<S: Real>(alphas: &[S], weights: &mut Vec<S>) -> S {
    weights.clear();
    let mut transmittance = S::ONE;
    let mut sum = S::ZERO;
    for &a in alphas {
        let w = transmittance * a;
        weights.push(w);
        sum += w;
        transmittance = transmittance * (S::ONE - a);
    }
    sum
}

/// Weighted aggregation of per-sample vectors: sum_i T_i alpha_i v_i.
pub fn composite<S: Real, const K: usize>(alphas: &[S], values: &[[S; K]]) -> ([S; K], S) {
    debug_assert_eq!(alphas.len(), values.len());
    let mut weights = Vec::with_capacity(alphas.len());
    let wsum = weights_from_alphas(alphas, &mut weights);
    let mut out = [S::ZERO; K];
    for (w, v) in weights.iter().zip(values.iter()) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += *w * *x;
        }
    }
    (out, wsum)
}

/// Inference-time view of a trained (or analytic) scene: signed distance
/// with gradient/feature, directional radiance and the current sharpness.
pub trait SceneField: Sync {
    fn feature_dim(&self) -> usize;
    fn sharpness(&self) -> f64;
    fn sdf_values(&self, pts: &[[f64; 3]], out: &mut Vec<f64>);
    fn eval(
        &self,
        pts: &[[f64; 3]],
        sdf: &mut Vec<f64>,
        grad: &mut Vec<[f64; 3]>,
        feature: &mut Mat<f64>,
    );
    fn radiance(
        &self,
        pts: &[[f64; 3]],
        normals: &[[f64; 3]],
        dirs: &[[f64; 3]],
        feature: &Mat<f64>,
        out: &mut Vec<[f64; 3]>,
    );
}

/// Neural scene adapter over the two networks and the deviation parameter.
pub struct NeuralScene<'a, S: Real> {
    pub sdf: &'a SdfNetwork<S>,
    pub radiance: &'a RadianceNetwork<S>,
    pub deviation: &'a DeviationParam<S>,
}

impl<'a, S: Real> SceneField for NeuralScene<'a, S> {
    fn feature_dim(&self) -> usize {
        self.sdf.config.feature_dim
    }

    fn sharpness(&self) -> f64 {
        self.deviation.sharpness().to_f64()
    }

    fn sdf_values(&self, pts: &[[f64; 3]], out: &mut Vec<f64>) {
        let mut ws = SdfWorkspace::new(self.sdf, pts.len().max(1));
        self.sdf.sdf_values_f64(pts, &mut ws, out);
    }

    fn eval(
        &self,
        pts: &[[f64; 3]],
        sdf: &mut Vec<f64>,
        grad: &mut Vec<[f64; 3]>,
        feature: &mut Mat<f64>,
    ) {
        let b = pts.len();
        let buf: Vec<[S; 3]> = pts
            .iter()
            .map(|p| [S::from_f64(p[0]), S::from_f64(p[1]), S::from_f64(p[2])])
            .collect();
        let mut ws = SdfWorkspace::new(self.sdf, b.max(1));
        self.sdf.forward(&buf, &mut ws, true);
        sdf.clear();
        grad.clear();
        *feature = Mat::zeros(b, self.feature_dim());
        for i in 0..b {
            sdf.push(ws.sdf[i].to_f64());
            grad.push([
                ws.grad[i][0].to_f64(),
                ws.grad[i][1].to_f64(),
                ws.grad[i][2].to_f64(),
            ]);
            for (dst, src) in feature.row_mut(i).iter_mut().zip(ws.feature.row(i).iter()) {
                *dst = src.to_f64();
            }
        }
    }

    fn radiance(
        &self,
        pts: &[[f64; 3]],
        normals: &[[f64; 3]],
        dirs: &[[f64; 3]],
        feature: &Mat<f64>,
        out: &mut Vec<[f64; 3]>,
    ) {
        let b = pts.len();
        let conv3 = |v: &[[f64; 3]]| -> Vec<[S; 3]> {
            v.iter()
                .map(|p| [S::from_f64(p[0]), S::from_f64(p[1]), S::from_f64(p[2])])
                .collect()
        };
        let pts_s = conv3(pts);
        let n_s = conv3(normals);
        let d_s = conv3(dirs);
        let mut feat_s = Mat::zeros(b, self.feature_dim());
        for i in 0..b {
            for (dst, src) in feat_s.row_mut(i).iter_mut().zip(feature.row(i).iter()) {
                *dst = S::from_f64(*src);
            }
        }
        let mut ws = RadianceWorkspace::new(self.radiance, b.max(1));
        self.radiance.forward(&pts_s, &n_s, &d_s, &feat_s, &mut ws);
        out.clear();
        for i in 0..b {
            out.push([
                ws.rgb[i][0].to_f64(),
                ws.rgb[i][1].to_f64(),
                ws.rgb[i][2].to_f64(),
            ]);
        }
    }
}

/// Background color shared by the synthetic generator and the renderer.
pub const DEFAULT_BACKGROUND: [f64; 3] = [0.04, 0.05, 0.08];

/// Rendering knobs shared by inference and training.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RenderParams {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f64; 3],
    pub use_reflection_direction: bool,
    pub jitter: bool,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            n_coarse: 32,
            n_fine: 16,
            background: DEFAULT_BACKGROUND,
            use_reflection_direction: true,
            jitter: false,
        }
    }
}

/// Composited per-ray outputs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// Weighted normal sum before normalization.
    pub normal: [f64; 3],
    /// Unit-normalized composite normal (zero when degenerate).
    pub normal_unit: [f64; 3],
    pub depth: f64,
    pub weight_sum: f64,
    /// Sorted sample positions and signed distances, reused by the
    /// surface-hit extraction for the reflection score.
    pub t_samples: Vec<f64>,
    pub f_samples: Vec<f64>,
}

impl RenderOutput {
    pub fn background(params: &RenderParams) -> RenderOutput {
        RenderOutput {
            color: params.background,
            normal: [0.0; 3],
            normal_unit: [0.0; 3],
            depth: 0.0,
            weight_sum: 0.0,
            t_samples: Vec::new(),
            f_samples: Vec::new(),
        }
    }
}

/// Render one ray against a field: coarse pass, importance pass, logistic
/// alphas (the last sample's partner is extrapolated along the ray using
/// the analytic gradient), compositing with the residual transmittance
/// times the background color.
pub fn render_ray(
    field: &dyn SceneField,
    origin: Vec3,
    dir: Vec3,
    params: &RenderParams,
    rng: &mut ChaCha8Rng,
) -> RenderOutput {
    let Some(ray) = Ray::through_unit_sphere(origin, dir) else {
        return RenderOutput::background(params);
    };
    let s = field.sharpness();

    let coarse_t = sample_coarse(ray.near, ray.far, params.n_coarse, rng, params.jitter);
    let coarse_pts: Vec<[f64; 3]> = coarse_t.iter().map(|&t| ray.at(t).to_array()).collect();
    let mut coarse_f = Vec::new();
    field.sdf_values(&coarse_pts, &mut coarse_f);
    let coarse_alphas: Vec<f64> = (0..coarse_t.len())
        .map(|i| {
            let f_next = if i + 1 < coarse_f.len() { coarse_f[i + 1] } else { coarse_f[i] };
            alpha_from_sdf(coarse_f[i], f_next, s)
        })
        .collect();
    let mut coarse_w = Vec::new();
    weights_from_alphas(&coarse_alphas, &mut coarse_w);

    let t = sample_fine(
        ray.near,
        ray.far,
        &coarse_t,
        &coarse_w,
        params.n_fine,
        rng,
        params.jitter,
    );

    let pts: Vec<[f64; 3]> = t.iter().map(|&tv| ray.at(tv).to_array()).collect();
    let (mut f, mut g, mut feat) = (Vec::new(), Vec::new(), Mat::zeros(0, 0));
    field.eval(&pts, &mut f, &mut g, &mut feat);

    let p = t.len();
    let d_arr = dir.to_array();
    let mut normals = Vec::with_capacity(p);
    let mut dirs = Vec::with_capacity(p);
    for gi in g.iter() {
        let n = surface_normal_from_grad(*gi, DEGENERATE_NORMAL_EPS)
            .unwrap_or([-d_arr[0], -d_arr[1], -d_arr[2]]);
        normals.push(n);
        let dter = if params.use_reflection_direction {
            reflect_direction(dir, Vec3::from_array(n)).to_array()
        } else {
            d_arr
        };
        dirs.push(dter);
    }
    let mut colors = Vec::new();
    field.radiance(&pts, &normals, &dirs, &feat, &mut colors);

    // Alphas over consecutive pairs; the last pair extrapolates the SDF one
    // spacing past the far bound along the gradient's directional slope.
    let mut alphas = Vec::with_capacity(p);
    for i in 0..p {
        let f_next = if i + 1 < p {
            f[i + 1]
        } else {
            let delta = if p >= 2 { t[p - 1] - t[p - 2] } else { ray.far - ray.near };
            let slope = g[p - 1][0] * d_arr[0] + g[p - 1][1] * d_arr[1] + g[p - 1][2] * d_arr[2];
            f[p - 1] + slope * delta
        };
        alphas.push(alpha_from_sdf(f[i], f_next, s));
    }
    let mut weights = Vec::new();
    let weight_sum = weights_from_alphas(&alphas, &mut weights);

    let mut color = [0.0; 3];
    let mut normal = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..p {
        let w = weights[i];
        for c in 0..3 {
            color[c] += w * colors[i][c];
            normal[c] += w * normals[i][c];
        }
        depth += w * t[i];
    }
    let residual = 1.0 - weight_sum;
    for c in 0..3 {
        color[c] += residual * params.background[c];
    }
    let normal_unit = Vec3::from_array(normal)
        .try_normalized(1e-12)
        .map(Vec3::to_array)
        .unwrap_or([0.0; 3]);

    RenderOutput {
        color,
        normal,
        normal_unit,
        depth,
        weight_sum,
        t_samples: t,
        f_samples: f,
    }
}

/// Full-view render: color, composite unit normals, depth expectation and
/// weight sum per pixel.
pub struct ViewRender {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub normal: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Render every pixel of a camera. Rays run in parallel; each pixel draws
/// from its own (seed, pixel index) stream so scheduling cannot change the
/// output.
pub fn render_view(
    field: &dyn SceneField,
    camera: &CameraModel,
    params: &RenderParams,
    seed: u64,
) -> ViewRender {
    let (w, h) = (camera.width, camera.height);
    let origin = camera.center();
    let outputs: Vec<([f64; 3], [f64; 3], f64, f64)> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let px = (idx % w) as f64;
            let py = (idx / w) as f64;
            let dir = camera.pixel_ray_dir(px, py);
            let mut stream = rng::stream(seed, "render-pixel", idx as u64);
            let out = render_ray(field, origin, dir, params, &mut stream);
            (out.color, out.normal_unit, out.depth, out.weight_sum)
        })
        .collect();
    let mut view = ViewRender {
        width: w,
        height: h,
        color: Vec::with_capacity(w * h),
        normal: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        weight: Vec::with_capacity(w * h),
    };
    for (c, n, d, ws) in outputs {
        view.color.push(c);
        view.normal.push(n);
        view.depth.push(d);
        view.weight.push(ws);
    }
    view
}

#[derive(Serialize)]
struct RangeSidecar {
    depth_min: f64,
    depth_max: f64,
    weight_min: f64,
    weight_max: f64,
}

impl ViewRender {
    /// Write the four standard PNGs plus the min/max sidecar: 8-bit color,
    /// 8-bit normals encoded (n+1)/2, 16-bit depth and weight normalized by
    /// their recorded ranges.
    pub fn write_pngs(&self, dir: &Path, stem: &str) -> Result<(), SceneError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| SceneError::Io { path: dir.to_path_buf(), source: e })?;
        png_io::write_rgb8(
            &dir.join(format!("{stem}_color.png")),
            self.width,
            self.height,
            &self.color,
        )?;
        let enc_normals: Vec<[f64; 3]> = self
            .normal
            .iter()
            .map(|n| [(n[0] + 1.0) / 2.0, (n[1] + 1.0) / 2.0, (n[2] + 1.0) / 2.0])
            .collect();
        png_io::write_rgb8(
            &dir.join(format!("{stem}_normal.png")),
            self.width,
            self.height,
            &enc_normals,
        )?;
        let range = |v: &[f64]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &x in v {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            if !lo.is_finite() || hi <= lo {
                (0.0, 1.0)
            } else {
                (lo, hi)
            }
        };
        let (dmin, dmax) = range(&self.depth);
        let (wmin, wmax) = range(&self.weight);
        let norm =
            |v: &[f64], lo: f64, hi: f64| -> Vec<f64> { v.iter().map(|&x| (x - lo) / (hi - lo)).collect() };
        png_io::write_gray16(
            &dir.join(format!("{stem}_depth.png")),
            self.width,
            self.height,
            &norm(&self.depth, dmin, dmax),
        )?;
        png_io::write_gray16(
            &dir.join(format!("{stem}_weight.png")),
            self.width,
            self.height,
            &norm(&self.weight, wmin, wmax),
        )?;
        let sidecar = RangeSidecar {
            depth_min: dmin,
            depth_max: dmax,
            weight_min: wmin,
            weight_max: wmax,
        };
        let path = dir.join(format!("{stem}_ranges.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar).unwrap())
            .map_err(|e| SceneError::Io { path, source: e })?;
        Ok(())
    }
}

/// Analytic stand-in field for renderer tests and oracles.
pub struct AnalyticField<F, G>
where
    F: Fn(Vec3) -> f64 + Sync,
    G: Fn(Vec3) -> Vec3 + Sync,
{
    pub sdf_fn: F,
    pub grad_fn: G,
    pub color: [f64; 3],
    pub sharpness: f64,
}

impl<F, G> SceneField for AnalyticField<F, G>
where
    F: Fn(Vec3) -> f64 + Sync,
    G: Fn(Vec3) -> Vec3 + Sync,
{
    fn feature_dim(&self) -> usize {
        0
    }

    fn sharpness(&self) -> f64 {
        self.sharpness
    }

    fn sdf_values(&self, pts: &[[f64; 3]], out: &mut Vec<f64>) {
        out.clear();
        out.extend(pts.iter().map(|p| (self.sdf_fn)(Vec3::from_array(*p))));
    }

    fn eval(
        &self,
        pts: &[[f64; 3]],
        sdf: &mut Vec<f64>,
        grad: &mut Vec<[f64; 3]>,
        feature: &mut Mat<f64>,
    ) {
        self.sdf_values(pts, sdf);
        grad.clear();
        grad.extend(pts.iter().map(|p| (self.grad_fn)(Vec3::from_array(*p)).to_array()));
        *feature = Mat::zeros(pts.len(), 0);
    }

    fn radiance(
        &self,
        pts: &[[f64; 3]],
        _normals: &[[f64; 3]],
        _dirs: &[[f64; 3]],
        _feature: &Mat<f64>,
        out: &mut Vec<[f64; 3]>,
    ) {
        out.clear();
        out.extend(std::iter::repeat(self.color).take(pts.len()));
    }
}

/// Analytic sphere field of the given radius.
pub fn analytic_sphere(
    radius: f64,
    sharpness: f64,
) -> AnalyticField<impl Fn(Vec3) -> f64 + Sync, impl Fn(Vec3) -> Vec3 + Sync> {
    AnalyticField {
        sdf_fn: move |p: Vec3| p.norm() - radius,
        grad_fn: |p: Vec3| p.try_normalized(1e-12).unwrap_or(Vec3::ZERO),
        color: [0.8, 0.3, 0.2],
        sharpness,
    }
}
