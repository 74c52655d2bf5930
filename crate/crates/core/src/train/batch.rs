//! The differentiable per-batch pipeline: run both networks over all
//! samples of a ray chunk at once, composite, score, and push the loss
//! adjoints back through compositing, the radiance network, the
//! reflection/normalization chain and the geometry network.
//!
//! Sample positions come from a separate importance-sampling pass and are
//! constants with respect to the parameters, as is the reflection score:
//! both weight the loss but carry no gradient.

use std::sync::Mutex;

use rayon::prelude::*;

use crate::bvh::Bvh;
use crate::field::{
    surface_normal_from_grad, DeviationParam, RadianceNetwork, RadianceWorkspace, SdfNetwork,
    SdfWorkspace,
};
use crate::math::{Real, Vec3};
use crate::render::{
    alpha_from_sdf, alpha_from_sdf_grad, ray_unit_sphere_bounds, sample_coarse, sample_fine,
    weights_from_alphas, DEGENERATE_NORMAL_EPS,
};
use crate::rng;
use crate::scene::ViewFrame;
use crate::score::{reflection_score, ScoreParams};
use crate::train::TrainConfig;
use crate::visibility::first_surface_hit;

pub(crate) const CHUNK_RAYS: usize = 8;

/// One training ray: pixel ray of the anchor view plus its target color.
#[derive(Debug, Clone, Copy)]
pub struct RaySpec {
    pub origin: Vec3,
    pub dir: Vec3,
    pub gt: [f64; 3],
    pub view: usize,
    /// Global stream index (iteration * rays_per_batch + slot).
    pub stream_index: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub color_loss: f64,
    pub eik_loss: f64,
    pub total_loss: f64,
    pub mean_beta_sq: f64,
    pub active_rays: usize,
    pub degenerate_normals: usize,
}

pub struct BatchGrads<S> {
    pub sdf: Vec<S>,
    pub radiance: Vec<S>,
    pub deviation: S,
}

/// Reusable forward/backward workspaces, shared across chunks and
/// iterations so the big activation buffers are allocated once per thread
/// of parallelism. One pool serves one pair of network shapes.
pub struct WorkspacePool<S: Real> {
    sdf_ws: Mutex<Vec<SdfWorkspace<S>>>,
    rad_ws: Mutex<Vec<RadianceWorkspace<S>>>,
    capacity: usize,
}

impl<S: Real> WorkspacePool<S> {
    pub fn new(capacity: usize) -> WorkspacePool<S> {
        WorkspacePool {
            sdf_ws: Mutex::new(Vec::new()),
            rad_ws: Mutex::new(Vec::new()),
            capacity,
        }
    }

    fn with_sdf<R>(&self, sdf: &SdfNetwork<S>, f: impl FnOnce(&mut SdfWorkspace<S>) -> R) -> R {
        let mut ws = self
            .sdf_ws
            .lock()
            .unwrap()
            .pop()
            .unwrap_or_else(|| SdfWorkspace::new(sdf, self.capacity));
        let out = f(&mut ws);
        self.sdf_ws.lock().unwrap().push(ws);
        out
    }

    fn with_both<R>(
        &self,
        sdf: &SdfNetwork<S>,
        radiance: &RadianceNetwork<S>,
        f: impl FnOnce(&mut SdfWorkspace<S>, &mut RadianceWorkspace<S>) -> R,
    ) -> R {
        self.with_sdf(sdf, |ws_sdf| {
            let mut ws_rad = self
                .rad_ws
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| RadianceWorkspace::new(radiance, self.capacity));
            let out = f(ws_sdf, &mut ws_rad);
            self.rad_ws.lock().unwrap().push(ws_rad);
            out
        })
    }
}

struct ChunkOutput<S> {
    grads: Option<BatchGrads<S>>,
    color_loss_sum: f64,
    eik_sum: f64,
    beta_sum: f64,
    active: usize,
    degenerate: usize,
}

/// Evaluate one batch of rays given their (fixed) sample positions: loss
/// statistics plus (optionally) parameter gradients. `beta_override`
/// freezes the per-ray score to the given values (used by gradient checks,
/// where the score must act as the constant it is). Chunks run in parallel
/// and reduce in a fixed order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_batch<S: Real>(
    sdf: &SdfNetwork<S>,
    radiance: &RadianceNetwork<S>,
    deviation: &DeviationParam<S>,
    rays: &[RaySpec],
    samples: &[Option<Vec<f64>>],
    frames: &[ViewFrame],
    bvh: Option<&Bvh>,
    cfg: &TrainConfig,
    beta_override: Option<&[f64]>,
    with_grads: bool,
    pool: &WorkspacePool<S>,
) -> (BatchStats, Option<BatchGrads<S>>) {
    let n_rays = rays.len();
    assert!(n_rays > 0);
    assert_eq!(samples.len(), n_rays);
    if let Some(b) = beta_override {
        assert_eq!(b.len(), n_rays);
    }
    let samples_per_ray = cfg.n_coarse + cfg.n_fine;
    let active_total = samples.iter().filter(|s| s.is_some()).count();
    let p_total = (active_total * samples_per_ray).max(1);

    let outputs: Vec<ChunkOutput<S>> = rays
        .par_chunks(CHUNK_RAYS)
        .zip(samples.par_chunks(CHUNK_RAYS))
        .enumerate()
        .map(|(chunk_idx, (chunk, chunk_samples))| {
            pool.with_both(sdf, radiance, |ws_sdf, ws_rad| {
                process_chunk(
                    sdf,
                    radiance,
                    deviation,
                    chunk,
                    chunk_samples,
                    chunk_idx * CHUNK_RAYS,
                    frames,
                    bvh,
                    cfg,
                    beta_override,
                    with_grads,
                    p_total,
                    n_rays,
                    ws_sdf,
                    ws_rad,
                )
            })
        })
        .collect();

    let mut stats = BatchStats::default();
    let mut grads = if with_grads {
        Some(BatchGrads {
            sdf: vec![S::ZERO; sdf.param_len()],
            radiance: vec![S::ZERO; radiance.param_len()],
            deviation: S::ZERO,
        })
    } else {
        None
    };
    let mut beta_sum = 0.0;
    for out in outputs {
        stats.color_loss += out.color_loss_sum;
        stats.eik_loss += out.eik_sum;
        stats.active_rays += out.active;
        stats.degenerate_normals += out.degenerate;
        beta_sum += out.beta_sum;
        if let (Some(acc), Some(part)) = (grads.as_mut(), out.grads) {
            for (a, b) in acc.sdf.iter_mut().zip(part.sdf.iter()) {
                *a += *b;
            }
            for (a, b) in acc.radiance.iter_mut().zip(part.radiance.iter()) {
                *a += *b;
            }
            acc.deviation += part.deviation;
        }
    }
    stats.color_loss /= n_rays as f64;
    stats.eik_loss /= p_total as f64;
    stats.total_loss = stats.color_loss + cfg.eikonal_weight * stats.eik_loss;
    stats.mean_beta_sq = beta_sum / n_rays as f64;
    (stats, grads)
}

#[allow(clippy::too_many_arguments)]
fn process_chunk<S: Real>(
    sdf: &SdfNetwork<S>,
    radiance: &RadianceNetwork<S>,
    deviation: &DeviationParam<S>,
    chunk: &[RaySpec],
    chunk_samples: &[Option<Vec<f64>>],
    chunk_offset: usize,
    frames: &[ViewFrame],
    bvh: Option<&Bvh>,
    cfg: &TrainConfig,
    beta_override: Option<&[f64]>,
    with_grads: bool,
    p_total: usize,
    n_rays_total: usize,
    ws_sdf: &mut SdfWorkspace<S>,
    ws_rad: &mut RadianceWorkspace<S>,
) -> ChunkOutput<S> {
    let samples_per_ray = cfg.n_coarse + cfg.n_fine;
    let sharpness = deviation.sharpness();
    let score_params = ScoreParams {
        gamma: cfg.gamma,
        beta_floor: cfg.beta_sq_min,
        eps_vis: 2.0 * (2.0 / cfg.mesh_res_intermediate as f64),
        use_visibility: cfg.use_visibility,
    };

    let actives: Vec<(usize, &RaySpec, &Vec<f64>)> = chunk
        .iter()
        .enumerate()
        .filter_map(|(slot, ray)| chunk_samples[slot].as_ref().map(|t| (slot, ray, t)))
        .collect();
    let active = actives.len();

    let mut out = ChunkOutput {
        grads: None,
        color_loss_sum: 0.0,
        eik_sum: 0.0,
        beta_sum: 0.0,
        active,
        degenerate: 0,
    };
    // Miss rays still pay the constant background residual.
    for (slot, ray) in chunk.iter().enumerate() {
        if chunk_samples[slot].is_none() {
            let beta = beta_override
                .map(|b| b[chunk_offset + slot])
                .unwrap_or(cfg.beta_sq_min);
            let l1: f64 = (0..3).map(|c| (ray.gt[c] - cfg.background[c]).abs()).sum();
            out.color_loss_sum += l1 / beta;
            out.beta_sum += beta;
        }
    }
    if active == 0 {
        if with_grads {
            out.grads = Some(BatchGrads {
                sdf: vec![S::ZERO; sdf.param_len()],
                radiance: vec![S::ZERO; radiance.param_len()],
                deviation: S::ZERO,
            });
        }
        return out;
    }

    // Full forward with spatial gradients over all samples of the chunk.
    let total_samples = active * samples_per_ray;
    let mut pts: Vec<[S; 3]> = Vec::with_capacity(total_samples);
    for (_, ray, t) in &actives {
        debug_assert_eq!(t.len(), samples_per_ray);
        for &tv in t.iter() {
            let p = ray.origin + ray.dir * tv;
            pts.push([S::from_f64(p.x), S::from_f64(p.y), S::from_f64(p.z)]);
        }
    }
    sdf.forward(&pts, ws_sdf, true);

    // Normals and direction inputs per sample.
    let mut normals: Vec<[S; 3]> = Vec::with_capacity(total_samples);
    let mut dirs: Vec<[S; 3]> = Vec::with_capacity(total_samples);
    let mut degenerate: Vec<bool> = Vec::with_capacity(total_samples);
    for (ai, (_, ray, _)) in actives.iter().enumerate() {
        let d = ray.dir;
        let d_s = [S::from_f64(d.x), S::from_f64(d.y), S::from_f64(d.z)];
        for k in 0..samples_per_ray {
            let idx = ai * samples_per_ray + k;
            let g = ws_sdf.grad[idx];
            match surface_normal_from_grad(g, DEGENERATE_NORMAL_EPS) {
                Some(n) => {
                    degenerate.push(false);
                    if cfg.use_reflection_direction {
                        // omega = d - 2 (d.n) n
                        let dn = d_s[0] * n[0] + d_s[1] * n[1] + d_s[2] * n[2];
                        let two = S::from_f64(2.0);
                        dirs.push([
                            d_s[0] - two * dn * n[0],
                            d_s[1] - two * dn * n[1],
                            d_s[2] - two * dn * n[2],
                        ]);
                    } else {
                        dirs.push(d_s);
                    }
                    normals.push(n);
                }
                None => {
                    degenerate.push(true);
                    normals.push([-d_s[0], -d_s[1], -d_s[2]]);
                    dirs.push(if cfg.use_reflection_direction {
                        [-d_s[0], -d_s[1], -d_s[2]]
                    } else {
                        d_s
                    });
                }
            }
        }
    }
    out.degenerate = degenerate.iter().filter(|d| **d).count();

    radiance.forward(&pts, &normals, &dirs, &ws_sdf.feature, ws_rad);

    // Per-ray compositing, score, loss and local adjoints.
    let mut adj_rgb = vec![[S::ZERO; 3]; total_samples];
    let mut adj_sdf_out = vec![S::ZERO; total_samples];
    let mut adj_grad = vec![[S::ZERO; 3]; total_samples];
    let mut dev_grad_raw = S::ZERO;
    let inv_rays = S::from_f64(1.0 / n_rays_total as f64);
    let bg = [
        S::from_f64(cfg.background[0]),
        S::from_f64(cfg.background[1]),
        S::from_f64(cfg.background[2]),
    ];

    for (ai, (slot, ray, t)) in actives.iter().enumerate() {
        let base = ai * samples_per_ray;
        let p = samples_per_ray;
        let d = ray.dir;
        let d_s = [S::from_f64(d.x), S::from_f64(d.y), S::from_f64(d.z)];

        // Alphas with analytic partials; the last pair extrapolates the sdf
        // by one spacing along the gradient's directional slope.
        let mut alpha = vec![S::ZERO; p];
        let mut d_fi = vec![S::ZERO; p];
        let mut d_fn = vec![S::ZERO; p];
        let mut d_sh = vec![S::ZERO; p];
        let mut last_delta = S::ZERO;
        for i in 0..p {
            let f_i = ws_sdf.sdf[base + i];
            let f_next = if i + 1 < p {
                ws_sdf.sdf[base + i + 1]
            } else {
                let delta = if p >= 2 {
                    S::from_f64(t[p - 1] - t[p - 2])
                } else {
                    S::ONE
                };
                last_delta = delta;
                let g = ws_sdf.grad[base + p - 1];
                let slope = g[0] * d_s[0] + g[1] * d_s[1] + g[2] * d_s[2];
                f_i + slope * delta
            };
            let (av, dfi, dfn, ds) = alpha_from_sdf_grad(f_i, f_next, sharpness);
            alpha[i] = av;
            d_fi[i] = dfi;
            d_fn[i] = dfn;
            d_sh[i] = ds;
        }
        let mut transmittance = vec![S::ZERO; p];
        let mut weights = vec![S::ZERO; p];
        let mut trans = S::ONE;
        let mut weight_sum = S::ZERO;
        for i in 0..p {
            transmittance[i] = trans;
            weights[i] = trans * alpha[i];
            weight_sum += weights[i];
            trans = trans * (S::ONE - alpha[i]);
        }
        let mut color = [S::ZERO; 3];
        for i in 0..p {
            let c = ws_rad.rgb[base + i];
            for ch in 0..3 {
                color[ch] += weights[i] * c[ch];
            }
        }
        let residual = S::ONE - weight_sum;
        for ch in 0..3 {
            color[ch] += residual * bg[ch];
        }

        // Reflection score (constant w.r.t. parameters).
        let beta = if let Some(b) = beta_override {
            b[chunk_offset + slot]
        } else if !cfg.use_reflection_score {
            cfg.beta_sq_min
        } else {
            let fs: Vec<f64> = ws_sdf.sdf[base..base + p].iter().map(|v| v.to_f64()).collect();
            let hit = first_surface_hit(ray.origin, d, t, &fs);
            if hit.valid {
                reflection_score(hit.point, ray.view, frames, bvh, &score_params).beta_sq
            } else {
                cfg.beta_sq_min
            }
        };
        out.beta_sum += beta;

        // Per-ray L1 color loss and its adjoint.
        let mut l1 = S::ZERO;
        let mut dl_dc = [S::ZERO; 3];
        let beta_s = S::from_f64(beta);
        for ch in 0..3 {
            let diff = S::from_f64(ray.gt[ch]) - color[ch];
            l1 += diff.abs();
            let sign = if diff.to_f64() > 0.0 {
                S::ONE
            } else if diff.to_f64() < 0.0 {
                -S::ONE
            } else {
                S::ZERO
            };
            dl_dc[ch] = -(sign / beta_s) * inv_rays;
        }
        out.color_loss_sum += l1.to_f64() / beta;

        // Eikonal term over this ray's samples.
        let eik_scale = S::from_f64(cfg.eikonal_weight / p_total as f64);
        for i in 0..p {
            let g = ws_sdf.grad[base + i];
            let norm2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            let norm = norm2.sqrt();
            let e = norm - S::ONE;
            out.eik_sum += (e * e).to_f64();
            if with_grads {
                let denom = if norm.to_f64() > 1e-12 { norm } else { S::from_f64(1e-12) };
                let coef = eik_scale * S::from_f64(2.0) * e / denom;
                for c in 0..3 {
                    adj_grad[base + i][c] += coef * g[c];
                }
            }
        }

        if !with_grads {
            continue;
        }

        // Radiance adjoints and weight adjoints.
        let mut dl_dw = vec![S::ZERO; p];
        for i in 0..p {
            let c = ws_rad.rgb[base + i];
            for ch in 0..3 {
                adj_rgb[base + i][ch] = dl_dc[ch] * weights[i];
                dl_dw[i] += dl_dc[ch] * (c[ch] - bg[ch]);
            }
        }
        // Alpha adjoints via the suffix trick over w_k = alpha_k T_k.
        let mut dl_dalpha = vec![S::ZERO; p];
        let mut suffix = S::ZERO;
        for i in (0..p).rev() {
            let one_minus = S::ONE - alpha[i];
            let mut v = dl_dw[i] * transmittance[i];
            if one_minus.to_f64() > 1e-12 {
                v = v - suffix / one_minus;
            }
            dl_dalpha[i] = v;
            suffix += dl_dw[i] * weights[i];
        }
        // Back to signed distances, the deviation scalar and (for the last
        // sample) the gradient through the extrapolated partner.
        for i in 0..p {
            let da = dl_dalpha[i];
            adj_sdf_out[base + i] += da * d_fi[i];
            if i + 1 < p {
                adj_sdf_out[base + i + 1] += da * d_fn[i];
            } else {
                adj_sdf_out[base + i] += da * d_fn[i];
                let g_adj = da * d_fn[i] * last_delta;
                for c in 0..3 {
                    adj_grad[base + i][c] += g_adj * d_s[c];
                }
            }
            dev_grad_raw += da * d_sh[i];
        }
    }

    if !with_grads {
        return out;
    }

    // Radiance backward; its input adjoints feed the chain
    // direction -> normal -> spatial gradient.
    let mut grads = BatchGrads {
        sdf: vec![S::ZERO; sdf.param_len()],
        radiance: vec![S::ZERO; radiance.param_len()],
        deviation: S::ZERO,
    };
    radiance.backward(ws_rad, total_samples, &adj_rgb, &mut grads.radiance);

    let two = S::from_f64(2.0);
    for (ai, (_, ray, _)) in actives.iter().enumerate() {
        let d = ray.dir;
        let d_s = [S::from_f64(d.x), S::from_f64(d.y), S::from_f64(d.z)];
        for k in 0..samples_per_ray {
            let idx = ai * samples_per_ray + k;
            if degenerate[idx] {
                continue;
            }
            let mut n_bar = ws_rad.adj_normal[idx];
            if cfg.use_reflection_direction {
                // omega = d - 2 (d.n) n:
                // n_bar_j += -2 d_j (n . omega_bar) - 2 (d . n) omega_bar_j
                let w_bar = ws_rad.adj_dir[idx];
                let n = normals[idx];
                let n_dot_wbar = n[0] * w_bar[0] + n[1] * w_bar[1] + n[2] * w_bar[2];
                let d_dot_n = d_s[0] * n[0] + d_s[1] * n[1] + d_s[2] * n[2];
                for c in 0..3 {
                    n_bar[c] += -(two * d_s[c] * n_dot_wbar) - two * d_dot_n * w_bar[c];
                }
            }
            if cfg.detach_normal_in_radiance {
                continue;
            }
            // n = g / |g|: g_bar += (n_bar - n (n . n_bar)) / |g|
            let g = ws_sdf.grad[idx];
            let g_norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if g_norm.to_f64() <= DEGENERATE_NORMAL_EPS {
                continue;
            }
            let n = normals[idx];
            let n_dot_nbar = n[0] * n_bar[0] + n[1] * n_bar[1] + n[2] * n_bar[2];
            for c in 0..3 {
                adj_grad[idx][c] += (n_bar[c] - n[c] * n_dot_nbar) / g_norm;
            }
        }
    }

    // Geometry backward with all three adjoints.
    sdf.backward(
        ws_sdf,
        total_samples,
        &adj_sdf_out,
        &ws_rad.adj_feature,
        &adj_grad,
        &mut grads.sdf,
    );
    grads.deviation = dev_grad_raw * deviation.sharpness_grad();
    out.grads = Some(grads);
    out
}

/// Per-ray reflection scores for a batch with fixed samples: the first
/// surface crossing of each ray (from its sampled signed distances) scored
/// against the visible views, with the configured fallbacks. Rays without a
/// crossing, rays that miss the sphere, and disabled scoring all floor.
pub fn compute_batch_betas<S: Real>(
    sdf: &SdfNetwork<S>,
    rays: &[RaySpec],
    samples: &[Option<Vec<f64>>],
    frames: &[ViewFrame],
    bvh: Option<&Bvh>,
    cfg: &TrainConfig,
    pool: &WorkspacePool<S>,
) -> Vec<f64> {
    assert_eq!(rays.len(), samples.len());
    let score_params = ScoreParams {
        gamma: cfg.gamma,
        beta_floor: cfg.beta_sq_min,
        eps_vis: 2.0 * (2.0 / cfg.mesh_res_intermediate as f64),
        use_visibility: cfg.use_visibility,
    };
    rays.par_chunks(CHUNK_RAYS)
        .zip(samples.par_chunks(CHUNK_RAYS))
        .map(|(chunk, chunk_samples)| {
            pool.with_sdf(sdf, |ws_sdf| {
                let mut out = Vec::with_capacity(chunk.len());
                for (ray, sample) in chunk.iter().zip(chunk_samples.iter()) {
                    let beta = match sample {
                        None => cfg.beta_sq_min,
                        Some(t) if !cfg.use_reflection_score => {
                            let _ = t;
                            cfg.beta_sq_min
                        }
                        Some(t) => {
                            let pts: Vec<[S; 3]> = t
                                .iter()
                                .map(|&tv| {
                                    let p = ray.origin + ray.dir * tv;
                                    [S::from_f64(p.x), S::from_f64(p.y), S::from_f64(p.z)]
                                })
                                .collect();
                            sdf.forward(&pts, ws_sdf, false);
                            let fs: Vec<f64> =
                                ws_sdf.sdf[..t.len()].iter().map(|v| v.to_f64()).collect();
                            let hit = first_surface_hit(ray.origin, ray.dir, t, &fs);
                            if hit.valid {
                                reflection_score(hit.point, ray.view, frames, bvh, &score_params)
                                    .beta_sq
                            } else {
                                cfg.beta_sq_min
                            }
                        }
                    };
                    out.push(beta);
                }
                out
            })
        })
        .flatten()
        .collect()
}


/// Coarse pass plus inverse-CDF importance sampling: merged sorted sample
/// positions per ray (`None` for unit-sphere misses). Deterministic given
/// the config seed and stream indices; positions are treated as constants
/// by the loss.
pub fn importance_sample_rays<S: Real>(
    sdf: &SdfNetwork<S>,
    deviation: &DeviationParam<S>,
    rays: &[RaySpec],
    cfg: &TrainConfig,
    pool: &WorkspacePool<S>,
) -> Vec<Option<Vec<f64>>> {
    let sharpness = deviation.sharpness().to_f64();
    rays.par_chunks(CHUNK_RAYS)
        .map(|chunk| {
            pool.with_sdf(sdf, |ws_sdf| {
                let mut bounds = Vec::with_capacity(chunk.len());
                let mut coarse: Vec<Vec<f64>> = Vec::with_capacity(chunk.len());
                let mut pts: Vec<[S; 3]> = Vec::new();
                for ray in chunk {
                    let b = ray_unit_sphere_bounds(ray.origin, ray.dir);
                    if let Some((near, far)) = b {
                        let mut stream = rng::stream(cfg.seed, "ray-samples", ray.stream_index);
                        let t = sample_coarse(near, far, cfg.n_coarse, &mut stream, true);
                        for &tv in &t {
                            let p = ray.origin + ray.dir * tv;
                            pts.push([S::from_f64(p.x), S::from_f64(p.y), S::from_f64(p.z)]);
                        }
                        coarse.push(t);
                    } else {
                        coarse.push(Vec::new());
                    }
                    bounds.push(b);
                }
                if !pts.is_empty() {
                    sdf.forward(&pts, ws_sdf, false);
                }
                let mut out = Vec::with_capacity(chunk.len());
                let mut at = 0;
                for (k, ray) in chunk.iter().enumerate() {
                    let Some((near, far)) = bounds[k] else {
                        out.push(None);
                        continue;
                    };
                    let t = &coarse[k];
                    let f: Vec<f64> = ws_sdf.sdf[at..at + cfg.n_coarse]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect();
                    at += cfg.n_coarse;
                    let alphas: Vec<f64> = (0..cfg.n_coarse)
                        .map(|i| {
                            let f_next = if i + 1 < cfg.n_coarse { f[i + 1] } else { f[i] };
                            alpha_from_sdf(f[i], f_next, sharpness)
                        })
                        .collect();
                    let mut weights = Vec::new();
                    weights_from_alphas(&alphas, &mut weights);
                    let mut stream = rng::stream(cfg.seed, "ray-fine", ray.stream_index);
                    let merged =
                        sample_fine(near, far, t, &weights, cfg.n_fine, &mut stream, true);
                    out.push(Some(merged));
                }
                out
            })
        })
        .flatten()
        .collect()
}
