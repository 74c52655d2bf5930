//! Training: losses, learning-rate schedule, the optimization loop with
//! periodic intermediate-mesh refresh, logging and checkpoints.

pub mod adam;
pub mod batch;
pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, OptimState};
pub use batch::{evaluate_batch, BatchGrads, BatchStats, RaySpec, WorkspacePool};

use crate::bvh::Bvh;
use crate::field::{DeviationParam, RadianceConfig, RadianceNetwork, SdfConfig, SdfNetwork};
use crate::math::vec3;
use crate::mesh::{extract_from_field, TriangleMesh};
use crate::rng;
use crate::scene::SceneDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iter}; training halted")]
    NonFiniteLoss { iter: u64 },
    #[error("non-finite gradient at iteration {iter}; training halted")]
    NonFiniteGradient { iter: u64 },
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPreset {
    /// CPU-scale networks for desk runs.
    Desk,
    /// Full-scale 256-wide networks.
    Paper,
}

/// All training knobs; serializes 1:1 with the run-config JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub rays_per_batch: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Weight of the eikonal term in the total loss.
    pub eikonal_weight: f64,
    /// Scale factor applied to the mean Mahalanobis distance.
    pub gamma: f64,
    /// Floor of the reflection score: consistent pixels fall back to plain
    /// L1 weighting.
    pub beta_sq_min: f64,
    pub mesh_update_period: u64,
    pub mesh_res_intermediate: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_iters: u64,
    pub seed: u64,
    pub use_reflection_score: bool,
    pub use_visibility: bool,
    pub use_reflection_direction: bool,
    pub network_preset: NetworkPreset,
    pub background: [f64; 3],
    pub init_radius: f64,
    pub init_sharpness: f64,
    pub log_interval: u64,
    pub checkpoint_period: u64,
    pub detach_normal_in_radiance: bool,
}

impl Default for TrainConfig {
    /// Full-scale configuration (paper-sized schedule and networks).
    fn default() -> Self {
        TrainConfig {
            total_iters: 200_000,
            rays_per_batch: 512,
            n_coarse: 64,
            n_fine: 64,
            eikonal_weight: 0.1,
            gamma: 5.0,
            beta_sq_min: 1.0,
            mesh_update_period: 500,
            mesh_res_intermediate: 128,
            lr_max: 5e-4,
            lr_min: 2.5e-5,
            warmup_iters: 5000,
            seed: 7,
            use_reflection_score: true,
            use_visibility: true,
            use_reflection_direction: true,
            network_preset: NetworkPreset::Paper,
            background: crate::render::DEFAULT_BACKGROUND,
            init_radius: 0.5,
            init_sharpness: 20.0,
            log_interval: 1,
            checkpoint_period: 5000,
            detach_normal_in_radiance: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: small networks and a short schedule sized for a
    /// CPU workstation; the warmup shrinks with the schedule.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            total_iters: 10_000,
            rays_per_batch: 512,
            n_coarse: 24,
            n_fine: 12,
            warmup_iters: 500,
            network_preset: NetworkPreset::Desk,
            checkpoint_period: 5000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("total_iters", self.total_iters as f64),
            ("rays_per_batch", self.rays_per_batch as f64),
            ("n_coarse", self.n_coarse as f64),
            ("n_fine", self.n_fine as f64),
            ("mesh_update_period", self.mesh_update_period as f64),
            ("mesh_res_intermediate", self.mesh_res_intermediate as f64),
            ("gamma", self.gamma),
            ("beta_sq_min", self.beta_sq_min),
            ("lr_max", self.lr_max),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.lr_min > self.lr_max {
            return Err(TrainError::Config("lr_min must not exceed lr_max".into()));
        }
        if self.warmup_iters >= self.total_iters {
            return Err(TrainError::Config("warmup must end before total_iters".into()));
        }
        Ok(())
    }

    pub fn sdf_config(&self) -> SdfConfig {
        match self.network_preset {
            NetworkPreset::Desk => SdfConfig::desk(),
            NetworkPreset::Paper => SdfConfig::paper(),
        }
    }

    pub fn radiance_config(&self) -> RadianceConfig {
        match self.network_preset {
            NetworkPreset::Desk => RadianceConfig::desk(),
            NetworkPreset::Paper => RadianceConfig::paper(),
        }
    }

    pub fn render_params(&self) -> crate::render::RenderParams {
        crate::render::RenderParams {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            background: self.background,
            use_reflection_direction: self.use_reflection_direction,
            jitter: false,
        }
    }

    /// Apply an ablation string like "rs=off,vis=on,ref=off".
    pub fn apply_ablation(&mut self, spec: &str) -> Result<(), TrainError> {
        for part in spec.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("bad ablation token '{part}'")))?;
            let on = match value {
                "on" => true,
                "off" => false,
                other => {
                    return Err(TrainError::Config(format!("bad ablation value '{other}'")))
                }
            };
            match key.trim() {
                "rs" => self.use_reflection_score = on,
                "vis" => self.use_visibility = on,
                "ref" => self.use_reflection_direction = on,
                other => return Err(TrainError::Config(format!("unknown ablation '{other}'"))),
            }
        }
        Ok(())
    }
}

/// Reflection-aware photometric loss: mean over rays of the per-ray L1
/// color residual divided by its (floored) reflection score.
pub fn photometric_loss(l1_per_ray: &[f64], beta_sq: &[f64]) -> f64 {
    assert_eq!(l1_per_ray.len(), beta_sq.len());
    assert!(!l1_per_ray.is_empty());
    l1_per_ray
        .iter()
        .zip(beta_sq.iter())
        .map(|(l1, b)| l1 / b)
        .sum::<f64>()
        / l1_per_ray.len() as f64
}

/// Mean squared deviation of gradient norms from one.
pub fn eikonal_loss(grad_norms: &[f64]) -> f64 {
    assert!(!grad_norms.is_empty());
    grad_norms.iter().map(|n| (n - 1.0) * (n - 1.0)).sum::<f64>() / grad_norms.len() as f64
}

pub fn total_loss(color_loss: f64, eik_loss: f64, eikonal_weight: f64) -> f64 {
    color_loss + eikonal_weight * eik_loss
}

/// Linear warmup to lr_max, then cosine decay to lr_min.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        cfg.lr_max * iter as f64 / cfg.warmup_iters as f64
    } else {
        let span = (cfg.total_iters - cfg.warmup_iters).max(1) as f64;
        let t = (iter - cfg.warmup_iters) as f64 / span;
        cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One line of the training log (newline-delimited JSON on disk).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    pub total_loss: f64,
    pub color_loss: f64,
    pub eik_loss: f64,
    pub mean_beta_sq: f64,
    pub lr: f64,
    pub mesh_refresh: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }
}

pub struct TrainResult {
    pub sdf: SdfNetwork<f32>,
    pub radiance: RadianceNetwork<f32>,
    pub deviation: DeviationParam<f32>,
    pub log: TrainLog,
    /// Last intermediate mesh snapshot (if any refresh happened).
    pub last_mesh: Option<TriangleMesh>,
    pub completed_iters: u64,
}

/// Train on a dataset. `out_dir`, when given, receives the NDJSON log and
/// periodic + final checkpoints; `resume` continues from a саved state.
pub fn train(
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    let mut sdf = SdfNetwork::<f32>::new(cfg.sdf_config());
    let mut radiance = RadianceNetwork::<f32>::new(cfg.radiance_config());
    assert_eq!(
        cfg.sdf_config().feature_dim,
        cfg.radiance_config().feature_dim,
        "geometry feature must match the radiance input"
    );
    sdf.init_geometric(cfg.init_radius, cfg.seed);
    radiance.init_uniform(cfg.seed.wrapping_add(1));
    let mut deviation = DeviationParam::<f32>::new(cfg.init_sharpness);
    let mut adam_sdf = OptimState::new(sdf.param_len());
    let mut adam_rad = OptimState::new(radiance.param_len());
    let mut adam_dev = OptimState::new(1);
    let mut start_iter = 0u64;

    let mut resume_mesh = false;
    if let Some(path) = resume {
        let ck = checkpoint::load(path, &sdf, &radiance)?;
        sdf.params = ck.sdf_params;
        radiance.params = ck.radiance_params;
        deviation.raw = ck.deviation_raw;
        adam_sdf = ck.adam_sdf;
        adam_rad = ck.adam_radiance;
        adam_dev = ck.adam_deviation;
        start_iter = ck.iteration;
        // When the checkpoint falls on a mesh-refresh boundary (true for the
        // default periods) the snapshot regenerates from the restored
        // weights, making resumed runs bit-identical to uninterrupted ones.
        resume_mesh = start_iter > 0 && start_iter % cfg.mesh_update_period == 0;
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io { path: dir.into(), source: e })?;
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            let path = dir.join("train_log.ndjson");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| TrainError::Io { path, source: e })?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };

    let pool = WorkspacePool::<f32>::new(batch::CHUNK_RAYS * (cfg.n_coarse + cfg.n_fine));
    let mut log = TrainLog::default();
    let mut mesh_snapshot: Option<(TriangleMesh, Bvh)> = None;
    if resume_mesh {
        let mut mesh = extract_intermediate_mesh(&sdf, cfg.mesh_res_intermediate);
        mesh.iteration = start_iter;
        mesh_snapshot = Bvh::build(&mesh).map(|b| (mesh, b));
    }
    let cameras_outside = dataset.validate().is_ok();
    debug_assert!(cameras_outside);

    for iter in start_iter..cfg.total_iters {
        let lr = lr_at(iter, cfg);
        let rays = sample_training_rays(dataset, cfg, iter);
        let samples = batch::importance_sample_rays(&sdf, &deviation, &rays, cfg, &pool);
        let bvh = mesh_snapshot.as_ref().map(|(_, b)| b);
        let (stats, grads) = evaluate_batch(
            &sdf,
            &radiance,
            &deviation,
            &rays,
            &samples,
            &dataset.frames,
            bvh,
            cfg,
            None,
            true,
            &pool,
        );
        if !stats.total_loss.is_finite() {
            flush_log(&mut log_file);
            return Err(TrainError::NonFiniteLoss { iter });
        }
        let grads = grads.expect("gradients requested");
        let finite = grads.sdf.iter().all(|g| g.is_finite())
            && grads.radiance.iter().all(|g| g.is_finite())
            && grads.deviation.is_finite();
        if !finite {
            flush_log(&mut log_file);
            return Err(TrainError::NonFiniteGradient { iter });
        }
        adam_step(&mut sdf.params, &grads.sdf, &mut adam_sdf, lr);
        adam_step(&mut radiance.params, &grads.radiance, &mut adam_rad, lr);
        let mut dev_param = [deviation.raw];
        adam_step(&mut dev_param, &[grads.deviation], &mut adam_dev, lr);
        deviation.raw = dev_param[0];

        let done = iter + 1;
        let mut refreshed = false;
        if done % cfg.mesh_update_period == 0 && done < cfg.total_iters {
            let mut mesh = extract_intermediate_mesh(&sdf, cfg.mesh_res_intermediate);
            mesh.iteration = done;
            let bvh = Bvh::build(&mesh);
            mesh_snapshot = bvh.map(|b| (mesh, b));
            refreshed = true;
        }

        if done % cfg.log_interval == 0 || done == cfg.total_iters {
            let record = LogRecord {
                iter: done,
                total_loss: stats.total_loss,
                color_loss: stats.color_loss,
                eik_loss: stats.eik_loss,
                mean_beta_sq: stats.mean_beta_sq,
                lr,
                mesh_refresh: refreshed,
            };
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&record).unwrap();
                let _ = writeln!(f, "{line}");
            }
            log.records.push(record);
        }

        if let Some(dir) = out_dir {
            if done % cfg.checkpoint_period == 0 && done != cfg.total_iters {
                checkpoint::save(
                    &dir.join(format!("ckpt_{done:07}.rnkp")),
                    cfg,
                    done,
                    &sdf,
                    &radiance,
                    &deviation,
                    &adam_sdf,
                    &adam_rad,
                    &adam_dev,
                )?;
            }
        }
    }

    flush_log(&mut log_file);
    if let Some(dir) = out_dir {
        checkpoint::save(
            &dir.join("final.rnkp"),
            cfg,
            cfg.total_iters,
            &sdf,
            &radiance,
            &deviation,
            &adam_sdf,
            &adam_rad,
            &adam_dev,
        )?;
    }

    Ok(TrainResult {
        sdf,
        radiance,
        deviation,
        log,
        last_mesh: mesh_snapshot.map(|(m, _)| m),
        completed_iters: cfg.total_iters,
    })
}

fn flush_log(file: &mut Option<std::io::BufWriter<std::fs::File>>) {
    if let Some(f) = file.as_mut() {
        let _ = f.flush();
    }
}

/// Single-image batching: pick one view, then sample pixel rays from it.
pub fn sample_training_rays(dataset: &SceneDataset, cfg: &TrainConfig, iter: u64) -> Vec<RaySpec> {
    let mut view_stream = rng::stream(cfg.seed, "view", iter);
    let view = rng::uniform_index(&mut view_stream, dataset.frames.len());
    let frame = &dataset.frames[view];
    let origin = frame.camera.center();
    let mut pixel_stream = rng::stream(cfg.seed, "pixels", iter);
    let mut rays = Vec::with_capacity(cfg.rays_per_batch);
    for slot in 0..cfg.rays_per_batch {
        let x = rng::uniform_index(&mut pixel_stream, frame.camera.width);
        let y = rng::uniform_index(&mut pixel_stream, frame.camera.height);
        let dir = frame.camera.pixel_ray_dir(x as f64, y as f64);
        rays.push(RaySpec {
            origin,
            dir,
            gt: frame.image.texel(x, y),
            view,
            stream_index: iter * cfg.rays_per_batch as u64 + slot as u64,
        });
    }
    rays
}

/// Extract the visibility mesh snapshot at the given lattice resolution
/// over the normalized [-1,1] box.
///
/// A coarse probe grid culls lattice points far from the zero level set:
/// those keep their (sign-correct) trilinear coarse value and only the
/// near-surface band hits the network. The occlusion mesh only needs
/// coarse geometry, and the culling threshold is generous enough that the
/// band always covers the extracted surface.
pub fn extract_intermediate_mesh(sdf: &SdfNetwork<f32>, res: usize) -> TriangleMesh {
    let ws = std::sync::Mutex::new(crate::field::SdfWorkspace::new(sdf, 4096));
    let eval = |pts: &[[f64; 3]]| -> Vec<f64> {
        let mut ws = ws.lock().unwrap();
        let mut out = Vec::new();
        sdf.sdf_values_f64(pts, &mut ws, &mut out);
        out
    };
    let lo = vec3(-1.0, -1.0, -1.0);
    let hi = vec3(1.0, 1.0, 1.0);
    let coarse_res = (res / 4).max(8) + 1;
    let coarse = crate::mesh::sample_grid(&eval, lo, hi, [coarse_res; 3]);
    let coarse_cell = 2.0 / (coarse_res - 1) as f64;
    let band = 2.5 * coarse_cell * 3.0f64.sqrt();

    let trilinear = |p: [f64; 3]| -> (f64, bool) {
        let g = &coarse;
        let fx = (p[0] - lo.x) / (hi.x - lo.x) * (coarse_res - 1) as f64;
        let fy = (p[1] - lo.y) / (hi.y - lo.y) * (coarse_res - 1) as f64;
        let fz = (p[2] - lo.z) / (hi.z - lo.z) * (coarse_res - 1) as f64;
        let ix = (fx.floor() as usize).min(coarse_res - 2);
        let iy = (fy.floor() as usize).min(coarse_res - 2);
        let iz = (fz.floor() as usize).min(coarse_res - 2);
        let (tx, ty, tz) = (fx - ix as f64, fy - iy as f64, fz - iz as f64);
        let mut value = 0.0;
        let mut near = false;
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    let v = g.value(ix + dx, iy + dy, iz + dz);
                    value += wx * wy * wz * v;
                    near |= v.abs() < band;
                }
            }
        }
        (value, near)
    };

    let culled_eval = |pts: &[[f64; 3]]| -> Vec<f64> {
        let mut out = vec![0.0; pts.len()];
        let mut exact_idx = Vec::new();
        let mut exact_pts = Vec::new();
        for (i, p) in pts.iter().enumerate() {
            let (approx, near) = trilinear(*p);
            if near {
                exact_idx.push(i);
                exact_pts.push(*p);
            } else {
                out[i] = approx;
            }
        }
        if !exact_pts.is_empty() {
            let exact = eval(&exact_pts);
            for (i, v) in exact_idx.into_iter().zip(exact) {
                out[i] = v;
            }
        }
        out
    };
    extract_from_field(&culled_eval, lo, hi, res, 0.0)
}
