//! Checkpoint container: magic "RNKP", u32 version, then named tensors
//! (u64 name length, utf-8 name, u64 rank, u64 dims, f32 little-endian
//! data). Covers both networks, the deviation scalar and optimizer state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::field::{DeviationParam, RadianceNetwork, SdfNetwork};
use crate::math::Real;
use crate::train::adam::OptimState;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"RNKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint {0}: {1}")]
    Malformed(PathBuf, String),
    #[error("checkpoint {0} does not match the configured networks: {1}")]
    Mismatch(PathBuf, String),
}

/// Everything the trainer needs to resume.
pub struct Checkpoint<S> {
    pub iteration: u64,
    pub sdf_params: Vec<S>,
    pub radiance_params: Vec<S>,
    pub deviation_raw: S,
    pub adam_sdf: OptimState<S>,
    pub adam_radiance: OptimState<S>,
    pub adam_deviation: OptimState<S>,
}

struct TensorWriter<W: Write> {
    out: W,
}

impl<W: Write> TensorWriter<W> {
    fn tensor<S: Real>(&mut self, name: &str, dims: &[u64], data: &[S]) -> std::io::Result<()> {
        debug_assert_eq!(dims.iter().product::<u64>() as usize, data.len());
        self.out.write_all(&(name.len() as u64).to_le_bytes())?;
        self.out.write_all(name.as_bytes())?;
        self.out.write_all(&(dims.len() as u64).to_le_bytes())?;
        for d in dims {
            self.out.write_all(&d.to_le_bytes())?;
        }
        for v in data {
            self.out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

/// Write a checkpoint plus a JSON sidecar (same path with .json appended)
/// echoing the training configuration and iteration.
#[allow(clippy::too_many_arguments)]
pub fn save<S: Real>(
    path: &Path,
    config: &TrainConfig,
    iteration: u64,
    sdf: &SdfNetwork<S>,
    radiance: &RadianceNetwork<S>,
    deviation: &DeviationParam<S>,
    adam_sdf: &OptimState<S>,
    adam_radiance: &OptimState<S>,
    adam_deviation: &OptimState<S>,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = TensorWriter { out: std::io::BufWriter::new(file) };
    (|| -> std::io::Result<()> {
        w.out.write_all(MAGIC)?;
        w.out.write_all(&VERSION.to_le_bytes())?;
        for (l, spec) in sdf.layer_specs().iter().enumerate() {
            let wdata = &sdf.params[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim];
            let bdata = &sdf.params[spec.b_off..spec.b_off + spec.out_dim];
            w.tensor(
                &format!("sdf.layer{l}.weight"),
                &[spec.out_dim as u64, spec.in_dim as u64],
                wdata,
            )?;
            w.tensor(&format!("sdf.layer{l}.bias"), &[spec.out_dim as u64], bdata)?;
        }
        for (l, spec) in radiance.layer_specs().iter().enumerate() {
            let wdata = &radiance.params[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim];
            let bdata = &radiance.params[spec.b_off..spec.b_off + spec.out_dim];
            w.tensor(
                &format!("radiance.layer{l}.weight"),
                &[spec.out_dim as u64, spec.in_dim as u64],
                wdata,
            )?;
            w.tensor(&format!("radiance.layer{l}.bias"), &[spec.out_dim as u64], bdata)?;
        }
        w.tensor("deviation", &[1], &[deviation.raw])?;
        w.tensor("iteration", &[1], &[S::from_f64(iteration as f64)])?;
        for (name, state) in [
            ("sdf", adam_sdf),
            ("radiance", adam_radiance),
            ("deviation", adam_deviation),
        ] {
            w.tensor(&format!("adam.{name}.m"), &[state.m.len() as u64], &state.m)?;
            w.tensor(&format!("adam.{name}.v"), &[state.v.len() as u64], &state.v)?;
            w.tensor(&format!("adam.{name}.step"), &[1], &[S::from_f64(state.step as f64)])?;
        }
        w.out.flush()
    })()
    .map_err(io)?;

    let sidecar = serde_json::json!({
        "iteration": iteration,
        "config": config,
    });
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|source| CheckpointError::Io { path: side_path, source })?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

/// Raw named tensors of a checkpoint file.
pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, (Vec<u64>, Vec<f32>)>, CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let bad = |m: &str| CheckpointError::Malformed(path.to_path_buf(), m.to_string());
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing RNKP magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut at = 8usize;
    let mut tensors = BTreeMap::new();
    while at < bytes.len() {
        let take = |at: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *at + n > bytes.len() {
                return Err(bad("truncated tensor"));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        let name_len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| bad("tensor name not utf-8"))?;
        let rank = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
        }
        let count: u64 = dims.iter().product();
        let data_bytes = take(&mut at, count as usize * 4)?;
        let data: Vec<f32> = data_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, (dims, data));
    }
    Ok(tensors)
}

/// Load a checkpoint into buffers matching the given network shapes.
pub fn load<S: Real>(
    path: &Path,
    sdf: &SdfNetwork<S>,
    radiance: &RadianceNetwork<S>,
) -> Result<Checkpoint<S>, CheckpointError> {
    let tensors = read_tensors(path)?;
    let mismatch = |m: String| CheckpointError::Mismatch(path.to_path_buf(), m);
    let get = |name: &str| -> Result<&(Vec<u64>, Vec<f32>), CheckpointError> {
        tensors.get(name).ok_or_else(|| mismatch(format!("missing tensor {name}")))
    };

    let mut sdf_params = vec![S::ZERO; sdf.param_len()];
    for (l, spec) in sdf.layer_specs().iter().enumerate() {
        let (dims, data) = get(&format!("sdf.layer{l}.weight"))?;
        if dims != &[spec.out_dim as u64, spec.in_dim as u64] {
            return Err(mismatch(format!("sdf layer {l} weight dims {dims:?}")));
        }
        for (dst, src) in sdf_params[spec.w_off..].iter_mut().zip(data.iter()) {
            *dst = S::from_f64(*src as f64);
        }
        let (dims, data) = get(&format!("sdf.layer{l}.bias"))?;
        if dims != &[spec.out_dim as u64] {
            return Err(mismatch(format!("sdf layer {l} bias dims {dims:?}")));
        }
        for (dst, src) in sdf_params[spec.b_off..].iter_mut().zip(data.iter()) {
            *dst = S::from_f64(*src as f64);
        }
    }
    let mut radiance_params = vec![S::ZERO; radiance.param_len()];
    for (l, spec) in radiance.layer_specs().iter().enumerate() {
        let (dims, data) = get(&format!("radiance.layer{l}.weight"))?;
        if dims != &[spec.out_dim as u64, spec.in_dim as u64] {
            return Err(mismatch(format!("radiance layer {l} weight dims {dims:?}")));
        }
        for (dst, src) in radiance_params[spec.w_off..].iter_mut().zip(data.iter()) {
            *dst = S::from_f64(*src as f64);
        }
        let (dims, data) = get(&format!("radiance.layer{l}.bias"))?;
        if dims != &[spec.out_dim as u64] {
            return Err(mismatch(format!("radiance layer {l} bias dims {dims:?}")));
        }
        for (dst, src) in radiance_params[spec.b_off..].iter_mut().zip(data.iter()) {
            *dst = S::from_f64(*src as f64);
        }
    }

    let scalar = |name: &str| -> Result<f64, CheckpointError> {
        let (_, data) = get(name)?;
        data.first().map(|v| *v as f64).ok_or_else(|| mismatch(format!("{name} empty")))
    };
    let state = |name: &str, len: usize| -> Result<OptimState<S>, CheckpointError> {
        let (_, m) = get(&format!("adam.{name}.m"))?;
        let (_, v) = get(&format!("adam.{name}.v"))?;
        if m.len() != len || v.len() != len {
            return Err(mismatch(format!("adam.{name} length {} vs {len}", m.len())));
        }
        Ok(OptimState {
            m: m.iter().map(|x| S::from_f64(*x as f64)).collect(),
            v: v.iter().map(|x| S::from_f64(*x as f64)).collect(),
            step: scalar(&format!("adam.{name}.step"))? as u64,
        })
    };

    Ok(Checkpoint {
        iteration: scalar("iteration")? as u64,
        sdf_params,
        radiance_params,
        deviation_raw: S::from_f64(scalar("deviation")?),
        adam_sdf: state("sdf", sdf.param_len())?,
        adam_radiance: state("radiance", radiance.param_len())?,
        adam_deviation: state("deviation", 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{RadianceConfig, SdfConfig};

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = std::env::temp_dir().join("refneus_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.rnkp");

        let cfg = TrainConfig::desk();
        let mut sdf = SdfNetwork::<f32>::new(SdfConfig::desk());
        sdf.init_geometric(0.5, 5);
        let mut rad = RadianceNetwork::<f32>::new(RadianceConfig::desk());
        rad.init_uniform(6);
        let dev = DeviationParam::<f32>::new(20.0);
        let mut adam_sdf = OptimState::new(sdf.param_len());
        adam_sdf.step = 41;
        adam_sdf.m[3] = 0.25;
        let adam_rad = OptimState::new(rad.param_len());
        let adam_dev = OptimState::new(1);

        save(&path, &cfg, 1234, &sdf, &rad, &dev, &adam_sdf, &adam_rad, &adam_dev).unwrap();
        let loaded = load(&path, &sdf, &rad).unwrap();
        assert_eq!(loaded.iteration, 1234);
        assert_eq!(loaded.sdf_params, sdf.params);
        assert_eq!(loaded.radiance_params, rad.params);
        assert_eq!(loaded.deviation_raw, dev.raw);
        assert_eq!(loaded.adam_sdf.step, 41);
        assert_eq!(loaded.adam_sdf.m[3], 0.25);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn rejects_wrong_magic_and_shape() {
        let dir = std::env::temp_dir().join("refneus_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.rnkp");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(read_tensors(&path).is_err());
    }
}

/// Rebuild the networks a checkpoint was trained with, using the config
/// echoed in its JSON sidecar.
pub fn load_networks(
    path: &Path,
) -> Result<
    (
        TrainConfig,
        SdfNetwork<f32>,
        RadianceNetwork<f32>,
        DeviationParam<f32>,
        u64,
    ),
    CheckpointError,
> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|source| CheckpointError::Io { path: side.clone(), source })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CheckpointError::Malformed(side.clone(), e.to_string()))?;
    let config: TrainConfig = serde_json::from_value(value["config"].clone())
        .map_err(|e| CheckpointError::Malformed(side, e.to_string()))?;
    let mut sdf = SdfNetwork::<f32>::new(config.sdf_config());
    let mut radiance = RadianceNetwork::<f32>::new(config.radiance_config());
    let ck = load(path, &sdf, &radiance)?;
    sdf.params = ck.sdf_params;
    radiance.params = ck.radiance_params;
    let deviation = DeviationParam { raw: ck.deviation_raw };
    Ok((config, sdf, radiance, deviation, ck.iteration))
}
