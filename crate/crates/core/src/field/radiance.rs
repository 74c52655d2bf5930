//! Radiance network: maps (position, normal, direction, geometry feature)
//! to an RGB color in (0,1). The direction slot carries the reflection
//! direction in the full model and the raw view direction in the ablated
//! one; the network itself does not care.

use serde::{Deserialize, Serialize};

use crate::field::encoding::PositionalEncoding;
use crate::field::sdf::{build_layers, softplus, LayerSpec};
use crate::linalg::{matmul_nn_acc, matmul_nt, matmul_tn_acc, Mat};
use crate::math::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RadianceConfig {
    pub hidden_width: usize,
    pub num_hidden: usize,
    pub feature_dim: usize,
    pub x_freqs: usize,
    pub dir_freqs: usize,
    pub softplus_beta: f64,
}

impl RadianceConfig {
    /// Full-size configuration: 4 hidden layers of 256.
    pub fn paper() -> RadianceConfig {
        RadianceConfig {
            hidden_width: 256,
            num_hidden: 4,
            feature_dim: 256,
            x_freqs: 6,
            dir_freqs: 4,
            softplus_beta: 100.0,
        }
    }

    /// CPU-scale configuration used by the desk training preset.
    pub fn desk() -> RadianceConfig {
        RadianceConfig {
            hidden_width: 32,
            num_hidden: 2,
            feature_dim: 16,
            x_freqs: 6,
            dir_freqs: 4,
            softplus_beta: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RadianceNetwork<S: Real> {
    pub config: RadianceConfig,
    pub params: Vec<S>,
    pub(crate) layers: Vec<LayerSpec>,
    x_enc: PositionalEncoding,
    dir_enc: PositionalEncoding,
    x_dim: usize,
    dir_dim: usize,
    in_dim: usize,
}

pub struct RadianceWorkspace<S: Real> {
    capacity: usize,
    input: Mat<S>,
    dirs: Vec<[S; 3]>,
    a: Vec<Mat<S>>,
    d1: Vec<Mat<S>>,
    z_tmp: Mat<S>,
    adj_cur: Mat<S>,
    adj_z: Mat<S>,
    /// Outputs.
    pub rgb: Vec<[S; 3]>,
    /// Input adjoints produced by `backward`.
    pub adj_normal: Vec<[S; 3]>,
    pub adj_dir: Vec<[S; 3]>,
    pub adj_feature: Mat<S>,
}

impl<S: Real> RadianceWorkspace<S> {
    pub fn new(net: &RadianceNetwork<S>, capacity: usize) -> RadianceWorkspace<S> {
        let w = net.config.hidden_width;
        let h = net.config.num_hidden;
        RadianceWorkspace {
            capacity,
            input: Mat::zeros(capacity, net.in_dim),
            dirs: vec![[S::ZERO; 3]; capacity],
            a: (0..h).map(|_| Mat::zeros(capacity, w)).collect(),
            d1: (0..h).map(|_| Mat::zeros(capacity, w)).collect(),
            z_tmp: Mat::zeros(capacity, w.max(3)),
            adj_cur: Mat::zeros(capacity, net.in_dim.max(w)),
            adj_z: Mat::zeros(capacity, w.max(3)),
            rgb: vec![[S::ZERO; 3]; capacity],
            adj_normal: vec![[S::ZERO; 3]; capacity],
            adj_dir: vec![[S::ZERO; 3]; capacity],
            adj_feature: Mat::zeros(capacity, net.config.feature_dim),
        }
    }
}

impl<S: Real> RadianceNetwork<S> {
    pub fn new(config: RadianceConfig) -> RadianceNetwork<S> {
        assert!(config.num_hidden >= 1);
        let x_enc = PositionalEncoding::new(config.x_freqs, true);
        let dir_enc = PositionalEncoding::new(config.dir_freqs, true);
        let x_dim = x_enc.output_dim(3);
        let dir_dim = dir_enc.output_dim(3);
        let in_dim = x_dim + 3 + dir_dim + config.feature_dim;
        let w = config.hidden_width;
        let mut dims = vec![(in_dim, w)];
        for _ in 1..config.num_hidden {
            dims.push((w, w));
        }
        dims.push((w, 3));
        let (layers, len) = build_layers(&dims);
        RadianceNetwork {
            config,
            params: vec![S::ZERO; len],
            layers,
            x_enc,
            dir_enc,
            x_dim,
            dir_dim,
            in_dim,
        }
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.in_dim
    }

    pub(crate) fn layer_specs(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Uniform fan-in initialization for every layer.
    pub fn init_uniform(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "radiance-init", 0);
        for spec in &self.layers {
            let bound = 1.0 / (spec.in_dim as f64).sqrt();
            for o in 0..spec.out_dim {
                for i in 0..spec.in_dim {
                    let v = (rng::uniform(&mut r) * 2.0 - 1.0) * bound;
                    self.params[spec.w_off + o * spec.in_dim + i] = S::from_f64(v);
                }
                self.params[spec.b_off + o] = S::ZERO;
            }
        }
    }

    fn w(&self, l: usize) -> &[S] {
        let s = self.layers[l];
        &self.params[s.w_off..s.w_off + s.in_dim * s.out_dim]
    }

    fn b(&self, l: usize) -> &[S] {
        let s = self.layers[l];
        &self.params[s.b_off..s.b_off + s.out_dim]
    }

    /// Forward pass over a batch: rgb in (0,1) per sample. Inputs are the
    /// sample positions, unit normals, unit directions and geometry feature
    /// rows (one per sample, `feature_dim` wide).
    pub fn forward(
        &self,
        pts: &[[S; 3]],
        normals: &[[S; 3]],
        dirs: &[[S; 3]],
        features: &Mat<S>,
        ws: &mut RadianceWorkspace<S>,
    ) {
        let b = pts.len();
        assert!(b <= ws.capacity);
        assert_eq!(normals.len(), b);
        assert_eq!(dirs.len(), b);
        let cfg = &self.config;
        let beta = S::from_f64(cfg.softplus_beta);
        let inv_beta = S::from_f64(1.0 / cfg.softplus_beta);

        for r in 0..b {
            let row = ws.input.row_mut(r);
            self.x_enc.encode(&pts[r], &mut row[..self.x_dim]);
            row[self.x_dim..self.x_dim + 3].copy_from_slice(&normals[r]);
            self.dir_enc.encode(
                &dirs[r],
                &mut row[self.x_dim + 3..self.x_dim + 3 + self.dir_dim],
            );
            let f_off = self.x_dim + 3 + self.dir_dim;
            row[f_off..].copy_from_slice(&features.row(r)[..cfg.feature_dim]);
            ws.dirs[r] = dirs[r];
        }

        for l in 0..cfg.num_hidden {
            let spec = self.layers[l];
            {
                let input = if l == 0 { &ws.input } else { &ws.a[l - 1] };
                matmul_nt(input, b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.z_tmp);
            }
            let bias = self.b(l);
            let z = &ws.z_tmp;
            let a = &mut ws.a[l];
            let d = &mut ws.d1[l];
            for r in 0..b {
                let zr = z.row(r);
                let ar = a.row_mut(r);
                let dr = d.row_mut(r);
                for i in 0..spec.out_dim {
                    let (act, d1) = softplus(zr[i] + bias[i], beta, inv_beta);
                    ar[i] = act;
                    dr[i] = d1;
                }
            }
        }

        let out = self.layers[cfg.num_hidden];
        let w_out = self.w(cfg.num_hidden);
        let b_out = self.b(cfg.num_hidden);
        let last = cfg.num_hidden - 1;
        for r in 0..b {
            let ar = ws.a[last].row(r);
            let mut rgb = [S::ZERO; 3];
            for (o, c) in rgb.iter_mut().enumerate() {
                let wr = &w_out[o * out.in_dim..(o + 1) * out.in_dim];
                let z = crate::linalg::dot(ar, wr) + b_out[o];
                // logistic squashing into (0,1)
                *c = S::ONE / (S::ONE + (-z).exp());
            }
            ws.rgb[r] = rgb;
        }
    }

    /// Backward pass: accumulates parameter gradients into `grads` and
    /// writes input adjoints for normal, direction and feature into the
    /// workspace (overwriting, not accumulating).
    pub fn backward(&self, ws: &mut RadianceWorkspace<S>, batch: usize, adj_rgb: &[[S; 3]], grads: &mut [S]) {
        assert_eq!(grads.len(), self.params.len());
        let b = batch;
        let cfg = &self.config;
        let out = self.layers[cfg.num_hidden];
        let last = cfg.num_hidden - 1;

        // Output sigmoid + linear layer.
        {
            let w_out = &self.params[out.w_off..out.w_off + out.in_dim * out.out_dim];
            let a_last = &ws.a[last];
            let rgb = &ws.rgb;
            let adj_cur = &mut ws.adj_cur;
            for r in 0..b {
                let ar = a_last.row(r);
                let mut zbar = [S::ZERO; 3];
                for o in 0..3 {
                    let y = rgb[r][o];
                    zbar[o] = adj_rgb[r][o] * y * (S::ONE - y);
                }
                for (o, zb) in zbar.iter().enumerate() {
                    let off = out.w_off + o * out.in_dim;
                    for (i, av) in ar.iter().enumerate() {
                        grads[off + i] += *zb * *av;
                    }
                    grads[out.b_off + o] += *zb;
                }
                let adj = adj_cur.row_mut(r);
                for (i, aj) in adj.iter_mut().take(out.in_dim).enumerate() {
                    let mut acc = S::ZERO;
                    for (o, zb) in zbar.iter().enumerate() {
                        acc += *zb * w_out[o * out.in_dim + i];
                    }
                    *aj = acc;
                }
            }
        }

        for l in (0..cfg.num_hidden).rev() {
            let spec = self.layers[l];
            {
                let d = &ws.d1[l];
                let adj_cur = &ws.adj_cur;
                let adj_z = &mut ws.adj_z;
                for r in 0..b {
                    let dr = d.row(r);
                    let ab = adj_cur.row(r);
                    let zr = adj_z.row_mut(r);
                    for i in 0..spec.out_dim {
                        zr[i] = ab[i] * dr[i];
                    }
                }
            }
            {
                let input = if l == 0 { &ws.input } else { &ws.a[l - 1] };
                let gw = &mut grads[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim];
                matmul_tn_acc(&ws.adj_z, input, b, gw, spec.out_dim, spec.in_dim);
            }
            for r in 0..b {
                let zr = ws.adj_z.row(r);
                for o in 0..spec.out_dim {
                    grads[spec.b_off + o] += zr[o];
                }
            }
            ws.adj_cur.fill_rows(b, S::ZERO);
            matmul_nn_acc(&ws.adj_z, b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.adj_cur);
        }

        // Split the input adjoint into its named slots.
        let n_off = self.x_dim;
        let d_off = self.x_dim + 3;
        let f_off = d_off + self.dir_dim;
        for r in 0..b {
            let adj = ws.adj_cur.row(r);
            ws.adj_normal[r] = [adj[n_off], adj[n_off + 1], adj[n_off + 2]];
            let mut dbar = [S::ZERO; 3];
            let dir: [S; 3] = ws.dirs[r];
            self.dir_enc.backprop3(&dir, &adj[d_off..f_off], &mut dbar);
            ws.adj_dir[r] = dbar;
            ws.adj_feature
                .row_mut(r)
                .copy_from_slice(&adj[f_off..f_off + cfg.feature_dim]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RadianceNetwork<f64> {
        let cfg = RadianceConfig {
            hidden_width: 8,
            num_hidden: 2,
            feature_dim: 4,
            x_freqs: 2,
            dir_freqs: 1,
            softplus_beta: 100.0,
        };
        let mut net = RadianceNetwork::new(cfg);
        net.init_uniform(17);
        net
    }

    fn rand3(r: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
        [
            rng::uniform(r) * 2.0 - 1.0,
            rng::uniform(r) * 2.0 - 1.0,
            rng::uniform(r) * 2.0 - 1.0,
        ]
    }

    #[test]
    fn output_in_unit_interval_and_deterministic() {
        let net = toy();
        let mut r = rng::stream(2, "rad", 0);
        let mut ws = RadianceWorkspace::new(&net, 1);
        for _ in 0..1000 {
            let p = rand3(&mut r);
            let n = rand3(&mut r);
            let d = rand3(&mut r);
            let mut feat = Mat::zeros(1, 4);
            for v in feat.row_mut(0) {
                *v = rng::uniform(&mut r) - 0.5;
            }
            net.forward(&[p], &[n], &[d], &feat, &mut ws);
            let rgb = ws.rgb[0];
            for c in rgb {
                assert!(c > 0.0 && c < 1.0, "rgb out of (0,1): {c}");
            }
            let first = rgb;
            net.forward(&[p], &[n], &[d], &feat, &mut ws);
            assert_eq!(ws.rgb[0], first);
        }
    }

    #[test]
    fn direction_slot_changes_input() {
        let net = toy();
        let mut ws = RadianceWorkspace::new(&net, 2);
        let p = [0.1, 0.2, 0.3];
        let n = [0.0, 0.0, 1.0];
        let feat = Mat::zeros(2, 4);
        let d1 = [0.0, 0.0, -1.0];
        let d2 = [0.0, 0.0, 1.0];
        net.forward(&[p, p], &[n, n], &[d1, d2], &feat, &mut ws);
        assert_ne!(ws.input.row(0), ws.input.row(1));
        assert_ne!(ws.rgb[0], ws.rgb[1]);
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let mut net = toy();
        let mut r = rng::stream(4, "rad-fd", 0);
        let b = 3;
        let pts: Vec<[f64; 3]> = (0..b).map(|_| rand3(&mut r)).collect();
        let normals: Vec<[f64; 3]> = (0..b).map(|_| rand3(&mut r)).collect();
        let dirs: Vec<[f64; 3]> = (0..b).map(|_| rand3(&mut r)).collect();
        let mut features = Mat::zeros(b, 4);
        for i in 0..b {
            for v in features.row_mut(i) {
                *v = rng::uniform(&mut r) - 0.5;
            }
        }
        let coef: Vec<[f64; 3]> = (0..b).map(|_| rand3(&mut r)).collect();

        let loss = |net: &RadianceNetwork<f64>,
                    normals: &[[f64; 3]],
                    dirs: &[[f64; 3]],
                    features: &Mat<f64>| {
            let mut ws = RadianceWorkspace::new(net, b);
            net.forward(&pts, normals, dirs, features, &mut ws);
            let mut acc = 0.0;
            for i in 0..b {
                for c in 0..3 {
                    acc += coef[i][c] * ws.rgb[i][c];
                }
            }
            acc
        };

        let mut ws = RadianceWorkspace::new(&net, b);
        net.forward(&pts, &normals, &dirs, &features, &mut ws);
        let mut grads = vec![0.0; net.param_len()];
        net.backward(&mut ws, b, &coef, &mut grads);

        let h = 1e-6;
        for idx in (0..net.param_len()).step_by(7) {
            let orig = net.params[idx];
            net.params[idx] = orig + h;
            let hi = loss(&net, &normals, &dirs, &features);
            net.params[idx] = orig - h;
            let lo = loss(&net, &normals, &dirs, &features);
            net.params[idx] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let rel = (grads[idx] - fd).abs() / grads[idx].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3, "param {idx}: {} vs {}", grads[idx], fd);
        }
        // input adjoints: normals, dirs, features
        for i in 0..b {
            for c in 0..3 {
                let mut hi_n = normals.to_vec();
                let mut lo_n = normals.to_vec();
                hi_n[i][c] += h;
                lo_n[i][c] -= h;
                let fd = (loss(&net, &hi_n, &dirs, &features) - loss(&net, &lo_n, &dirs, &features))
                    / (2.0 * h);
                let a = ws.adj_normal[i][c];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-3,
                    "normal adj {i},{c}: {a} vs {fd}"
                );

                let mut hi_d = dirs.to_vec();
                let mut lo_d = dirs.to_vec();
                hi_d[i][c] += h;
                lo_d[i][c] -= h;
                let fd = (loss(&net, &normals, &hi_d, &features) - loss(&net, &normals, &lo_d, &features))
                    / (2.0 * h);
                let a = ws.adj_dir[i][c];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-3,
                    "dir adj {i},{c}: {a} vs {fd}"
                );
            }
            for o in 0..4 {
                let mut hi_f = features.clone();
                let mut lo_f = features.clone();
                hi_f.row_mut(i)[o] += h;
                lo_f.row_mut(i)[o] -= h;
                let fd = (loss(&net, &normals, &dirs, &hi_f) - loss(&net, &normals, &dirs, &lo_f))
                    / (2.0 * h);
                let a = ws.adj_feature.row(i)[o];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-3,
                    "feature adj {i},{o}: {a} vs {fd}"
                );
            }
        }
    }
}
