//! Geometry network: a softplus MLP producing a signed distance and a
//! feature vector, with an analytic spatial gradient carried through the
//! forward pass. The backward pass propagates loss adjoints of the value,
//! the feature and the spatial gradient into the weights, which is what the
//! eikonal and normal-dependent terms require.

use serde::{Deserialize, Serialize};

use crate::field::encoding::PositionalEncoding;
use crate::linalg::{matmul_nn_acc, matmul_nt, matmul_tn_acc, Mat};
use crate::math::Real;
use crate::rng;

/// Shape of the geometry network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SdfConfig {
    pub hidden_width: usize,
    pub num_hidden: usize,
    /// Number of hidden layers evaluated before the encoded input is
    /// concatenated onto their output.
    pub skip_after: usize,
    pub feature_dim: usize,
    pub softplus_beta: f64,
    pub num_freqs: usize,
}

impl SdfConfig {
    /// Full-size configuration: 8 hidden layers of 256, skip after the
    /// fourth layer, 256-d feature head.
    pub fn paper() -> SdfConfig {
        SdfConfig {
            hidden_width: 256,
            num_hidden: 8,
            skip_after: 4,
            feature_dim: 256,
            softplus_beta: 100.0,
            num_freqs: 6,
        }
    }

    /// CPU-scale configuration used by the desk training preset.
    pub fn desk() -> SdfConfig {
        SdfConfig {
            hidden_width: 32,
            num_hidden: 4,
            skip_after: 2,
            feature_dim: 16,
            softplus_beta: 100.0,
            num_freqs: 6,
        }
    }

    pub fn encoding(&self) -> PositionalEncoding {
        PositionalEncoding::new(self.num_freqs, true)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSpec {
    pub w_off: usize,
    pub b_off: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub(crate) fn build_layers(dims: &[(usize, usize)]) -> (Vec<LayerSpec>, usize) {
    let mut layers = Vec::with_capacity(dims.len());
    let mut at = 0;
    for &(in_dim, out_dim) in dims {
        let w_off = at;
        at += in_dim * out_dim;
        let b_off = at;
        at += out_dim;
        layers.push(LayerSpec { w_off, b_off, in_dim, out_dim });
    }
    (layers, at)
}

/// Numerically stable softplus with sharpness beta; returns the activation
/// and its first derivative (the logistic of beta*z). Saturated units skip
/// the transcendentals: at |beta z| > 30 the true values differ from the
/// saturated ones by under 1e-12.
#[inline]
pub(crate) fn softplus<S: Real>(z: S, beta: S, inv_beta: S) -> (S, S) {
    let t = beta * z;
    let tf = t.to_f64();
    if tf > 30.0 {
        (z, S::ONE)
    } else if tf < -30.0 {
        (S::ZERO, S::ZERO)
    } else {
        let e = t.exp();
        ((S::ONE + e).ln() * inv_beta, e / (S::ONE + e))
    }
}

/// The geometry field f(x) with feature head.
#[derive(Debug, Clone)]
pub struct SdfNetwork<S: Real> {
    pub config: SdfConfig,
    pub params: Vec<S>,
    pub(crate) layers: Vec<LayerSpec>,
    enc: PositionalEncoding,
    enc_dim: usize,
}

/// Per-layer activation caches plus backward scratch, allocated once for a
/// maximum batch size. The live batch is passed to forward/backward.
pub struct SdfWorkspace<S: Real> {
    capacity: usize,
    enc: Mat<S>,
    enc_jac: [Mat<S>; 3],
    /// Post-activations per hidden layer.
    a: Vec<Mat<S>>,
    /// Activation first derivatives per hidden layer.
    d1: Vec<Mat<S>>,
    /// Pre-tangents W*J_in per hidden layer per component.
    m: Vec<[Mat<S>; 3]>,
    /// Post-tangents per hidden layer per component.
    j: Vec<[Mat<S>; 3]>,
    /// Concatenated input [a_skip | enc] and its tangent.
    a_cat: Mat<S>,
    j_cat: [Mat<S>; 3],
    /// Adjoints w.r.t. each hidden layer's post-activation / post-tangent.
    adj_post: Vec<Mat<S>>,
    adj_jpost: Vec<[Mat<S>; 3]>,
    z_tmp: Mat<S>,
    adj_z: Mat<S>,
    adj_m: [Mat<S>; 3],
    adj_in_full: Mat<S>,
    adj_jin_full: [Mat<S>; 3],
    with_grad: bool,
    /// Outputs.
    pub sdf: Vec<S>,
    pub feature: Mat<S>,
    pub grad: Vec<[S; 3]>,
}

fn mat3<S: Real>(rows: usize, cols: usize) -> [Mat<S>; 3] {
    [Mat::zeros(rows, cols), Mat::zeros(rows, cols), Mat::zeros(rows, cols)]
}

impl<S: Real> SdfWorkspace<S> {
    pub fn new(net: &SdfNetwork<S>, capacity: usize) -> SdfWorkspace<S> {
        let w = net.config.hidden_width;
        let h = net.config.num_hidden;
        let e = net.enc_dim;
        let f = net.config.feature_dim;
        SdfWorkspace {
            capacity,
            enc: Mat::zeros(capacity, e),
            enc_jac: mat3(capacity, e),
            a: (0..h).map(|_| Mat::zeros(capacity, w)).collect(),
            d1: (0..h).map(|_| Mat::zeros(capacity, w)).collect(),
            m: (0..h).map(|_| mat3(capacity, w)).collect(),
            j: (0..h).map(|_| mat3(capacity, w)).collect(),
            a_cat: Mat::zeros(capacity, w + e),
            j_cat: mat3(capacity, w + e),
            adj_post: (0..h).map(|_| Mat::zeros(capacity, w)).collect(),
            adj_jpost: (0..h).map(|_| mat3(capacity, w)).collect(),
            z_tmp: Mat::zeros(capacity, w),
            adj_z: Mat::zeros(capacity, w),
            adj_m: mat3(capacity, w),
            adj_in_full: Mat::zeros(capacity, w + e),
            adj_jin_full: mat3(capacity, w + e),
            with_grad: false,
            sdf: vec![S::ZERO; capacity],
            feature: Mat::zeros(capacity, f),
            grad: vec![[S::ZERO; 3]; capacity],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

impl<S: Real> SdfNetwork<S> {
    pub fn new(config: SdfConfig) -> SdfNetwork<S> {
        assert!(config.num_hidden >= 2, "need at least two hidden layers");
        assert!(
            config.skip_after >= 1 && config.skip_after < config.num_hidden,
            "skip index must fall inside the hidden stack"
        );
        let enc = config.encoding();
        let enc_dim = enc.output_dim(3);
        let w = config.hidden_width;
        let mut dims = Vec::new();
        for l in 0..config.num_hidden {
            let in_dim = if l == 0 {
                enc_dim
            } else if l == config.skip_after {
                w + enc_dim
            } else {
                w
            };
            dims.push((in_dim, w));
        }
        dims.push((w, 1 + config.feature_dim));
        let (layers, len) = build_layers(&dims);
        SdfNetwork {
            config,
            params: vec![S::ZERO; len],
            layers,
            enc,
            enc_dim,
        }
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn enc_dim(&self) -> usize {
        self.enc_dim
    }

    pub(crate) fn layer_specs(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Geometric initialization: the network starts out approximating the
    /// signed distance to a sphere of the given radius. After the random
    /// draw the radial response is probed and the SDF head rescaled, which
    /// keeps the approximation tight at small widths. Feature head rows use
    /// plain uniform fan-in init.
    pub fn init_geometric(&mut self, radius: f64, seed: u64) {
        assert!(radius > 0.0 && radius <= 1.0);
        let mut r = rng::stream(seed, "sdf-init", 0);
        let h = self.config.num_hidden;
        let w = self.config.hidden_width;
        for l in 0..h {
            let spec = self.layers[l];
            let mut std = (2.0 / spec.out_dim as f64).sqrt();
            if l == self.config.skip_after {
                // the concatenation doubles the input variance
                std /= std::f64::consts::SQRT_2;
            }
            for o in 0..spec.out_dim {
                for i in 0..spec.in_dim {
                    // Sin/cos encoding columns start at zero so the initial
                    // field is a function of raw position only.
                    let raw_col = if l == 0 {
                        i < 3
                    } else if l == self.config.skip_after {
                        i < w + 3
                    } else {
                        true
                    };
                    let v = if raw_col { rng::normal(&mut r) * std } else { 0.0 };
                    self.params[spec.w_off + o * spec.in_dim + i] = S::from_f64(v);
                }
                self.params[spec.b_off + o] = S::ZERO;
            }
        }
        let out = self.layers[h];
        let mean = std::f64::consts::PI.sqrt() / (out.in_dim as f64).sqrt();
        for i in 0..out.in_dim {
            self.params[out.w_off + i] = S::from_f64(mean + rng::normal(&mut r) * 1e-4);
        }
        self.params[out.b_off] = S::ZERO;
        let bound = 1.0 / (out.in_dim as f64).sqrt();
        for o in 1..out.out_dim {
            for i in 0..out.in_dim {
                let v = (rng::uniform(&mut r) * 2.0 - 1.0) * bound;
                self.params[out.w_off + o * out.in_dim + i] = S::from_f64(v);
            }
            self.params[out.b_off + o] = S::ZERO;
        }

        // Probe the raw radial response f(rho u) ~ c*rho + d and rescale the
        // head so the field matches |x| - radius in the least-squares sense.
        let dirs = 64;
        let radii = [0.3, 0.6, 0.9];
        let mut pts = Vec::with_capacity(dirs * radii.len());
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..dirs {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / dirs as f64;
            let ring = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let u = [ring * phi.cos(), ring * phi.sin(), z];
            for rho in radii {
                pts.push([
                    S::from_f64(u[0] * rho),
                    S::from_f64(u[1] * rho),
                    S::from_f64(u[2] * rho),
                ]);
            }
        }
        let mut ws = SdfWorkspace::new(self, pts.len());
        self.forward(&pts, &mut ws, false);
        let n = pts.len() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for (i, p) in pts.iter().enumerate() {
            let rho = (p[0].to_f64().powi(2) + p[1].to_f64().powi(2) + p[2].to_f64().powi(2)).sqrt();
            let f = ws.sdf[i].to_f64();
            sx += rho;
            sy += f;
            sxx += rho * rho;
            sxy += rho * f;
        }
        let c = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let d = (sy - c * sx) / n;
        assert!(c > 0.05, "degenerate radial response {c}");
        let inv_c = S::from_f64(1.0 / c);
        for i in 0..out.in_dim {
            self.params[out.w_off + i] = self.params[out.w_off + i] * inv_c;
        }
        self.params[out.b_off] = S::from_f64(-radius - d / c);
    }

    fn w(&self, l: usize) -> &[S] {
        let s = self.layers[l];
        &self.params[s.w_off..s.w_off + s.in_dim * s.out_dim]
    }

    fn b(&self, l: usize) -> &[S] {
        let s = self.layers[l];
        &self.params[s.b_off..s.b_off + s.out_dim]
    }

    /// Forward pass over a batch of points. With `with_grad` the analytic
    /// spatial gradient of the SDF output is carried along and everything
    /// `backward` needs is cached in the workspace.
    pub fn forward(&self, pts: &[[S; 3]], ws: &mut SdfWorkspace<S>, with_grad: bool) {
        let b = pts.len();
        assert!(b <= ws.capacity, "workspace too small: {b} > {}", ws.capacity);
        let cfg = &self.config;
        let width = cfg.hidden_width;
        let beta = S::from_f64(cfg.softplus_beta);
        let inv_beta = S::from_f64(1.0 / cfg.softplus_beta);
        ws.with_grad = with_grad;

        self.enc.encode_batch3(pts, &mut ws.enc);
        if with_grad {
            self.enc.encode_jacobian_batch3(pts, &mut ws.enc_jac);
        }

        for l in 0..cfg.num_hidden {
            let spec = self.layers[l];
            if l == cfg.skip_after {
                let a_prev = &ws.a[l - 1];
                let enc = &ws.enc;
                let a_cat = &mut ws.a_cat;
                for r in 0..b {
                    let row = a_cat.row_mut(r);
                    row[..width].copy_from_slice(a_prev.row(r));
                    row[width..].copy_from_slice(enc.row(r));
                }
                if with_grad {
                    for c in 0..3 {
                        let j_prev = &ws.j[l - 1][c];
                        let enc_jac = &ws.enc_jac[c];
                        let j_cat = &mut ws.j_cat[c];
                        for r in 0..b {
                            let row = j_cat.row_mut(r);
                            row[..width].copy_from_slice(j_prev.row(r));
                            row[width..].copy_from_slice(enc_jac.row(r));
                        }
                    }
                }
            }
            {
                let input = if l == 0 {
                    &ws.enc
                } else if l == cfg.skip_after {
                    &ws.a_cat
                } else {
                    &ws.a[l - 1]
                };
                matmul_nt(input, b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.z_tmp);
            }
            {
                let bias = self.b(l);
                let z = &ws.z_tmp;
                let a = &mut ws.a[l];
                let d = &mut ws.d1[l];
                if with_grad {
                    for r in 0..b {
                        let zr = z.row(r);
                        let ar = a.row_mut(r);
                        let dr = d.row_mut(r);
                        for i in 0..width {
                            let (act, d1) = softplus(zr[i] + bias[i], beta, inv_beta);
                            ar[i] = act;
                            dr[i] = d1;
                        }
                    }
                } else {
                    for r in 0..b {
                        let zr = z.row(r);
                        let ar = a.row_mut(r);
                        for i in 0..width {
                            let (act, _) = softplus(zr[i] + bias[i], beta, inv_beta);
                            ar[i] = act;
                        }
                    }
                }
            }
            if with_grad {
                for c in 0..3 {
                    if l == 0 {
                        matmul_nt(&ws.enc_jac[c], b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.m[l][c]);
                    } else if l == cfg.skip_after {
                        matmul_nt(&ws.j_cat[c], b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.m[l][c]);
                    } else {
                        let jin = &ws.j[l - 1][c];
                        matmul_nt(jin, b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.m[l][c]);
                    }
                    let d = &ws.d1[l];
                    let m = &ws.m[l][c];
                    let j = &mut ws.j[l][c];
                    for r in 0..b {
                        let dr = d.row(r);
                        let mr = m.row(r);
                        let jr = j.row_mut(r);
                        for i in 0..width {
                            jr[i] = dr[i] * mr[i];
                        }
                    }
                }
            }
        }

        // Output layer: linear. Row 0 of the weight matrix is the SDF head,
        // the rest the feature head; only the SDF head needs a tangent.
        let out = self.layers[cfg.num_hidden];
        let w_out = self.w(cfg.num_hidden);
        let b_out = self.b(cfg.num_hidden);
        let last = cfg.num_hidden - 1;
        for r in 0..b {
            let ar = ws.a[last].row(r);
            ws.sdf[r] = crate::linalg::dot(ar, &w_out[..out.in_dim]) + b_out[0];
            for o in 0..cfg.feature_dim {
                let wr = &w_out[(o + 1) * out.in_dim..(o + 2) * out.in_dim];
                ws.feature.row_mut(r)[o] = crate::linalg::dot(ar, wr) + b_out[o + 1];
            }
        }
        if with_grad {
            for r in 0..b {
                let mut g = [S::ZERO; 3];
                for (c, gv) in g.iter_mut().enumerate() {
                    let jr = ws.j[last][c].row(r);
                    *gv = crate::linalg::dot(jr, &w_out[..out.in_dim]);
                }
                ws.grad[r] = g;
            }
        } else {
            ws.grad[..b].fill([S::ZERO; 3]);
        }
    }

    /// Backward pass for a batch previously run through `forward`. The loss
    /// adjoints of the sdf value, feature vector and spatial gradient come
    /// in; parameter gradients accumulate into `grads` (layout of `params`).
    pub fn backward(
        &self,
        ws: &mut SdfWorkspace<S>,
        batch: usize,
        adj_sdf: &[S],
        adj_feature: &Mat<S>,
        adj_grad: &[[S; 3]],
        grads: &mut [S],
    ) {
        assert_eq!(grads.len(), self.params.len());
        let b = batch;
        let cfg = &self.config;
        let width = cfg.hidden_width;
        let beta = S::from_f64(cfg.softplus_beta);
        let with_grad = ws.with_grad;

        // Output layer -> adjoints of the last hidden activation/tangent.
        let out = self.layers[cfg.num_hidden];
        let last = cfg.num_hidden - 1;
        {
            let w_out = &self.params[out.w_off..out.w_off + out.in_dim * out.out_dim];
            for r in 0..b {
                let a_in = ws.a[last].row(r);
                let sbar = adj_sdf[r];
                for (i, av) in a_in.iter().enumerate() {
                    grads[out.w_off + i] += sbar * *av;
                }
                grads[out.b_off] += sbar;
                let fbar = adj_feature.row(r);
                for o in 0..cfg.feature_dim {
                    let fo = fbar[o];
                    let off = out.w_off + (o + 1) * out.in_dim;
                    for (i, av) in a_in.iter().enumerate() {
                        grads[off + i] += fo * *av;
                    }
                    grads[out.b_off + o + 1] += fo;
                }
                let adj_in = ws.adj_post[last].row_mut(r);
                for (i, aj) in adj_in.iter_mut().enumerate() {
                    let mut acc = sbar * w_out[i];
                    for o in 0..cfg.feature_dim {
                        acc += fbar[o] * w_out[(o + 1) * out.in_dim + i];
                    }
                    *aj = acc;
                }
            }
            if with_grad {
                for c in 0..3 {
                    for r in 0..b {
                        let gc = adj_grad[r][c];
                        let jr = ws.j[last][c].row(r);
                        for (i, jv) in jr.iter().enumerate() {
                            grads[out.w_off + i] += gc * *jv;
                        }
                        let adj_jr = ws.adj_jpost[last][c].row_mut(r);
                        for (i, av) in adj_jr.iter_mut().enumerate() {
                            *av = gc * w_out[i];
                        }
                    }
                }
            }
        }

        for l in (0..cfg.num_hidden).rev() {
            let spec = self.layers[l];
            // adj_z = adj_post * phi' + phi'' * sum_c adj_jpost_c . m_c
            // adj_m_c = phi' * adj_jpost_c
            for r in 0..b {
                let dr = ws.d1[l].row(r);
                let abar = ws.adj_post[l].row(r);
                let zr = ws.adj_z.row_mut(r);
                if with_grad {
                    let jb0 = ws.adj_jpost[l][0].row(r);
                    let jb1 = ws.adj_jpost[l][1].row(r);
                    let jb2 = ws.adj_jpost[l][2].row(r);
                    let m0 = ws.m[l][0].row(r);
                    let m1 = ws.m[l][1].row(r);
                    let m2 = ws.m[l][2].row(r);
                    let [am0, am1, am2] = &mut ws.adj_m;
                    let (ar0, ar1, ar2) = (am0.row_mut(r), am1.row_mut(r), am2.row_mut(r));
                    for i in 0..width {
                        let d1 = dr[i];
                        let d2 = beta * d1 * (S::ONE - d1);
                        let tangent_dot = jb0[i] * m0[i] + jb1[i] * m1[i] + jb2[i] * m2[i];
                        zr[i] = abar[i] * d1 + d2 * tangent_dot;
                        ar0[i] = d1 * jb0[i];
                        ar1[i] = d1 * jb1[i];
                        ar2[i] = d1 * jb2[i];
                    }
                } else {
                    for i in 0..width {
                        zr[i] = abar[i] * dr[i];
                    }
                }
            }
            // Parameter gradients.
            {
                let input = if l == 0 {
                    &ws.enc
                } else if l == cfg.skip_after {
                    &ws.a_cat
                } else {
                    &ws.a[l - 1]
                };
                let gw = &mut grads[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim];
                matmul_tn_acc(&ws.adj_z, input, b, gw, spec.out_dim, spec.in_dim);
                if with_grad {
                    for c in 0..3 {
                        let jin = if l == 0 {
                            &ws.enc_jac[c]
                        } else if l == cfg.skip_after {
                            &ws.j_cat[c]
                        } else {
                            &ws.j[l - 1][c]
                        };
                        matmul_tn_acc(&ws.adj_m[c], jin, b, gw, spec.out_dim, spec.in_dim);
                    }
                }
            }
            for r in 0..b {
                let zr = ws.adj_z.row(r);
                for (o, zv) in zr.iter().enumerate() {
                    grads[spec.b_off + o] += *zv;
                }
            }
            if l == 0 {
                break;
            }
            // Input adjoints. Non-skip layers write straight into the
            // previous layer's adjoint; the skip layer goes through the
            // full-width scratch and keeps the first `width` columns (the
            // rest belongs to the constant encoding).
            if l == cfg.skip_after {
                ws.adj_in_full.fill_rows(b, S::ZERO);
                matmul_nn_acc(&ws.adj_z, b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.adj_in_full);
                let full = &ws.adj_in_full;
                let prev = &mut ws.adj_post[l - 1];
                for r in 0..b {
                    prev.row_mut(r).copy_from_slice(&full.row(r)[..width]);
                }
                if with_grad {
                    for c in 0..3 {
                        ws.adj_jin_full[c].fill_rows(b, S::ZERO);
                        matmul_nn_acc(
                            &ws.adj_m[c],
                            b,
                            self.w(l),
                            spec.out_dim,
                            spec.in_dim,
                            &mut ws.adj_jin_full[c],
                        );
                        let full = &ws.adj_jin_full[c];
                        let prev = &mut ws.adj_jpost[l - 1][c];
                        for r in 0..b {
                            prev.row_mut(r).copy_from_slice(&full.row(r)[..width]);
                        }
                    }
                }
            } else {
                debug_assert_eq!(spec.in_dim, width);
                ws.adj_post[l - 1].fill_rows(b, S::ZERO);
                matmul_nn_acc(&ws.adj_z, b, self.w(l), spec.out_dim, spec.in_dim, &mut ws.adj_post[l - 1]);
                if with_grad {
                    for c in 0..3 {
                        ws.adj_jpost[l - 1][c].fill_rows(b, S::ZERO);
                        matmul_nn_acc(
                            &ws.adj_m[c],
                            b,
                            self.w(l),
                            spec.out_dim,
                            spec.in_dim,
                            &mut ws.adj_jpost[l - 1][c],
                        );
                    }
                }
            }
        }
    }

    /// Single-point evaluation: (sdf, feature).
    pub fn eval_one(&self, x: [S; 3]) -> (S, Vec<S>) {
        let mut ws = SdfWorkspace::new(self, 1);
        self.forward(&[x], &mut ws, false);
        (ws.sdf[0], ws.feature.row(0).to_vec())
    }

    /// Single-point spatial gradient.
    pub fn gradient_one(&self, x: [S; 3]) -> [S; 3] {
        let mut ws = SdfWorkspace::new(self, 1);
        self.forward(&[x], &mut ws, true);
        ws.grad[0]
    }

    /// Batch of SDF values at f64 points regardless of the parameter scalar
    /// type (grid sampling, visibility oracles).
    pub fn sdf_values_f64(&self, pts: &[[f64; 3]], ws: &mut SdfWorkspace<S>, out: &mut Vec<f64>) {
        out.clear();
        let cap = ws.capacity;
        let mut buf: Vec<[S; 3]> = Vec::with_capacity(cap.min(pts.len()));
        for chunk in pts.chunks(cap) {
            buf.clear();
            buf.extend(chunk.iter().map(|p| {
                [S::from_f64(p[0]), S::from_f64(p[1]), S::from_f64(p[2])]
            }));
            self.forward(&buf, ws, false);
            out.extend(ws.sdf[..chunk.len()].iter().map(|s| s.to_f64()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> SdfConfig {
        SdfConfig {
            hidden_width: 8,
            num_hidden: 3,
            skip_after: 1,
            feature_dim: 4,
            softplus_beta: 100.0,
            num_freqs: 2,
        }
    }

    #[test]
    fn deterministic_forward() {
        let mut net = SdfNetwork::<f64>::new(SdfConfig::desk());
        net.init_geometric(0.5, 1);
        let (s1, f1) = net.eval_one([0.2, -0.3, 0.4]);
        let (s2, f2) = net.eval_one([0.2, -0.3, 0.4]);
        assert_eq!(s1, s2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn geometric_init_is_sphere_like() {
        let mut net = SdfNetwork::<f64>::new(SdfConfig::desk());
        net.init_geometric(0.5, 7);
        let (at_origin, _) = net.eval_one([0.0, 0.0, 0.0]);
        assert!(at_origin < 0.0, "sdf at origin should be negative, got {at_origin}");
        let (outside, _) = net.eval_one([1.5, 0.0, 0.0]);
        assert!(outside > 0.0, "sdf outside should be positive, got {outside}");

        let mut r = rng::stream(3, "ball", 0);
        let mut abs_err = 0.0;
        let mut eik = 0.0;
        let n = 500;
        for _ in 0..n {
            // rejection-sample the unit ball
            let p = loop {
                let p = [
                    rng::uniform(&mut r) * 2.0 - 1.0,
                    rng::uniform(&mut r) * 2.0 - 1.0,
                    rng::uniform(&mut r) * 2.0 - 1.0,
                ];
                if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
                    break p;
                }
            };
            let (s, _) = net.eval_one(p);
            let target = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5;
            abs_err += (s - target).abs();
            let g = net.gradient_one(p);
            let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            eik += (gn - 1.0).abs();
        }
        let mean_err = abs_err / n as f64;
        let mean_eik = eik / n as f64;
        assert!(mean_err < 0.3, "init deviates from sphere sdf: {mean_err}");
        assert!(mean_eik < 0.5, "init eikonal residual too large: {mean_eik}");
    }

    #[test]
    fn finite_sdf_over_grid() {
        let mut net = SdfNetwork::<f32>::new(SdfConfig::desk());
        net.init_geometric(0.5, 2);
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    pts.push([
                        -1.0 + 2.0 * i as f64 / 9.0,
                        -1.0 + 2.0 * j as f64 / 9.0,
                        -1.0 + 2.0 * k as f64 / 9.0,
                    ]);
                }
            }
        }
        let mut ws = SdfWorkspace::new(&net, 256);
        let mut out = Vec::new();
        net.sdf_values_f64(&pts, &mut ws, &mut out);
        assert_eq!(out.len(), 1000);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let mut net = SdfNetwork::<f64>::new(toy_config());
        net.init_geometric(0.5, 11);
        let mut r = rng::stream(5, "fd-points", 0);
        let h = 1e-4;
        for _ in 0..100 {
            let p = [
                rng::uniform(&mut r) * 2.0 - 1.0,
                rng::uniform(&mut r) * 2.0 - 1.0,
                rng::uniform(&mut r) * 2.0 - 1.0,
            ];
            let g = net.gradient_one(p);
            let mut fd = [0.0; 3];
            for c in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[c] += h;
                lo[c] -= h;
                fd[c] = (net.eval_one(hi).0 - net.eval_one(lo).0) / (2.0 * h);
            }
            let g_norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
            for c in 0..3 {
                let rel = (g[c] - fd[c]).abs() / g_norm.max(fd[c].abs());
                assert!(rel < 1e-4, "grad {c}: analytic {} vs fd {}", g[c], fd[c]);
            }
        }
    }

    #[test]
    fn gradient_of_effectively_linear_network_is_exact() {
        // With large positive biases softplus(beta=100) sits in its exactly
        // linear branch, so the whole network is linear and the analytic
        // gradient must equal the product of the weight matrices.
        let cfg = SdfConfig {
            hidden_width: 4,
            num_hidden: 2,
            skip_after: 1,
            feature_dim: 1,
            softplus_beta: 100.0,
            num_freqs: 0,
        };
        let mut net = SdfNetwork::<f64>::new(cfg);
        let mut r = rng::stream(9, "lin", 0);
        for l in 0..net.layers.len() {
            let spec = net.layers[l];
            for o in 0..spec.out_dim {
                for i in 0..spec.in_dim {
                    net.params[spec.w_off + o * spec.in_dim + i] =
                        (rng::uniform(&mut r) - 0.5) * 0.4;
                }
                net.params[spec.b_off + o] = if l < 2 { 10.0 } else { 0.0 };
            }
        }
        // Zero the skip layer's encoding block so the chain is a plain
        // product W_out_row0 * W1[:, :4] * W0.
        let s1 = net.layers[1];
        for o in 0..s1.out_dim {
            for i in 4..s1.in_dim {
                net.params[s1.w_off + o * s1.in_dim + i] = 0.0;
            }
        }
        let w0 = net.w(0).to_vec();
        let w1 = net.w(1).to_vec();
        let wout = net.w(2).to_vec();
        // expected = row0(Wout) * W1[:, :4] * W0 (4x3)
        let mut w1w0 = [[0.0; 3]; 4];
        for o in 0..4 {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w1[o * s1.in_dim + k] * w0[k * 3 + c];
                }
                w1w0[o][c] = acc;
            }
        }
        let mut expect = [0.0; 3];
        for (c, e) in expect.iter_mut().enumerate() {
            for o in 0..4 {
                *e += wout[o] * w1w0[o][c];
            }
        }
        let g = net.gradient_one([0.01, -0.02, 0.03]);
        for c in 0..3 {
            assert!(
                (g[c] - expect[c]).abs() < 1e-12,
                "exact linear gradient: {} vs {}",
                g[c],
                expect[c]
            );
        }
    }

    #[test]
    fn gradient_of_constant_network_is_zero() {
        let mut net = SdfNetwork::<f64>::new(toy_config());
        // all-zero weights: f(x) = const
        for p in net.params.iter_mut() {
            *p = 0.0;
        }
        let out = net.layers[net.config.num_hidden];
        net.params[out.b_off] = 0.7;
        let g = net.gradient_one([0.3, 0.1, -0.2]);
        assert_eq!(g, [0.0, 0.0, 0.0]);
        assert_eq!(net.eval_one([0.5, 0.5, 0.5]).0, 0.7);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Random linear functional of (sdf, feature, grad) over a small
        // batch: checks all three adjoint paths through the backward pass.
        let mut net = SdfNetwork::<f64>::new(toy_config());
        net.init_geometric(0.5, 21);
        let mut r = rng::stream(31, "fd-param", 0);
        let pts: Vec<[f64; 3]> = (0..5)
            .map(|_| {
                [
                    rng::uniform(&mut r) * 1.6 - 0.8,
                    rng::uniform(&mut r) * 1.6 - 0.8,
                    rng::uniform(&mut r) * 1.6 - 0.8,
                ]
            })
            .collect();
        let b = pts.len();
        let coef_sdf: Vec<f64> = (0..b).map(|_| rng::uniform(&mut r) - 0.5).collect();
        let coef_feat: Vec<f64> = (0..b * net.config.feature_dim)
            .map(|_| rng::uniform(&mut r) - 0.5)
            .collect();
        let coef_grad: Vec<[f64; 3]> = (0..b)
            .map(|_| {
                [
                    rng::uniform(&mut r) - 0.5,
                    rng::uniform(&mut r) - 0.5,
                    rng::uniform(&mut r) - 0.5,
                ]
            })
            .collect();

        let loss = |net: &SdfNetwork<f64>| -> f64 {
            let mut ws = SdfWorkspace::new(net, b);
            net.forward(&pts, &mut ws, true);
            let mut acc = 0.0;
            for i in 0..b {
                acc += coef_sdf[i] * ws.sdf[i];
                for o in 0..net.config.feature_dim {
                    acc += coef_feat[i * net.config.feature_dim + o] * ws.feature.row(i)[o];
                }
                for c in 0..3 {
                    acc += coef_grad[i][c] * ws.grad[i][c];
                }
            }
            acc
        };

        let mut ws = SdfWorkspace::new(&net, b);
        net.forward(&pts, &mut ws, true);
        let mut adj_feature = Mat::zeros(b, net.config.feature_dim);
        for i in 0..b {
            adj_feature
                .row_mut(i)
                .copy_from_slice(&coef_feat[i * net.config.feature_dim..(i + 1) * net.config.feature_dim]);
        }
        let mut grads = vec![0.0; net.param_len()];
        net.backward(&mut ws, b, &coef_sdf, &adj_feature, &coef_grad, &mut grads);

        let mut max_rel: f64 = 0.0;
        let mut worst = 0;
        for idx in 0..net.param_len() {
            let h = 1e-6 * net.params[idx].abs().max(1.0);
            let orig = net.params[idx];
            net.params[idx] = orig + h;
            let hi = loss(&net);
            net.params[idx] = orig - h;
            let lo = loss(&net);
            net.params[idx] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let denom = grads[idx].abs().max(fd.abs()).max(1e-6);
            let rel = (grads[idx] - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = idx;
            }
        }
        assert!(
            max_rel < 1e-3,
            "worst param {worst}: analytic {} (max rel err {max_rel})",
            grads[worst]
        );
    }
}
