//! Sinusoidal positional encoding with analytic input derivatives.
//!
//! Frequencies are powers of two, so all bands derive from one sin/cos pair
//! per component via double-angle recurrences instead of per-band libm
//! calls; the recurrence error stays far below training precision.

use crate::linalg::Mat;
use crate::math::Real;

/// Frequency encoding: optionally the raw input, then per band k
/// sin(2^k pi v) and cos(2^k pi v) for every component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub num_freqs: usize,
    pub include_input: bool,
}

#[inline]
fn double_angle<S: Real>(s: S, c: S) -> (S, S) {
    let two = S::from_f64(2.0);
    (two * s * c, S::ONE - two * s * s)
}

impl PositionalEncoding {
    pub fn new(num_freqs: usize, include_input: bool) -> PositionalEncoding {
        PositionalEncoding { num_freqs, include_input }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        let base = if self.include_input { 1 } else { 0 };
        input_dim * (base + 2 * self.num_freqs)
    }

    /// Encode one vector into `out` (length `output_dim(v.len())`).
    pub fn encode<S: Real>(&self, v: &[S], out: &mut [S]) {
        let d = v.len();
        debug_assert_eq!(out.len(), self.output_dim(d));
        let mut at = 0;
        if self.include_input {
            out[..d].copy_from_slice(v);
            at = d;
        }
        let pi = S::from_f64(std::f64::consts::PI);
        for (ci, &x) in v.iter().enumerate() {
            let mut s = (pi * x).sin();
            let mut c = (pi * x).cos();
            for k in 0..self.num_freqs {
                out[at + 2 * d * k + ci] = s;
                out[at + 2 * d * k + d + ci] = c;
                (s, c) = double_angle(s, c);
            }
        }
    }

    pub fn encode_vec<S: Real>(&self, v: &[S]) -> Vec<S> {
        let mut out = vec![S::ZERO; self.output_dim(v.len())];
        self.encode(v, &mut out);
        out
    }

    /// Encode a batch of 3-vectors into a row-major matrix.
    pub fn encode_batch3<S: Real>(&self, pts: &[[S; 3]], out: &mut Mat<S>) {
        let dim = self.output_dim(3);
        debug_assert_eq!(out.cols, dim);
        for (r, p) in pts.iter().enumerate() {
            self.encode(p, out.row_mut(r));
        }
    }

    /// Derivative of the encoding w.r.t. each input component, written as
    /// three dense matrices: jac[c][r, j] = d enc_j(p_r) / d p_c. Each output
    /// column depends on exactly one component, so two thirds stay zero.
    pub fn encode_jacobian_batch3<S: Real>(&self, pts: &[[S; 3]], jac: &mut [Mat<S>; 3]) {
        let dim = self.output_dim(3);
        for m in jac.iter_mut() {
            debug_assert_eq!(m.cols, dim);
            m.fill_rows(pts.len(), S::ZERO);
        }
        let base = if self.include_input { 3 } else { 0 };
        let pi = S::from_f64(std::f64::consts::PI);
        for (r, p) in pts.iter().enumerate() {
            for (ci, &x) in p.iter().enumerate() {
                let row = jac[ci].row_mut(r);
                if self.include_input {
                    row[ci] = S::ONE;
                }
                let mut s = (pi * x).sin();
                let mut c = (pi * x).cos();
                let mut freq = pi;
                for k in 0..self.num_freqs {
                    row[base + 6 * k + ci] = freq * c;
                    row[base + 6 * k + 3 + ci] = -(freq * s);
                    (s, c) = double_angle(s, c);
                    freq = freq + freq;
                }
            }
        }
    }

    /// Pull an output-space adjoint back to the input components for a
    /// single sample: input_adj[c] += sum_j out_adj[j] d enc_j / d v_c.
    pub fn backprop3<S: Real>(&self, v: &[S; 3], out_adj: &[S], input_adj: &mut [S; 3]) {
        let base = if self.include_input { 3 } else { 0 };
        let pi = S::from_f64(std::f64::consts::PI);
        for (ci, &x) in v.iter().enumerate() {
            let mut acc = S::ZERO;
            if self.include_input {
                acc += out_adj[ci];
            }
            let mut s = (pi * x).sin();
            let mut c = (pi * x).cos();
            let mut freq = pi;
            for k in 0..self.num_freqs {
                acc += out_adj[base + 6 * k + ci] * freq * c;
                acc += out_adj[base + 6 * k + 3 + ci] * (-(freq * s));
                (s, c) = double_angle(s, c);
                freq = freq + freq;
            }
            input_adj[ci] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_dims_and_values() {
        let enc = PositionalEncoding::new(6, true);
        let out = enc.encode_vec(&[0.0f64, 0.0, 0.0]);
        assert_eq!(out.len(), 39);
        assert_eq!(&out[..3], &[0.0, 0.0, 0.0]);
        for k in 0..6 {
            for c in 0..3 {
                assert_eq!(out[3 + 6 * k + c], 0.0, "sin term");
                assert_eq!(out[3 + 6 * k + 3 + c], 1.0, "cos term");
            }
        }
    }

    #[test]
    fn dim_formula() {
        assert_eq!(PositionalEncoding::new(4, true).output_dim(3), 27);
        assert_eq!(PositionalEncoding::new(6, true).output_dim(3), 39);
        assert_eq!(PositionalEncoding::new(4, false).output_dim(3), 24);
        assert_eq!(PositionalEncoding::new(0, true).output_dim(3), 3);
        for d in 1..5 {
            for l in 0..8 {
                assert_eq!(PositionalEncoding::new(l, true).output_dim(d), d * (1 + 2 * l));
                assert_eq!(PositionalEncoding::new(l, false).output_dim(d), d * 2 * l);
            }
        }
    }

    #[test]
    fn first_band_of_unit_x() {
        let enc = PositionalEncoding::new(1, true);
        let out = enc.encode_vec(&[1.0f64, 0.0, 0.0]);
        // layout: [x y z | sin(pi v) | cos(pi v)]
        assert!((out[3]).abs() < 1e-12, "sin(pi) = 0");
        assert!((out[6] + 1.0).abs() < 1e-12, "cos(pi) = -1");
    }

    #[test]
    fn recurrence_matches_direct_trig() {
        let enc = PositionalEncoding::new(6, true);
        for &x in &[0.137f64, -0.81, 0.5, 2.3, -3.7] {
            let out = enc.encode_vec(&[x, 0.0, 0.0]);
            for k in 0..6 {
                let arg = (1u64 << k) as f64 * std::f64::consts::PI * x;
                assert!(
                    (out[3 + 6 * k] - arg.sin()).abs() < 1e-10,
                    "sin band {k} at {x}"
                );
                assert!(
                    (out[3 + 6 * k + 3] - arg.cos()).abs() < 1e-10,
                    "cos band {k} at {x}"
                );
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let enc = PositionalEncoding::new(4, true);
        let p = [[0.37f64, -0.81, 0.22]];
        let dim = enc.output_dim(3);
        let mut jac = [Mat::zeros(1, dim), Mat::zeros(1, dim), Mat::zeros(1, dim)];
        enc.encode_jacobian_batch3(&p, &mut jac);
        let h = 1e-7;
        for c in 0..3 {
            let mut lo = p[0];
            let mut hi = p[0];
            lo[c] -= h;
            hi[c] += h;
            let e_lo = enc.encode_vec(&lo);
            let e_hi = enc.encode_vec(&hi);
            for j in 0..dim {
                let fd = (e_hi[j] - e_lo[j]) / (2.0 * h);
                assert!(
                    (jac[c].row(0)[j] - fd).abs() < 1e-5,
                    "component {c} col {j}: {} vs {}",
                    jac[c].row(0)[j],
                    fd
                );
            }
        }
    }
}
