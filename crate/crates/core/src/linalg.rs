//! Row-major batch matrices and the three GEMM shapes the network stack
//! needs. Buffers are allocated once at a maximum batch size; every kernel
//! takes the live row count explicitly so partial batches reuse the same
//! storage. Inner loops run over contiguous rows so they autovectorize.

use crate::math::Real;

/// Dense row-major matrix of batch data: `rows` samples by `cols` channels.
#[derive(Debug, Clone)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Real> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Mat<S> {
        Mat {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill_rows(&mut self, rows: usize, v: S) {
        self.data[..rows * self.cols].fill(v);
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }
}

/// Dot product with eight independent accumulators so the additions
/// vectorize despite float non-associativity being off the table for the
/// naive chain.
#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (x, y) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
}

/// C[..rows] = A[..rows] * W^T where A is rows x in, W is out x in.
/// Runs as an accumulation over transposed weight rows, blocked four batch
/// rows at a time, so the inner loops are stride-1 fused multiply-adds.
pub fn matmul_nt<S: Real>(
    a: &Mat<S>,
    rows: usize,
    w: &[S],
    out_dim: usize,
    in_dim: usize,
    c: &mut Mat<S>,
) {
    debug_assert_eq!(a.cols, in_dim);
    debug_assert_eq!(c.cols, out_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut wt = vec![S::ZERO; w.len()];
    for o in 0..out_dim {
        for i in 0..in_dim {
            wt[i * out_dim + o] = w[o * in_dim + i];
        }
    }
    let blocks = rows / 4;
    for blk in 0..blocks {
        let r = blk * 4;
        let (a0, a1, a2, a3) = (a.row(r), a.row(r + 1), a.row(r + 2), a.row(r + 3));
        let cslice = &mut c.data[r * out_dim..(r + 4) * out_dim];
        cslice.fill(S::ZERO);
        let (c01, c23) = cslice.split_at_mut(2 * out_dim);
        let (c0, c1) = c01.split_at_mut(out_dim);
        let (c2, c3) = c23.split_at_mut(out_dim);
        for i in 0..in_dim {
            let wr = &wt[i * out_dim..(i + 1) * out_dim];
            let (x0, x1, x2, x3) = (a0[i], a1[i], a2[i], a3[i]);
            for o in 0..out_dim {
                let wv = wr[o];
                c0[o] += x0 * wv;
                c1[o] += x1 * wv;
                c2[o] += x2 * wv;
                c3[o] += x3 * wv;
            }
        }
    }
    for r in blocks * 4..rows {
        let ar = a.row(r);
        let cr = c.row_mut(r);
        cr.fill(S::ZERO);
        for (i, &x) in ar.iter().enumerate() {
            let wr = &wt[i * out_dim..(i + 1) * out_dim];
            for (cv, wv) in cr.iter_mut().zip(wr.iter()) {
                *cv += x * *wv;
            }
        }
    }
}

/// C[..rows] += Z[..rows] * W where Z is rows x out, W is out x in; C is
/// rows x in. Propagates adjoints back through a linear layer. The target
/// may be wider than `in_dim`; only the leading columns are touched.
pub fn matmul_nn_acc<S: Real>(
    z: &Mat<S>,
    rows: usize,
    w: &[S],
    out_dim: usize,
    in_dim: usize,
    c: &mut Mat<S>,
) {
    debug_assert_eq!(z.cols, out_dim);
    debug_assert!(c.cols >= in_dim);
    for r in 0..rows {
        let zr = z.row(r);
        let cr = c.row_mut(r);
        for (o, zo) in zr.iter().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            for (ci, wi) in cr.iter_mut().zip(wr.iter()) {
                *ci += *zo * *wi;
            }
        }
    }
}

/// W += Z[..rows]^T * A[..rows] where Z is rows x out, A is rows x in; W is
/// out x in. Accumulates weight gradients.
pub fn matmul_tn_acc<S: Real>(
    z: &Mat<S>,
    a: &Mat<S>,
    rows: usize,
    w: &mut [S],
    out_dim: usize,
    in_dim: usize,
) {
    debug_assert_eq!(z.cols, out_dim);
    debug_assert_eq!(a.cols, in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for r in 0..rows {
        let zr = z.row(r);
        let ar = a.row(r);
        for (o, zo) in zr.iter().enumerate() {
            let wr = &mut w[o * in_dim..(o + 1) * in_dim];
            for (wi, ai) in wr.iter_mut().zip(ar.iter()) {
                *wi += *zo * *ai;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat_from(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        assert_eq!(v.len(), rows * cols);
        Mat {
            rows,
            cols,
            data: v.to_vec(),
        }
    }

    #[test]
    fn matmul_nt_small() {
        // A = [[1,2],[3,4]], W = [[1,0],[0,1],[1,1]] (3x2) -> C = A W^T (2x3)
        let a = mat_from(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let w = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = Mat::zeros(2, 3);
        matmul_nt(&a, 2, &w, 3, 2, &mut c);
        assert_eq!(c.data, vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn matmul_nn_acc_matches_manual_expansion() {
        let z = mat_from(1, 2, &[2.0, -1.0]);
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = Mat::zeros(1, 3);
        matmul_nn_acc(&z, 1, &w, 2, 3, &mut c);
        assert_eq!(c.data, vec![2.0 - 4.0, 4.0 - 5.0, 6.0 - 6.0]);
    }

    #[test]
    fn matmul_tn_acc_accumulates() {
        let z = mat_from(2, 1, &[1.0, 2.0]);
        let a = mat_from(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let mut w = vec![0.0; 2];
        matmul_tn_acc(&z, &a, 2, &mut w, 1, 2);
        assert_eq!(w, vec![1.0, 2.0]);
        matmul_tn_acc(&z, &a, 2, &mut w, 1, 2);
        assert_eq!(w, vec![2.0, 4.0]);
    }

    #[test]
    fn partial_rows_leave_tail_untouched() {
        let a = mat_from(3, 1, &[1.0, 2.0, 3.0]);
        let w = [2.0];
        let mut c = Mat::zeros(3, 1);
        c.data[2] = 99.0;
        matmul_nt(&a, 2, &w, 1, 1, &mut c);
        assert_eq!(c.data, vec![2.0, 4.0, 99.0]);
    }
}
