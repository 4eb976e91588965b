use rayon::prelude::*;

use super::gemm::gemm;
use super::tensor::{is_grad_enabled, Tensor};

/// Query rows handled per block by the untracked kernel.
const ROWS: usize = 64;

impl Tensor {
    /// Dot-product attention over positions: for queries `q [B, R, P]`, keys
    /// `k [B, R, P]` and values `v [B, C, P]`, output column `j` is
    /// `sum_i softmax_i(q_j . k_i) v_i`.
    ///
    /// When nothing needs a gradient the `P x P` weight matrix is never
    /// materialized; blocks of query rows are processed in cache instead.
    pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        assert_eq!(q.shape(), k.shape(), "query and key shapes differ");
        assert_eq!(q.rank(), 3, "attention expects [B, R, P] operands");
        assert_eq!(v.rank(), 3, "attention expects [B, C, P] values");
        assert_eq!(
            (v.dim(0), v.dim(2)),
            (q.dim(0), q.dim(2)),
            "value shape mismatch"
        );
        let tracked = is_grad_enabled() && [q, k, v].iter().any(|t| t.requires_grad());
        if tracked {
            let beta = q.bmm_t(k, true, false).softmax_last();
            return v.bmm_t(&beta, false, true);
        }
        let (b, r, p, c) = (q.dim(0), q.dim(1), q.dim(2), v.dim(1));
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![0.0; b * c * p];
        out.par_chunks_mut(c * p).enumerate().for_each(|(n, o)| {
            let qs = &qd[n * r * p..(n + 1) * r * p];
            let ks = &kd[n * r * p..(n + 1) * r * p];
            let vs = &vd[n * c * p..(n + 1) * c * p];
            let mut weights = vec![0.0; ROWS * p];
            let mut block = vec![0.0; c * ROWS];
            for j0 in (0..p).step_by(ROWS) {
                let rows = ROWS.min(p - j0);
                let w = &mut weights[..rows * p];
                for (jj, row) in w.chunks_mut(p).enumerate() {
                    row.fill(0.0);
                    for ch in 0..r {
                        let qv = qs[ch * p + j0 + jj];
                        for (x, kv) in row.iter_mut().zip(&ks[ch * p..(ch + 1) * p]) {
                            *x += qv * kv;
                        }
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                let blk = &mut block[..c * rows];
                gemm(c, p, rows, vs, false, w, true, blk, 0.0);
                for ch in 0..c {
                    o[ch * p + j0..ch * p + j0 + rows]
                        .copy_from_slice(&blk[ch * rows..(ch + 1) * rows]);
                }
            }
        });
        Tensor::from_vec(out, &[b, c, p])
    }
}
