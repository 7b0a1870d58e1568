use rayon::prelude::*;

use crate::error::{Error, Result};

use super::broadcast::{broadcast_shape, IndexMap};
use super::numel;

// Below this many multiply-adds the rayon dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

/// Runs `f(index, chunk)` over every `len`-sized chunk of `out`. Each chunk is
/// written by exactly one call, so results do not depend on scheduling.
fn for_each_chunk<F>(out: &mut [f64], len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && out.len() > len {
        out.par_chunks_mut(len).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Strided view of a dense matrix for `gemm`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = beta * c + a . b` for an `m x k` by `k x n` product, `c` row-major.
fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    debug_assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every element addressed through the given
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64], accumulate: bool) {
    let r = shape.len();
    let mut src_strides = vec![0usize; r];
    let mut s = 1;
    for k in (0..r).rev() {
        src_strides[k] = s;
        s *= shape[k];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for d in dst.iter_mut() {
        if accumulate {
            *d += src[cur];
        } else {
            *d = src[cur];
        }
        for k in (0..r).rev() {
            idx[k] += 1;
            cur += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            cur -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
}

/// Batched matrix product layout: `[.., M, K] x [.., K, N] -> [.., M, N]`
/// with broadcasting over the leading batch axes.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    batches: usize,
    a_batch: IndexMap,
    b_batch: IndexMap,
    a_batches: usize,
    b_batches: usize,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape(ab, bb).map_err(|_| Error::shape("matmul", a, b))?;
        let batch_or_one = if batch.is_empty() { vec![1] } else { batch.clone() };
        let ab1 = if ab.is_empty() { vec![1] } else { ab.to_vec() };
        let bb1 = if bb.is_empty() { vec![1] } else { bb.to_vec() };
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            out_shape,
            m,
            k,
            n,
            batches: numel(&batch_or_one),
            a_batch: IndexMap::new(&ab1, &batch_or_one),
            b_batch: IndexMap::new(&bb1, &batch_or_one),
            a_batches: numel(&ab1),
            b_batches: numel(&bb1),
        })
    }

    pub(crate) fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for_each_chunk(out, m * n, self.batches * m * k * n, |bi, c| {
            let a_mat = &a[self.a_batch.get(bi) * m * k..][..m * k];
            let b_mat = &b[self.b_batch.get(bi) * k * n..][..k * n];
            gemm(m, k, n, View::rows(a_mat, k), View::rows(b_mat, n), 0.0, c);
        });
    }

    /// `ga += dc . b^T`, reduced over any batch axes `a` was broadcast along.
    pub(crate) fn backward_lhs(&self, b: &[f64], dc: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let groups = group_batches(&self.a_batch, self.batches, self.a_batches);
        for_each_chunk(ga, m * k, self.batches * m * k * n, |ab, g| {
            for &bi in &groups[ab] {
                let dc_mat = &dc[bi * m * n..][..m * n];
                let b_mat = &b[self.b_batch.get(bi) * k * n..][..k * n];
                gemm(m, n, k, View::rows(dc_mat, n), View::transposed(b_mat, n), 1.0, g);
            }
        });
    }

    /// `gb += a^T . dc`, reduced over any batch axes `b` was broadcast along.
    pub(crate) fn backward_rhs(&self, a: &[f64], dc: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let groups = group_batches(&self.b_batch, self.batches, self.b_batches);
        for_each_chunk(gb, k * n, self.batches * m * k * n, |bb, g| {
            for &bi in &groups[bb] {
                let a_mat = &a[self.a_batch.get(bi) * m * k..][..m * k];
                let dc_mat = &dc[bi * m * n..][..m * n];
                gemm(k, m, n, View::transposed(a_mat, k), View::rows(dc_mat, n), 1.0, g);
            }
        });
    }
}

fn group_batches(map: &IndexMap, batches: usize, operand_batches: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); operand_batches];
    for bi in 0..batches {
        groups[map.get(bi)].push(bi);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        // 2x3 -> 3x2
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut dst = [0.0; 6];
        permute_into(&src, &[2, 3], &[1, 0], &mut dst, false);
        assert_eq!(dst, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn broadcast_rhs_matmul_reduces_gradient_over_batch() {
        // a: [2,1,2], b: [2,1]; gb = sum over batches of a^T dc
        let plan = MatmulPlan::new(&[2, 1, 2], &[2, 1]).unwrap();
        assert_eq!(plan.out_shape, vec![2, 1, 1]);
        let a = [1.0, 2.0, 3.0, 4.0];
        let dc = [1.0, 1.0];
        let mut gb = [0.0; 2];
        plan.backward_rhs(&a, &dc, &mut gb);
        assert_eq!(gb, [4.0, 6.0]);
    }
}
