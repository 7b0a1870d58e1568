use crate::error::{Error, Result};

use super::numel;

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for k in 0..r {
        let da = if k + a.len() >= r { a[k + a.len() - r] } else { 1 };
        let db = if k + b.len() >= r { b[k + b.len() - r] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

/// Maps output flat indices to input flat indices for one operand.
#[derive(Debug, Clone)]
pub(crate) enum IndexMap {
    /// The operand has the output's element count and layout.
    Identity,
    /// The operand matches a trailing block of the output; index is `o % n`.
    Cyclic(usize),
    General(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        let n_in = numel(input);
        let n_out = numel(out);
        if n_in == n_out {
            return IndexMap::Identity;
        }
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return IndexMap::Cyclic(n_in.max(1));
        }
        let r = out.len();
        let offset = r - input.len();
        let mut strides = vec![0usize; r];
        let mut s = 1;
        for k in (0..input.len()).rev() {
            strides[k + offset] = if input[k] == 1 { 0 } else { s };
            s *= input[k];
        }
        let mut idx = vec![0usize; r];
        let mut cur = 0usize;
        let mut map = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            map.push(cur);
            for k in (0..r).rev() {
                idx[k] += 1;
                cur += strides[k];
                if idx[k] < out[k] {
                    break;
                }
                cur -= strides[k] * idx[k];
                idx[k] = 0;
            }
        }
        IndexMap::General(map)
    }

    #[inline]
    pub(crate) fn get(&self, o: usize) -> usize {
        match self {
            IndexMap::Identity => o,
            IndexMap::Cyclic(n) => o % n,
            IndexMap::General(m) => m[o],
        }
    }
}

/// Precomputed broadcast layout for a binary elementwise op.
#[derive(Debug, Clone)]
pub(crate) struct BinaryPlan {
    pub out_shape: Vec<usize>,
    pub lhs: IndexMap,
    pub rhs: IndexMap,
}

impl BinaryPlan {
    pub(crate) fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let out_shape = broadcast_shape(a, b).map_err(|_| Error::shape(op, a, b))?;
        Ok(BinaryPlan {
            lhs: IndexMap::new(a, &out_shape),
            rhs: IndexMap::new(b, &out_shape),
            out_shape,
        })
    }

    pub(crate) fn len(&self) -> usize {
        numel(&self.out_shape)
    }

    /// Calls `f(o, a, b)` for every output index in order, with the operand
    /// indices it reads. Identity and cyclic layouts avoid the per-element
    /// lookup.
    #[inline]
    pub(crate) fn zip(&self, mut f: impl FnMut(usize, usize, usize)) {
        let len = self.len();
        match (&self.lhs, &self.rhs) {
            (IndexMap::Identity, IndexMap::Identity) => (0..len).for_each(|o| f(o, o, o)),
            (IndexMap::Identity, m) => m.walk(len, |o, i| f(o, o, i)),
            (m, IndexMap::Identity) => m.walk(len, |o, i| f(o, i, o)),
            (l, r) => (0..len).for_each(|o| f(o, l.get(o), r.get(o))),
        }
    }
}

impl IndexMap {
    #[inline]
    fn walk(&self, len: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            IndexMap::Identity => (0..len).for_each(|o| f(o, o)),
            IndexMap::Cyclic(n) => {
                for base in (0..len).step_by(*n) {
                    (0..*n).for_each(|i| f(base + i, i));
                }
            }
            IndexMap::General(m) => m.iter().enumerate().for_each(|(o, &i)| f(o, i)),
        }
    }
}
