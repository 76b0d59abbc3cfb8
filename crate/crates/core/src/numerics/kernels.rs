//! Dense kernels shared by forward and backward passes.

use crate::error::{Error, Result};

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Index mapping for a broadcast binary elementwise op. The first operand
/// always has the output shape.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Second operand repeats with the given period (its shape is a suffix of
    /// the output shape).
    Suffix(usize),
    General {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
}

impl Broadcast {
    #[inline]
    pub(crate) fn lhs(&self, i: usize) -> usize {
        match self {
            Broadcast::General { lhs, .. } => lhs[i],
            _ => i,
        }
    }

    #[inline]
    pub(crate) fn rhs(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(p) => i % p,
            Broadcast::General { rhs, .. } => rhs[i],
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, a, b)),
        };
    }
    Ok(out)
}

fn strides_for(shape: &[usize], rank: usize) -> Vec<usize> {
    // Broadcast strides aligned to `rank`, zero on broadcast axes.
    let mut strides = vec![0; rank];
    let offset = rank - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Flat source offsets into an operand of shape `src` for every element of `out`.
pub(crate) fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let strides = strides_for(src, rank);
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut offsets = Vec::with_capacity(numel);
    for _ in 0..numel {
        offsets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offsets
}

/// Plans `lhs ∘ rhs`. Returns `(out_shape, plan, swapped)` where `swapped`
/// means the operands were exchanged so the first covers the output shape.
pub(crate) fn plan_broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Broadcast, bool)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same, false));
    }
    let out = broadcast_shape(op, a, b)?;
    let (big, small, swapped) = if a == out.as_slice() {
        (a, b, false)
    } else if b == out.as_slice() {
        (b, a, true)
    } else {
        let lhs = broadcast_offsets(a, &out);
        let rhs = broadcast_offsets(b, &out);
        return Ok((out, Broadcast::General { lhs, rhs }, false));
    };
    let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    if big.ends_with(&trimmed) {
        let period = trimmed.iter().product::<usize>().max(1);
        return Ok((out, Broadcast::Suffix(period), swapped));
    }
    let lhs = broadcast_offsets(big, &out);
    let rhs = broadcast_offsets(small, &out);
    Ok((out, Broadcast::General { lhs, rhs }, swapped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_hand_case() {
        let mut out = vec![0.0; 1];
        gemm_nn(&[1.0, 2.0], &[3.0, 4.0], &mut out, 1, 2, 1);
        assert_eq!(out, vec![11.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn column_broadcast_is_general() {
        let (out, plan, swapped) = plan_broadcast("t", &[3, 4], &[3, 1]).unwrap();
        assert_eq!(out, vec![3, 4]);
        assert!(!swapped);
        assert_eq!(plan.rhs(5), 1);
        let (_, plan, _) = plan_broadcast("t", &[3, 4], &[4]).unwrap();
        assert!(matches!(plan, Broadcast::Suffix(4)));
    }
}
