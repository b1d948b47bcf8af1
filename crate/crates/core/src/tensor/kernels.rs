use super::{Result, TensorError};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut flat = 0;
    for (d, (&i, &n)) in index.iter().zip(shape).enumerate() {
        assert!(i < n, "index {i} out of bounds for axis {d} of size {n}");
        flat = flat * n + i;
    }
    flat
}

/// Odometer increment of a multi-index over `shape`.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// For each flat index of `out_shape`, the flat index into a tensor of `src_shape`
/// broadcast (right-aligned, size-1 or missing axes repeat) into it.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// Source repeats every `period` elements (suffix broadcast).
    Cyclic { period: usize },
    General(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn plan(op: &'static str, out_shape: &[usize], src_shape: &[usize]) -> Result<Self> {
        let err = || TensorError::ShapeMismatch {
            op,
            lhs: out_shape.to_vec(),
            rhs: src_shape.to_vec(),
        };
        if src_shape.len() > out_shape.len() {
            return Err(err());
        }
        if src_shape == out_shape {
            return Ok(Broadcast::Same);
        }
        let offset = out_shape.len() - src_shape.len();
        let mut aligned_strides = vec![0usize; out_shape.len()];
        let src_strides = strides(src_shape);
        for (i, &n) in src_shape.iter().enumerate() {
            let o = out_shape[offset + i];
            if n == o {
                aligned_strides[offset + i] = src_strides[i];
            } else if n != 1 {
                return Err(err());
            }
        }
        let src_numel: usize = src_shape.iter().product();
        let suffix: usize = out_shape[offset..].iter().product();
        if suffix == src_numel {
            return Ok(Broadcast::Cyclic { period: src_numel });
        }
        let numel: usize = out_shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..numel {
            map.push(idx.iter().zip(&aligned_strides).map(|(i, s)| i * s).sum());
            advance(&mut idx, out_shape);
        }
        Ok(Broadcast::General(map))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cyclic { period } => i % period,
            Broadcast::General(map) => map[i],
        }
    }

    /// Sums `grad` (laid out like the broadcast output) back onto the source shape.
    pub(crate) fn reduce(&self, grad: &[f64], src_numel: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![0.0; src_numel];
                for (i, g) in grad.iter().enumerate() {
                    out[self.index(i)] += g;
                }
                out
            }
        }
    }
}

/// C[m,n] (+)= A[m,k] * B[k,n], with optional transposition of either operand as stored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the m/k/n extents and the
    // strides describe row-major (or transposed row-major) layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Copies `src` with axes `a0` and `a1` exchanged.
pub(crate) fn swap_axes(src: &[f64], shape: &[usize], a0: usize, a1: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    if a0 == a1 {
        return (out_shape, src.to_vec());
    }
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a0, a1);
    let numel = src.len();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    // Innermost axis handled in a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = perm_strides[last];
    let mut idx = vec![0usize; rank];
    let outer_shape = &out_shape[..last];
    let outer_count: usize = outer_shape.iter().product();
    for _ in 0..outer_count {
        let base: usize = idx[..last]
            .iter()
            .zip(&perm_strides[..last])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner_len {
            out.push(src[base + j * inner_stride]);
        }
        advance(&mut idx[..last], outer_shape);
    }
    (out_shape, out)
}
