// Raw slice kernels shared by forward and backward passes.

/// `out += op(a) · op(b)` for row-major `a` and `b`, where `op` optionally
/// transposes. `out` is `m×n`, the contraction length is `k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if trans_b {
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Overflow-safe logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// For each flat index of a tensor with shape `target`, the flat index of
/// the element of `source` it reads under right-aligned broadcasting.
/// Returns `None` when `source` does not broadcast onto `target`.
pub(crate) fn broadcast_index(source: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if source.len() > target.len() {
        return None;
    }
    let pad = target.len() - source.len();
    let mut strides = vec![0usize; target.len()];
    let mut stride = 1;
    for ax in (0..source.len()).rev() {
        let s = source[ax];
        let t = target[ax + pad];
        if s == t {
            strides[ax + pad] = stride;
        } else if s != 1 {
            return None;
        }
        stride *= s;
    }
    let numel: usize = target.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; target.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
