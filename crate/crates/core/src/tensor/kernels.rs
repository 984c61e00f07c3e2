//! Dense loops shared by the forward and backward passes.

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
}

/// Right-aligned (numpy-style) broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[derive(Debug, Clone)]
pub(crate) enum BroadcastPlan {
    Same(usize),
    /// `b` repeats every `period` elements of `a` (trailing-suffix broadcast).
    Suffix { len: usize, period: usize },
    General {
        out_shape: Vec<usize>,
        a_strides: Vec<usize>,
        b_strides: Vec<usize>,
    },
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

impl BroadcastPlan {
    pub(crate) fn new(a: &[usize], b: &[usize], out: &[usize]) -> Self {
        let numel: usize = out.iter().product();
        if a == b {
            return BroadcastPlan::Same(numel);
        }
        if a == out && b.len() <= a.len() && a[a.len() - b.len()..] == *b {
            return BroadcastPlan::Suffix {
                len: numel,
                period: b.iter().product(),
            };
        }
        BroadcastPlan::General {
            out_shape: out.to_vec(),
            a_strides: broadcast_strides(a, out),
            b_strides: broadcast_strides(b, out),
        }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            BroadcastPlan::Same(n) => (0..*n).for_each(|i| f(i, i, i)),
            BroadcastPlan::Suffix { len, period } => {
                for i in 0..*len {
                    f(i, i, i % period)
                }
            }
            BroadcastPlan::General {
                out_shape,
                a_strides,
                b_strides,
            } => {
                let numel: usize = out_shape.iter().product();
                let nd = out_shape.len();
                let mut idx = vec![0usize; nd];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..numel {
                    f(o, ia, ib);
                    for d in (0..nd).rev() {
                        idx[d] += 1;
                        ia += a_strides[d];
                        ib += b_strides[d];
                        if idx[d] < out_shape[d] {
                            break;
                        }
                        ia -= a_strides[d] * out_shape[d];
                        ib -= b_strides[d] * out_shape[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // bᵀ stored explicitly as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn broadcast_general_indices() {
        let out = broadcast_shape(&[2, 1], &[3]).unwrap();
        assert_eq!(out, vec![2, 3]);
        let plan = BroadcastPlan::new(&[2, 1], &[3], &out);
        let mut seen = vec![];
        plan.for_each(|o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]
        );
        assert!(broadcast_shape(&[2, 3], &[4]).is_none());
    }
}
