//! Thin safe wrappers over `matrixmultiply::dgemm`.

/// Batched product `op(A) · op(B)` over `batch` contiguous matrix pairs.
///
/// `a` holds `batch` stored matrices of `ar × ac` (row-major); when `ta` is set
/// the logical operand is the transpose. Same for `b`. Returns `batch × m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm(
    a: &[f64],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[f64],
    br: usize,
    bc: usize,
    tb: bool,
    batch: usize,
) -> Vec<f64> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "inner dimensions differ: {k} vs {k2}");
    assert_eq!(a.len(), batch * ar * ac);
    assert_eq!(b.len(), batch * br * bc);
    let mut out = vec![0.0; batch * m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
    for i in 0..batch {
        let a_blk = &a[i * ar * ac..(i + 1) * ar * ac];
        let b_blk = &b[i * br * bc..(i + 1) * br * bc];
        let c_blk = &mut out[i * m * n..(i + 1) * m * n];
        if k == 0 {
            continue;
        }
        // SAFETY: every pointer/stride pair addresses only elements inside its
        // slice: the logical operands are m×k, k×n and m×n with the strides
        // derived from the stored (row-major) layouts checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a_blk.as_ptr(),
                rsa as isize,
                csa as isize,
                b_blk.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_transpose_flags_agree_with_naive() {
        for (m, k, n) in [(3, 5, 4), (40, 37, 29)] {
            check_flags(m, k, n);
        }
    }

    fn check_flags(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, m, k, &b, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let (aa, ar, ac) = if ta { (&at, k, m) } else { (&a, m, k) };
            let (bb, br, bc) = if tb { (&bt, n, k) } else { (&b, k, n) };
            let got = bmm(aa, ar, ac, ta, bb, br, bc, tb, 1);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10, "ta={ta} tb={tb}");
            }
        }
    }
}
