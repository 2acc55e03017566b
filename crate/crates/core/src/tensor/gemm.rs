//! Thin strided wrapper over `matrixmultiply::dgemm`.

/// `c = op(a)·op(b) + beta·c` where `op(a)` is `m×k` and `op(b)` is `k×p`.
///
/// `a` is stored row-major as `m×k` (or `k×m` when `trans_a`), `b` as `k×p`
/// (or `p×k` when `trans_b`), `c` as `m×p`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    p: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    if m == 0 || p == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (p as isize, 1) };
    // SAFETY: the slices hold exactly the m×k, k×p and m×p elements the
    // strides address, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}
