//! Thin dispatch from the generic element type to `matrixmultiply`.

/// Strided general matrix multiply, implemented for `f32` and `f64`.
///
/// `c <- alpha * a @ b + beta * c` where the operands are described by
/// (row, column)-stride pairs, so transposed views cost nothing.
pub trait Gemm: Copy {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Gemm for f32 {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Gemm for f64 {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Which side(s) of the product are used transposed.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `c = a (m x k) @ b (k x n)`
    NotNot,
    /// `c = a (m x k) @ b^T (b stored n x k)`
    NotTrans,
    /// `c = a^T (a stored k x m) @ b (k x n)`
    TransNot,
}

/// `c <- a @ b + beta * c` for row-major contiguous buffers.
///
/// Callers guarantee `a`, `b`, `c` hold at least the implied element counts;
/// that is asserted here once so the unsafe call below stays local.
pub fn gemm_into<T: Gemm>(
    layout: Layout,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    alpha: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm lhs buffer too small");
    assert!(b.len() >= k * n, "gemm rhs buffer too small");
    assert!(c.len() >= m * n, "gemm out buffer too small");
    let (rsa, csa, rsb, csb) = match layout {
        Layout::NotNot => (k as isize, 1, n as isize, 1),
        Layout::NotTrans => (k as isize, 1, 1, k as isize),
        Layout::TransNot => (1, m as isize, n as isize, 1),
    };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
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
