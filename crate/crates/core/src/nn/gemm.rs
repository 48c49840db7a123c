//! Bounds-checked wrapper over the strided matrixmultiply kernels.

/// Strided view of a matrix stored in a slice: element `(r, c)` lives at `r * rs + c * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    pub const fn strided(rs: usize) -> Self {
        Self { rs, cs: 1 }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `C <- alpha * A B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`.
///
/// With `beta == 0` the previous contents of `C` are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert!(la.span(m, k) <= a.len(), "gemm: A out of bounds");
    assert!(lb.span(k, n) <= b.len(), "gemm: B out of bounds");
    assert!(lc.span(m, n) <= c.len(), "gemm: C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every element addressed through the
    // given strides lies inside the corresponding slice, and `c` is uniquely
    // borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
