//! Thin wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows × cols`.
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = beta * c + a @ b` where `a` is `m × k`, `b` is `k × n` and `c` is
/// row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    check_extent(a, m, k, la);
    check_extent(b, k, n, lb);
    // SAFETY: extents were checked against the slice lengths above and `c`
    // holds at least m*n elements in row-major order.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_extent(x: &[f64], rows: usize, cols: usize, l: Layout) {
    let last = (rows - 1) as isize * l.rs + (cols - 1) as isize * l.cs;
    assert!(
        l.rs >= 0 && l.cs >= 0 && (last as usize) < x.len(),
        "gemm operand out of bounds"
    );
}
