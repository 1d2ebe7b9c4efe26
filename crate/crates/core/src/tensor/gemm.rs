/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Sub-block starting at `(row, col)` of a row-major buffer with `ld` columns.
    pub fn block(data: &'a [f64], ld: usize, row: usize, col: usize) -> Self {
        MatRef {
            data,
            offset: row * ld + col,
            row_stride: ld,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `c (+)= a · b` with `a: m×k`, `b: k×n` and `c` row-major with leading dim `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    gemm_at(m, k, n, a, b, c, 0, ldc, accumulate)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_at(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    c_offset: usize,
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: &MatRef<'_>, rows: usize, cols: usize| {
        r.offset + (rows.max(1) - 1) * r.row_stride + (cols.max(1) - 1) * r.col_stride
    };
    assert!(k == 0 || last(&a, m, k) < a.data.len(), "gemm: a out of bounds");
    assert!(k == 0 || last(&b, k, n) < b.data.len(), "gemm: b out of bounds");
    assert!(c_offset + (m - 1) * ldc + n - 1 < c.len(), "gemm: c out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[c_offset + i * ldc..c_offset + i * ldc + n].fill(0.0);
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index touched by the kernel lies inside the slices, as
    // checked by the bounds assertions above; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            ldc as isize,
            1,
        );
    }
}
