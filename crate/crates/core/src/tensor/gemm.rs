//! Strided matrix multiply-accumulate used by every matmul-like op.

/// Read-only strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Column block `[start, start + len)` of a row-major matrix with `cols` columns.
    pub fn col_block(data: &'a [f64], cols: usize, start: usize) -> Self {
        View {
            data,
            offset: start,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[self.offset + r * self.row_stride + c * self.col_stride]
    }
}

/// Mutable row-major destination block: row `r`, column `c` lives at
/// `offset + r * row_stride + c`.
pub(crate) struct Dest<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: usize,
}

/// `dst += alpha * a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, dst: Dest) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if b.col_stride == 1 {
        for i in 0..m {
            let row_start = dst.offset + i * dst.row_stride;
            let out = &mut dst.data[row_start..row_start + n];
            for p in 0..k {
                let av = alpha * a.at(i, p);
                if av == 0.0 {
                    continue;
                }
                let b_start = b.offset + p * b.row_stride;
                let brow = &b.data[b_start..b_start + n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    } else if a.col_stride == 1 && b.row_stride == 1 {
        // b is a transposed row-major matrix: each output is a dot of two contiguous rows.
        for i in 0..m {
            let a_start = a.offset + i * a.row_stride;
            let arow = &a.data[a_start..a_start + k];
            for j in 0..n {
                let b_start = b.offset + j * b.col_stride;
                let bcol = &b.data[b_start..b_start + k];
                let dot: f64 = arow.iter().zip(bcol).map(|(x, y)| x * y).sum();
                dst.data[dst.offset + i * dst.row_stride + j] += alpha * dot;
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                dst.data[dst.offset + i * dst.row_stride + j] += alpha * acc;
            }
        }
    }
}
