//! Strided matrix product on slices, backed by `matrixmultiply`.

/// Strided view of a row-major-ish matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c = a · b + beta · c`.
pub(crate) fn gemm(a: &[f64], am: Mat, b: &[f64], bm: Mat, beta: f64, c: &mut [f64], cm: Mat) {
    assert_eq!(am.cols, bm.rows, "inner dimension mismatch");
    assert_eq!(am.rows, cm.rows);
    assert_eq!(bm.cols, cm.cols);
    assert!(a.len() >= am.span() && b.len() >= bm.span() && c.len() >= cm.span());
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            am.rows,
            am.cols,
            bm.cols,
            1.0,
            a.as_ptr(),
            am.row_stride as isize,
            am.col_stride as isize,
            b.as_ptr(),
            bm.row_stride as isize,
            bm.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            cm.row_stride as isize,
            cm.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 4x3, used transposed
        let mut c = vec![1.0; 8];
        gemm(
            &a,
            Mat::row_major(2, 3),
            &b,
            Mat::row_major(4, 3).t(),
            1.0,
            &mut c,
            Mat::row_major(2, 4),
        );
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = 1.0 + (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum::<f64>();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
    }
}
