use std::fmt::{Debug, Display};

use num_traits::Float;

/// Row/column strides of a matrix view, in elements.
#[derive(Clone, Copy, Debug)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Dense row-major layout with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Strides { row: cols, col: 1 }
    }

    /// View of a dense row-major matrix with `cols` columns as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col
        }
    }
}

/// Floating-point element type of a tensor.
///
/// Implemented for `f32` (training) and `f64` (gradient checking).
pub trait Element: Float + Default + Debug + Display + Send + Sync + 'static {
    /// `c = alpha * a(m×k) * b(k×n) + beta * c(m×n)` on strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_views(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    sa: Strides,
    b_len: usize,
    sb: Strides,
    c_len: usize,
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        sc.max_offset(m, n) < c_len,
        "gemm: output view out of bounds"
    );
    if k > 0 {
        assert!(sa.max_offset(m, k) < a_len, "gemm: lhs view out of bounds");
        assert!(sb.max_offset(k, n) < b_len, "gemm: rhs view out of bounds");
    }
}

macro_rules! impl_element {
    ($t:ty, $kernel:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                beta: Self,
                c: &mut [Self],
                sc: Strides,
            ) {
                check_views(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above against the
                // backing slice, and `c` does not alias `a` or `b` because it
                // is borrowed mutably.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.row as isize,
                        sa.col as isize,
                        b.as_ptr(),
                        sb.row as isize,
                        sb.col as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.row as isize,
                        sc.col as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(
            2,
            3,
            2,
            1.0,
            &a,
            Strides::row_major(3),
            &b,
            Strides::row_major(2),
            0.0,
            &mut c,
            Strides::row_major(2),
        );
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_view() {
        // a^T where a is 3x2 row-major gives the 2x3 matrix [[1,3,5],[2,4,6]].
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f32, 1.0, 1.0];
        let mut c = [0.0f32; 2];
        f32::gemm(
            2,
            3,
            1,
            1.0,
            &a,
            Strides::transposed(2),
            &b,
            Strides::row_major(1),
            0.0,
            &mut c,
            Strides::row_major(1),
        );
        assert_eq!(c, [9.0, 12.0]);
    }
}
