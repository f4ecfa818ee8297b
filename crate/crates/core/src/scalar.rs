use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of tensors and graphs: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    /// `c = a·b + beta·c` for row/column strided matrices of shape m×k, k×n and m×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 always converts")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float always converts")
    }
}

fn extent_ok(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    rs >= 0 && cs >= 0 && (last as usize) < len
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(extent_ok(a.len(), m, k, a_strides), "gemm: lhs out of bounds");
                assert!(extent_ok(b.len(), k, n, b_strides), "gemm: rhs out of bounds");
                assert!(extent_ok(c.len(), m, n, c_strides), "gemm: output out of bounds");
                // SAFETY: every index touched by the kernel lies inside the slices (checked above)
                // and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loops_with_transposed_operand() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // stored 4x3, used as 3x4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, &a, (3, 1), &b, (1, 3), 1.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 1.0;
                for p in 0..3 {
                    acc += a[i * 3 + p] * b[j * 3 + p];
                }
                assert_eq!(c[i * 4 + j], acc);
            }
        }
    }
}
