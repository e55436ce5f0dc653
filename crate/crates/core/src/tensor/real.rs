use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` for training, `f64` for verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn erf(self) -> Self;

    /// `c (+)= a·b` with explicit row/column strides for every operand, so
    /// transposed views cost nothing.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: [isize; 2],
        b: &[Self],
        b_strides: [isize; 2],
        c: &mut [Self],
        c_strides: [isize; 2],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

macro_rules! check_extent {
    ($m:expr, $n:expr, $buf:expr, $s:expr) => {
        if $m > 0 && $n > 0 {
            let last = ($m as isize - 1) * $s[0] + ($n as isize - 1) * $s[1];
            assert!(
                $s[0] >= 0 && $s[1] >= 0 && (last as usize) < $buf.len(),
                "gemm operand out of bounds"
            );
        }
    };
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        sa: [isize; 2],
        b: &[f32],
        sb: [isize; 2],
        c: &mut [f32],
        sc: [isize; 2],
        accumulate: bool,
    ) {
        check_extent!(m, k, a, sa);
        check_extent!(k, n, b, sb);
        check_extent!(m, n, c, sc);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa[0],
                sa[1],
                b.as_ptr(),
                sb[0],
                sb[1],
                beta,
                c.as_mut_ptr(),
                sc[0],
                sc[1],
            );
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        sa: [isize; 2],
        b: &[f64],
        sb: [isize; 2],
        c: &mut [f64],
        sc: [isize; 2],
        accumulate: bool,
    ) {
        check_extent!(m, k, a, sa);
        check_extent!(k, n, b, sb);
        check_extent!(m, n, c, sc);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa[0],
                sa[1],
                b.as_ptr(),
                sb[0],
                sb[1],
                beta,
                c.as_mut_ptr(),
                sc[0],
                sc[1],
            );
        }
    }
}
