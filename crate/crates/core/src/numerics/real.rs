use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar element type of a [`Tensor`](super::Tensor).
///
/// `f32` is used for training and inference; `f64` exists so gradient checks
/// against finite differences have enough precision to be meaningful.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn erf(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    /// `c = a · b + beta · c` for row-major slices with explicit strides.
    ///
    /// # Safety contract
    /// Callers go through [`gemm`], which bounds-checks every stride walk.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Layout of one matrix operand inside a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatLayout {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatLayout {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatLayout {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        MatLayout {
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// Safe strided matrix multiply: `c[m×n] = a[m×k] · b[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    beta: T,
    c: &mut [T],
    lc: MatLayout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(la.last_index(m, k) < a.len(), "gemm: lhs out of bounds");
        assert!(lb.last_index(k, n) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(lc.last_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: every element touched lies within the checked extents above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}
