use crate::real::Real;

/// Storage order of a gemm operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Operand used as stored (row-major `rows x cols`).
    N,
    /// Operand used transposed.
    T,
}

/// `c = beta * c + alpha * op(a) * op(b)`, with `op(a)` being `m x k` and
/// `op(b)` being `k x n`. All buffers are dense row-major as stored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = match la {
        Layout::N => (k as isize, 1),
        Layout::T => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::N => (n as isize, 1),
        Layout::T => (1, k as isize),
    };
    // SAFETY: extents and strides describe exactly the asserted buffers.
    unsafe {
        if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f64>() {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha.f64(),
                a.as_ptr() as *const f64,
                rsa,
                csa,
                b.as_ptr() as *const f64,
                rsb,
                csb,
                beta.f64(),
                c.as_mut_ptr() as *mut f64,
                n as isize,
                1,
            );
        } else {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha.f64() as f32,
                a.as_ptr() as *const f32,
                rsa,
                csa,
                b.as_ptr() as *const f32,
                rsb,
                csb,
                beta.f64() as f32,
                c.as_mut_ptr() as *mut f32,
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, Layout::N, &b, Layout::N, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, Layout::T, &b, Layout::N, 0.0, &mut c);
        // a^T b = [[1,3],[2,4]] b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, Layout::N, &b, Layout::T, 0.0, &mut c);
        // a b^T
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut cf = [0.0f32; 4];
        gemm(2, 2, 2, 1.0, &af, Layout::N, &bf, Layout::N, 0.0, &mut cf);
        assert_eq!(cf, [19.0, 22.0, 43.0, 50.0]);
    }
}
