use super::Scalar;

/// `out[m,n] (+)= a[m,k] @ b[k,n]`, all row-major.
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: extents checked above; row-major strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m,k] += dc[m,n] @ b[k,n]^T`.
pub(crate) fn matmul_grad_lhs<T: Scalar>(
    dc: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    // SAFETY: b viewed as an n x k matrix with unit row stride.
    unsafe {
        T::gemm(
            m,
            n,
            k,
            T::ONE,
            dc.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            T::ONE,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `out[k,n] += a[m,k]^T @ dc[m,n]`.
pub(crate) fn matmul_grad_rhs<T: Scalar>(
    a: &[T],
    dc: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    // SAFETY: a viewed as a k x m matrix with unit row stride.
    unsafe {
        T::gemm(
            k,
            m,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            k as isize,
            dc.as_ptr(),
            n as isize,
            1,
            T::ONE,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output linear index, the input linear index under `perm`
/// (output axis `i` is input axis `perm[i]`).
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            offset += moved[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= moved[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    map
}

/// Linear interpolation taps along one axis with half-pixel centres.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn nearest_taps(input: usize, output: usize) -> Vec<usize> {
    (0..output)
        .map(|o| ((o * input) / output).min(input - 1))
        .collect()
}
