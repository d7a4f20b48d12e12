use matrixmultiply::dgemm;

/// Below this many multiply-adds, packing costs more than it saves.
const SMALL: usize = 1 << 16;

/// `c = beta * c + op(a) * op(b)` for row-major buffers, where `op` optionally
/// transposes. `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL {
        return small_gemm(m, k, n, a, a_trans, b, b_trans, beta, c);
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe in-bounds views of the slices whose lengths
    // were checked above; `c` does not alias `a` or `b`.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { small_gemm_avx2(m, k, n, a, a_trans, b, b_trans, beta, c) };
    }
    small_gemm_generic(m, k, n, a, a_trans, b, b_trans, beta, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm_avx2(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    small_gemm_generic(m, k, n, a, a_trans, b, b_trans, beta, c)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn small_gemm_generic(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for p in 0..k {
            let av = if a_trans { a[p * m + i] } else { a[i * k + p] };
            if b_trans {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += av * b[j * k + p];
                }
            } else {
                for (v, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *v += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_path_matches_packed() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.71).cos()).collect();
        for (at, bt) in [(false, false), (true, false), (false, true), (true, true)] {
            for beta in [0.0, 1.0, 0.5] {
                let mut small = vec![1.5; m * n];
                let mut packed = small.clone();
                small_gemm(m, k, n, &a, at, &b, bt, beta, &mut small);
                let mut generic = vec![1.5; m * n];
                small_gemm_generic(m, k, n, &a, at, &b, bt, beta, &mut generic);
                assert_eq!(small, generic);
                let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: strides match the buffer sizes above.
                unsafe {
                    dgemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        packed.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                for (x, y) in small.iter().zip(&packed) {
                    assert!((x - y).abs() < 1e-13, "{at} {bt} {beta}: {x} vs {y}");
                }
            }
        }
    }
}
