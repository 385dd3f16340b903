use crate::scalar::Scalar;

// Every kernel accumulates each output element over the shared axis in
// ascending order starting from zero, so results equal a naive triple loop
// bit for bit.

const MR: usize = 4;
const NR: usize = 16;

/// `c[m,n] += a[m,p] * b[p,n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, p: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    if p == 0 || n == 0 {
        return;
    }
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            tile(p, n, &a[i0 * p..], b, &mut c[i0 * n..], j0);
        }
        if n_main < n {
            edge(i0..i0 + MR, n_main..n, p, n, a, b, c);
        }
    }
    if m_main < m {
        edge(m_main..m, 0..n, p, n, a, b, c);
    }
}

// Register tile: MR rows by NR columns of `c`, accumulated over all of `p`.
#[inline(always)]
fn tile<T: Scalar>(p: usize, n: usize, a: &[T], b: &[T], c: &mut [T], j0: usize) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, acc_row) in acc.iter_mut().enumerate() {
        acc_row.copy_from_slice(&c[r * n + j0..r * n + j0 + NR]);
    }
    for t in 0..p {
        let b_row: &[T; NR] = b[t * n + j0..t * n + j0 + NR].try_into().unwrap();
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let av = a[r * p + t];
            for (x, &bv) in acc_row.iter_mut().zip(b_row) {
                *x += av * bv;
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        c[r * n + j0..r * n + j0 + NR].copy_from_slice(acc_row);
    }
}

fn edge<T: Scalar>(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    p: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    for i in rows {
        let c_row = &mut c[i * n + cols.start..i * n + cols.end];
        for t in 0..p {
            let av = a[i * p + t];
            let b_row = &b[t * n + cols.start..t * n + cols.end];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[p,m]^T * b[p,n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, p: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,p] * b[n,p]^T`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, p: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(b.len(), n * p);
    let mut bt = vec![T::zero(); p * n];
    for j in 0..n {
        for t in 0..p {
            bt[t * n + j] = b[j * p + t];
        }
    }
    gemm_nn(m, p, n, a, &bt, c);
}
