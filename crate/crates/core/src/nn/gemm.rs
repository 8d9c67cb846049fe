//! Register-blocked dense kernels used by the convolution layers.

const MR: usize = 4;
const NR: usize = 8;

/// `c[i][p] += sum_l a(i, l) * b[l][p]` where `a(i, l) = a[i * ai + l * al]`,
/// `b` is `k × n` and `c` is `m × n`, both row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    ai: usize,
    al: usize,
    b: &[f64],
    c: &mut [f64],
) {
    debug_assert!(b.len() >= k * n && c.len() >= m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    let mut packed = vec![[0.0f64; MR]; k];
    for i0 in (0..m_full).step_by(MR) {
        for (l, slot) in packed.iter_mut().enumerate() {
            for (r, v) in slot.iter_mut().enumerate() {
                *v = a[(i0 + r) * ai + l * al];
            }
        }
        for p0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + p0..(i0 + r) * n + p0 + NR]);
            }
            for (av, brow) in packed.iter().zip(b.chunks_exact(n)) {
                let bv: &[f64; NR] = brow[p0..p0 + NR].try_into().unwrap();
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] += av[r] * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + p0..(i0 + r) * n + p0 + NR].copy_from_slice(row);
            }
        }
        if n_full < n {
            for r in 0..MR {
                scalar_row(i0 + r, n_full, n, k, a, ai, al, b, c);
            }
        }
    }
    for i in m_full..m {
        scalar_row(i, 0, n, k, a, ai, al, b, c);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn scalar_row(
    i: usize,
    p_start: usize,
    n: usize,
    k: usize,
    a: &[f64],
    ai: usize,
    al: usize,
    b: &[f64],
    c: &mut [f64],
) {
    for l in 0..k {
        let av = a[i * ai + l * al];
        let brow = &b[l * n + p_start..l * n + n];
        for (cv, bv) in c[i * n + p_start..i * n + n].iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}
