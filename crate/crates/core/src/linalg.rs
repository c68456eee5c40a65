//! Dense kernels: GEMM, truncated SVD (one-sided Jacobi) and Householder QR.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Jacobi rotation threshold relative to the column norms of the pair.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `op(a)` is `m x k`; when `a_t` is set, `a` is stored as `k x m`.
/// Likewise `op(b)` is `k x n`, stored as `n x k` when `b_t` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        gemm_strided(
            m,
            k,
            n,
            alpha,
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

/// Raw strided GEMM.
///
/// # Safety
/// All pointers with their strides must address valid memory for the given
/// dimensions, and `c` must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
pub unsafe fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Thin SVD factors truncated to rank `r`: `w ≈ u · diag(s) · vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `M x r`, orthonormal columns.
    pub u: Tensor,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `N x r`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.rows(), self.s.len());
        let mut us = self.u.clone();
        for i in 0..m {
            for j in 0..r {
                us.data_mut()[i * r + j] *= self.s[j];
            }
        }
        let n = self.v.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, r, n, 1.0, us.data(), false, self.v.data(), true, 0.0, &mut out);
        Tensor::new(&[m, n], out).expect("consistent shape")
    }
}

fn check_matrix(w: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::Shape {
            op: what,
            lhs: w.shape().to_vec(),
            rhs: vec![2],
        });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok((w.rows(), w.cols()))
}

/// Truncated singular value decomposition by one-sided (Hestenes) Jacobi.
pub fn truncated_svd(w: &Tensor, r: usize) -> Result<Svd> {
    let (m, n) = check_matrix(w, "truncated_svd")?;
    if r == 0 || r > m.min(n) {
        return Err(Error::RankOutOfRange { rank: r, rows: m, cols: n });
    }
    // Orthogonalize the columns of the taller orientation. `cols` holds those
    // columns as contiguous rows: `cols[j]` is column j, length `len`.
    let transposed = m < n;
    let (len, count, mut cols) = if transposed {
        (n, m, w.data().to_vec())
    } else {
        (m, n, w.transpose().into_data())
    };
    let mut vt = Tensor::eye(count).into_data();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..count {
            for q in p + 1..count {
                let (alpha, beta, gamma) = {
                    let cp = &cols[p * len..(p + 1) * len];
                    let cq = &cols[q * len..(q + 1) * len];
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * libm::sqrt(alpha * beta)
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_rows(&mut cols, len, p, q, c, s);
                rotate_rows(&mut vt, count, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..count)
        .map(|j| libm::sqrt(cols[j * len..(j + 1) * len].iter().map(|x| x * x).sum()))
        .collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    order.truncate(r);

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s[0];
    // Left vectors, as rows of length `len`.
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut pending = Vec::new();
    for (i, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > 0.0 && sigma > smax * 1e-14 {
            left.push(cols[j * len..(j + 1) * len].iter().map(|x| x / sigma).collect());
        } else {
            left.push(vec![0.0; len]);
            pending.push(i);
        }
    }
    for i in pending {
        left[i] = orthonormal_complement(&left, i, len);
    }
    let right: Vec<&[f64]> = order.iter().map(|&j| &vt[j * count..(j + 1) * count]).collect();

    let pack = |vecs: &[&[f64]], rows: usize| {
        let mut out = vec![0.0; rows * r];
        for (j, v) in vecs.iter().enumerate() {
            for i in 0..rows {
                out[i * r + j] = v[i];
            }
        }
        Tensor::new(&[rows, r], out).expect("consistent shape")
    };
    let left_refs: Vec<&[f64]> = left.iter().map(|v| v.as_slice()).collect();
    let (u, v) = if transposed {
        (pack(&right, count), pack(&left_refs, len))
    } else {
        (pack(&left_refs, len), pack(&right, count))
    };
    Ok(Svd { u, s, v })
}

fn rotate_rows(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let rp = &mut head[p * len..(p + 1) * len];
    let rq = &mut tail[..len];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Unit vector orthogonal to every nonzero vector in `basis` except slot `skip`.
fn orthonormal_complement(basis: &[Vec<f64>], skip: usize, len: usize) -> Vec<f64> {
    let mut best = vec![0.0; len];
    let mut best_norm = -1.0;
    for e in 0..len {
        let mut cand = vec![0.0; len];
        cand[e] = 1.0;
        for _ in 0..2 {
            for (i, b) in basis.iter().enumerate() {
                if i == skip {
                    continue;
                }
                let d: f64 = b.iter().zip(&cand).map(|(x, y)| x * y).sum();
                cand.iter_mut().zip(b).for_each(|(c, x)| *c -= d * x);
            }
        }
        let norm = libm::sqrt(cand.iter().map(|x| x * x).sum());
        if norm > best_norm {
            best_norm = norm;
            best = cand;
        }
        if best_norm > 0.5 {
            break;
        }
    }
    best.iter_mut().for_each(|x| *x /= best_norm);
    best
}

/// Thin QR factorization: `w = q · r`, `q` is `M x k`, `r` is `k x N`, `k = min(M, N)`.
///
/// Diagonal entries of `r` are made non-negative.
pub fn qr_decompose(w: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = check_matrix(w, "qr_decompose")?;
    let k = m.min(n);
    let mut a = w.data().to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);

    for j in 0..k {
        let norm = libm::sqrt((j..m).map(|i| a[i * n + j] * a[i * n + j]).sum());
        let mut v: Vec<f64> = (j..m).map(|i| a[i * n + j]).collect();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        apply_reflector(&mut a, n, j, &v, j);
        for i in j + 1..m {
            a[i * n + j] = 0.0;
        }
        reflectors.push(v);
    }

    let mut q = vec![0.0; m * k];
    for i in 0..k {
        q[i * k + i] = 1.0;
    }
    for j in (0..k).rev() {
        if !reflectors[j].is_empty() {
            apply_reflector(&mut q, k, j, &reflectors[j], 0);
        }
    }
    let mut r = vec![0.0; k * n];
    for i in 0..k {
        for c in i..n {
            r[i * n + c] = a[i * n + c];
        }
    }
    for i in 0..k {
        if r[i * n + i] < 0.0 {
            for c in 0..n {
                r[i * n + c] = -r[i * n + c];
            }
            for row in 0..m {
                q[row * k + i] = -q[row * k + i];
            }
        }
    }
    Ok((Tensor::new(&[m, k], q)?, Tensor::new(&[k, n], r)?))
}

/// Applies `I - 2 v vᵀ` to rows `start..` of a row-major matrix with `cols`
/// columns, touching columns `col0..` only.
fn apply_reflector(buf: &mut [f64], cols: usize, start: usize, v: &[f64], col0: usize) {
    for c in col0..cols {
        let mut d = 0.0;
        for (i, vi) in v.iter().enumerate() {
            d += vi * buf[(start + i) * cols + c];
        }
        if d != 0.0 {
            for (i, vi) in v.iter().enumerate() {
                buf[(start + i) * cols + c] -= 2.0 * d * vi;
            }
        }
    }
}
