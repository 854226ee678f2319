//! Eigenvalues of dense real non-symmetric matrices.
//!
//! Pipeline: diagonal balancing, Householder reduction to upper Hessenberg
//! form, then implicit double-shift (Francis) QR with deflation on the
//! Hessenberg matrix. The double shift uses the two eigenvalues of the trailing
//! 2x2 block, which keeps complex conjugate shifts in real arithmetic.

#![allow(clippy::needless_range_loop)]

use num_complex::Complex64;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAX_EIGEN_DIM: usize = 256;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn moduli(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|z| z.norm()).collect()
    }

    pub fn mean_modulus(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.moduli().iter().sum::<f64>() / self.len() as f64
    }

    pub fn max_modulus(&self) -> f64 {
        self.moduli().into_iter().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> Complex64 {
        self.eigenvalues.iter().sum()
    }

    pub fn product(&self) -> Complex64 {
        self.eigenvalues.iter().product()
    }

    /// Sorts by descending modulus, then descending real and imaginary part.
    fn sort(&mut self) {
        self.eigenvalues.sort_by(|a, b| {
            b.norm()
                .total_cmp(&a.norm())
                .then(b.re.total_cmp(&a.re))
                .then(b.im.total_cmp(&a.im))
        });
    }
}

/// All eigenvalues of a square matrix, sorted by descending modulus.
pub fn eigenvalues(a: &Matrix) -> Result<Spectrum> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "eigenvalues need a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n > MAX_EIGEN_DIM {
        return Err(Error::invalid(format!(
            "eigensolver is limited to dimension {MAX_EIGEN_DIM}, got {n}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let mut work = a.clone();
    balance(&mut work);
    let (_, h) = hessenberg(&work, false);
    let mut spectrum = hessenberg_qr(h)?;
    spectrum.sort();
    Ok(spectrum)
}

/// Parlett–Reinsch balancing by powers of two. Similarity transform, so the
/// spectrum is unchanged while row and column norms become comparable.
pub fn balance(a: &mut Matrix) {
    const RADIX: f64 = 2.0;
    let n = a.rows();
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= sqrdx;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= sqrdx;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let g = 1.0 / f;
                for j in 0..n {
                    a[(i, j)] *= g;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
    }
}

/// Householder vector for `x`: returns `(v, beta)` with
/// `(I - beta v vᵀ) x = -sign(x0) ‖x‖ e1`. `beta == 0` means no reflection is needed.
fn householder(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = x.to_vec();
    if norm == 0.0 {
        return (v, 0.0);
    }
    let alpha = if x[0] >= 0.0 { -norm } else { norm };
    v[0] -= alpha;
    let vnorm2: f64 = v.iter().map(|t| t * t).sum();
    if vnorm2 == 0.0 {
        return (v, 0.0);
    }
    (v, 2.0 / vnorm2)
}

/// Reduces `a` to upper Hessenberg form `h = qᵀ a q` by Householder reflections.
/// `q` is only accumulated when `want_q` is set (otherwise the identity is returned).
pub fn hessenberg(a: &Matrix, want_q: bool) -> (Matrix, Matrix) {
    let n = a.rows();
    let mut h = a.clone();
    let mut q = Matrix::identity(n);
    for k in 0..n.saturating_sub(2) {
        let x: Vec<f64> = (k + 1..n).map(|i| h[(i, k)]).collect();
        let (v, beta) = householder(&x);
        if beta == 0.0 {
            continue;
        }
        // h <- P h
        for j in 0..n {
            let s: f64 = v
                .iter()
                .enumerate()
                .map(|(t, vt)| vt * h[(k + 1 + t, j)])
                .sum();
            let s = beta * s;
            for (t, vt) in v.iter().enumerate() {
                h[(k + 1 + t, j)] -= s * vt;
            }
        }
        // h <- h P
        for i in 0..n {
            let s: f64 = v
                .iter()
                .enumerate()
                .map(|(t, vt)| vt * h[(i, k + 1 + t)])
                .sum();
            let s = beta * s;
            for (t, vt) in v.iter().enumerate() {
                h[(i, k + 1 + t)] -= s * vt;
            }
        }
        for i in k + 2..n {
            h[(i, k)] = 0.0;
        }
        if want_q {
            // q <- q P
            for i in 0..n {
                let s: f64 = v
                    .iter()
                    .enumerate()
                    .map(|(t, vt)| vt * q[(i, k + 1 + t)])
                    .sum();
                let s = beta * s;
                for (t, vt) in v.iter().enumerate() {
                    q[(i, k + 1 + t)] -= s * vt;
                }
            }
        }
    }
    (q, h)
}

/// Householder QR factorization `a = q r` of a rectangular `m x n` matrix, `m >= n`.
pub fn qr_decompose(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::invalid(format!(
            "QR needs rows >= cols, got {m}x{n}"
        )));
    }
    let mut r = a.clone();
    let mut q = Matrix::identity(m);
    for k in 0..n.min(m - 1) {
        let x: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let (v, beta) = householder(&x);
        if beta == 0.0 {
            continue;
        }
        for j in 0..n {
            let s = beta
                * v.iter()
                    .enumerate()
                    .map(|(t, vt)| vt * r[(k + t, j)])
                    .sum::<f64>();
            for (t, vt) in v.iter().enumerate() {
                r[(k + t, j)] -= s * vt;
            }
        }
        for i in 0..m {
            let s = beta
                * v.iter()
                    .enumerate()
                    .map(|(t, vt)| vt * q[(i, k + t)])
                    .sum::<f64>();
            for (t, vt) in v.iter().enumerate() {
                q[(i, k + t)] -= s * vt;
            }
        }
        for i in k + 1..m {
            r[(i, k)] = 0.0;
        }
    }
    Ok((q, r))
}

#[inline]
fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Eigenvalues of an upper Hessenberg matrix by shifted QR with deflation.
///
/// The sweep budget is `30 n²` double-shift steps in total; on exhaustion the
/// eigenvalues that did deflate are returned inside the error.
pub fn hessenberg_qr(h: Matrix) -> Result<Spectrum> {
    let n = h.rows();
    hessenberg_qr_with_budget(h, 30 * n * n)
}

fn hessenberg_qr_with_budget(h: Matrix, budget: usize) -> Result<Spectrum> {
    let n = h.rows();
    // 1-based working copy keeps the index arithmetic of the classic algorithm readable
    let mut a = vec![vec![0.0_f64; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            a[i + 1][j + 1] = h[(i, j)];
        }
    }
    let mut wr = vec![0.0; n + 1];
    let mut wi = vec![0.0; n + 1];
    let mut found = vec![false; n + 1];

    let mut anorm = 0.0;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm += a[i][j].abs();
        }
    }

    let mut total_sweeps = 0usize;
    let mut nn = n;
    let mut t = 0.0;
    let (mut p, mut q, mut r): (f64, f64, f64);
    let (mut x, mut y, mut z, mut w): (f64, f64, f64, f64);
    while nn >= 1 {
        let mut its = 0usize;
        loop {
            // look for a negligible subdiagonal element
            let mut l = nn;
            while l >= 2 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            x = a[nn][nn];
            if l == nn {
                // one root
                wr[nn] = x + t;
                wi[nn] = 0.0;
                found[nn] = true;
                nn -= 1;
                break;
            }
            y = a[nn - 1][nn - 1];
            w = a[nn][nn - 1] * a[nn - 1][nn];
            if l == nn - 1 {
                // two roots from the trailing 2x2 block
                p = 0.5 * (y - x);
                q = p * p + w;
                z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nn - 1] = x + z;
                    wr[nn] = x + z;
                    if z != 0.0 {
                        wr[nn] = x - w / z;
                    }
                    wi[nn - 1] = 0.0;
                    wi[nn] = 0.0;
                } else {
                    wr[nn - 1] = x + p;
                    wr[nn] = x + p;
                    wi[nn - 1] = -z;
                    wi[nn] = z;
                }
                found[nn] = true;
                found[nn - 1] = true;
                nn -= 2;
                break;
            }
            if total_sweeps >= budget {
                let eigenvalues = (1..=n)
                    .filter(|&i| found[i])
                    .map(|i| Complex64::new(wr[i], wi[i]))
                    .collect();
                return Err(Error::EigenNonConvergence {
                    iterations: total_sweeps,
                    dimension: n,
                    partial: Spectrum { eigenvalues },
                });
            }
            if its > 0 && its.is_multiple_of(10) {
                // exceptional shift
                t += x;
                for i in 1..=nn {
                    a[i][i] -= x;
                }
                let s = a[nn][nn - 1].abs() + a[nn - 1][nn - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            total_sweeps += 1;

            // form the shift and look for two consecutive small subdiagonals
            let mut m = nn - 2;
            loop {
                z = a[m][m];
                r = x - z;
                let s = y - z;
                p = (r * s - w) / a[m + 1][m] + a[m][m + 1];
                q = a[m + 1][m + 1] - z - r - s;
                r = a[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nn {
                a[i][i - 2] = 0.0;
                if i != m + 2 {
                    a[i][i - 3] = 0.0;
                }
            }
            // double-shift QR step on rows l..nn, columns m..nn
            for k in m..nn {
                if k != m {
                    p = a[k][k - 1];
                    q = a[k + 1][k - 1];
                    r = 0.0;
                    if k != nn - 1 {
                        r = a[k + 2][k - 1];
                    }
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s == 0.0 {
                    continue;
                }
                if k == m {
                    if l != m {
                        a[k][k - 1] = -a[k][k - 1];
                    }
                } else {
                    a[k][k - 1] = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                z = r / s;
                q /= p;
                r /= p;
                for j in k..=nn {
                    p = a[k][j] + q * a[k + 1][j];
                    if k != nn - 1 {
                        p += r * a[k + 2][j];
                        a[k + 2][j] -= p * z;
                    }
                    a[k + 1][j] -= p * y;
                    a[k][j] -= p * x;
                }
                let mmin = if nn < k + 3 { nn } else { k + 3 };
                for row in a.iter_mut().take(mmin + 1).skip(l) {
                    p = x * row[k] + y * row[k + 1];
                    if k != nn - 1 {
                        p += z * row[k + 2];
                        row[k + 2] -= p * r;
                    }
                    row[k + 1] -= p * q;
                    row[k] -= p;
                }
            }
            if l >= nn - 1 {
                break;
            }
        }
    }
    let eigenvalues = (1..=n).map(|i| Complex64::new(wr[i], wi[i])).collect();
    Ok(Spectrum { eigenvalues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn random(n: usize, scale: f64, rng: &mut RngState) -> Matrix {
        Matrix::from_fn(n, n, |_, _| (rng.uniform_f64() * 2.0 - 1.0) * scale)
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    fn lu_determinant(a: &Matrix) -> f64 {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
        let mut det = 1.0;
        for k in 0..n {
            let piv = (k..n)
                .max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))
                .unwrap();
            if m[piv][k] == 0.0 {
                return 0.0;
            }
            if piv != k {
                m.swap(piv, k);
                det = -det;
            }
            det *= m[k][k];
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
            }
        }
        det
    }

    fn sorted(mut v: Vec<Complex64>) -> Vec<Complex64> {
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }

    #[test]
    fn identity_spectrum() {
        let s = eigenvalues(&Matrix::identity(2)).unwrap();
        for z in &s.eigenvalues {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn rotation_spectrum() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let s = sorted(eigenvalues(&a).unwrap().eigenvalues);
        assert!((s[0] - Complex64::new(0.0, -1.0)).norm() < 1e-14);
        assert!((s[1] - Complex64::new(0.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn determinant_matches_lu() {
        let mut rng = RngState::new(55);
        for _ in 0..20 {
            let a = random(5, 1.0, &mut rng);
            let det = lu_determinant(&a);
            let prod = eigenvalues(&a).unwrap().product();
            assert!(prod.im.abs() <= 1e-8 * det.abs().max(1e-300) + 1e-12);
            assert!((prod.re - det).abs() <= 1e-8 * det.abs(), "{prod} vs {det}");
        }
    }

    #[test]
    fn trace_identity_and_conjugate_pairs() {
        let mut rng = RngState::new(8);
        for n in [1, 2, 3, 7, 16, 32] {
            let a = random(n, 3.0, &mut rng);
            let s = eigenvalues(&a).unwrap();
            assert_eq!(s.len(), n);
            let norm = a.frobenius_norm();
            assert!((s.sum().re - a.trace()).abs() <= 1e-8 * (1.0 + norm));
            assert!(s.sum().im.abs() <= 1e-8 * (1.0 + norm));
            for z in s.eigenvalues.iter().filter(|z| z.im.abs() > 1e-9) {
                assert!(s.eigenvalues.iter().any(|w| (w - z.conj()).norm() < 1e-9));
            }
        }
    }

    #[test]
    fn triangular_and_zero_matrices() {
        let a = Matrix::from_rows(&[
            vec![3.0, 1.0, 4.0],
            vec![0.0, -2.0, 5.0],
            vec![0.0, 0.0, 0.5],
        ])
        .unwrap();
        let re: Vec<f64> = sorted(eigenvalues(&a).unwrap().eigenvalues)
            .iter()
            .map(|z| z.re)
            .collect();
        assert!(
            (re[0] + 2.0).abs() < 1e-14
                && (re[1] - 0.5).abs() < 1e-14
                && (re[2] - 3.0).abs() < 1e-14
        );
        let z = eigenvalues(&Matrix::zeros(4, 4)).unwrap();
        assert!(z.eigenvalues.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn hessenberg_is_orthogonal_similarity() {
        let mut rng = RngState::new(13);
        let a = random(9, 2.0, &mut rng);
        let (q, h) = hessenberg(&a, true);
        let qtq = q.transpose().matmul(&q).unwrap();
        let eye = Matrix::identity(9);
        for (x, y) in qtq.as_slice().iter().zip(eye.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
        for i in 0..9usize {
            for j in 0..i.saturating_sub(1) {
                assert_eq!(h[(i, j)], 0.0);
            }
        }
        let back = q.matmul(&h).unwrap().matmul(&q.transpose()).unwrap();
        for (x, y) in back.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn qr_factorization() {
        let mut rng = RngState::new(17);
        let a = Matrix::from_fn(7, 4, |_, _| rng.uniform_f64() - 0.5);
        let (q, r) = qr_decompose(&a).unwrap();
        let qtq = q.transpose().matmul(&q).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[(i, j)] - e).abs() < 1e-10);
            }
        }
        for i in 0..7 {
            for j in 0..i.min(4) {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
        let back = q.matmul(&r).unwrap();
        for (x, y) in back.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_square_and_oversized() {
        assert!(eigenvalues(&Matrix::zeros(2, 3)).is_err());
        assert!(eigenvalues(&Matrix::zeros(257, 257)).is_err());
    }

    #[test]
    fn exhausted_budget_reports_partial_spectrum() {
        // block diagonal: the trailing 1x1 deflates immediately, the leading
        // 3x3 block needs sweeps
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.5, 0.0],
            vec![1.5, -1.0, 3.0, 0.0],
            vec![0.0, 2.5, 0.3, 0.0],
            vec![0.0, 0.0, 0.0, 7.0],
        ])
        .unwrap();
        match hessenberg_qr_with_budget(a.clone(), 0) {
            Err(Error::EigenNonConvergence {
                partial, dimension, ..
            }) => {
                assert_eq!(dimension, 4);
                assert_eq!(partial.eigenvalues, vec![Complex64::new(7.0, 0.0)]);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
        assert_eq!(hessenberg_qr(a).unwrap().len(), 4);
    }
}
