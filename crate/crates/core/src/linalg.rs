//! Dense eigensolver wrappers and a Pfaffian.

use faer::complex_native::c64;
use faer::{Mat, Side};
use num_complex::Complex64;

/// Symmetric eigendecomposition. Eigenvalues ascending; eigenvector `k` is
/// column `k` of the returned matrix.
pub fn sym_eigen(m: &Mat<f64>) -> (Vec<f64>, Mat<f64>) {
    let evd = m.selfadjoint_eigendecomposition(Side::Lower);
    let s = evd.s().column_vector();
    let vals = (0..m.nrows()).map(|i| s.read(i)).collect();
    (vals, evd.u().to_owned())
}

pub fn sym_eigenvalues(m: &Mat<f64>) -> Vec<f64> {
    let mut v = m.selfadjoint_eigenvalues(Side::Lower);
    v.sort_by(f64::total_cmp);
    v
}

/// Hermitian eigendecomposition of a row-major complex matrix. Returns the
/// ascending eigenvalues and the eigenvectors as rows-of-columns: `vecs[k]`
/// is the eigenvector for `vals[k]`.
pub fn herm_eigen(n: usize, h: &[Complex64]) -> (Vec<f64>, Vec<Vec<Complex64>>) {
    let m = Mat::<c64>::from_fn(n, n, |i, j| {
        let z = h[i * n + j];
        c64::new(z.re, z.im)
    });
    let evd = m.selfadjoint_eigendecomposition(Side::Lower);
    let s = evd.s().column_vector();
    let u = evd.u();
    let vals = (0..n).map(|i| s.read(i).re).collect();
    let vecs = (0..n)
        .map(|k| {
            (0..n)
                .map(|i| {
                    let z = u.read(i, k);
                    Complex64::new(z.re, z.im)
                })
                .collect()
        })
        .collect();
    (vals, vecs)
}

pub fn herm_eigenvalues(n: usize, h: &[Complex64]) -> Vec<f64> {
    let m = Mat::<c64>::from_fn(n, n, |i, j| {
        let z = h[i * n + j];
        c64::new(z.re, z.im)
    });
    let mut v: Vec<f64> = m.selfadjoint_eigenvalues(Side::Lower);
    v.sort_by(f64::total_cmp);
    v
}

/// Pfaffian of a real antisymmetric matrix (row-major), as `(sign, ln|Pf|)`.
/// Sign is 0 for a singular matrix. Parlett-Reid tridiagonalization with
/// partial pivoting.
pub fn pfaffian(n: usize, a: &[f64]) -> (i8, f64) {
    if n % 2 == 1 {
        return (0, f64::NEG_INFINITY);
    }
    let mut m = a.to_vec();
    let at = |i: usize, j: usize| i * n + j;
    let mut sign = 1i8;
    let mut log = 0.0;
    for k in (0..n.saturating_sub(1)).step_by(2) {
        let kp = (k + 1..n).max_by(|&x, &y| m[at(x, k)].abs().total_cmp(&m[at(y, k)].abs())).unwrap();
        if kp != k + 1 {
            for c in 0..n {
                m.swap(at(k + 1, c), at(kp, c));
            }
            for r in 0..n {
                m.swap(at(r, k + 1), at(r, kp));
            }
            sign = -sign;
        }
        let pivot = m[at(k, k + 1)];
        if pivot == 0.0 {
            return (0, f64::NEG_INFINITY);
        }
        if pivot < 0.0 {
            sign = -sign;
        }
        log += pivot.abs().ln();
        if k + 2 < n {
            let tau: Vec<f64> = (k + 2..n).map(|c| m[at(k, c)] / pivot).collect();
            let col: Vec<f64> = (k + 2..n).map(|r| m[at(r, k + 1)]).collect();
            for (ri, r) in (k + 2..n).enumerate() {
                for (ci, c) in (k + 2..n).enumerate() {
                    m[at(r, c)] += tau[ri] * col[ci] - col[ri] * tau[ci];
                }
            }
        }
    }
    (sign, log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pf_bruteforce(n: usize, a: &[f64]) -> f64 {
        if n == 0 {
            return 1.0;
        }
        let mut total = 0.0;
        for j in 1..n {
            let keep: Vec<usize> = (1..n).filter(|&x| x != j).collect();
            let sub: Vec<f64> = keep.iter().flat_map(|&r| keep.iter().map(move |&c| (r, c))).map(|(r, c)| a[r * n + c]).collect();
            let s = if j % 2 == 1 { 1.0 } else { -1.0 };
            total += s * a[j] * pf_bruteforce(n - 2, &sub);
        }
        total
    }

    fn random_antisym(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = next();
                a[i * n + j] = v;
                a[j * n + i] = -v;
            }
        }
        a
    }

    #[test]
    fn pfaffian_matches_expansion() {
        for (n, seed) in [(2, 1), (4, 2), (6, 3), (8, 4)] {
            let a = random_antisym(n, seed);
            let exact = pf_bruteforce(n, &a);
            let (s, l) = pfaffian(n, &a);
            assert!((s as f64 * l.exp() - exact).abs() < 1e-12 * exact.abs().max(1.0), "n={n}");
        }
    }

    #[test]
    fn pfaffian_squared_is_determinant_magnitude() {
        let n = 10;
        let a = random_antisym(n, 9);
        let vals = herm_eigenvalues(n, &a.iter().map(|&x| Complex64::new(0.0, x)).collect::<Vec<_>>());
        let log_det: f64 = vals.iter().map(|v| v.abs().ln()).sum();
        let (_, l) = pfaffian(n, &a);
        assert!((2.0 * l - log_det).abs() < 1e-10);
    }

    #[test]
    fn eigen_wrappers_agree() {
        let n = 7;
        let m = Mat::<f64>::from_fn(n, n, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let (vals, vecs) = sym_eigen(&m);
        assert_eq!(vals.len(), n);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        for k in 0..n {
            for i in 0..n {
                let mv: f64 = (0..n).map(|j| m[(i, j)] * vecs[(j, k)]).sum();
                assert!((mv - vals[k] * vecs[(i, k)]).abs() < 1e-12);
            }
        }
        let ev = sym_eigenvalues(&m);
        assert!(ev.iter().zip(&vals).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
