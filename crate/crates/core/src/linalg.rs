//! Small dense and banded complex linear algebra used across the crate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{numerical, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Orthonormalizes the columns of `a` in place by modified Gram-Schmidt with
/// one reorthogonalization pass. Returns the triangular factor, whose diagonal
/// is real and positive.
pub fn qr_positive(a: &mut CMat) -> Result<CMat> {
    let (rows, cols) = a.shape();
    let mut r = CMat::zeros(cols, cols);
    for j in 0..cols {
        for _pass in 0..2 {
            for k in 0..j {
                let mut dot = C64::new(0.0, 0.0);
                for i in 0..rows {
                    dot += a[(i, k)].conj() * a[(i, j)];
                }
                for i in 0..rows {
                    let q = a[(i, k)];
                    a[(i, j)] -= dot * q;
                }
                r[(k, j)] += dot;
            }
        }
        let norm = (0..rows).map(|i| a[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return numerical(format!("degenerate column {j} in orthonormalization"));
        }
        for i in 0..rows {
            a[(i, j)] /= norm;
        }
        r[(j, j)] = c(norm);
    }
    Ok(r)
}

/// Inverse of an upper triangular matrix.
pub fn upper_inverse(r: &CMat) -> CMat {
    let n = r.nrows();
    let mut inv = CMat::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = C64::new(1.0, 0.0) / r[(j, j)];
        for i in (0..j).rev() {
            let mut s = C64::new(0.0, 0.0);
            for k in i + 1..=j {
                s += r[(i, k)] * inv[(k, j)];
            }
            inv[(i, j)] = -s / r[(i, i)];
        }
    }
    inv
}

pub fn inverse(a: &CMat) -> Result<CMat> {
    match a.clone().try_inverse() {
        Some(inv) if inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => Ok(inv),
        _ => numerical("singular matrix"),
    }
}

pub fn det(a: &CMat) -> C64 {
    a.clone().lu().determinant()
}

/// Ratio of the largest to the smallest singular value.
pub fn condition(a: &CMat) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Eigenvalues of a square complex matrix.
pub fn eigenvalues(m: &CMat) -> Result<Vec<C64>> {
    let n = m.nrows();
    if n == 1 {
        return Ok(vec![m[(0, 0)]]);
    }
    if n == 2 {
        let tr = m[(0, 0)] + m[(1, 1)];
        let dt = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let disc = (tr * tr - 4.0 * dt).sqrt();
        let a = 0.5 * (tr + disc);
        let b = 0.5 * (tr - disc);
        // Recompute the smaller root from the product to avoid cancellation.
        return Ok(if a.norm() >= b.norm() {
            let b2 = if a.norm() > 0.0 { dt / a } else { b };
            vec![a, b2]
        } else {
            let a2 = if b.norm() > 0.0 { dt / b } else { a };
            vec![a2, b]
        });
    }
    let schur = match nalgebra::Schur::try_new(m.clone(), 1e-15, 10_000) {
        Some(s) => s,
        None => return numerical("Schur iteration did not converge"),
    };
    match schur.eigenvalues() {
        Some(ev) => Ok(ev.iter().cloned().collect()),
        None => numerical("eigenvalue extraction failed"),
    }
}

/// Right and left null vectors of a (nearly) singular square matrix, taken
/// from the smallest singular triple. Also returns the two smallest singular
/// values so callers can judge the kernel dimension.
pub struct NullPair {
    pub right: CVec,
    pub left: CVec,
    pub sigma_min: f64,
    pub sigma_next: f64,
}

pub fn null_pair(m: &CMat) -> Result<NullPair> {
    let n = m.nrows();
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| crate::Error::Numerical("svd failed".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| crate::Error::Numerical("svd failed".into()))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| svd.singular_values[a].partial_cmp(&svd.singular_values[b]).unwrap());
    let k = idx[0];
    let right = CVec::from_iterator(n, (0..n).map(|j| vt[(k, j)].conj()));
    let left = CVec::from_iterator(n, (0..n).map(|i| u[(i, k)].conj()));
    let sigma_next = if n > 1 { svd.singular_values[idx[1]] } else { f64::INFINITY };
    Ok(NullPair { right, left, sigma_min: svd.singular_values[k], sigma_next })
}

/// Square banded matrix with LU factorization by partial pivoting.
pub struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<C64>,
    pivots: Vec<usize>,
    factored: bool,
}

impl Banded {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![C64::new(0.0, 0.0); n * width], pivots: vec![0; n], factored: false }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let off = j as isize - i as isize + self.kl as isize;
        if off < 0 || off as usize >= self.width {
            None
        } else {
            Some(i * self.width + off as usize)
        }
    }

    /// Adds `v` to entry (i, j). Panics if (i, j) lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: C64) {
        let jmax = i + self.ku;
        assert!(j + self.kl >= i && j <= jmax, "entry ({i},{j}) outside band");
        let s = self.slot(i, j).expect("band slot");
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.slot(i, j).map(|s| self.data[s]).unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn factor(&mut self) -> Result<()> {
        let n = self.n;
        let reach = self.ku + self.kl;
        for k in 0..n {
            let last = (k + self.kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).norm();
            for i in k + 1..=last {
                let v = self.get(i, k).norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return numerical(format!("banded matrix singular at pivot {k}"));
            }
            self.pivots[k] = p;
            let jend = (k + reach).min(n - 1);
            if p != k {
                for j in k..=jend {
                    let a = self.slot(k, j).unwrap();
                    let b = self.slot(p, j).unwrap();
                    self.data.swap(a, b);
                }
            }
            let piv = self.get(k, k);
            for i in k + 1..=last {
                let si = self.slot(i, k).unwrap();
                let l = self.data[si] / piv;
                self.data[si] = l;
                if l == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in k + 1..=jend {
                    let kj = self.data[self.slot(k, j).unwrap()];
                    let s = self.slot(i, j).unwrap();
                    self.data[s] -= l * kj;
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves in place; `factor` must have been called.
    pub fn solve(&self, b: &mut [C64]) {
        assert!(self.factored);
        let n = self.n;
        let reach = self.ku + self.kl;
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for i in k + 1..=(k + self.kl).min(n - 1) {
                b[i] -= self.get(i, k) * bk;
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + reach).min(n - 1) {
                s -= self.get(k, j) * b[j];
            }
            b[k] = s / self.get(k, k);
        }
    }
}

/// Least-squares line fit `y = a + b x`; returns (a, b).
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Complex least squares for `sum_k coef_k * basis_k(x_i) = y_i`.
pub fn complex_lstsq(basis: &CMat, y: &CVec) -> Result<CVec> {
    let svd = basis.clone().svd(true, true);
    svd.solve(y, 1e-14).map_err(|e| crate::Error::Numerical(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_has_positive_diagonal_and_reconstructs() {
        let a = CMat::from_row_slice(
            4,
            2,
            &[
                C64::new(1.0, 2.0),
                C64::new(0.5, -1.0),
                C64::new(-0.3, 0.1),
                C64::new(2.0, 0.0),
                C64::new(0.0, 1.0),
                C64::new(1.0, 1.0),
                C64::new(3.0, -2.0),
                C64::new(0.2, 0.0),
            ],
        );
        let mut q = a.clone();
        let r = qr_positive(&mut q).unwrap();
        for j in 0..2 {
            assert!(r[(j, j)].im == 0.0 && r[(j, j)].re > 0.0);
        }
        let back = &q * &r;
        assert!((back - a).norm() < 1e-12);
        let gram = q.adjoint() * &q;
        assert!((gram - CMat::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn banded_solve_matches_dense() {
        let n = 12;
        let mut b = Banded::new(n, 2, 1);
        let mut dense = CMat::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(2)..=(i + 1).min(n - 1) {
                let v = C64::new(((i * 7 + j * 3) % 5) as f64 - 2.0, ((i + 2 * j) % 3) as f64 * 0.5);
                let v = if i == j { v + 0.1 } else { v };
                b.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        let rhs: Vec<C64> = (0..n).map(|i| C64::new(i as f64, 1.0)).collect();
        let mut x = rhs.clone();
        b.factor().unwrap();
        b.solve(&mut x);
        let xv = CVec::from_vec(x);
        let r = &dense * &xv - CVec::from_vec(rhs);
        assert!(r.norm() < 1e-9);
    }

    #[test]
    fn quadratic_eigenvalues_are_accurate() {
        let m = CMat::from_row_slice(2, 2, &[c(0.0), c(1.0), c(-1e-12), c(-1e6)]);
        let ev = eigenvalues(&m).unwrap();
        let small = ev.iter().min_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap()).unwrap();
        assert!((small.re + 1e-18).abs() < 1e-24);
    }

    #[test]
    fn upper_inverse_is_inverse() {
        let r = CMat::from_row_slice(2, 2, &[c(2.0), C64::new(1.0, 1.0), c(0.0), c(0.5)]);
        let inv = upper_inverse(&r);
        assert!((&r * inv - CMat::identity(2, 2)).norm() < 1e-14);
    }
}
