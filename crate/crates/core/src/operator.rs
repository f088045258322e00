//! The linearization about the front conjugated by Omega,
//! `L v = l2 v'' + l1(x) v' + l0(x) v`, and the first-order systems built from it.

use crate::error::{invalid, Result};
use crate::linalg::{c, det, CMat, C64};
use crate::model::SystemModel;
use crate::profile::WaveProfile;
use crate::weights::OmegaWeight;

/// Coefficients of the weighted operator at one point, plus `l1'`.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub l2: CMat,
    pub l1: CMat,
    pub l0: CMat,
    pub l1p: CMat,
}

#[derive(Debug, Clone)]
pub struct WeightedOperator {
    pub model: SystemModel,
    pub profile: WaveProfile,
    /// `None` means no conjugation (Omega = 1).
    pub omega: Option<OmegaWeight>,
    pub x_cut_minus: f64,
    pub x_cut_plus: f64,
    lim_minus: Coeffs,
    lim_plus: Coeffs,
    l2_inv: CMat,
}

/// Tolerance defining where coefficients have reached their limits.
pub const CUT_TOL: f64 = 1e-13;

impl WeightedOperator {
    pub fn new(model: SystemModel, profile: WaveProfile, omega: Option<OmegaWeight>) -> Result<Self> {
        model.validate()?;
        if profile.n != model.n {
            return invalid("profile and model dimensions differ");
        }
        let l2 = model.d_matrix();
        let l2_inv = CMat::from_diagonal(&nalgebra::DVector::from_iterator(model.n, model.d.iter().map(|d| c(1.0) / d)));
        let mut op = Self {
            lim_minus: Coeffs { l2: l2.clone(), l1: l2.clone(), l0: l2.clone(), l1p: l2.clone() },
            lim_plus: Coeffs { l2: l2.clone(), l1: l2.clone(), l0: l2.clone(), l1p: l2.clone() },
            model,
            profile,
            omega,
            x_cut_minus: f64::NEG_INFINITY,
            x_cut_plus: f64::INFINITY,
            l2_inv,
        };
        op.lim_minus = op.limit_coeffs(false);
        op.lim_plus = op.limit_coeffs(true);
        op.x_cut_plus = op.find_cut(true);
        op.x_cut_minus = op.find_cut(false);
        Ok(op)
    }

    pub fn n(&self) -> usize {
        self.model.n
    }

    pub fn kappa(&self) -> f64 {
        self.omega.map(|o| o.kappa).unwrap_or(0.0)
    }

    pub fn xi0(&self) -> f64 {
        self.omega.map(|o| o.xi0).unwrap_or(0.0)
    }

    /// `-kappa + i xi0`, the log-derivative of Omega at +infinity.
    pub fn rate(&self) -> C64 {
        self.omega.map(|o| o.rate()).unwrap_or(c(0.0))
    }

    pub fn l2_inv(&self) -> &CMat {
        &self.l2_inv
    }

    fn build(&self, u: &[C64], du: &[C64], w: C64, w1: C64, jx_on: bool) -> Coeffs {
        let n = self.n();
        let d = self.model.d_matrix();
        let jf = self.model.f.jacobian(u);
        let jg = self.model.g.jacobian(u);
        let jx = if jx_on { self.model.f.jacobian_dir(u, du) } else { CMat::zeros(n, n) };
        let mut jfc = jf.clone();
        for i in 0..n {
            jfc[(i, i)] += self.model.c;
        }
        let l1 = &jfc + &d * (2.0 * w);
        let l0 = &d * (w1 + w * w) + &jfc * w + jg + &jx;
        let l1p = jx + &d * (2.0 * w1);
        Coeffs { l2: d, l1, l0, l1p }
    }

    fn limit_coeffs(&self, plus: bool) -> Coeffs {
        let u = self.model.rest_state(plus).to_vec();
        let z = vec![c(0.0); self.n()];
        let w = if plus { self.rate() } else { c(0.0) };
        self.build(&u, &z, w, c(0.0), false)
    }

    pub fn limit(&self, plus: bool) -> &Coeffs {
        if plus {
            &self.lim_plus
        } else {
            &self.lim_minus
        }
    }

    /// Coefficients at `x`, evaluated from the profile (no cut-off).
    pub fn coeffs_raw(&self, x: f64) -> Coeffs {
        let (u, du, _) = self.profile.eval(x);
        let (w, w1) = match self.omega {
            Some(o) => o.log_derivs(x),
            None => (c(0.0), c(0.0)),
        };
        self.build(&u, &du, w, w1, true)
    }

    /// Coefficients at `x`, replaced by the limits beyond the cut points.
    pub fn coeffs(&self, x: f64) -> Coeffs {
        if x >= self.x_cut_plus {
            self.lim_plus.clone()
        } else if x <= self.x_cut_minus {
            self.lim_minus.clone()
        } else {
            self.coeffs_raw(x)
        }
    }

    fn coeff_gap(a: &Coeffs, b: &Coeffs) -> f64 {
        let m = |x: &CMat, y: &CMat| (x - y).iter().map(|z| z.norm()).fold(0.0, f64::max);
        m(&a.l1, &b.l1).max(m(&a.l0, &b.l0)).max(m(&a.l1p, &b.l1p))
    }

    /// Smallest |x| beyond which the coefficients stay within `CUT_TOL` of the
    /// limit (scanned on a 0.25 grid up to the profile's reach).
    fn find_cut(&self, plus: bool) -> f64 {
        let lim = self.limit(plus);
        let reach = match self.profile.source {
            crate::profile::ProfileSource::Exact { .. } => 200.0,
            crate::profile::ProfileSource::Grid => self.profile.l().max(1.0),
        };
        let step = 0.25;
        let sign = if plus { 1.0 } else { -1.0 };
        let mut cut = reach;
        let mut x = reach;
        while x >= 1.0 {
            if Self::coeff_gap(&self.coeffs_raw(sign * x), lim) > CUT_TOL {
                break;
            }
            cut = x;
            x -= step;
        }
        sign * cut.max(1.0)
    }

    /// `A(lambda, x)` of the first-order eigenvalue system.
    pub fn a_from(&self, k: &Coeffs, lambda: C64) -> CMat {
        let n = self.n();
        let mut a = CMat::zeros(2 * n, 2 * n);
        for i in 0..n {
            a[(i, n + i)] = c(1.0);
        }
        let mut lam_l0 = -k.l0.clone();
        for i in 0..n {
            lam_l0[(i, i)] += lambda;
        }
        let low_left = &self.l2_inv * lam_l0;
        let low_right = -(&self.l2_inv * &k.l1);
        a.view_mut((n, 0), (n, n)).copy_from(&low_left);
        a.view_mut((n, n), (n, n)).copy_from(&low_right);
        a
    }

    pub fn a_matrix(&self, lambda: C64, x: f64) -> CMat {
        self.a_from(&self.coeffs(x), lambda)
    }

    pub fn a_limit(&self, lambda: C64, plus: bool) -> CMat {
        self.a_from(self.limit(plus), lambda)
    }

    /// `B(lambda, y)` of the transposed first-order system `Y' = Y B`.
    pub fn b_matrix(&self, lambda: C64, y: f64) -> CMat {
        let k = self.coeffs(y);
        let n = self.n();
        let mut b = CMat::zeros(2 * n, 2 * n);
        let mut top = k.l1p.clone() - &k.l0;
        for i in 0..n {
            top[(i, i)] += lambda;
        }
        b.view_mut((0, n), (n, n)).copy_from(&(top * &self.l2_inv));
        for i in 0..n {
            b[(n + i, i)] = c(1.0);
        }
        b.view_mut((n, n), (n, n)).copy_from(&(&k.l1 * &self.l2_inv));
        b
    }

    /// `S(x)` and its closed-form inverse.
    pub fn s_matrix(&self, x: f64) -> (CMat, CMat) {
        let k = self.coeffs(x);
        let n = self.n();
        let mut s = CMat::zeros(2 * n, 2 * n);
        s.view_mut((0, 0), (n, n)).copy_from(&(-&k.l1));
        s.view_mut((0, n), (n, n)).copy_from(&(-&k.l2));
        s.view_mut((n, 0), (n, n)).copy_from(&k.l2);
        let mut si = CMat::zeros(2 * n, 2 * n);
        si.view_mut((0, n), (n, n)).copy_from(&self.l2_inv);
        si.view_mut((n, 0), (n, n)).copy_from(&(-&self.l2_inv));
        si.view_mut((n, n), (n, n)).copy_from(&(-(&self.l2_inv * &k.l1 * &self.l2_inv)));
        (s, si)
    }

    /// `L±[nu] = l2 nu^2 + l1± nu + l0±`.
    pub fn symbol(&self, plus: bool, nu: C64) -> CMat {
        let k = self.limit(plus);
        &k.l2 * (nu * nu) + &k.l1 * nu + &k.l0
    }

    /// `lambda - L±[nu]`.
    pub fn pencil(&self, plus: bool, lambda: C64, nu: C64) -> CMat {
        let mut m = -self.symbol(plus, nu);
        for i in 0..self.n() {
            m[(i, i)] += lambda;
        }
        m
    }

    /// `det(lambda - L±[nu])`.
    pub fn dispersion(&self, plus: bool, lambda: C64, nu: C64) -> C64 {
        let m = self.pencil(plus, lambda, nu);
        if self.n() == 1 {
            m[(0, 0)]
        } else {
            det(&m)
        }
    }

    /// Applies `L` to a grid function using the given derivative samples.
    pub fn apply(&self, x: f64, v: &[C64], vx: &[C64], vxx: &[C64]) -> Vec<C64> {
        let k = self.coeffs(x);
        let n = self.n();
        (0..n)
            .map(|i| (0..n).map(|j| k.l2[(i, j)] * vxx[j] + k.l1[(i, j)] * vx[j] + k.l0[(i, j)] * v[j]).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fisher;
    use crate::profile::closed_form;
    use crate::weights::build_omega;

    fn fisher_op() -> WeightedOperator {
        let m = fisher();
        let p = closed_form(&m, 0.0, 80.0, 0.05).unwrap();
        let om = build_omega(2.0 / 6f64.sqrt(), 0.0).unwrap();
        WeightedOperator::new(m, p, Some(om)).unwrap()
    }

    #[test]
    fn weighted_fisher_l1_limits() {
        let op = fisher_op();
        let s6 = 6f64.sqrt();
        assert!((op.coeffs(2.0).l1[(0, 0)] - c(1.0 / s6)).norm() < 1e-14);
        assert!((op.coeffs(-2.0).l1[(0, 0)] - c(5.0 / s6)).norm() < 1e-14);
    }

    #[test]
    fn a_has_companion_form() {
        let op = fisher_op();
        let a = op.a_matrix(C64::new(0.3, 1.0), 0.7);
        assert_eq!(a[(0, 0)], c(0.0));
        assert_eq!(a[(0, 1)], c(1.0));
    }

    #[test]
    fn s_inverse_is_inverse() {
        let op = fisher_op();
        for &x in &[-3.0, -0.5, 0.2, 5.0] {
            let (s, si) = op.s_matrix(x);
            assert!((s * si - CMat::identity(2, 2)).norm() < 1e-14);
        }
        let (s, _) = op.s_matrix(3.0);
        let s6 = 6f64.sqrt();
        assert!((s[(0, 0)] + c(1.0 / s6)).norm() < 1e-14 && s[(0, 1)] == c(-1.0) && s[(1, 0)] == c(1.0));
    }

    #[test]
    fn bs_plus_s_prime_plus_sa_vanishes() {
        let op = fisher_op();
        let lam = C64::new(0.4, -0.3);
        let x = 0.3;
        let h = 1e-5;
        let sp = (op.s_matrix(x + h).0 - op.s_matrix(x - h).0) / c(2.0 * h);
        let (s, _) = op.s_matrix(x);
        let r = op.b_matrix(lam, x) * &s + sp + &s * op.a_matrix(lam, x);
        assert!(r.norm() < 1e-8, "{}", r.norm());
    }

    #[test]
    fn cut_points_for_fisher() {
        let op = fisher_op();
        assert!(op.x_cut_plus > 30.0 && op.x_cut_plus < 45.0, "{}", op.x_cut_plus);
        assert!(op.x_cut_minus < -60.0 && op.x_cut_minus > -90.0, "{}", op.x_cut_minus);
    }

    #[test]
    fn weighted_symbol_is_shifted_symbol() {
        let op = fisher_op();
        let nu = C64::new(0.2, 0.7);
        let k = 2.0 / 6f64.sqrt();
        let m = &op.model;
        let direct = m.symbol(&m.u_plus, nu - k);
        assert!((op.symbol(true, nu) - direct).norm() < 1e-14);
    }
}
