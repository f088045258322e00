//! Dispersion relations, essential spectrum, spatial eigenvalues and the
//! marginal expansions at the contact point.

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{c, complex_lstsq, eigenvalues, inverse, null_pair, CMat, CVec, C64, I};
use crate::model::SystemModel;
use crate::operator::WeightedOperator;
use crate::report::AssumptionReport;

/// Constant-coefficient limits `l2, l1±, l0±` of the weighted operator.
#[derive(Debug, Clone)]
pub struct Symbols {
    pub n: usize,
    pub kappa: f64,
    pub xi0: f64,
    pub l2: CMat,
    pub l2_inv: CMat,
    pub l1: [CMat; 2],
    pub l0: [CMat; 2],
}

fn side(plus: bool) -> usize {
    usize::from(plus)
}

impl Symbols {
    /// Limits for the weight `exp((-kappa + i xi0) x)` at +infinity; `kappa = 0`
    /// gives the unweighted operator.
    pub fn new(model: &SystemModel, kappa: f64, xi0: f64) -> Result<Self> {
        model.validate()?;
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return invalid("kappa must be finite and nonnegative");
        }
        let n = model.n;
        let l2 = model.d_matrix();
        let l2_inv = CMat::from_diagonal(&CVec::from_iterator(n, model.d.iter().map(|d| c(1.0) / d)));
        let build = |plus: bool| {
            let u = model.rest_state(plus);
            let w = if plus { C64::new(-kappa, xi0) } else { c(0.0) };
            let mut jfc = model.f.jacobian(u);
            for i in 0..n {
                jfc[(i, i)] += model.c;
            }
            let l1 = &jfc + &l2 * (2.0 * w);
            let l0 = &l2 * (w * w) + &jfc * w + model.g.jacobian(u);
            (l1, l0)
        };
        let (l1m, l0m) = build(false);
        let (l1p, l0p) = build(true);
        Ok(Self { n, kappa, xi0, l2, l2_inv, l1: [l1m, l1p], l0: [l0m, l0p] })
    }

    pub fn from_operator(op: &WeightedOperator) -> Self {
        let lm = op.limit(false);
        let lp = op.limit(true);
        Self {
            n: op.n(),
            kappa: op.kappa(),
            xi0: op.xi0(),
            l2: lm.l2.clone(),
            l2_inv: op.l2_inv().clone(),
            l1: [lm.l1.clone(), lp.l1.clone()],
            l0: [lm.l0.clone(), lp.l0.clone()],
        }
    }

    /// `L±[nu] = l2 nu^2 + l1± nu + l0±`.
    pub fn symbol(&self, plus: bool, nu: C64) -> CMat {
        let s = side(plus);
        &self.l2 * (nu * nu) + &self.l1[s] * nu + &self.l0[s]
    }

    /// `d/dnu L±[nu]`.
    pub fn symbol_prime(&self, plus: bool, nu: C64) -> CMat {
        &self.l2 * (2.0 * nu) + &self.l1[side(plus)]
    }

    /// `lambda - L±[nu]`.
    pub fn pencil(&self, plus: bool, lambda: C64, nu: C64) -> CMat {
        let mut m = -self.symbol(plus, nu);
        for i in 0..self.n {
            m[(i, i)] += lambda;
        }
        m
    }

    pub fn dispersion(&self, plus: bool, lambda: C64, nu: C64) -> C64 {
        let m = self.pencil(plus, lambda, nu);
        if self.n == 1 {
            m[(0, 0)]
        } else {
            crate::linalg::det(&m)
        }
    }

    /// The asymptotic matrix `A±(lambda)` of the first-order system.
    pub fn companion(&self, plus: bool, lambda: C64) -> CMat {
        let n = self.n;
        let s = side(plus);
        let mut a = CMat::zeros(2 * n, 2 * n);
        for i in 0..n {
            a[(i, n + i)] = c(1.0);
        }
        let mut lam_l0 = -self.l0[s].clone();
        for i in 0..n {
            lam_l0[(i, i)] += lambda;
        }
        a.view_mut((n, 0), (n, n)).copy_from(&(&self.l2_inv * lam_l0));
        a.view_mut((n, n), (n, n)).copy_from(&(-(&self.l2_inv * &self.l1[s])));
        a
    }

    /// `-trace(l2^{-1} l1±)`, the sum of all 2n spatial eigenvalues.
    pub fn root_sum(&self, plus: bool) -> C64 {
        -(&self.l2_inv * &self.l1[side(plus)]).trace()
    }

    /// Right null vector `v` of the pencil at a simple root, normalized so that
    /// `(1,...,1) v = 1` (or its largest entry is 1 when that sum is small),
    /// and the left null vector `w` with `w v = 1`.
    pub fn null_vectors(&self, plus: bool, lambda: C64, nu: C64) -> Result<(CVec, CVec)> {
        let n = self.n;
        if n == 1 {
            return Ok((CVec::from_element(1, c(1.0)), CVec::from_element(1, c(1.0))));
        }
        let np = null_pair(&self.pencil(plus, lambda, nu))?;
        let v = normalize_analytic(np.right);
        let wv: C64 = np.left.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        if wv.norm() < 1e-14 {
            return numerical("left and right null vectors are orthogonal (defective root)");
        }
        Ok((v, np.left / wv))
    }
}

/// Scales `v` by `1/(1,...,1)v`, falling back to its largest entry.
pub fn normalize_analytic(v: CVec) -> CVec {
    let s: C64 = v.iter().sum();
    let big = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if s.norm() > 1e-3 * big {
        v / s
    } else {
        let k = (0..v.len()).max_by(|&a, &b| v[a].norm().partial_cmp(&v[b].norm()).unwrap()).unwrap_or(0);
        let p = v[k];
        v / p
    }
}

/// `det(lambda - L±[nu])` for the weighted limits of `model`.
pub fn dispersion(model: &SystemModel, plus: bool, kappa: f64, lambda: C64, nu: C64) -> Result<C64> {
    Ok(Symbols::new(model, if plus { kappa } else { 0.0 }, 0.0)?.dispersion(plus, lambda, nu))
}

// ---------------------------------------------------------------------------
// Essential spectrum

#[derive(Debug, Clone)]
pub struct EssentialCurves {
    pub xi: Vec<f64>,
    /// `curves[k][i]` is `lambda_k(xi[i])`.
    pub curves: Vec<Vec<C64>>,
    /// Grid indices where two eigenvalues were closer than 1e-8.
    pub ambiguous: Vec<usize>,
}

/// Eigenvalue curves of `L±[i xi]`, continued by nearest-neighbour matching.
pub fn essential_curves(sym: &Symbols, plus: bool, xi: &[f64]) -> Result<EssentialCurves> {
    let n = sym.n;
    let mut curves = vec![Vec::with_capacity(xi.len()); n];
    let mut ambiguous = Vec::new();
    let mut prev: Option<Vec<C64>> = None;
    for (i, &x) in xi.iter().enumerate() {
        let mut ev = eigenvalues(&sym.symbol(plus, I * x))?;
        if min_pair_distance(&ev) < 1e-8 {
            ambiguous.push(i);
        }
        match &prev {
            None => ev.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap()),
            Some(p) => ev = match_to(p, ev),
        }
        for k in 0..n {
            curves[k].push(ev[k]);
        }
        prev = Some(ev);
    }
    Ok(EssentialCurves { xi: xi.to_vec(), curves, ambiguous })
}

/// Reorders `new` so that entry k is the nearest unused value to `prev[k]`.
pub fn match_to(prev: &[C64], new: Vec<C64>) -> Vec<C64> {
    let m = new.len();
    let mut used = vec![false; m];
    let mut out = vec![c(0.0); m];
    // Greedy on globally sorted pair distances.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * m);
    for (i, p) in prev.iter().enumerate() {
        for (j, q) in new.iter().enumerate() {
            pairs.push(((p - q).norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut done = vec![false; m];
    for (_, i, j) in pairs {
        if !done[i] && !used[j] {
            out[i] = new[j];
            done[i] = true;
            used[j] = true;
        }
    }
    out
}

pub fn min_pair_distance(v: &[C64]) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            d = d.min((v[i] - v[j]).norm());
        }
    }
    d
}

pub fn xi_grid(center: f64, half_width: f64, step: f64) -> Vec<f64> {
    let k = (half_width / step).round() as i64;
    (-k..=k).map(|i| center + i as f64 * step).collect()
}

/// Constants of the single marginal contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalData {
    pub xi0: f64,
    pub xi_window: f64,
    pub eta: f64,
    pub alpha1: f64,
    pub alpha2: C64,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EssentialOptions {
    /// Frequency window Xi separating the marginal neighbourhood.
    pub xi_window: f64,
    /// Half-width of the scanned frequency range.
    pub xi_span: f64,
    pub xi_step: f64,
    /// |Re lambda| below this counts as contact.
    pub contact_tol: f64,
}

impl Default for EssentialOptions {
    fn default() -> Self {
        Self { xi_window: 1.0, xi_span: 50.0, xi_step: 0.01, contact_tol: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct EssentialCheck {
    pub report: AssumptionReport,
    pub marginal: Option<MarginalData>,
}

fn max_re_eig(sym: &Symbols, plus: bool, xi: f64) -> Result<C64> {
    let ev = eigenvalues(&sym.symbol(plus, I * xi))?;
    Ok(ev.into_iter().max_by(|a, b| a.re.partial_cmp(&b.re).unwrap()).unwrap())
}

/// Golden-section refinement of the maximizer of `Re lambda_max(xi)`.
fn refine_max(sym: &Symbols, a: f64, b: f64) -> Result<f64> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (a, b);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = max_re_eig(sym, true, x1)?.re;
    let mut f2 = max_re_eig(sym, true, x2)?.re;
    for _ in 0..80 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = max_re_eig(sym, true, x2)?.re;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = max_re_eig(sym, true, x1)?.re;
        }
    }
    Ok(0.5 * (a + b))
}

/// Checks the single-contact, gap and optimal-weight conditions on the
/// weighted essential spectrum. `optimal_weight` is the outcome of the
/// profile-side check that `e^{kappa x} u'` stays bounded, if available.
pub fn check_essential_assumptions(
    sym: &Symbols,
    xi0_hint: f64,
    optimal_weight: Option<(bool, String)>,
    opts: &EssentialOptions,
) -> Result<EssentialCheck> {
    let mut report = AssumptionReport::default();
    let grid = xi_grid(xi0_hint, opts.xi_span, opts.xi_step);
    let plus = essential_curves(sym, true, &grid)?;
    let minus = essential_curves(sym, false, &grid)?;

    // Largest real part on side +, and the curve attaining it.
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for (k, cur) in plus.curves.iter().enumerate() {
        for (i, z) in cur.iter().enumerate() {
            if z.re > best.0 {
                best = (z.re, k, i);
            }
        }
    }
    let i0 = best.2;
    let lo = grid[i0.saturating_sub(1)];
    let hi = grid[(i0 + 1).min(grid.len() - 1)];
    let xi0 = if hi > lo { refine_max(sym, lo, hi)? } else { grid[i0] };
    let top = max_re_eig(sym, true, xi0)?;
    let contact = top.re.abs() <= opts.contact_tol;
    if top.re > opts.contact_tol {
        report.push("single marginal point", false, format!("unstable essential spectrum: max Re lambda+ = {:.6e} at xi = {:.6}", top.re, xi0));
    } else if !contact {
        report.push("single marginal point", false, format!("no marginal contact: max Re lambda+ = {:.6e} < 0", top.re));
    }

    // Other near-contacts outside the window.
    let mut extra = Vec::new();
    for cur in &plus.curves {
        for (i, z) in cur.iter().enumerate() {
            if (grid[i] - xi0).abs() >= opts.xi_window && z.re >= -opts.contact_tol {
                extra.push(grid[i]);
            }
        }
    }
    if contact && !extra.is_empty() {
        report.push("single marginal point", false, format!("additional contacts near xi = {:.4}", extra[0]));
    }
    // A second curve touching at xi0 also breaks simplicity.
    let ev0 = eigenvalues(&sym.symbol(true, I * xi0))?;
    let touching = ev0.iter().filter(|z| z.re >= -opts.contact_tol).count();
    if contact && extra.is_empty() {
        report.push(
            "single marginal point",
            touching == 1,
            format!("contact at xi0 = {xi0:.3e}, lambda = {:.3e}{:+.3e}i, {touching} curve(s) touching", top.re, top.im),
        );
    }

    // Gaps.
    let mut gap1 = f64::INFINITY;
    for cur in &plus.curves {
        for (i, z) in cur.iter().enumerate() {
            let far = (grid[i] - xi0).abs() >= opts.xi_window;
            // Every eigenvalue other than the one attaining the maximum near xi0.
            let is_marginal_branch = !far && (z - max_re_eig(sym, true, grid[i])?).norm() < 1e-12;
            if far || !is_marginal_branch {
                gap1 = gap1.min(-z.re);
            }
        }
    }
    let gap2 = minus.curves.iter().flatten().map(|z| -z.re).fold(f64::INFINITY, f64::min);
    report.push("spectral gap 1", gap1 > 0.0, format!("min -Re lambda+ away from the contact = {gap1:.6}"));
    report.push("spectral gap 2", gap2 > 0.0, format!("min -Re lambda- = {gap2:.6}"));
    let eta = 0.99 * gap1.min(gap2);

    // Local expansion.
    let mut marginal = None;
    if contact {
        let m = 41;
        let w = opts.xi_window / 4.0;
        let lam0 = top;
        let mut basis = CMat::zeros(m, 3);
        let mut y = CVec::zeros(m);
        for j in 0..m {
            let s = -w + 2.0 * w * j as f64 / (m - 1) as f64;
            let ev = eigenvalues(&sym.symbol(true, I * (xi0 + s)))?;
            let z = ev.into_iter().min_by(|a, b| (a - lam0).norm().partial_cmp(&(b - lam0).norm()).unwrap()).unwrap();
            // Continue from the marginal value; near xi0 the marginal branch is the closest.
            basis[(j, 0)] = c(s);
            basis[(j, 1)] = c(s * s);
            basis[(j, 2)] = c(s * s * s);
            y[j] = z - lam0;
        }
        let coef = complex_lstsq(&basis, &y)?;
        let alpha1 = coef[0].im;
        let alpha2 = -coef[1];
        let ok = alpha1 > 0.0 && alpha2.re > 0.0 && coef[0].re.abs() < 1e-6;
        report.push(
            "marginal expansion",
            ok,
            format!("alpha1 = {alpha1:.6}, alpha2 = {:.6}{:+.6}i, Re d lambda/d xi = {:.2e}", alpha2.re, alpha2.im, coef[0].re),
        );
        if ok {
            marginal = Some(MarginalData { xi0, xi_window: opts.xi_window, eta, alpha1, alpha2, kappa: sym.kappa });
        }
    }
    if let Some((ok, detail)) = optimal_weight {
        report.push("optimal weight", ok, detail);
    }
    Ok(EssentialCheck { report, marginal })
}

// ---------------------------------------------------------------------------
// Spatial eigenvalues

/// `Lambda_theta = {Re lambda >= -theta (1 + |Im lambda|)}` cut to a ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaRegion {
    pub theta: f64,
    pub radius: f64,
}

impl LambdaRegion {
    pub fn contains(&self, lambda: C64) -> bool {
        lambda.re >= -self.theta * (1.0 + lambda.im.abs())
    }

    /// Largest |Im lambda| on the boundary rays inside the ball.
    pub fn s_max(&self) -> f64 {
        // theta^2 (1+s)^2 + s^2 = R^2
        let t2 = self.theta * self.theta;
        let a = t2 + 1.0;
        let b = 2.0 * t2;
        let cc = t2 - self.radius * self.radius;
        (-b + (b * b - 4.0 * a * cc).sqrt()) / (2.0 * a)
    }

    pub fn boundary_point(&self, s: f64) -> C64 {
        C64::new(-self.theta * (1.0 + s.abs()), s)
    }

    /// `count` points on the boundary rays, `Im lambda = s_max u^3` for `u`
    /// uniform in [-1, 1] (dense near the origin), shifted by `offset` cells
    /// (0.5 interleaves a second sample).
    pub fn boundary_samples(&self, count: usize, offset: f64) -> Vec<C64> {
        let sm = self.s_max();
        (0..count)
            .map(|k| {
                let u = -1.0 + 2.0 * (k as f64 + offset) / count as f64;
                self.boundary_point((sm * u * u * u).clamp(-sm, sm))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SpatialEigenData {
    pub lambda: C64,
    /// Side - roots, ordered `nu_{-n}, ..., nu_{-1}, nu_1, ..., nu_n`.
    pub minus: Vec<C64>,
    pub plus: Vec<C64>,
    pub rate: f64,
    pub jordan_flag: bool,
}

impl SpatialEigenData {
    pub fn side(&self, plus: bool) -> &[C64] {
        if plus {
            &self.plus
        } else {
            &self.minus
        }
    }
}

/// Newton polish of a root of `det(lambda - L[nu])` using
/// `d'/d = tr(M^{-1} dM/dnu)`.
fn polish(sym: &Symbols, plus: bool, lambda: C64, nu: C64) -> C64 {
    let mut best = nu;
    let mut best_res = sym.dispersion(plus, lambda, nu).norm();
    let mut cur = nu;
    for _ in 0..4 {
        let m = sym.pencil(plus, lambda, cur);
        let Ok(mi) = inverse(&m) else { break };
        let dm = -sym.symbol_prime(plus, cur);
        let tr = (mi * dm).trace();
        if tr.norm() == 0.0 || !tr.re.is_finite() {
            break;
        }
        cur -= c(1.0) / tr;
        let r = sym.dispersion(plus, lambda, cur).norm();
        if r < best_res {
            best_res = r;
            best = cur;
        } else {
            break;
        }
    }
    best
}

/// Roots of the dispersion relation on one side, sorted by real part, or
/// matched to `prev` when continuing along a path.
pub fn side_roots(sym: &Symbols, plus: bool, lambda: C64, prev: Option<&[C64]>) -> Result<Vec<C64>> {
    let a = sym.companion(plus, lambda);
    let ev = eigenvalues(&a).map_err(|e| Error::Numerical(format!("spatial eigenvalues at lambda = {lambda}: {e}")))?;
    let mut roots: Vec<C64> = ev.into_iter().map(|nu| polish(sym, plus, lambda, nu)).collect();
    match prev {
        Some(p) if p.len() == roots.len() => roots = match_to(p, roots),
        _ => roots.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap())),
    }
    Ok(roots)
}

/// `r(lambda) = C (1 + |lambda|^{1/2})`.
pub fn rate(c_rate: f64, lambda: C64) -> f64 {
    c_rate * (1.0 + lambda.norm().sqrt())
}

pub fn spatial_eigenvalues(sym: &Symbols, lambda: C64, c_rate: f64) -> Result<SpatialEigenData> {
    let minus = side_roots(sym, false, lambda, None)?;
    let plus = side_roots(sym, true, lambda, None)?;
    let jordan_flag = min_pair_distance(&minus) < 1e-7 || min_pair_distance(&plus) < 1e-7;
    Ok(SpatialEigenData { lambda, minus, plus, rate: rate(c_rate, lambda), jordan_flag })
}

/// Signed gaps of one sample: the smallest of `-Re nu` over N_s and `Re nu`
/// over N_u, and separately `Re nu_1^+`.
fn sample_gaps(sym: &Symbols, lambda: C64) -> Result<(f64, f64)> {
    let n = sym.n;
    let minus = side_roots(sym, false, lambda, None)?;
    let plus = side_roots(sym, true, lambda, None)?;
    let mut g = f64::INFINITY;
    for k in 0..n {
        g = g.min(-minus[k].re).min(-plus[k].re);
        g = g.min(minus[n + k].re);
        if k > 0 {
            g = g.min(plus[n + k].re);
        }
    }
    Ok((g, plus[n].re))
}

#[derive(Debug, Clone, Copy)]
pub struct RateCalibration {
    pub c_rate: f64,
    /// Smallest normalized gap seen, and where.
    pub min_ratio: f64,
    pub witness: C64,
    /// Same for `nu_1^+` outside the ball of radius m.
    pub marginal_min_ratio: f64,
    pub marginal_witness: C64,
}

/// `C = 0.9 min gap / (1 + |lambda|^{1/2})` over `samples` points of the
/// boundary of the region. `nu_1^+` enters only for `|lambda| >= m`.
pub fn calibrate_rate(sym: &Symbols, region: &LambdaRegion, m: f64, samples: usize) -> Result<RateCalibration> {
    let pts = region.boundary_samples(samples, 0.0);
    let mut min_ratio = f64::INFINITY;
    let mut witness = c(0.0);
    let mut mm = f64::INFINITY;
    let mut mw = c(0.0);
    for &lam in &pts {
        let (g, g1) = sample_gaps(sym, lam)?;
        let s = 1.0 + lam.norm().sqrt();
        if g / s < min_ratio {
            min_ratio = g / s;
            witness = lam;
        }
        if lam.norm() >= m && g1 / s < mm {
            mm = g1 / s;
            mw = lam;
        }
    }
    let c_rate = 0.9 * min_ratio.min(mm);
    Ok(RateCalibration { c_rate, min_ratio, witness, marginal_min_ratio: mm, marginal_witness: mw })
}

#[derive(Debug, Clone)]
pub struct GapCheck {
    pub samples: usize,
    pub violations: usize,
    /// Smallest `gap - r(lambda)` over the samples.
    pub worst_slack: f64,
    pub witness: C64,
}

/// Verifies `-Re nu_s >= r`, `Re nu_u >= r` (and `Re nu_1^+ >= r` for
/// `|lambda| >= m`) at `samples` boundary points offset from the calibration set.
pub fn check_gap(sym: &Symbols, region: &LambdaRegion, m: f64, c_rate: f64, samples: usize) -> Result<GapCheck> {
    check_gap_at(sym, &region.boundary_samples(samples, 0.5), m, c_rate)
}

/// The gap inequalities at arbitrary points `pts`.
pub fn check_gap_at(sym: &Symbols, pts: &[C64], m: f64, c_rate: f64) -> Result<GapCheck> {
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut witness = c(0.0);
    for &lam in pts {
        let (g, g1) = sample_gaps(sym, lam)?;
        let g = if lam.norm() >= m { g.min(g1) } else { g };
        let slack = g - rate(c_rate, lam);
        if slack < 0.0 {
            violations += 1;
        }
        if slack < worst {
            worst = slack;
            witness = lam;
        }
    }
    Ok(GapCheck { samples: pts.len(), violations, worst_slack: worst, witness })
}

// ---------------------------------------------------------------------------
// The marginal root nu_1^+

/// `nu_1^+(0)`: the side + root closest to `i xi0`.
pub fn nu1_at_zero(sym: &Symbols, xi0: f64) -> Result<C64> {
    let roots = side_roots(sym, true, c(0.0), None)?;
    let target = I * xi0;
    Ok(roots.into_iter().min_by(|a, b| (a - target).norm().partial_cmp(&(b - target).norm()).unwrap()).unwrap())
}

/// Continues `nu_1^+` from `(lambda_from, nu_from)` to `lambda` along a segment.
pub fn continue_nu1(sym: &Symbols, lambda_from: C64, nu_from: C64, lambda: C64, steps: usize) -> Result<C64> {
    let mut nu = nu_from;
    for k in 1..=steps.max(1) {
        let lam = lambda_from + (lambda - lambda_from) * (k as f64 / steps.max(1) as f64);
        let roots = side_roots(sym, true, lam, None)?;
        nu = roots.into_iter().min_by(|a, b| (a - nu).norm().partial_cmp(&(b - nu).norm()).unwrap()).unwrap();
    }
    Ok(nu)
}

/// First and second derivatives of a simple root `nu(lambda)` of side +.
pub fn root_derivatives(sym: &Symbols, lambda: C64, nu: C64) -> Result<(C64, C64)> {
    let n = sym.n;
    let m = sym.pencil(true, lambda, nu);
    let lp = sym.symbol_prime(true, nu);
    let (v, w) = sym.null_vectors(true, lambda, nu)?;
    let wv: C64 = w.dot(&v);
    let wlv: C64 = (w.transpose() * &lp * &v)[(0, 0)];
    if wlv.norm() < 1e-14 {
        return numerical("double spatial root: d nu / d lambda undefined");
    }
    let d1 = wv / wlv;
    // v' from the bordered system [[M, v], [w, 0]] [v'; mu] = [-(I - L' nu') v; 0].
    let mut border = CMat::zeros(n + 1, n + 1);
    border.view_mut((0, 0), (n, n)).copy_from(&m);
    for i in 0..n {
        border[(i, n)] = v[i];
        border[(n, i)] = w[i];
    }
    let mut rhs = CVec::zeros(n + 1);
    let r = -(&v - (&lp * &v) * d1);
    for i in 0..n {
        rhs[i] = r[i];
    }
    let sol = inverse(&border)? * rhs;
    let vp = CVec::from_iterator(n, (0..n).map(|i| sol[i]));
    let term1: C64 = (w.transpose() * (&vp - (&lp * &vp) * d1))[(0, 0)];
    let wl2v: C64 = (w.transpose() * &sym.l2 * &v)[(0, 0)];
    let d2 = (2.0 * term1 - 2.0 * wl2v * d1 * d1) / wlv;
    Ok((d1, d2))
}

/// Taylor data of `nu_1^+` along the contour parabola.
#[derive(Debug, Clone, Copy)]
pub struct NuExpansion {
    pub beta0: C64,
    pub sigma: f64,
    pub beta2: C64,
    pub nu1_d1: C64,
    pub nu1_d2: C64,
}

pub fn nu_expansion(sym: &Symbols, marginal: &MarginalData, alpha: f64) -> Result<NuExpansion> {
    if !(alpha >= 0.0 && alpha < marginal.alpha2.re / 2.0) {
        return invalid(format!("alpha = {alpha} outside [0, Re alpha2 / 2) = [0, {})", marginal.alpha2.re / 2.0));
    }
    let beta0 = nu1_at_zero(sym, marginal.xi0)?;
    let (d1, d2) = root_derivatives(sym, c(0.0), beta0)?;
    if !(d1.re > 0.0) || d1.im.abs() > 1e-8 * d1.norm().max(1.0) {
        return Err(Error::Assumption(format!("d nu1/d lambda (0) = {d1} is not positive")));
    }
    let a1 = marginal.alpha1;
    let beta2 = -(alpha * d1 + a1 * a1 * d2 / 2.0);
    if beta0.re.abs() > 1e-8 || !(beta2.re > 0.0) {
        return Err(Error::Assumption(format!("expansion degenerate: beta0 = {beta0}, beta2 = {beta2}")));
    }
    Ok(NuExpansion { beta0, sigma: 1.0 / d1.re, beta2, nu1_d1: d1, nu1_d2: d2 })
}

/// `pi(lambda) = v w / (w v)`, the projection onto the kernel of
/// `lambda - L+[nu_1^+(lambda)]`.
pub fn projection_at(sym: &Symbols, lambda: C64, nu1: C64) -> Result<CMat> {
    if sym.n == 1 {
        return Ok(CMat::from_element(1, 1, c(1.0)));
    }
    let np = null_pair(&sym.pencil(true, lambda, nu1))?;
    let scale = np.sigma_next.max(1e-300);
    if np.sigma_min > 1e-8 * scale || np.sigma_next < 1e-8 {
        return Err(Error::Assumption(format!(
            "kernel of lambda - L[nu1] is not one-dimensional at lambda = {lambda} (singular values {:.2e}, {:.2e})",
            np.sigma_min, np.sigma_next
        )));
    }
    let (v, w) = sym.null_vectors(true, lambda, nu1)?;
    Ok(&v * w.transpose())
}

/// `pi_1^+(lambda) = v w / (w L'[nu_1] v)`: the amplitude of the resolvent
/// kernel at +infinity, equal to `nu_1'(lambda)` times the projection.
pub fn pi1_at(sym: &Symbols, lambda: C64, nu1: C64) -> Result<CMat> {
    let (v, w) = sym.null_vectors(true, lambda, nu1)?;
    let lp = sym.symbol_prime(true, nu1);
    let wlv: C64 = (w.transpose() * lp * &v)[(0, 0)];
    if wlv.norm() < 1e-14 {
        return numerical("double spatial root at nu_1^+");
    }
    Ok((&v * w.transpose()) / wlv)
}

/// Projection operation: continues `nu_1^+` from 0 and returns `pi(lambda)`.
/// `m` is the Jordan-free radius.
pub fn projection(sym: &Symbols, marginal: &MarginalData, m: f64, lambda: C64) -> Result<CMat> {
    if lambda.norm() > m {
        return invalid(format!("|lambda| = {} exceeds the Jordan-free radius m = {m}", lambda.norm()));
    }
    let nu0 = nu1_at_zero(sym, marginal.xi0)?;
    let nu = continue_nu1(sym, c(0.0), nu0, lambda, 16)?;
    let roots = side_roots(sym, true, lambda, None)?;
    if min_pair_distance(&roots) < 1e-7 {
        return invalid("lambda is a spatial Jordan point");
    }
    projection_at(sym, lambda, nu)
}

// ---------------------------------------------------------------------------
// Mode classification

#[derive(Debug, Clone)]
pub struct MarginalPair {
    pub plus: bool,
    pub curve: usize,
    pub xi: f64,
    pub group_velocity: f64,
    /// `None` when the group velocity vanishes.
    pub incoming: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ModeClassification {
    pub pairs: Vec<MarginalPair>,
    pub separation_guaranteed: bool,
    /// `Some(true)` when the Evans function vanishes at 0.
    pub evans_mode_at_zero: Option<bool>,
    pub notes: Vec<String>,
}

/// Finds contacts `Re lambda_k^±(xi) = 0`, computes the group velocity
/// `Im d lambda / d xi` there and checks the incoming sign. `evans_zero`
/// reports whether E(0) vanishes, when it was computed.
pub fn classify_marginal_modes(sym: &Symbols, xi_span: f64, evans_zero: Option<bool>) -> Result<ModeClassification> {
    let grid = xi_grid(0.0, xi_span, 0.01);
    let mut pairs = Vec::new();
    for plus in [false, true] {
        let curves = essential_curves(sym, plus, &grid)?;
        for (k, cur) in curves.curves.iter().enumerate() {
            let (i, z) = cur.iter().enumerate().max_by(|a, b| a.1.re.partial_cmp(&b.1.re).unwrap()).unwrap();
            if z.re.abs() > 1e-6 {
                continue;
            }
            let h = 1e-5;
            let xi = grid[i];
            let near = |x: f64| -> Result<C64> {
                let ev = eigenvalues(&sym.symbol(plus, I * x))?;
                Ok(ev.into_iter().min_by(|a, b| (a - z).norm().partial_cmp(&(b - z).norm()).unwrap()).unwrap())
            };
            let gv = ((near(xi + h)? - near(xi - h)?) / (2.0 * h)).im;
            let sign = if plus { gv } else { -gv };
            let incoming = if gv.abs() < 1e-10 { None } else { Some(sign > 0.0) };
            pairs.push(MarginalPair { plus, curve: k, xi, group_velocity: gv, incoming });
        }
    }
    let separation_guaranteed = pairs.iter().all(|p| p.incoming == Some(true));
    let notes = vec![
        "group velocity taken as Im d lambda / d xi along the Fourier parametrization".to_string(),
    ];
    Ok(ModeClassification { pairs, separation_guaranteed, evans_mode_at_zero: evans_zero, notes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fisher, kpp2};

    fn fisher_sym() -> Symbols {
        Symbols::new(&fisher(), 2.0 / 6f64.sqrt(), 0.0).unwrap()
    }

    #[test]
    fn fisher_dispersion_values() {
        let m = fisher();
        let k = 2.0 / 6f64.sqrt();
        assert!(dispersion(&m, true, k, c(0.0), c(0.0)).unwrap().norm() < 1e-15);
        assert!((dispersion(&m, true, 0.0, c(0.0), c(0.0)).unwrap() - c(-1.0)).norm() < 1e-15);
    }

    #[test]
    fn fisher_spatial_roots() {
        let s = fisher_sym();
        let s6 = 6f64.sqrt();
        let d0 = spatial_eigenvalues(&s, c(0.0), 0.1).unwrap();
        assert!((d0.plus[0] - c(-1.0 / s6)).norm() < 1e-12);
        assert!(d0.plus[1].norm() < 1e-12);
        // Quadratic formula for nu^2 + nu / sqrt(6) = lambda.
        let q = |l: f64| {
            let s = 1.0 / s6;
            let d = (s * s + 4.0 * l).sqrt();
            ((-s - d) / 2.0, (-s + d) / 2.0)
        };
        for l in [1.0, 2.0] {
            let d = spatial_eigenvalues(&s, c(l), 0.1).unwrap();
            let (a, b) = q(l);
            assert!((d.plus[0] - c(a)).norm() < 1e-12);
            assert!((d.plus[1] - c(b)).norm() < 1e-12);
        }
        let d2 = spatial_eigenvalues(&s, c(2.0), 0.1).unwrap();
        assert!((d2.plus[0] - c(-4.0 / s6)).norm() < 1e-12);
        assert!((d2.plus[1] - c(3.0 / s6)).norm() < 1e-12);
    }

    #[test]
    fn fisher_marginal_data() {
        let s = fisher_sym();
        let chk = check_essential_assumptions(&s, 0.0, None, &EssentialOptions::default()).unwrap();
        assert!(chk.report.passed(), "{}", chk.report);
        let m = chk.marginal.unwrap();
        assert!(m.xi0.abs() < 1e-6);
        assert!((m.alpha1 - 1.0 / 6f64.sqrt()).abs() < 1e-8);
        assert!((m.alpha2 - c(1.0)).norm() < 1e-8);
    }

    #[test]
    fn fisher_unweighted_and_overshoot_fail() {
        let m = fisher();
        let s0 = Symbols::new(&m, 0.0, 0.0).unwrap();
        let chk = check_essential_assumptions(&s0, 0.0, None, &EssentialOptions::default()).unwrap();
        assert!(!chk.report.passed());
        let s1 = Symbols::new(&m, 1.0, 0.0).unwrap();
        let chk = check_essential_assumptions(&s1, 0.0, None, &EssentialOptions::default()).unwrap();
        assert!(!chk.report.item("single marginal point").unwrap().passed);
    }

    #[test]
    fn fisher_expansion() {
        let s = fisher_sym();
        let md = check_essential_assumptions(&s, 0.0, None, &EssentialOptions::default()).unwrap().marginal.unwrap();
        let e = nu_expansion(&s, &md, 0.0).unwrap();
        let s6 = 6f64.sqrt();
        assert!(e.beta0.norm() < 1e-12);
        assert!((e.sigma - 1.0 / s6).abs() < 1e-10);
        assert!((e.beta2 - c(s6)).norm() < 1e-8);
        let e = nu_expansion(&s, &md, 0.4).unwrap();
        assert!((e.beta2.re - 0.6 * s6).abs() < 1e-8, "{e:?}");
        assert!(nu_expansion(&s, &md, 0.6).is_err());
    }

    #[test]
    fn root_derivatives_match_finite_differences() {
        let s = Symbols::new(&kpp2(0.1, 2.0), 2.0 / 6f64.sqrt(), 0.0).unwrap();
        let nu0 = nu1_at_zero(&s, 0.0).unwrap();
        let (d1, d2) = root_derivatives(&s, c(0.0), nu0).unwrap();
        let f = |l: f64| continue_nu1(&s, c(0.0), nu0, c(l), 4).unwrap();
        let c1 = |h: f64| (f(h) - f(-h)) / (2.0 * h);
        let c2 = |h: f64| (f(h) - 2.0 * nu0 + f(-h)) / (h * h);
        // Richardson extrapolation of central differences.
        let h = 2e-3;
        let fd1 = (4.0 * c1(h / 2.0) - c1(h)) / 3.0;
        let fd2 = (4.0 * c2(h / 2.0) - c2(h)) / 3.0;
        assert!((d1 - fd1).norm() < 1e-6, "{d1} {fd1} {d2} {fd2}");
        assert!((d2 - fd2).norm() < 1e-4);
    }

    #[test]
    fn group_velocity_of_fisher() {
        let s = fisher_sym();
        let cl = classify_marginal_modes(&s, 10.0, Some(false)).unwrap();
        assert_eq!(cl.pairs.len(), 1);
        assert!((cl.pairs[0].group_velocity - 1.0 / 6f64.sqrt()).abs() < 1e-6);
        assert!(cl.separation_guaranteed);
    }

    #[test]
    fn kpp2_projection_is_idempotent() {
        let s = Symbols::new(&kpp2(0.1, 2.0), 2.0 / 6f64.sqrt(), 0.0).unwrap();
        let md = MarginalData { xi0: 0.0, xi_window: 1.0, eta: 0.5, alpha1: 0.4, alpha2: c(1.0), kappa: s.kappa };
        let p = projection(&s, &md, 0.02, c(0.0)).unwrap();
        assert!((&p * &p - &p).norm() < 1e-10);
    }

    #[test]
    fn fisher_gap_with_calibrated_rate() {
        let s = fisher_sym();
        let region = LambdaRegion { theta: 0.05 / 32.0, radius: 50.0 };
        let m = 1.0 / 48.0;
        let cal = calibrate_rate(&s, &region, m, 2000).unwrap();
        assert!(cal.c_rate > 0.0, "{cal:?}");
        let g = check_gap(&s, &region, m, cal.c_rate, 200).unwrap();
        assert_eq!(g.violations, 0, "{g:?}");
        // Too wide a sector pushes nu_1^+ to the left near |lambda| = m.
        let wide = LambdaRegion { theta: 0.05, radius: 50.0 };
        assert!(calibrate_rate(&s, &wide, m, 2000).unwrap().c_rate <= 0.0);
    }
}
