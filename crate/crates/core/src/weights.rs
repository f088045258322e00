//! The conjugation weight Omega and sub-exponential weights rho.

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{invalid, Result};

/// `Omega(x) = exp((-kappa + i xi0) s(x))` where `s` vanishes for x <= -1,
/// equals x for x >= 1 and is a quartic bridge in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaWeight {
    pub kappa: f64,
    pub xi0: f64,
}

impl OmegaWeight {
    pub fn rate(&self) -> C64 {
        C64::new(-self.kappa, self.xi0)
    }

    /// Ramp and its first two derivatives.
    pub fn ramp(x: f64) -> (f64, f64, f64) {
        if x <= -1.0 {
            (0.0, 0.0, 0.0)
        } else if x >= 1.0 {
            (x, 1.0, 0.0)
        } else {
            let x2 = x * x;
            (
                3.0 / 16.0 + 0.5 * x + 0.375 * x2 - x2 * x2 / 16.0,
                0.5 + 0.75 * x - 0.25 * x2 * x,
                0.75 - 0.75 * x2,
            )
        }
    }

    pub fn value(&self, x: f64) -> C64 {
        (self.rate() * Self::ramp(x).0).exp()
    }

    /// Log-derivatives `w = (log Omega)'` and `w'`.
    pub fn log_derivs(&self, x: f64) -> (C64, C64) {
        let (_, s1, s2) = Self::ramp(x);
        (self.rate() * s1, self.rate() * s2)
    }

    /// Omega, Omega', Omega''.
    pub fn derivs(&self, x: f64) -> (C64, C64, C64) {
        let o = self.value(x);
        let (w, w1) = self.log_derivs(x);
        (o, o * w, o * (w1 + w * w))
    }
}

pub fn build_omega(kappa: f64, xi0: f64) -> Result<OmegaWeight> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return invalid("kappa must be positive");
    }
    Ok(OmegaWeight { kappa, xi0 })
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightKind {
    Const,
    /// `max(1, x)^a`
    Power(f64),
    /// `ln(e + max(0, x))^a`
    Log(f64),
    /// 1 on (-inf, 0], `2^{j+1}` on `(x_j, x_{j+1}]`, last level continued.
    Staircase(Vec<f64>),
    /// Piecewise-linear table on sorted abscissae, constant outside.
    Table(Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubExpWeight {
    pub name: String,
    pub kind: WeightKind,
    pub eta: f64,
    pub m: f64,
}

impl SubExpWeight {
    pub fn new(name: impl Into<String>, kind: WeightKind, eta: f64, m: f64) -> Self {
        Self { name: name.into(), kind, eta, m }
    }

    pub fn constant() -> Self {
        Self::new("const", WeightKind::Const, 1.0, 1.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        match &self.kind {
            WeightKind::Const => 1.0,
            WeightKind::Power(a) => x.max(1.0).powf(*a),
            WeightKind::Log(a) => (std::f64::consts::E + x.max(0.0)).ln().powf(*a),
            WeightKind::Staircase(knots) => {
                if x <= 0.0 {
                    return 1.0;
                }
                // knots[0] = 0; level j+1 on (x_j, x_{j+1}]
                let j = knots.partition_point(|&k| k < x);
                2f64.powi(j as i32)
            }
            WeightKind::Table(xs, vs) => {
                if x <= xs[0] {
                    return vs[0];
                }
                if x >= *xs.last().unwrap() {
                    return *vs.last().unwrap();
                }
                let i = xs.partition_point(|&k| k <= x) - 1;
                let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                vs[i] + t * (vs[i + 1] - vs[i])
            }
        }
    }

    fn breakpoints(&self) -> &[f64] {
        match &self.kind {
            WeightKind::Staircase(k) => k,
            WeightKind::Table(xs, _) => xs,
            _ => &[],
        }
    }
}

/// Outcome of a sampled check of the two defining inequalities.
#[derive(Debug, Clone, Copy)]
pub struct SubExpCheck {
    pub passed: bool,
    /// max over samples of rho(x) / (M e^{eta x})
    pub growth_ratio: f64,
    /// max over samples of rho(x) * int_0^x e^{-eta(x-y)}/rho(y) dy / M
    pub convolution_ratio: f64,
}

const GL4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// `int_a^b e^{-eta(b-y)}/rho(y) dy` by 4-point Gauss-Legendre on panels of
/// width at most 0.05, split at the weight's breakpoints.
fn segment_integral(rho: &SubExpWeight, eta: f64, a: f64, b: f64) -> f64 {
    let mut cuts = vec![a];
    cuts.extend(rho.breakpoints().iter().cloned().filter(|&k| k > a && k < b));
    cuts.push(b);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let panels = ((hi - lo) / 0.05).ceil().max(1.0) as usize;
        let ph = (hi - lo) / panels as f64;
        for p in 0..panels {
            let mid = lo + (p as f64 + 0.5) * ph;
            for &(z, wt) in &GL4 {
                let y = mid + 0.5 * ph * z;
                total += 0.5 * ph * wt * (-eta * (b - y)).exp() / rho.eval(y);
            }
        }
    }
    total
}

/// Checks `rho(x) <= M e^{eta x}` and the convolution inequality at the
/// sample points `xs` (sorted, starting at 0).
pub fn is_subexponential(rho: &SubExpWeight, eta: f64, m: f64, xs: &[f64]) -> SubExpCheck {
    let mut growth: f64 = 0.0;
    let mut conv: f64 = 0.0;
    let mut integral = 0.0;
    let mut prev = 0.0;
    for &x in xs {
        if x < 0.0 {
            continue;
        }
        if x > prev {
            integral = (-eta * (x - prev)).exp() * integral + segment_integral(rho, eta, prev, x);
            prev = x;
        }
        let r = rho.eval(x);
        growth = growth.max(r / (m * (eta * x).exp()));
        conv = conv.max(r * integral / m);
    }
    SubExpCheck { passed: growth <= 1.0 && conv <= 1.0, growth_ratio: growth, convolution_ratio: conv }
}

/// Worst value over sample pairs `y <= x` of `rho(x) / (rho(y) M e^{eta_t (x - y)})`.
pub fn ratio_criterion(rho: &SubExpWeight, eta_t: f64, m: f64, xs: &[f64]) -> f64 {
    let vals: Vec<f64> = xs.iter().map(|&x| rho.eval(x)).collect();
    (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let mut worst: f64 = 0.0;
            for j in 0..=i {
                worst = worst.max(vals[i] / (vals[j] * m * (eta_t * (xs[i] - xs[j])).exp()));
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Uniform sample grid on [0, x_max].
pub fn sample_grid(x_max: f64, step: f64) -> Vec<f64> {
    let n = (x_max / step).round() as usize;
    (0..=n).map(|i| i as f64 * x_max / n as f64).collect()
}

/// Margin applied to M when certifying by sampling.
pub const CERT_MARGIN: f64 = 1.1;

/// Certifies `rho` for (eta, M): the sampled inequalities hold with M/1.1, and
/// the ratio criterion holds for some eta_t < eta with constant M.
pub fn certify(rho: &SubExpWeight, eta: f64, m: f64, x_max: f64) -> (bool, SubExpCheck, f64) {
    let xs = sample_grid(x_max, 0.05);
    let check = is_subexponential(rho, eta, m / CERT_MARGIN, &xs);
    let coarse = sample_grid(x_max, 0.25);
    let ratio = (1..20)
        .map(|k| ratio_criterion(rho, eta * k as f64 / 20.0, m, &coarse))
        .fold(f64::INFINITY, f64::min);
    (check.passed && ratio <= 1.0, check, ratio)
}

/// Power, log-power and constant weights certified for (eta, M) on [0, 500].
pub fn standard_weights(a: f64, eta: f64, m: f64) -> Result<Vec<SubExpWeight>> {
    if !(a > 0.0 && eta > 0.0 && m >= 1.0) {
        return invalid("need a > 0, eta > 0, M >= 1");
    }
    let cands = vec![
        SubExpWeight::new(format!("power({a})"), WeightKind::Power(a), eta, m),
        SubExpWeight::new(format!("log({a})"), WeightKind::Log(a), eta, m),
        SubExpWeight::new("const", WeightKind::Const, eta, m),
    ];
    for w in &cands {
        let (ok, check, ratio) = certify(w, eta, m, 500.0);
        if !ok {
            return Err(crate::Error::Assumption(format!(
                "{} not certified for (eta, M) = ({eta}, {m}): growth {:.3}, convolution {:.3}, ratio {:.3}",
                w.name, check.growth_ratio, check.convolution_ratio, ratio
            )));
        }
    }
    Ok(cands)
}

/// Staircase weight built from samples `|pi v0|` on the sorted grid `xs`
/// (covering [0, L]). Requires at least `min_levels` steps.
pub fn staircase_weight(xs: &[f64], pi_v0: &[f64], e0: f64, min_levels: usize) -> Result<SubExpWeight> {
    if xs.len() != pi_v0.len() || xs.is_empty() {
        return invalid("grid and data lengths differ");
    }
    let sup = pi_v0.iter().cloned().fold(0.0, f64::max);
    if e0 < sup {
        return invalid(format!("E0 = {e0} is below sup |pi v0| = {sup}"));
    }
    // tail[i] = max_{k >= i} |pi v0|
    let mut tail = vec![0.0f64; xs.len() + 1];
    for i in (0..xs.len()).rev() {
        tail[i] = tail[i + 1].max(pi_v0[i]);
    }
    let end = *xs.last().unwrap();
    let mut knots: Vec<f64> = vec![0.0];
    loop {
        let j = knots.len() - 1;
        let thr = e0 / 2f64.powi(j as i32 + 1);
        let first = tail.iter().position(|&t| t <= thr).unwrap_or(xs.len());
        let from_data = if first == 0 { xs[0] } else { xs[first - 1] };
        let next = (knots[j] + 1.0).max(from_data);
        if next > end {
            break;
        }
        knots.push(next);
    }
    if knots.len() - 1 < min_levels {
        return Err(crate::Error::Assumption(format!(
            "staircase stops after {} levels (last knot {:.3})",
            knots.len() - 1,
            knots.last().unwrap()
        )));
    }
    Ok(SubExpWeight::new("staircase", WeightKind::Staircase(knots), std::f64::consts::LN_2, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_plateaus_and_tail() {
        let k = 2.0 / 6f64.sqrt();
        let om = build_omega(k, 0.0).unwrap();
        assert_eq!(om.value(-2.0), C64::new(1.0, 0.0));
        assert!((om.value(3.0).re - 0.0863).abs() < 1e-4);
        assert_eq!(om.value(3.0), C64::new((-3.0 * k).exp(), 0.0));
    }

    #[test]
    fn ramp_is_c2_and_monotone() {
        let eps = 1e-7;
        for &x in &[-1.0, 1.0] {
            let l = OmegaWeight::ramp(x - eps);
            let r = OmegaWeight::ramp(x + eps);
            assert!((l.0 - r.0).abs() < 1e-6 && (l.1 - r.1).abs() < 1e-6 && (l.2 - r.2).abs() < 1e-6);
        }
        let om = build_omega(0.8, 0.0).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..=400 {
            let x = -2.0 + i as f64 * 0.01;
            let v = om.value(x).norm();
            assert!(v <= last + 1e-15 && v <= 1.0);
            last = v;
        }
    }

    #[test]
    fn omega_derivatives_match_differences() {
        let om = build_omega(0.7, 0.3).unwrap();
        let h = 1e-5;
        for &x in &[-0.9, -0.2, 0.5, 0.99, 2.0] {
            let (_, d1, d2) = om.derivs(x);
            let fd1 = (om.value(x + h) - om.value(x - h)) / (2.0 * h);
            let fd2 = (om.derivs(x + h).1 - om.derivs(x - h).1) / (2.0 * h);
            assert!((d1 - fd1).norm() < 1e-8);
            assert!((d2 - fd2).norm() < 1e-8);
        }
    }

    #[test]
    fn constant_weight_passes() {
        let xs = sample_grid(200.0, 0.1);
        let chk = is_subexponential(&SubExpWeight::constant(), 0.5, 2.0, &xs);
        assert!(chk.passed);
        // int_0^x e^{-eta(x-y)} dy -> 1/eta
        assert!((chk.convolution_ratio * 2.0 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn exponential_weight_fails_growth() {
        let xs = sample_grid(200.0, 0.1);
        let vals: Vec<f64> = xs.iter().map(|&x| (1.0f64).max((2.0 * 0.5 * x).exp().min(1e300))).collect();
        let w = SubExpWeight::new("exp", WeightKind::Table(xs.clone(), vals), 0.5, 10.0);
        assert!(!is_subexponential(&w, 0.5, 10.0, &xs).passed);
    }

    #[test]
    fn small_power_passes() {
        let xs = sample_grid(200.0, 0.1);
        let w = SubExpWeight::new("p", WeightKind::Power(0.1), 0.5, 10.0);
        assert!(is_subexponential(&w, 0.5, 10.0, &xs).passed);
    }

    #[test]
    fn large_power_rejected() {
        assert!(standard_weights(5.0, 0.01, 4.0).is_err());
    }

    #[test]
    fn staircase_on_compact_data() {
        let xs = sample_grid(60.0, 0.05);
        let data: Vec<f64> = xs.iter().map(|&x| if x <= 10.0 { 1.0 } else { 0.0 }).collect();
        let w = staircase_weight(&xs, &data, 1.0, 5).unwrap();
        let WeightKind::Staircase(knots) = &w.kind else { panic!() };
        assert!((knots[1] - 10.0).abs() < 0.06);
        for k in knots.windows(2).skip(1) {
            assert!((k[1] - k[0] - 1.0).abs() < 1e-12);
        }
    }
}
