//! Reaction-diffusion systems `u_t = d u_xx + (f(u))_x + g(u)` with polynomial
//! nonlinearities, evaluated in a frame moving with speed `c`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{c, eigenvalues, CMat, C64};
use crate::report::AssumptionReport;

/// Monomial `coef * prod u_k^{p_k}` with total degree at most 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: C64,
    /// (variable index, power) for the nonzero powers only.
    pub factors: Vec<(usize, u32)>,
}

impl Monomial {
    fn eval(&self, u: &[C64]) -> C64 {
        let mut v = self.coef;
        for &(k, p) in &self.factors {
            v *= u[k].powu(p);
        }
        v
    }

    /// Partial derivative with respect to `j`.
    fn diff(&self, j: usize) -> Option<Monomial> {
        let pos = self.factors.iter().position(|&(k, _)| k == j)?;
        let p = self.factors[pos].1;
        let mut factors = self.factors.clone();
        if p == 1 {
            factors.remove(pos);
        } else {
            factors[pos].1 = p - 1;
        }
        Some(Monomial { coef: self.coef * p as f64, factors })
    }
}

/// Vector-valued polynomial map on C^n, stored per output component.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMap {
    pub n: usize,
    pub comps: Vec<Vec<Monomial>>,
    jac: Vec<Vec<Vec<Monomial>>>,
    hess: Vec<Vec<Vec<Vec<Monomial>>>>,
}

impl PolyMap {
    pub fn new(n: usize, comps: Vec<Vec<Monomial>>) -> Result<Self> {
        if comps.len() != n {
            return invalid(format!("polynomial map has {} components, expected {n}", comps.len()));
        }
        for comp in &comps {
            for m in comp {
                let deg: u32 = m.factors.iter().map(|f| f.1).sum();
                if deg > 3 {
                    return invalid("polynomial degree exceeds 3");
                }
                if m.factors.iter().any(|&(k, _)| k >= n) {
                    return invalid("monomial references a variable out of range");
                }
            }
        }
        let jac: Vec<Vec<Vec<Monomial>>> = comps
            .iter()
            .map(|comp| (0..n).map(|j| comp.iter().filter_map(|m| m.diff(j)).collect()).collect())
            .collect();
        let hess = jac
            .iter()
            .map(|row| {
                row.iter()
                    .map(|entry| (0..n).map(|l| entry.iter().filter_map(|m| m.diff(l)).collect()).collect())
                    .collect()
            })
            .collect();
        Ok(Self { n, comps, jac, hess })
    }

    pub fn zero(n: usize) -> Self {
        Self::new(n, vec![Vec::new(); n]).expect("zero map")
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(|c| c.is_empty())
    }

    pub fn eval_into(&self, u: &[C64], out: &mut [C64]) {
        for (i, comp) in self.comps.iter().enumerate() {
            out[i] = comp.iter().map(|m| m.eval(u)).sum();
        }
    }

    pub fn eval(&self, u: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.n];
        self.eval_into(u, &mut out);
        out
    }

    pub fn jacobian(&self, u: &[C64]) -> CMat {
        CMat::from_fn(self.n, self.n, |i, j| self.jac[i][j].iter().map(|m| m.eval(u)).sum())
    }

    /// Derivative of the Jacobian along `du`: sum_l d_l J(u) du_l.
    pub fn jacobian_dir(&self, u: &[C64], du: &[C64]) -> CMat {
        CMat::from_fn(self.n, self.n, |i, j| {
            (0..self.n).map(|l| self.hess[i][j][l].iter().map(|m| m.eval(u)).sum::<C64>() * du[l]).sum()
        })
    }
}

/// Closed-form fronts shipped with the builtin models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExactFront {
    /// `(1 + e^{x/sqrt 6})^{-2}`
    Fisher,
    /// `(1 + e^{x/sqrt 2})^{-1}`
    Nagumo,
    /// Fisher front in the first component, zero in the second.
    FisherPadded,
}

fn logistic(z: f64) -> (f64, f64) {
    // (1/(1+e^z), e^z/(1+e^z)) without overflow
    if z > 0.0 {
        let e = (-z).exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    } else {
        let e = z.exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    }
}

impl ExactFront {
    /// Value, first and second derivative at `x`.
    pub fn eval(&self, x: f64) -> (Vec<C64>, Vec<C64>, Vec<C64>) {
        match self {
            ExactFront::Fisher | ExactFront::FisherPadded => {
                let s = 1.0 / 6f64.sqrt();
                let (sg, one_m) = logistic(s * x);
                let u = sg * sg;
                let du = -2.0 * s * sg * sg * one_m;
                let ddu = 2.0 * s * s * sg * sg * one_m * (2.0 - 3.0 * sg);
                if *self == ExactFront::Fisher {
                    (vec![c(u)], vec![c(du)], vec![c(ddu)])
                } else {
                    let z = c(0.0);
                    (vec![c(u), z], vec![c(du), z], vec![c(ddu), z])
                }
            }
            ExactFront::Nagumo => {
                let r = 1.0 / 2f64.sqrt();
                let (sg, one_m) = logistic(r * x);
                (vec![c(sg)], vec![c(-r * sg * one_m)], vec![c(r * r * sg * one_m * (1.0 - 2.0 * sg))])
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    pub name: String,
    pub n: usize,
    pub d: Vec<C64>,
    pub f: PolyMap,
    pub g: PolyMap,
    pub u_minus: Vec<C64>,
    pub u_plus: Vec<C64>,
    pub c: f64,
    pub exact: Option<ExactFront>,
}

impl SystemModel {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return invalid("n must be positive");
        }
        if self.d.len() != self.n || self.u_minus.len() != self.n || self.u_plus.len() != self.n {
            return invalid("d, U_minus and U_plus must have length n");
        }
        if self.d.iter().any(|d| !(d.re > 0.0)) {
            return invalid("diffusion coefficients need positive real part");
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return invalid("wave speed must be positive");
        }
        if self.f.n != self.n || self.g.n != self.n {
            return invalid("f and g must act on C^n");
        }
        Ok(())
    }

    pub fn d_matrix(&self) -> CMat {
        CMat::from_diagonal(&nalgebra::DVector::from_vec(self.d.clone()))
    }

    /// Symbol `A[nu] = d nu^2 + (Jf(U) + c) nu + Jg(U)` at the rest state `u`.
    pub fn symbol(&self, u: &[C64], nu: C64) -> CMat {
        let mut a = self.f.jacobian(u);
        for i in 0..self.n {
            a[(i, i)] += self.c;
        }
        a *= nu;
        a += self.g.jacobian(u);
        for i in 0..self.n {
            a[(i, i)] += self.d[i] * nu * nu;
        }
        a
    }

    pub fn rest_state(&self, plus: bool) -> &[C64] {
        if plus {
            &self.u_plus
        } else {
            &self.u_minus
        }
    }
}

fn check_grid(u: &[C64], n: usize, h: f64) -> Result<usize> {
    if !(h > 0.0) {
        return invalid("grid spacing must be positive");
    }
    if u.len() % n != 0 {
        return invalid("grid function length is not a multiple of n");
    }
    let nodes = u.len() / n;
    if nodes < 4 {
        return invalid("grid too small for the boundary stencils");
    }
    if u.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return invalid("non-finite values in grid function");
    }
    Ok(nodes)
}

/// Second-order finite differences of a node-major grid function with
/// `n` components: returns (first derivative, second derivative).
pub fn fd2(u: &[C64], n: usize, h: f64, du: &mut [C64], ddu: &mut [C64]) {
    let nodes = u.len() / n;
    let at = |i: usize, k: usize| u[i * n + k];
    let (h1, h2) = (1.0 / (2.0 * h), 1.0 / (h * h));
    for k in 0..n {
        for i in 1..nodes - 1 {
            du[i * n + k] = (at(i + 1, k) - at(i - 1, k)) * h1;
            ddu[i * n + k] = (at(i + 1, k) - 2.0 * at(i, k) + at(i - 1, k)) * h2;
        }
        let e = nodes - 1;
        du[k] = (-3.0 * at(0, k) + 4.0 * at(1, k) - at(2, k)) * h1;
        du[e * n + k] = (3.0 * at(e, k) - 4.0 * at(e - 1, k) + at(e - 2, k)) * h1;
        ddu[k] = (2.0 * at(0, k) - 5.0 * at(1, k) + 4.0 * at(2, k) - at(3, k)) * h2;
        ddu[e * n + k] = (2.0 * at(e, k) - 5.0 * at(e - 1, k) + 4.0 * at(e - 2, k) - at(e - 3, k)) * h2;
    }
}

/// Reusable buffers for `rhs_into`.
#[derive(Default)]
pub struct RhsScratch {
    du: Vec<C64>,
    ddu: Vec<C64>,
    fu: Vec<C64>,
    dfu: Vec<C64>,
    tmp: Vec<C64>,
}

/// Allocation-free right-hand side; `u` is node-major with `model.n` components.
pub fn rhs_into(model: &SystemModel, u: &[C64], h: f64, frame_speed: f64, out: &mut [C64], s: &mut RhsScratch) {
    let n = model.n;
    let len = u.len();
    for buf in [&mut s.du, &mut s.ddu, &mut s.fu, &mut s.dfu, &mut s.tmp] {
        buf.resize(len, C64::new(0.0, 0.0));
    }
    fd2(u, n, h, &mut s.du, &mut s.ddu);
    let nodes = len / n;
    let has_f = !model.f.is_zero();
    if has_f {
        for i in 0..nodes {
            model.f.eval_into(&u[i * n..(i + 1) * n], &mut s.fu[i * n..(i + 1) * n]);
        }
        let (fu, dfu, tmp) = (&s.fu, &mut s.dfu, &mut s.tmp);
        fd2(fu, n, h, dfu, tmp);
    }
    let mut gv = vec![C64::new(0.0, 0.0); n];
    for i in 0..nodes {
        model.g.eval_into(&u[i * n..(i + 1) * n], &mut gv);
        for k in 0..n {
            let j = i * n + k;
            let mut v = model.d[k] * s.ddu[j] + frame_speed * s.du[j] + gv[k];
            if has_f {
                v += s.dfu[j];
            }
            out[j] = v;
        }
    }
}

/// `d u_xx + (f(u))_x + frame_speed u_x + g(u)` with second-order central
/// differences and one-sided second-order closures at the two ends.
pub fn evaluate_rhs(model: &SystemModel, u: &[C64], h: f64, frame_speed: f64) -> Result<Vec<C64>> {
    check_grid(u, model.n, h)?;
    let mut out = vec![C64::new(0.0, 0.0); u.len()];
    rhs_into(model, u, h, frame_speed, &mut out, &mut RhsScratch::default());
    Ok(out)
}

/// Checks that U_minus and U_plus are rest states, U_minus is linearly stable
/// and U_plus is linearly unstable.
pub fn check_equilibria(model: &SystemModel) -> Result<AssumptionReport> {
    let mut rep = AssumptionReport::default();
    let gm = model.g.eval(&model.u_minus);
    let gp = model.g.eval(&model.u_plus);
    let res = gm.iter().chain(gp.iter()).map(|z| z.norm()).fold(0.0, f64::max);
    rep.push("equilibria", res <= 1e-12, format!("max |g(U±)| = {res:.3e}"));
    let sm = eigenvalues(&model.g.jacobian(&model.u_minus))?;
    let sp = eigenvalues(&model.g.jacobian(&model.u_plus))?;
    let max_m = sm.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let max_p = sp.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    rep.push("stable U_minus", max_m < 0.0, format!("max Re spec Jg(U_minus) = {max_m:.6}"));
    rep.push("unstable U_plus", max_p > 0.0, format!("max Re spec Jg(U_plus) = {max_p:.6}"));
    Ok(rep)
}

fn mono(coef: f64, factors: &[(usize, u32)]) -> Monomial {
    Monomial { coef: c(coef), factors: factors.to_vec() }
}

pub fn fisher() -> SystemModel {
    let g = PolyMap::new(1, vec![vec![mono(1.0, &[(0, 1)]), mono(-1.0, &[(0, 2)])]]).unwrap();
    SystemModel {
        name: "fisher".into(),
        n: 1,
        d: vec![c(1.0)],
        f: PolyMap::zero(1),
        g,
        u_minus: vec![c(1.0)],
        u_plus: vec![c(0.0)],
        c: 5.0 / 6f64.sqrt(),
        exact: Some(ExactFront::Fisher),
    }
}

/// Bistable cubic `u(1-u)(u-a)`.
pub fn nagumo(a: f64) -> SystemModel {
    // u(1-u)(u-a) = -a u + (1+a) u^2 - u^3
    let g = PolyMap::new(1, vec![vec![mono(-a, &[(0, 1)]), mono(1.0 + a, &[(0, 2)]), mono(-1.0, &[(0, 3)])]]).unwrap();
    SystemModel {
        name: "nagumo".into(),
        n: 1,
        d: vec![c(1.0)],
        f: PolyMap::zero(1),
        g,
        u_minus: vec![c(1.0)],
        u_plus: vec![c(0.0)],
        c: (1.0 - 2.0 * a) / 2f64.sqrt(),
        exact: if a == 0.25 { Some(ExactFront::Nagumo) } else { None },
    }
}

/// Two-component KPP system; u2 = 0 is invariant so the front is the Fisher
/// front padded with zero.
pub fn kpp2(beta: f64, gamma: f64) -> SystemModel {
    let g = PolyMap::new(
        2,
        vec![
            vec![mono(1.0, &[(0, 1)]), mono(-1.0, &[(0, 2)]), mono(-beta, &[(0, 1), (1, 1)])],
            vec![mono(-gamma, &[(1, 1)]), mono(1.0, &[(0, 1), (1, 1)])],
        ],
    )
    .unwrap();
    SystemModel {
        name: "kpp2".into(),
        n: 2,
        d: vec![c(1.0), c(0.5)],
        f: PolyMap::zero(2),
        g,
        u_minus: vec![c(1.0), c(0.0)],
        u_plus: vec![c(0.0), c(0.0)],
        c: 5.0 / 6f64.sqrt(),
        exact: Some(ExactFront::FisherPadded),
    }
}

pub fn builtin_models() -> Vec<SystemModel> {
    vec![fisher(), nagumo(0.25), kpp2(0.1, 2.0)]
}

pub fn builtin(name: &str) -> Result<SystemModel> {
    builtin_models()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown builtin model '{name}'")))
}

/// Real number or `[re, im]` pair in model files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Num {
    Re(f64),
    Cx([f64; 2]),
}

impl From<Num> for C64 {
    fn from(n: Num) -> C64 {
        match n {
            Num::Re(r) => c(r),
            Num::Cx([r, i]) => C64::new(r, i),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    /// Output component (0-based).
    pub component: usize,
    pub coef: Num,
    /// Power of each input variable, length n.
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n: usize,
    pub d: Vec<Num>,
    pub c: f64,
    #[serde(rename = "U_minus")]
    pub u_minus: Vec<Num>,
    #[serde(rename = "U_plus")]
    pub u_plus: Vec<Num>,
    #[serde(default)]
    pub f: Vec<TermSpec>,
    #[serde(default)]
    pub g: Vec<TermSpec>,
}

fn default_name() -> String {
    "custom".into()
}

fn build_map(n: usize, terms: &[TermSpec]) -> Result<PolyMap> {
    let mut comps = vec![Vec::new(); n];
    for t in terms {
        if t.component >= n || t.powers.len() != n {
            return invalid("term component or powers length does not match n");
        }
        let factors = t.powers.iter().enumerate().filter(|(_, &p)| p > 0).map(|(k, &p)| (k, p)).collect();
        comps[t.component].push(Monomial { coef: t.coef.into(), factors });
    }
    PolyMap::new(n, comps)
}

impl ModelSpec {
    pub fn build(&self) -> Result<SystemModel> {
        let m = SystemModel {
            name: self.name.clone(),
            n: self.n,
            d: self.d.iter().map(|&z| z.into()).collect(),
            f: build_map(self.n, &self.f)?,
            g: build_map(self.n, &self.g)?,
            u_minus: self.u_minus.iter().map(|&z| z.into()).collect(),
            u_plus: self.u_plus.iter().map(|&z| z.into()).collect(),
            c: self.c,
            exact: None,
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn parse_model(text: &str) -> Result<SystemModel> {
    let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    spec.build()
}

pub fn load_model(path: &Path) -> Result<SystemModel> {
    parse_model(&std::fs::read_to_string(path)?)
}
