//! Co-moving frame evolution of `u = ubar + Omega v`, phase shift and decay
//! monitoring, and a method-of-lines solver for the linear weighted flow.

use rayon::prelude::*;

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{c, fit_line, CMat, C64};
use crate::model::SystemModel;
use crate::operator::WeightedOperator;
use crate::spectrum::projection_at;
use crate::weights::SubExpWeight;

const D1: [f64; 5] = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
const D2: [f64; 5] = [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0];

/// First and second derivatives of a node-major grid function. Fourth-order
/// central stencils inside, second-order next to the ends, one-sided at the ends.
fn derivs(u: &[C64], n: usize, h: f64, du: &mut [C64], ddu: &mut [C64]) {
    let nodes = u.len() / n;
    let (i1, i2) = (1.0 / h, 1.0 / (h * h));
    for k in 0..n {
        let at = |i: usize| u[i * n + k];
        for i in 2..nodes - 2 {
            let (mut a, mut b) = (c(0.0), c(0.0));
            for s in 0..5 {
                let v = at(i + s - 2);
                a += v * D1[s];
                b += v * D2[s];
            }
            du[i * n + k] = a * i1;
            ddu[i * n + k] = b * i2;
        }
        for i in [1, nodes - 2] {
            du[i * n + k] = (at(i + 1) - at(i - 1)) * (0.5 * i1);
            ddu[i * n + k] = (at(i + 1) - at(i) * 2.0 + at(i - 1)) * i2;
        }
        let e = nodes - 1;
        du[k] = (-3.0 * at(0) + 4.0 * at(1) - at(2)) * (0.5 * i1);
        du[e * n + k] = (3.0 * at(e) - 4.0 * at(e - 1) + at(e - 2)) * (0.5 * i1);
        ddu[k] = (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) * i2;
        ddu[e * n + k] = (2.0 * at(e) - 5.0 * at(e - 1) + 4.0 * at(e - 2) - at(e - 3)) * i2;
    }
}

fn grid(lo: f64, hi: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && hi > lo) {
        return invalid("grid needs h > 0 and hi > lo");
    }
    let m = ((hi - lo) / h).round() as usize;
    if m < 8 {
        return invalid("grid too small");
    }
    Ok((0..=m).map(|i| lo + i as f64 * (hi - lo) / m as f64).collect())
}

fn sup(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Linear flow

/// Method of lines for `v_t = L v` on `[lo, hi]` with zero Dirichlet data:
/// fourth-order differences, classical RK4 with `dt = 0.2 h^2 / max|d|`.
/// Returns the grid and `v` at each requested time.
pub fn linear_mol(op: &WeightedOperator, lo: f64, hi: f64, h: f64, v0: &dyn Fn(f64) -> Vec<C64>, times: &[f64]) -> Result<(Vec<f64>, Vec<Vec<C64>>)> {
    let xs = grid(lo, hi, h)?;
    let h = xs[1] - xs[0];
    let n = op.n();
    let coeffs: Vec<_> = xs.iter().map(|&x| op.coeffs(x)).collect();
    let dmax = op.model.d.iter().map(|d| d.norm()).fold(0.0, f64::max);
    let dt_max = 0.2 * h * h / dmax;
    let mut v: Vec<C64> = xs.iter().flat_map(|&x| v0(x)).collect();
    if v.len() != xs.len() * n {
        return invalid("v0 returned the wrong number of components");
    }
    let nodes = xs.len();
    let rhs = |v: &[C64], out: &mut [C64], du: &mut [C64], ddu: &mut [C64]| {
        derivs(v, n, h, du, ddu);
        for i in 0..nodes {
            let k = &coeffs[i];
            for r in 0..n {
                let mut s = c(0.0);
                for j in 0..n {
                    s += k.l2[(r, j)] * ddu[i * n + j] + k.l1[(r, j)] * du[i * n + j] + k.l0[(r, j)] * v[i * n + j];
                }
                out[i * n + r] = s;
            }
        }
        for r in 0..n {
            out[r] = c(0.0);
            out[(nodes - 1) * n + r] = c(0.0);
        }
    };
    for r in 0..n {
        v[r] = c(0.0);
        v[(nodes - 1) * n + r] = c(0.0);
    }
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut rk = Rk4::new(v.len());
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &target in &sorted {
        if target < t {
            return invalid("negative output time");
        }
        let steps = ((target - t) / dt_max).ceil().max(1.0) as usize;
        let dt = (target - t) / steps as f64;
        for _ in 0..steps {
            rk.step(&mut v, dt, &rhs);
        }
        t = target;
        out.push(v.clone());
    }
    // restore caller order
    let res = times.iter().map(|&tq| out[sorted.iter().position(|&s| s == tq).unwrap()].clone()).collect();
    Ok((xs, res))
}

struct Rk4 {
    k: [Vec<C64>; 4],
    tmp: Vec<C64>,
    du: Vec<C64>,
    ddu: Vec<C64>,
}

impl Rk4 {
    fn new(len: usize) -> Self {
        let z = vec![c(0.0); len];
        Self { k: [z.clone(), z.clone(), z.clone(), z.clone()], tmp: z.clone(), du: z.clone(), ddu: z }
    }

    fn step(&mut self, v: &mut [C64], dt: f64, f: &dyn Fn(&[C64], &mut [C64], &mut [C64], &mut [C64])) {
        let Self { k, tmp, du, ddu } = self;
        f(v, &mut k[0], du, ddu);
        for (s, w) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
            for i in 0..v.len() {
                tmp[i] = v[i] + k[s - 1][i] * (w * dt);
            }
            let (done, rest) = k.split_at_mut(s);
            let _ = done;
            f(tmp, &mut rest[0], du, ddu);
        }
        for i in 0..v.len() {
            v[i] += (k[0][i] + (k[1][i] + k[2][i]) * 2.0 + k[3][i]) * (dt / 6.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Nonlinear flow

/// `Omega^{-1} [ (T2f(ubar, Omega v))_x + T2g(ubar, Omega v) ]` with
/// `T2g(a, h) = g(a + h) - g(a) - Jg(a) h`.
pub fn nonlinearity(op: &WeightedOperator, x: f64, v: &[C64], vx: &[C64]) -> Vec<C64> {
    let m = &op.model;
    let n = m.n;
    let (u, du, _) = op.profile.eval(x);
    let (om, om1, _) = match op.omega {
        Some(o) => o.derivs(x),
        None => (c(1.0), c(0.0), c(0.0)),
    };
    let hv: Vec<C64> = v.iter().map(|z| z * om).collect();
    let hx: Vec<C64> = (0..n).map(|i| om1 * v[i] + om * vx[i]).collect();
    let a_h: Vec<C64> = u.iter().zip(&hv).map(|(a, b)| a + b).collect();
    let g1 = m.g.eval(&a_h);
    let g0 = m.g.eval(&u);
    let jg = m.g.jacobian(&u);
    let mut out: Vec<C64> = (0..n).map(|i| g1[i] - g0[i] - (0..n).map(|j| jg[(i, j)] * hv[j]).sum::<C64>()).collect();
    if !m.f.is_zero() {
        let jf_h = m.f.jacobian(&a_h);
        let jf = m.f.jacobian(&u);
        let jdir = m.f.jacobian_dir(&u, &du);
        for i in 0..n {
            for j in 0..n {
                out[i] += (jf_h[(i, j)] - jf[(i, j)]) * (du[j] + hx[j]) - jdir[(i, j)] * hv[j];
            }
        }
    }
    out.iter_mut().for_each(|z| *z /= om);
    out
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    pub l: f64,
    pub h: f64,
    /// Time step; `None` uses `0.25 h^2 / max Re d`.
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Spacing of recorded norms.
    pub output_every: f64,
    /// When set, `v(L, t) = v0(L + s t)` at the right end (data entering
    /// from beyond the grid at the transport speed `s`); otherwise `u` is
    /// pinned to the front there.
    pub inflow_speed: Option<f64>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { l: 100.0, h: 0.1, dt: None, t_end: 200.0, output_every: 1.0, inflow_speed: None }
    }
}

/// Initial-data recipes, all expressed through `u0 = ubar + Omega v0` except
/// for the shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialData {
    /// `u0 = ubar(x - s)`.
    Shift(f64),
    /// `v0 = amp exp(-((x - center) / width)^2)` in every component.
    Bump { amp: f64, width: f64, center: f64 },
    /// `v0 = amp max(1, x)^{-eta}` on `x > -10`, smoothly switched off below
    /// and, when `cutoff` is set, above `cutoff`.
    WeightedTail { amp: f64, eta: f64, cutoff: Option<f64> },
}

impl InitialData {
    /// `v0(x) = (u0(x) - ubar(x)) / Omega(x)`.
    pub fn v0(&self, op: &WeightedOperator, x: f64) -> Vec<C64> {
        let n = op.n();
        match *self {
            InitialData::Shift(s) => {
                let om = op.omega.map_or(c(1.0), |o| o.value(x));
                let (a, b) = (op.profile.eval(x - s).0, op.profile.eval(x).0);
                a.iter().zip(&b).map(|(p, q)| (p - q) / om).collect()
            }
            InitialData::Bump { amp, width, center } => vec![c(amp * (-((x - center) / width).powi(2)).exp()); n],
            InitialData::WeightedTail { amp, eta, cutoff } => {
                let mut cut = 0.5 * (1.0 + ((x + 10.0) / 2.0).tanh());
                if let Some(xc) = cutoff {
                    cut *= 0.5 * (1.0 - ((x - xc) / 2.0).tanh());
                }
                vec![c(amp * x.max(1.0).powf(-eta) * cut); n]
            }
        }
    }

    /// Node-major `u0` on `xs`.
    pub fn u0(&self, op: &WeightedOperator, xs: &[f64]) -> Vec<C64> {
        let n = op.n();
        let mut out = Vec::with_capacity(xs.len() * n);
        for &x in xs {
            if let InitialData::Shift(s) = *self {
                out.extend(op.profile.eval(x - s).0);
                continue;
            }
            let (u, _, _) = op.profile.eval(x);
            let om = op.omega.map_or(c(1.0), |o| o.value(x));
            let v = self.v0(op, x);
            out.extend(u.iter().zip(&v).map(|(a, b)| a + om * b));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub xs: Vec<f64>,
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    /// `|v|_inf`, `|v_x|_inf` at each recorded time.
    pub v_inf: Vec<f64>,
    pub vx_inf: Vec<f64>,
    /// `sup |N(v)|` at each recorded time.
    pub n_inf: Vec<f64>,
    pub v0: Vec<C64>,
    pub v_final: Vec<C64>,
    /// `v` at the requested snapshot times.
    pub snapshots: Vec<(f64, Vec<C64>)>,
}

impl Trajectory {
    pub fn w1inf(&self) -> Vec<f64> {
        self.v_inf.iter().zip(&self.vx_inf).map(|(a, b)| a.max(*b)).collect()
    }
}

struct Stepper<'a> {
    model: &'a SystemModel,
    n: usize,
    h: f64,
    fbar: Vec<C64>,
    du: Vec<C64>,
    ddu: Vec<C64>,
    fu: Vec<C64>,
    dfu: Vec<C64>,
    tmp: Vec<C64>,
}

impl Stepper<'_> {
    /// `d u_xx + (f(u))_x + c u_x + g(u)` at every node.
    fn full_rhs(&mut self, u: &[C64], out: &mut [C64]) {
        let n = self.n;
        let nodes = u.len() / n;
        derivs(u, n, self.h, &mut self.du, &mut self.ddu);
        let has_f = !self.model.f.is_zero();
        if has_f {
            for i in 0..nodes {
                self.model.f.eval_into(&u[i * n..(i + 1) * n], &mut self.fu[i * n..(i + 1) * n]);
            }
            derivs(&self.fu, n, self.h, &mut self.dfu, &mut self.tmp);
        }
        let mut gv = vec![c(0.0); n];
        for i in 0..nodes {
            self.model.g.eval_into(&u[i * n..(i + 1) * n], &mut gv);
            for k in 0..n {
                let j = i * n + k;
                let mut v = self.model.d[k] * self.ddu[j] + self.model.c * self.du[j] + gv[k];
                if has_f {
                    v += self.dfu[j];
                }
                out[j] = v;
            }
        }
    }
}

/// Explicit RK4 for `u_t = F_h(u) - F_h(ubar)` with pinned ends, where `F_h`
/// is the fourth-order semi-discretization of the co-moving equation.
/// Subtracting `F_h(ubar)` makes the front an exact fixed point of the
/// stepper. `snap_times` selects full snapshots of `v`.
pub fn run(op: &WeightedOperator, init: &InitialData, opts: &EvolveOptions, snap_times: &[f64]) -> Result<Trajectory> {
    let xs = grid(-opts.l, opts.l, opts.h)?;
    let u0 = init.u0(op, &xs);
    let l = opts.l;
    match opts.inflow_speed {
        Some(s) => {
            let inflow = move |t: f64| init.v0(op, l + s * t);
            run_from(op, &xs, &u0, opts, snap_times, Some(&inflow))
        }
        None => run_from(op, &xs, &u0, opts, snap_times, None),
    }
}

/// `inflow(t)` is the value of `v` at the right end; `None` keeps `u = ubar` there.
pub fn run_from(
    op: &WeightedOperator,
    xs: &[f64],
    u0: &[C64],
    opts: &EvolveOptions,
    snap_times: &[f64],
    inflow: Option<&dyn Fn(f64) -> Vec<C64>>,
) -> Result<Trajectory> {
    let n = op.n();
    let h = xs[1] - xs[0];
    let model = &op.model;
    let dmax = model.d.iter().map(|d| d.re).fold(0.0, f64::max);
    let dt_cfl = 0.25 * h * h / dmax;
    let dt_req = opts.dt.unwrap_or(dt_cfl);
    if dt_req > dt_cfl * (1.0 + 1e-12) {
        return invalid(format!("dt = {dt_req} violates dt <= 0.25 h^2 / max Re d = {dt_cfl}"));
    }
    if u0.len() != xs.len() * n {
        return invalid("u0 does not match the grid");
    }
    let nodes = xs.len();
    let ubar: Vec<C64> = xs.iter().flat_map(|&x| op.profile.eval(x).0).collect();
    let om: Vec<C64> = xs.iter().map(|&x| op.omega.map_or(c(1.0), |o| o.value(x))).collect();
    let len = nodes * n;
    let z = vec![c(0.0); len];
    let mut st = Stepper { model, n, h, fbar: z.clone(), du: z.clone(), ddu: z.clone(), fu: z.clone(), dfu: z.clone(), tmp: z.clone() };
    let mut fbar = z.clone();
    st.full_rhs(&ubar, &mut fbar);
    st.fbar = fbar;

    // w = u - ubar; the ends are reset after every step
    let mut w: Vec<C64> = u0.iter().zip(&ubar).map(|(a, b)| a - b).collect();
    let set_ends = |w: &mut [C64], t: f64| {
        let right = inflow.map(|f| f(t));
        for r in 0..n {
            w[r] = c(0.0);
            w[(nodes - 1) * n + r] = right.as_ref().map_or(c(0.0), |v| v[r] * om[nodes - 1]);
        }
    };
    set_ends(&mut w, 0.0);
    let to_v = |w: &[C64]| -> Vec<C64> { (0..len).map(|j| w[j] / om[j / n]).collect() };
    let mut vbuf = z.clone();
    let mut vx = z.clone();
    let mut vxx = z.clone();
    let norms = |w: &[C64], vbuf: &mut Vec<C64>, vx: &mut Vec<C64>, vxx: &mut Vec<C64>| -> (f64, f64, f64) {
        for j in 0..len {
            vbuf[j] = w[j] / om[j / n];
        }
        derivs(vbuf, n, h, vx, vxx);
        let mut nmax: f64 = 0.0;
        for i in (0..nodes).step_by(4) {
            let nl = nonlinearity(op, xs[i], &vbuf[i * n..(i + 1) * n], &vx[i * n..(i + 1) * n]);
            nmax = nmax.max(nl.iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        (sup(vbuf), sup(vx), nmax)
    };
    let v0 = to_v(&w);
    let (a0, b0, n0) = norms(&w, &mut vbuf, &mut vx, &mut vxx);
    let blow = 1e3 * a0.max(b0);
    let mut times = vec![0.0];
    let mut v_inf = vec![a0];
    let mut vx_inf = vec![b0];
    let mut n_inf = vec![n0];
    let mut snaps = Vec::new();
    if snap_times.contains(&0.0) {
        snaps.push((0.0, v0.clone()));
    }
    let mut u = z.clone();
    let mut rhs_buf = z.clone();
    let mut k = [z.clone(), z.clone(), z.clone(), z.clone()];
    let mut tmp = z.clone();
    let mut rhs = |w: &[C64], out: &mut [C64], st: &mut Stepper| {
        for j in 0..len {
            u[j] = ubar[j] + w[j];
        }
        st.full_rhs(&u, &mut rhs_buf);
        for j in 0..len {
            out[j] = rhs_buf[j] - st.fbar[j];
        }
        for r in 0..n {
            out[r] = c(0.0);
            out[(nodes - 1) * n + r] = c(0.0);
        }
    };
    let mut marks: Vec<f64> = Vec::new();
    let mut tm = opts.output_every;
    while tm <= opts.t_end + 1e-9 {
        marks.push(tm);
        tm += opts.output_every;
    }
    for &s in snap_times {
        if s > 0.0 && !marks.iter().any(|m| (m - s).abs() < 1e-9) {
            marks.push(s);
        }
    }
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut t = 0.0;
    let mut dt_used: f64 = 0.0;
    for target in marks {
        let steps = ((target - t) / dt_req).ceil().max(1.0) as usize;
        let dt = (target - t) / steps as f64;
        dt_used = dt_used.max(dt);
        for _ in 0..steps {
            rhs(&w, &mut k[0], &mut st);
            for (s, a) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
                for j in 0..len {
                    tmp[j] = w[j] + k[s - 1][j] * (a * dt);
                }
                let (_, rest) = k.split_at_mut(s);
                rhs(&tmp, &mut rest[0], &mut st);
            }
            for j in 0..len {
                w[j] += (k[0][j] + (k[1][j] + k[2][j]) * 2.0 + k[3][j]) * (dt / 6.0);
            }
            t += dt;
            set_ends(&mut w, t);
        }
        t = target;
        let (a, b, nn) = norms(&w, &mut vbuf, &mut vx, &mut vxx);
        if !(a.is_finite() && b.is_finite()) || (blow > 0.0 && a.max(b) > blow) {
            return Err(Error::Numerical(format!("blow-up monitor tripped at t = {t}: |v| = {a:.3e}")));
        }
        if snap_times.iter().any(|s| (s - t).abs() < 1e-9) {
            snaps.push((t, vbuf.clone()));
        }
        if (t / opts.output_every - (t / opts.output_every).round()).abs() < 1e-9 {
            times.push(t);
            v_inf.push(a);
            vx_inf.push(b);
            n_inf.push(nn);
        }
    }
    Ok(Trajectory { xs: xs.to_vec(), n, h, dt: dt_used, times, v_inf, vx_inf, n_inf, v0, v_final: to_v(&w), snapshots: snaps })
}

/// `|f|_{W^{k,inf}}` of a node-major grid function for k = 1 or 2.
pub fn w_norm(v: &[C64], n: usize, h: f64, k: usize) -> f64 {
    let mut d1 = vec![c(0.0); v.len()];
    let mut d2 = vec![c(0.0); v.len()];
    derivs(v, n, h, &mut d1, &mut d2);
    let mut m = sup(v).max(sup(&d1));
    if k >= 2 {
        m = m.max(sup(&d2));
    }
    m
}

// ---------------------------------------------------------------------------
// Phase shift

#[derive(Debug, Clone)]
pub struct PhaseShift {
    pub b: C64,
    pub x_inf: f64,
    /// Spread of the tail ratio over the averaging window.
    pub tail_variation: f64,
    pub e0: f64,
    /// `|x_inf| / E0`.
    pub c_ratio: f64,
    pub window: (f64, f64),
}

/// `b` is the tail average of the ratio of the v1 components of
/// `pi (u0 - ubar) / Omega` and `pi (ubar - U_plus) / Omega`, so that
/// `ubar(x - x_inf)` gives `b = e^{kappa x_inf} - 1`.
pub fn phase_shift(op: &WeightedOperator, xs: &[f64], u0: &[C64]) -> Result<PhaseShift> {
    let n = op.n();
    let kappa = op.kappa();
    let om = op.omega.ok_or_else(|| Error::InvalidInput("phase shift needs the weight Omega".into()))?;
    let sym = crate::spectrum::Symbols::from_operator(op);
    let nu1 = crate::spectrum::side_roots(&sym, true, c(0.0), None)?[n];
    let pi = projection_at(&sym, c(0.0), nu1)?;
    let x_hi = xs[xs.len() - 1] - 5.0;
    let x_lo = x_hi - 0.1 * (x_hi - xs[0]);
    let mut ratios = Vec::new();
    let mut pv0 = Vec::with_capacity(xs.len() * n);
    for (i, &x) in xs.iter().enumerate() {
        let (ub, _, _) = op.profile.eval(x);
        let o = om.value(x);
        let q = nalgebra::DVector::from_iterator(n, (0..n).map(|k| (u0[i * n + k] - ub[k]) / o));
        pv0.extend((&pi * q.clone()).iter().cloned());
        if x < x_lo || x > x_hi {
            continue;
        }
        let p = nalgebra::DVector::from_iterator(n, (0..n).map(|k| (ub[k] - op.model.u_plus[k]) / o));
        let (pp, pq) = (&pi * p, &pi * q);
        let den: C64 = pp.iter().map(|z| z.norm_sqr()).sum::<f64>().into();
        let num: C64 = pp.iter().zip(pq.iter()).map(|(a, b)| a.conj() * b).sum();
        ratios.push(num / den);
    }
    if ratios.is_empty() {
        return invalid("tail window is empty");
    }
    let b = ratios.iter().sum::<C64>() / ratios.len() as f64;
    let tail_variation = ratios.iter().map(|r| (r - b).norm()).fold(0.0, f64::max) * 2.0;
    if tail_variation > 1e-3 {
        return Err(Error::Assumption(format!("pi (u0 - ubar) / Omega does not converge at the right edge (variation {tail_variation:.2e})")));
    }
    if b.re <= -1.0 {
        return Err(Error::Assumption(format!("b = {b} <= -1 is outside the small-data regime")));
    }
    let x_inf = (1.0 + b.re).ln() / kappa;
    let v0: Vec<C64> = (0..xs.len() * n)
        .map(|j| {
            let x = xs[j / n];
            (u0[j] - op.profile.eval(x).0[j % n]) / om.value(x)
        })
        .collect();
    let e0 = w_norm(&v0, n, xs[1] - xs[0], 2);
    Ok(PhaseShift { b, x_inf, tail_variation, e0, c_ratio: if e0 > 0.0 { x_inf.abs() / e0 } else { 0.0 }, window: (x_lo, x_hi) })
}

// ---------------------------------------------------------------------------
// Decay monitoring

#[derive(Debug, Clone)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub w1inf: Vec<f64>,
    pub theta_rho: Vec<f64>,
    /// `E_{0,rho} = |rho pi v0|_{W^{1,inf}} + |v0|_{W^{1,inf}}`.
    pub e0_rho: f64,
    pub c_rho: f64,
    pub ratio: Vec<f64>,
    pub exponent: f64,
    pub fit_window: (f64, f64),
    /// `rho(sigma t / 4) <= sqrt(1 + t)` on the recorded times.
    pub precondition: bool,
}

/// Running sup `Theta_rho`, ratio `|v(t)| rho(C t) / E_{0,rho}` with
/// `C = c_rho`, and the log-log decay exponent over `[t_lo, t_hi]`.
pub fn decay_monitor(traj: &Trajectory, op: &WeightedOperator, rho: &SubExpWeight, sigma: f64, c_rho: f64, window: (f64, f64)) -> Result<DecayReport> {
    let n = traj.n;
    let w1 = traj.w1inf();
    let pts: Vec<usize> = (0..traj.times.len()).filter(|&i| traj.times[i] >= window.0 && traj.times[i] <= window.1 && traj.times[i] > 0.0).collect();
    if pts.len() < 20 {
        return invalid(format!("trajectory too short for the fit window ({} points)", pts.len()));
    }
    let sym = crate::spectrum::Symbols::from_operator(op);
    let nu1 = crate::spectrum::side_roots(&sym, true, c(0.0), None)?[n];
    let pi = projection_at(&sym, c(0.0), nu1)?;
    let mut rpv = Vec::with_capacity(traj.v0.len());
    for (i, &x) in traj.xs.iter().enumerate() {
        let v = nalgebra::DVector::from_iterator(n, (0..n).map(|k| traj.v0[i * n + k]));
        let p = &pi * v;
        rpv.extend(p.iter().map(|z| z * rho.eval(x.max(0.0))));
    }
    let e0_rho = w_norm(&rpv, n, traj.h, 1) + w_norm(&traj.v0, n, traj.h, 1);
    let mut theta = Vec::with_capacity(w1.len());
    let mut run = 0.0f64;
    for (t, v) in traj.times.iter().zip(&w1) {
        run = run.max(rho.eval(sigma * t) * v);
        theta.push(run);
    }
    let ratio = traj.times.iter().zip(&w1).map(|(t, v)| v * rho.eval(c_rho * t) / e0_rho).collect();
    let lx: Vec<f64> = pts.iter().map(|&i| traj.times[i].ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|&i| w1[i].ln()).collect();
    let (_, slope) = fit_line(&lx, &ly);
    let precondition = traj.times.iter().all(|&t| rho.eval(sigma * t / 4.0) <= (1.0 + t).sqrt() + 1e-12);
    Ok(DecayReport { times: traj.times.clone(), w1inf: w1, theta_rho: theta, e0_rho, c_rho, ratio, exponent: -slope, fit_window: window, precondition })
}

#[derive(Debug, Clone)]
pub struct BootstrapCheck {
    pub c1: f64,
    pub m: f64,
    pub e0: f64,
    pub delta: f64,
    pub sup_theta: f64,
    /// `sup Theta_1 <= 2 C1 E0`.
    pub bounded: bool,
    /// `Theta_1(t) <= C1 (E0 + M Theta_1(t)^2)` at every recorded time.
    pub inequality: bool,
}

/// `C1` is fitted from a linear-regime run (`sup |v_lin|_{W^{1,inf}} / E0_lin`),
/// `M` from `sup |N(v)| / |v|_{W^{1,inf}}^2` along the nonlinear run.
pub fn bootstrap_check(linear: &Trajectory, nonlinear: &Trajectory) -> BootstrapCheck {
    let e_lin = w_norm(&linear.v0, linear.n, linear.h, 1);
    let c1 = linear.w1inf().iter().cloned().fold(0.0, f64::max) / e_lin;
    let w1 = nonlinear.w1inf();
    let m = nonlinear.n_inf.iter().zip(&w1).filter(|(_, w)| **w > 0.0).map(|(nn, w)| nn / (w * w)).fold(0.0, f64::max);
    let e0 = w_norm(&nonlinear.v0, nonlinear.n, nonlinear.h, 1);
    let mut theta = 0.0f64;
    let mut inequality = true;
    for w in &w1 {
        theta = theta.max(*w);
        inequality &= theta <= c1 * (e0 + m * theta * theta) * (1.0 + 1e-9);
    }
    let delta = 1.0 / (4.0 * c1 * c1 * m.max(1e-300));
    BootstrapCheck { c1, m, e0, delta, sup_theta: theta, bounded: theta <= 2.0 * c1 * e0, inequality }
}

/// Largest `|v_nl - v_lin| / eps^2` over the snapshot times, for two runs from
/// the same `eps`-scaled data (`v_lin` solves the linear flow).
pub fn linearization_defect(nl: &Trajectory, lin_snaps: &[(f64, Vec<C64>)], eps: f64) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (t, v) in &nl.snapshots {
        let Some((_, l)) = lin_snaps.iter().find(|(s, _)| (s - t).abs() < 1e-9) else {
            return numerical(format!("no linear snapshot at t = {t}"));
        };
        if l.len() != v.len() {
            return invalid("snapshot grids differ");
        }
        let d = v.iter().zip(l).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        out.push((*t, d / (eps * eps)));
    }
    Ok(out)
}

/// Linear flow on the trajectory grid with snapshots at `times`. This is the
/// exact tangent of the stepper used by `run` at the front, integrated in
/// the unweighted variable `w = Omega v`, so `v_nl - v_lin` carries no
/// discretization error that is linear in the amplitude.
pub fn linear_snapshots(op: &WeightedOperator, xs: &[f64], v0: &[C64], times: &[f64]) -> Result<Vec<(f64, Vec<C64>)>> {
    let n = op.n();
    let h = xs[1] - xs[0];
    let model = &op.model;
    let nodes = xs.len();
    if v0.len() != nodes * n {
        return invalid("v0 does not match the grid");
    }
    let om: Vec<C64> = xs.iter().map(|&x| op.omega.map_or(c(1.0), |o| o.value(x))).collect();
    let jac: Vec<(CMat, CMat)> = xs
        .par_iter()
        .map(|&x| {
            let ub = op.profile.eval(x).0;
            (model.f.jacobian(&ub), model.g.jacobian(&ub))
        })
        .collect();
    let has_f = !model.f.is_zero();
    let rhs = |w: &[C64], out: &mut [C64], du: &mut [C64], ddu: &mut [C64]| {
        derivs(w, n, h, du, ddu);
        let (mut fw, mut dfw, mut tmp) = if has_f { (w.to_vec(), w.to_vec(), w.to_vec()) } else { (Vec::new(), Vec::new(), Vec::new()) };
        if has_f {
            for i in 0..nodes {
                for r in 0..n {
                    fw[i * n + r] = (0..n).map(|j| jac[i].0[(r, j)] * w[i * n + j]).sum();
                }
            }
            derivs(&fw, n, h, &mut dfw, &mut tmp);
        }
        for i in 0..nodes {
            for r in 0..n {
                let j = i * n + r;
                let mut s = model.d[r] * ddu[j] + model.c * du[j];
                s += (0..n).map(|q| jac[i].1[(r, q)] * w[i * n + q]).sum::<C64>();
                if has_f {
                    s += dfw[j];
                }
                out[j] = s;
            }
        }
        for r in 0..n {
            out[r] = c(0.0);
            out[(nodes - 1) * n + r] = c(0.0);
        }
    };
    let dmax = op.model.d.iter().map(|d| d.re).fold(0.0, f64::max);
    let dt_max = 0.25 * h * h / dmax;
    let mut v: Vec<C64> = (0..nodes * n).map(|j| v0[j] * om[j / n]).collect();
    let mut rk = Rk4::new(v.len());
    let mut t = 0.0;
    let mut out = Vec::new();
    for &target in times {
        let steps = ((target - t) / dt_max).ceil().max(1.0) as usize;
        let dt = (target - t) / steps as f64;
        for _ in 0..steps {
            rk.step(&mut v, dt, &rhs);
        }
        t = target;
        out.push((t, (0..nodes * n).map(|j| v[j] / om[j / n]).collect()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fisher;
    use crate::profile::closed_form;
    use crate::weights::{build_omega, WeightKind};

    fn op() -> WeightedOperator {
        let m = fisher();
        let p = closed_form(&m, 0.0, 60.0, 0.02).unwrap();
        WeightedOperator::new(m, p, Some(build_omega(2.0 / 6f64.sqrt(), 0.0).unwrap())).unwrap()
    }

    #[test]
    fn derivatives_fourth_order() {
        let xs = grid(0.0, 2.0, 0.01).unwrap();
        let u: Vec<C64> = xs.iter().map(|x| c(x.sin())).collect();
        let mut d1 = vec![c(0.0); u.len()];
        let mut d2 = d1.clone();
        derivs(&u, 1, 0.01, &mut d1, &mut d2);
        for i in 2..xs.len() - 2 {
            assert!((d1[i].re - xs[i].cos()).abs() < 1e-9);
            assert!((d2[i].re + xs[i].sin()).abs() < 1e-7);
        }
    }

    #[test]
    fn fisher_nonlinearity_is_quadratic() {
        let op = op();
        for x in [-3.0, 0.2, 4.0] {
            let om = op.omega.unwrap().value(x);
            let v = [c(0.3)];
            let nl = nonlinearity(&op, x, &v, &[c(1.7)]);
            assert!((nl[0] + om * 0.09).norm() < 1e-14);
        }
        assert_eq!(nonlinearity(&op, 1.0, &[c(0.0)], &[c(0.0)])[0], c(0.0));
    }

    #[test]
    fn front_is_fixed_point() {
        let op = op();
        let opts = EvolveOptions { l: 40.0, h: 0.1, dt: None, t_end: 5.0, output_every: 1.0, inflow_speed: None };
        let tr = run(&op, &InitialData::Bump { amp: 0.0, width: 1.0, center: 0.0 }, &opts, &[]).unwrap();
        assert!(tr.v_inf.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifted_front_phase() {
        let op = op();
        let xs = grid(-100.0, 100.0, 0.1).unwrap();
        let u0 = InitialData::Shift(0.1).u0(&op, &xs);
        let ps = phase_shift(&op, &xs, &u0).unwrap();
        let kappa = 2.0 / 6f64.sqrt();
        assert!((ps.b.re - ((0.1 * kappa).exp() - 1.0)).abs() < 1e-9, "{:?}", ps.b);
        assert!((ps.x_inf - 0.1).abs() < 1e-9);
        let u0 = InitialData::Shift(0.0).u0(&op, &xs);
        assert!(phase_shift(&op, &xs, &u0).unwrap().x_inf.abs() < 1e-14);
        let u0 = InitialData::Bump { amp: 0.01, width: 2.0, center: 0.0 }.u0(&op, &xs);
        assert!(phase_shift(&op, &xs, &u0).unwrap().x_inf.abs() < 1e-12);
    }

    #[test]
    fn cfl_violation_rejected() {
        let op = op();
        let opts = EvolveOptions { l: 20.0, h: 0.1, dt: Some(0.01), t_end: 1.0, output_every: 1.0, inflow_speed: None };
        assert!(run(&op, &InitialData::Shift(0.0), &opts, &[]).is_err());
    }

    #[test]
    fn mol_heat_equation_limit() {
        // On x < -30 the Fisher operator is v'' + c v' - v; the Gaussian
        // solution of v_t = v'' + c v' - v is explicit.
        let op = op();
        let cc = 5.0 / 6f64.sqrt();
        let x0 = -45.0;
        let v0 = move |x: f64| vec![c((-(x - x0) * (x - x0)).exp())];
        let t = 0.5;
        let (xs, vs) = linear_mol(&op, -60.0, -31.0, 0.025, &v0, &[t]).unwrap();
        let exact = |x: f64| {
            let s = 1.0 + 4.0 * t;
            let y = x + cc * t - x0;
            (-t).exp() / s.sqrt() * (-y * y / s).exp()
        };
        let err = xs.iter().zip(&vs[0]).map(|(x, v)| (v.re - exact(*x)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn decay_monitor_constant_weight() {
        let op = op();
        let opts = EvolveOptions { l: 30.0, h: 0.1, dt: None, t_end: 25.0, output_every: 0.5, inflow_speed: None };
        let tr = run(&op, &InitialData::Bump { amp: 1e-3, width: 1.0, center: -5.0 }, &opts, &[]).unwrap();
        let rep = decay_monitor(&tr, &op, &SubExpWeight::constant(), 1.0 / 6f64.sqrt(), 1.0, (5.0, 25.0)).unwrap();
        assert!(rep.theta_rho.windows(2).all(|w| w[1] >= w[0]));
        let top = rep.w1inf.iter().cloned().fold(0.0, f64::max);
        assert_eq!(*rep.theta_rho.last().unwrap(), top);
        let short = decay_monitor(&tr, &op, &SubExpWeight::new("p", WeightKind::Power(0.25), 0.1, 2.0), 0.4, 1.0, (24.0, 25.0));
        assert!(short.is_err());
    }
}
