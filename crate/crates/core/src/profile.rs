//! Front profiles: Newton solve of the co-moving profile equation, closed-form
//! injection, interpolation, residuals and the asymptotic tail fit.

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{c, eigenvalues, fit_line, null_pair, Banded, CMat, C64};
use crate::model::{ExactFront, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProfileSource {
    Exact { front: ExactFront, shift: f64 },
    Grid,
}

#[derive(Debug, Clone)]
pub struct WaveProfile {
    pub n: usize,
    pub xs: Vec<f64>,
    pub h: f64,
    /// Node-major values, derivative and second derivative.
    pub values: Vec<C64>,
    pub derivative: Vec<C64>,
    pub second: Vec<C64>,
    pub c: f64,
    pub kappa: f64,
    pub xi0: f64,
    /// Leading tail amplitude of (u - U_plus, u').
    pub v: Vec<C64>,
    pub source: ProfileSource,
    pub u_minus: Vec<C64>,
    pub u_plus: Vec<C64>,
}

fn quintic_basis(t: f64) -> [[f64; 6]; 3] {
    let (t2, t3, t4, t5) = (t * t, t * t * t, t * t * t * t, t * t * t * t * t);
    [
        [
            1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
            t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
            0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
            10.0 * t3 - 15.0 * t4 + 6.0 * t5,
            -4.0 * t3 + 7.0 * t4 - 3.0 * t5,
            0.5 * t3 - t4 + 0.5 * t5,
        ],
        [
            -30.0 * t2 + 60.0 * t3 - 30.0 * t4,
            1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4,
            t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4,
            30.0 * t2 - 60.0 * t3 + 30.0 * t4,
            -12.0 * t2 + 28.0 * t3 - 15.0 * t4,
            1.5 * t2 - 4.0 * t3 + 2.5 * t4,
        ],
        [
            -60.0 * t + 180.0 * t2 - 120.0 * t3,
            -36.0 * t + 96.0 * t2 - 60.0 * t3,
            1.0 - 9.0 * t + 18.0 * t2 - 10.0 * t3,
            60.0 * t - 180.0 * t2 + 120.0 * t3,
            -24.0 * t + 84.0 * t2 - 60.0 * t3,
            3.0 * t - 12.0 * t2 + 10.0 * t3,
        ],
    ]
}

impl WaveProfile {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn l(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    pub fn at(&self, i: usize) -> &[C64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn deriv_at(&self, i: usize) -> &[C64] {
        &self.derivative[i * self.n..(i + 1) * self.n]
    }

    /// Value, first and second derivative at arbitrary `x`. Grid profiles
    /// use quintic Hermite interpolation and are continued by the rest states
    /// outside the grid.
    pub fn eval_into(&self, x: f64, u: &mut [C64], du: &mut [C64], ddu: &mut [C64]) {
        if let ProfileSource::Exact { front, shift } = self.source {
            let (a, b, cc) = front.eval(x - shift);
            u.copy_from_slice(&a);
            du.copy_from_slice(&b);
            ddu.copy_from_slice(&cc);
            return;
        }
        let n = self.n;
        let (x0, xl) = (self.xs[0], self.l());
        if x <= x0 || x >= xl {
            let rest = if x <= x0 { &self.u_minus } else { &self.u_plus };
            u.copy_from_slice(rest);
            du.iter_mut().for_each(|z| *z = c(0.0));
            ddu.iter_mut().for_each(|z| *z = c(0.0));
            return;
        }
        let i = (((x - x0) / self.h).floor() as usize).min(self.len() - 2);
        let t = (x - self.xs[i]) / self.h;
        let b = quintic_basis(t);
        let h = self.h;
        for k in 0..n {
            let p = [
                self.values[i * n + k],
                self.derivative[i * n + k] * h,
                self.second[i * n + k] * (h * h),
                self.values[(i + 1) * n + k],
                self.derivative[(i + 1) * n + k] * h,
                self.second[(i + 1) * n + k] * (h * h),
            ];
            let mut acc = [c(0.0); 3];
            for (d, row) in b.iter().enumerate() {
                for j in 0..6 {
                    acc[d] += p[j] * row[j];
                }
            }
            u[k] = acc[0];
            du[k] = acc[1] / h;
            ddu[k] = acc[2] / (h * h);
        }
    }

    pub fn eval(&self, x: f64) -> (Vec<C64>, Vec<C64>, Vec<C64>) {
        let mut u = vec![c(0.0); self.n];
        let mut du = u.clone();
        let mut ddu = u.clone();
        self.eval_into(x, &mut u, &mut du, &mut ddu);
        (u, du, ddu)
    }
}

/// Uniform symmetric grid on [-L, L] with spacing close to `h` and a node at 0.
pub fn uniform_grid(l: f64, h: f64) -> Result<Vec<f64>> {
    if !(l > 0.0 && h > 0.0 && h < l) {
        return invalid("grid needs 0 < h < L");
    }
    let half = (l / h).round() as usize;
    let step = l / half as f64;
    Ok((0..=2 * half).map(|i| -l + i as f64 * step).collect())
}

/// First-order linearization `Y' = M Y`, `Y = (u, u')`, of the profile ODE at
/// a rest state.
pub fn profile_linearization(model: &SystemModel, plus: bool, c_speed: f64) -> CMat {
    let n = model.n;
    let u = model.rest_state(plus);
    let jf = model.f.jacobian(u);
    let jg = model.g.jacobian(u);
    let mut m = CMat::zeros(2 * n, 2 * n);
    for i in 0..n {
        m[(i, n + i)] = c(1.0);
        for j in 0..n {
            m[(n + i, j)] = -jg[(i, j)] / model.d[i];
            let cj = if i == j { c(c_speed) } else { c(0.0) };
            m[(n + i, n + j)] = -(jf[(i, j)] + cj) / model.d[i];
        }
    }
    m
}

/// Eigenvalues of the profile linearization at one end.
pub fn spatial_rates(model: &SystemModel, plus: bool, c_speed: f64) -> Result<Vec<C64>> {
    eigenvalues(&profile_linearization(model, plus, c_speed))
}

/// Left eigenvectors annihilating the admissible subspace: stable directions
/// at -L (solutions must grow in x there) and unstable directions at +L.
fn boundary_rows(model: &SystemModel, plus: bool, c_speed: f64, pivots: Option<&[usize]>) -> Result<(Vec<Vec<C64>>, Vec<usize>)> {
    let m = profile_linearization(model, plus, c_speed);
    let ev = eigenvalues(&m)?;
    let mut rows = Vec::new();
    let mut piv = Vec::new();
    let mut sel: Vec<C64> = ev.into_iter().filter(|z| if plus { z.re > 0.0 } else { z.re < 0.0 }).collect();
    sel.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
    for (k, mu) in sel.iter().enumerate() {
        let a = CMat::identity(m.nrows(), m.nrows()) * *mu - &m;
        let np = null_pair(&a)?;
        if np.sigma_next < 1e-8 {
            return numerical("repeated spatial rate at a rest state");
        }
        let p = match pivots {
            Some(p) => p[k],
            None => (0..np.left.len()).max_by(|&i, &j| np.left[i].norm().partial_cmp(&np.left[j].norm()).unwrap()).unwrap(),
        };
        let scale = np.left[p];
        rows.push(np.left.iter().map(|z| z / scale).collect());
        piv.push(p);
    }
    Ok((rows, piv))
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Finite-difference order, 2 or 4.
    pub order: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { order: 4, tol: 1e-10, max_iter: 50 }
    }
}

/// Derivative stencil at node `i` of `nn`: (first node, weights). Weights are
/// scaled by 1/h (first derivative) or 1/h^2 (second derivative).
pub fn stencil(order: usize, deriv: usize, i: usize, nn: usize) -> (usize, &'static [f64]) {
    const C2_D1: [f64; 3] = [-0.5, 0.0, 0.5];
    const C2_D2: [f64; 3] = [1.0, -2.0, 1.0];
    const L2_D1: [f64; 3] = [-1.5, 2.0, -0.5];
    const R2_D1: [f64; 3] = [0.5, -2.0, 1.5];
    const C4_D1: [f64; 5] = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
    const C4_D2: [f64; 5] = [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0];
    const N1_D1: [f64; 5] = [-3.0 / 12.0, -10.0 / 12.0, 18.0 / 12.0, -6.0 / 12.0, 1.0 / 12.0];
    const N1_D2: [f64; 6] = [10.0 / 12.0, -15.0 / 12.0, -4.0 / 12.0, 14.0 / 12.0, -6.0 / 12.0, 1.0 / 12.0];
    const M1_D1: [f64; 5] = [-1.0 / 12.0, 6.0 / 12.0, -18.0 / 12.0, 10.0 / 12.0, 3.0 / 12.0];
    const M1_D2: [f64; 6] = [1.0 / 12.0, -6.0 / 12.0, 14.0 / 12.0, -4.0 / 12.0, -15.0 / 12.0, 10.0 / 12.0];
    const E0_D1: [f64; 5] = [-25.0 / 12.0, 48.0 / 12.0, -36.0 / 12.0, 16.0 / 12.0, -3.0 / 12.0];
    const EN_D1: [f64; 5] = [3.0 / 12.0, -16.0 / 12.0, 36.0 / 12.0, -48.0 / 12.0, 25.0 / 12.0];
    let last = nn - 1;
    match (order, deriv) {
        (2, 1) if i == 0 => (0, &L2_D1),
        (2, 1) if i == last => (last - 2, &R2_D1),
        (2, 1) => (i - 1, &C2_D1),
        (2, 2) => (i - 1, &C2_D2),
        (4, 1) if i == 0 => (0, &E0_D1),
        (4, 1) if i == last => (last - 4, &EN_D1),
        (4, 1) if i == 1 => (0, &N1_D1),
        (4, 1) if i == last - 1 => (last - 4, &M1_D1),
        (4, 1) => (i - 2, &C4_D1),
        (4, 2) if i == 1 => (0, &N1_D2),
        (4, 2) if i == last - 1 => (last - 5, &M1_D2),
        (4, 2) => (i - 2, &C4_D2),
        _ => panic!("unsupported stencil order {order} derivative {deriv}"),
    }
}

struct Row {
    entries: Vec<(usize, C64)>,
    dc: C64,
    res: C64,
}

struct Assembled {
    rows: Vec<Row>,
    /// Row dropped in the bordered case.
    held: Option<usize>,
}

fn assemble(model: &SystemModel, u: &[C64], c_speed: f64, h: f64, order: usize, i0: usize, free_c: bool, piv: &mut [Option<Vec<usize>>; 2]) -> Result<Assembled> {
    let n = model.n;
    let nn = u.len() / n;
    let mut rows = Vec::with_capacity(u.len() + 1);
    let mid = 0.5 * (model.u_minus[0] + model.u_plus[0]);
    let mut held = None;
    // ends: (node, plus?)
    let ends = [(0usize, false), (nn - 1, true)];
    let mut end_rows: [Vec<Row>; 2] = [Vec::new(), Vec::new()];
    for (e, &(node, plus)) in ends.iter().enumerate() {
        let (ls, p) = boundary_rows(model, plus, c_speed, piv[e].as_deref())?;
        if piv[e].is_none() {
            piv[e] = Some(p.clone());
        }
        let dls = if free_c {
            let eps = 1e-7;
            let (lp, _) = boundary_rows(model, plus, c_speed + eps, Some(&p))?;
            let (lm, _) = boundary_rows(model, plus, c_speed - eps, Some(&p))?;
            Some((lp, lm, eps))
        } else {
            None
        };
        let (s0, w) = stencil(order, 1, node, nn);
        let rest = model.rest_state(plus);
        let mut y = vec![c(0.0); 2 * n];
        for k in 0..n {
            y[k] = u[node * n + k] - rest[k];
            y[n + k] = w.iter().enumerate().map(|(j, wj)| u[(s0 + j) * n + k] * *wj).sum::<C64>() / h;
        }
        for (r, l) in ls.iter().enumerate() {
            let mut entries = Vec::new();
            for k in 0..n {
                entries.push((node * n + k, l[k]));
                for (j, wj) in w.iter().enumerate() {
                    entries.push(((s0 + j) * n + k, l[n + k] * *wj / h));
                }
            }
            let res: C64 = l.iter().zip(&y).map(|(a, b)| a * b).sum();
            let dc = match &dls {
                Some((lp, lm, eps)) => {
                    let rp: C64 = lp[r].iter().zip(&y).map(|(a, b)| a * b).sum();
                    let rm: C64 = lm[r].iter().zip(&y).map(|(a, b)| a * b).sum();
                    (rp - rm) / (2.0 * eps)
                }
                None => c(0.0),
            };
            end_rows[e].push(Row { entries, dc, res });
        }
    }
    rows.append(&mut end_rows[0]);
    let mut gv = vec![c(0.0); n];
    let mut fv = vec![c(0.0); n];
    for i in 1..nn - 1 {
        let (s1, w1) = stencil(order, 1, i, nn);
        let (s2, w2) = stencil(order, 2, i, nn);
        model.g.eval_into(&u[i * n..(i + 1) * n], &mut gv);
        let jg = model.g.jacobian(&u[i * n..(i + 1) * n]);
        let mut res = gv.clone();
        let mut dc = vec![c(0.0); n];
        let mut entries: Vec<Vec<(usize, C64)>> = vec![Vec::new(); n];
        for (j, wj) in w2.iter().enumerate() {
            let node = s2 + j;
            for k in 0..n {
                let v = model.d[k] * *wj / (h * h);
                res[k] += v * u[node * n + k];
                entries[k].push((node * n + k, v));
            }
        }
        for (j, wj) in w1.iter().enumerate() {
            if *wj == 0.0 {
                continue;
            }
            let node = s1 + j;
            let un = &u[node * n..(node + 1) * n];
            model.f.eval_into(un, &mut fv);
            let jf = model.f.jacobian(un);
            let s = *wj / h;
            for k in 0..n {
                res[k] += s * (fv[k] + c_speed * un[k]);
                dc[k] += s * un[k];
                for l in 0..n {
                    let mut v = jf[(k, l)] * s;
                    if k == l {
                        v += c_speed * s;
                    }
                    if v != c(0.0) {
                        entries[k].push((node * n + l, v));
                    }
                }
            }
        }
        for k in 0..n {
            for l in 0..n {
                if jg[(k, l)] != c(0.0) {
                    entries[k].push((i * n + l, jg[(k, l)]));
                }
            }
        }
        for k in 0..n {
            if free_c && i == i0 && k == 0 {
                held = Some(rows.len());
            }
            rows.push(Row { entries: std::mem::take(&mut entries[k]), dc: dc[k], res: res[k] });
        }
        if i == i0 {
            rows.push(Row { entries: vec![(i0 * n, c(1.0))], dc: c(0.0), res: u[i0 * n] - mid });
        }
    }
    rows.append(&mut end_rows[1]);
    Ok(Assembled { rows, held })
}

fn banded_from_rows(rows: &[&Row], dim: usize) -> Result<Banded> {
    let (mut kl, mut ku) = (0usize, 0usize);
    for (r, row) in rows.iter().enumerate() {
        for &(col, _) in &row.entries {
            if col < r {
                kl = kl.max(r - col);
            } else {
                ku = ku.max(col - r);
            }
        }
    }
    let mut b = Banded::new(dim, kl, ku);
    for (r, row) in rows.iter().enumerate() {
        for &(col, v) in &row.entries {
            b.add(r, col, v);
        }
    }
    b.factor()?;
    Ok(b)
}

fn max_res(a: &Assembled) -> f64 {
    a.rows.iter().map(|r| r.res.norm()).fold(0.0, f64::max)
}

/// Counts of (stable at -L, unstable at +L) spatial rates.
pub fn boundary_counts(model: &SystemModel, c_speed: f64) -> Result<(usize, usize)> {
    let sm = spatial_rates(model, false, c_speed)?.iter().filter(|z| z.re < 0.0).count();
    let up = spatial_rates(model, true, c_speed)?.iter().filter(|z| z.re > 0.0).count();
    Ok((sm, up))
}

/// Newton solve of the profile equation on [-L, L] with projective boundary
/// conditions and the pin `u_1(0) = (U_minus + U_plus)_1 / 2`. The speed
/// becomes an unknown when the boundary counts describe a bistable front.
pub fn solve_profile(model: &SystemModel, c_speed: f64, l: f64, h: f64, guess: &dyn Fn(f64) -> Vec<C64>, opts: SolveOptions) -> Result<WaveProfile> {
    model.validate()?;
    if !(c_speed > 0.0) {
        return invalid("speed must be positive");
    }
    if opts.order != 2 && opts.order != 4 {
        return invalid("finite-difference order must be 2 or 4");
    }
    let xs = uniform_grid(l, h)?;
    let h = xs[1] - xs[0];
    let n = model.n;
    let nn = xs.len();
    let i0 = nn / 2;
    let jump: f64 = model.u_minus.iter().zip(&model.u_plus).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    if model.u_minus[0] == model.u_plus[0] {
        return invalid("first component must differ between rest states for the pin");
    }
    let (g0, gl) = (guess(xs[0]), guess(xs[nn - 1]));
    let connect = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    if connect(&g0, &model.u_minus) > 0.1 * jump || connect(&gl, &model.u_plus) > 0.1 * jump {
        return invalid("initial guess does not connect U_minus to U_plus");
    }
    let (sm, up) = boundary_counts(model, c_speed)?;
    let free_c = match sm + up {
        s if s + 1 == 2 * n => false,
        s if s == 2 * n => true,
        _ => return Err(Error::Assumption(format!("boundary counts {sm}+{up} do not match 2n-1 or 2n for n={n}"))),
    };
    let mut u: Vec<C64> = xs.iter().flat_map(|&x| guess(x)).collect();
    let mut cs = c_speed;
    let mut piv: [Option<Vec<usize>>; 2] = [None, None];
    let mut asm = assemble(model, &u, cs, h, opts.order, i0, free_c, &mut piv)?;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let r0 = max_res(&asm);
        let (delta, dcs) = newton_step(&asm, u.len(), free_c)?;
        let step_norm = delta.iter().map(|z| z.norm()).fold(dcs.norm(), f64::max);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let trial: Vec<C64> = u.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
            let tc = cs + t * dcs.re;
            if let Ok(a) = assemble(model, &trial, tc, h, opts.order, i0, free_c, &mut piv) {
                if max_res(&a) < r0 || r0 < opts.tol {
                    accepted = Some((trial, tc, a));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((nu, nc, na)) = accepted else {
            return numerical(format!("profile Newton line search failed at residual {r0:.3e}"));
        };
        u = nu;
        cs = nc;
        asm = na;
        if max_res(&asm) < opts.tol && step_norm < 1e-6 {
            converged = true;
            break;
        }
    }
    if !converged {
        return numerical(format!("profile Newton did not converge in {} iterations (residual {:.3e})", opts.max_iter, max_res(&asm)));
    }
    if connect(&u[0..n], &model.u_minus) > 1e-3 * jump.max(1.0) || connect(&u[(nn - 1) * n..], &model.u_plus) > 1e-3 * jump.max(1.0) {
        return Err(Error::Assumption("converged profile does not connect the rest states".into()));
    }
    let mut derivative = vec![c(0.0); u.len()];
    for i in 0..nn {
        let (s, w) = stencil(opts.order, 1, i, nn);
        for k in 0..n {
            derivative[i * n + k] = w.iter().enumerate().map(|(j, wj)| u[(s + j) * n + k] * *wj).sum::<C64>() / h;
        }
    }
    let second = second_from_ode(model, cs, &u, &derivative);
    let mut prof = WaveProfile {
        n,
        xs,
        h,
        values: u,
        derivative,
        second,
        c: cs,
        kappa: 0.0,
        xi0: 0.0,
        v: vec![c(0.0); 2 * n],
        source: ProfileSource::Grid,
        u_minus: model.u_minus.clone(),
        u_plus: model.u_plus.clone(),
    };
    attach_tail_data(model, &mut prof);
    Ok(prof)
}

fn newton_step(asm: &Assembled, dim: usize, free_c: bool) -> Result<(Vec<C64>, C64)> {
    if !free_c {
        let rows: Vec<&Row> = asm.rows.iter().collect();
        let b = banded_from_rows(&rows, dim)?;
        let mut rhs: Vec<C64> = rows.iter().map(|r| -r.res).collect();
        b.solve(&mut rhs);
        return Ok((rhs, c(0.0)));
    }
    let q = asm.held.expect("held row");
    let rows: Vec<&Row> = asm.rows.iter().enumerate().filter(|(i, _)| *i != q).map(|(_, r)| r).collect();
    let b = banded_from_rows(&rows, dim)?;
    let mut z1: Vec<C64> = rows.iter().map(|r| -r.res).collect();
    let mut z2: Vec<C64> = rows.iter().map(|r| r.dc).collect();
    b.solve(&mut z1);
    b.solve(&mut z2);
    let hr = &asm.rows[q];
    let qz1: C64 = hr.entries.iter().map(|&(j, v)| v * z1[j]).sum();
    let qz2: C64 = hr.entries.iter().map(|&(j, v)| v * z2[j]).sum();
    let denom = hr.dc - qz2;
    if denom.norm() < 1e-300 {
        return numerical("singular bordered system in profile Newton");
    }
    let dc = (-hr.res - qz1) / denom;
    let delta = z1.iter().zip(&z2).map(|(a, b)| a - b * dc).collect();
    Ok((delta, dc))
}

/// u'' from the profile equation `d u'' = -(c u' + Jf(u) u' + g(u))`.
pub fn second_from_ode(model: &SystemModel, c_speed: f64, u: &[C64], du: &[C64]) -> Vec<C64> {
    let n = model.n;
    let mut out = vec![c(0.0); u.len()];
    let mut gv = vec![c(0.0); n];
    for i in 0..u.len() / n {
        let ui = &u[i * n..(i + 1) * n];
        let dui = &du[i * n..(i + 1) * n];
        model.g.eval_into(ui, &mut gv);
        let jf = model.f.jacobian(ui);
        for k in 0..n {
            let mut s = c_speed * dui[k] + gv[k];
            for l in 0..n {
                s += jf[(k, l)] * dui[l];
            }
            out[i * n + k] = -s / model.d[k];
        }
    }
    out
}

/// Weak stable rate `-kappa + i xi0` of the linearization at U_plus.
pub fn weak_stable_rate(model: &SystemModel, c_speed: f64) -> Result<C64> {
    let rates = spatial_rates(model, true, c_speed)?;
    rates
        .into_iter()
        .filter(|z| z.re < 0.0)
        .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap())
        .ok_or_else(|| Error::Assumption("no stable spatial rate at U_plus".into()))
}

fn attach_tail_data(model: &SystemModel, prof: &mut WaveProfile) {
    if let Ok(w) = weak_stable_rate(model, prof.c) {
        prof.kappa = -w.re;
        prof.xi0 = w.im;
    }
    if let Ok(fit) = asymptotic_fit(prof, model) {
        prof.v = fit.v;
    }
}

/// Profile sampled from a closed-form front, translated by `shift`.
pub fn closed_form(model: &SystemModel, shift: f64, l: f64, h: f64) -> Result<WaveProfile> {
    let front = model.exact.ok_or_else(|| Error::InvalidInput(format!("model '{}' has no closed-form front", model.name)))?;
    let xs = uniform_grid(l, h)?;
    let h = xs[1] - xs[0];
    let n = model.n;
    let mut values = Vec::with_capacity(xs.len() * n);
    let mut derivative = Vec::with_capacity(xs.len() * n);
    let mut second = Vec::with_capacity(xs.len() * n);
    for &x in &xs {
        let (a, b, cc) = front.eval(x - shift);
        values.extend(a);
        derivative.extend(b);
        second.extend(cc);
    }
    let mut prof = WaveProfile {
        n,
        xs,
        h,
        values,
        derivative,
        second,
        c: model.c,
        kappa: 0.0,
        xi0: 0.0,
        v: vec![c(0.0); 2 * n],
        source: ProfileSource::Exact { front, shift },
        u_minus: model.u_minus.clone(),
        u_plus: model.u_plus.clone(),
    };
    attach_tail_data(model, &mut prof);
    Ok(prof)
}

/// Smooth monotone guess `U_plus + (U_minus - U_plus)(1 - tanh(x/2))/2`.
pub fn tanh_guess(model: &SystemModel, shift: f64) -> impl Fn(f64) -> Vec<C64> + '_ {
    move |x| {
        let s = 0.5 * (1.0 - ((x - shift) / 2.0).tanh());
        model.u_minus.iter().zip(&model.u_plus).map(|(a, b)| b + (a - b) * s).collect()
    }
}

/// Max-norm of `-c u' - d u'' - (f(u))' - g(u)` on interior nodes using
/// fourth-order central differences of the stored values.
pub fn profile_residual(profile: &WaveProfile, model: &SystemModel) -> f64 {
    let n = profile.n;
    let nn = profile.len();
    let h = profile.h;
    let mut fvals = vec![c(0.0); nn * n];
    for i in 0..nn {
        model.f.eval_into(profile.at(i), &mut fvals[i * n..(i + 1) * n]);
    }
    let mut worst: f64 = 0.0;
    let mut gv = vec![c(0.0); n];
    for i in 2..nn.saturating_sub(2) {
        model.g.eval_into(profile.at(i), &mut gv);
        for k in 0..n {
            let at = |j: usize| profile.values[j * n + k];
            let fa = |j: usize| fvals[j * n + k];
            let d1 = (at(i - 2) - 8.0 * at(i - 1) + 8.0 * at(i + 1) - at(i + 2)) / (12.0 * h);
            let d2 = (-at(i - 2) + 16.0 * at(i - 1) - 30.0 * at(i) + 16.0 * at(i + 1) - at(i + 2)) / (12.0 * h * h);
            let df = (fa(i - 2) - 8.0 * fa(i - 1) + 8.0 * fa(i + 1) - fa(i + 2)) / (12.0 * h);
            let r = -profile.c * d1 - model.d[k] * d2 - df - gv[k];
            worst = worst.max(r.norm());
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct AsymptoticFit {
    pub kappa: f64,
    pub xi0: f64,
    pub v: Vec<C64>,
    pub generic: bool,
    /// Weak stable rate of the linearization at U_plus.
    pub weak_rate: C64,
    /// Fit suggests a polynomial prefactor (e.g. a double spatial root).
    pub polynomial_prefactor: bool,
    pub window: (f64, f64),
}

/// Log-linear fit of |(u - U_plus, u')| on [L/2, L-5], shrunk on the right to
/// stay above underflow.
pub fn asymptotic_fit(profile: &WaveProfile, model: &SystemModel) -> Result<AsymptoticFit> {
    let n = profile.n;
    let l = profile.l();
    let tail_vec = |i: usize| -> Vec<C64> {
        let mut y: Vec<C64> = profile.at(i).iter().zip(&profile.u_plus).map(|(a, b)| a - b).collect();
        y.extend_from_slice(profile.deriv_at(i));
        y
    };
    let norm = |y: &[C64]| y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let (lo, hi) = (0.5 * l, l - 5.0);
    let idx: Vec<usize> = (0..profile.len()).filter(|&i| profile.xs[i] >= lo && profile.xs[i] <= hi).collect();
    if idx.is_empty() {
        return invalid("fit window is empty");
    }
    if norm(&tail_vec(idx[0])) > 1e-3 {
        return invalid("profile is not near U_plus on the fit window");
    }
    let floor = 1e-12;
    let usable: Vec<usize> = idx.iter().cloned().take_while(|&i| norm(&tail_vec(i)) > floor).collect();
    if usable.len() < 20 || profile.xs[*usable.last().unwrap()] - profile.xs[usable[0]] < 2.0 {
        return numerical("fit window underflows (tail below 1e-12)");
    }
    let xs: Vec<f64> = usable.iter().map(|&i| profile.xs[i]).collect();
    let logs: Vec<f64> = usable.iter().map(|&i| norm(&tail_vec(i)).ln()).collect();
    let (_, slope) = fit_line(&xs, &logs);
    let kappa = -slope;
    // phase slope from the dominant component
    let k_dom = (0..n)
        .max_by(|&a, &b| (profile.at(usable[0])[a] - profile.u_plus[a]).norm().partial_cmp(&(profile.at(usable[0])[b] - profile.u_plus[b]).norm()).unwrap())
        .unwrap();
    let mut phases = Vec::with_capacity(usable.len());
    let mut last = 0.0;
    for (j, &i) in usable.iter().enumerate() {
        let z = profile.at(i)[k_dom] - profile.u_plus[k_dom];
        let mut p = z.arg();
        if j > 0 {
            while p - last > std::f64::consts::PI {
                p -= 2.0 * std::f64::consts::PI;
            }
            while p - last < -std::f64::consts::PI {
                p += 2.0 * std::f64::consts::PI;
            }
        }
        last = p;
        phases.push(p);
    }
    let (_, xi0) = fit_line(&xs, &phases);
    let rate = C64::new(-kappa, xi0);
    let mut v = vec![c(0.0); 2 * n];
    for &i in &usable {
        let w = (-rate * profile.xs[i]).exp();
        for (vk, yk) in v.iter_mut().zip(tail_vec(i)) {
            *vk += yk * w;
        }
    }
    v.iter_mut().for_each(|z| *z /= usable.len() as f64);
    // residual and prefactor diagnostics
    let (a, b) = fit_line(&xs, &logs);
    let resid = xs.iter().zip(&logs).map(|(x, y)| (y - a - b * x).abs()).fold(0.0, f64::max);
    if resid > 0.5 {
        return numerical(format!("oscillatory tail: log-linear fit residual {resid:.3}"));
    }
    let polynomial_prefactor = resid > 0.05;
    let weak = weak_stable_rate(model, profile.c)?;
    let generic = ((kappa + weak.re) / weak.re).abs() < 0.02;
    Ok(AsymptoticFit { kappa, xi0, v, generic, weak_rate: weak, polynomial_prefactor, window: (xs[0], *xs.last().unwrap()) })
}
