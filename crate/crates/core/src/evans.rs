//! Stabilized solution frames of the first-order eigenvalue system, the
//! Evans function, winding numbers and the spatial Jordan scan.

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{c, inverse, CMat, C64};
use crate::operator::WeightedOperator;
use crate::spectrum::{min_pair_distance, normalize_analytic, side_roots, LambdaRegion, Symbols};

// ---------------------------------------------------------------------------
// Coefficient table

/// `P = -l2^{-1} l0(x)` and `Q = -l2^{-1} l1(x)` tabulated between the cut
/// points, with the constant limits outside.
#[derive(Debug, Clone)]
pub struct CoeffTable {
    pub n: usize,
    x0: f64,
    hx: f64,
    len: usize,
    p: Vec<C64>,
    q: Vec<C64>,
    l2_inv: Vec<C64>,
    p_lim: [Vec<C64>; 2],
    q_lim: [Vec<C64>; 2],
    pub cut_minus: f64,
    pub cut_plus: f64,
    breaks: Vec<usize>,
}

fn flat(m: &CMat) -> Vec<C64> {
    // column-major, as stored by nalgebra
    m.as_slice().to_vec()
}

impl CoeffTable {
    pub fn new(op: &WeightedOperator, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return invalid("table spacing must be positive");
        }
        let n = op.n();
        let li = op.l2_inv().clone();
        let lo = (op.x_cut_minus / spacing).floor() * spacing;
        let hi = (op.x_cut_plus / spacing).ceil() * spacing;
        let len = ((hi - lo) / spacing).round() as usize + 1;
        let mut p = Vec::with_capacity(len * n * n);
        let mut q = Vec::with_capacity(len * n * n);
        for i in 0..len {
            let k = op.coeffs(lo + i as f64 * spacing);
            p.extend(flat(&(-(&li * &k.l0))));
            q.extend(flat(&(-(&li * &k.l1))));
        }
        let lim = |plus: bool| {
            let k = op.limit(plus);
            (flat(&(-(&li * &k.l0))), flat(&(-(&li * &k.l1))))
        };
        let (pm, qm) = lim(false);
        let (pp, qp) = lim(true);
        // The weight ramp is only C^2 at x = -1 and 1; stencils do not cross them.
        let breaks = [-1.0f64, 1.0]
            .iter()
            .filter(|&&b| b > lo && b < hi)
            .map(|&b| ((b - lo) / spacing).round() as usize)
            .collect();
        Ok(Self {
            n,
            x0: lo,
            hx: spacing,
            len,
            p,
            q,
            l2_inv: flat(&li),
            p_lim: [pm, pp],
            q_lim: [qm, qp],
            cut_minus: op.x_cut_minus,
            cut_plus: op.x_cut_plus,
            breaks,
        })
    }

    /// Writes P(x) and Q(x) (column-major n x n).
    pub fn pq_into(&self, x: f64, p: &mut [C64], q: &mut [C64]) {
        let nn = self.n * self.n;
        if x >= self.cut_plus || x <= self.cut_minus {
            let s = usize::from(x >= self.cut_plus);
            p.copy_from_slice(&self.p_lim[s]);
            q.copy_from_slice(&self.q_lim[s]);
            return;
        }
        let t = (x - self.x0) / self.hx;
        let i = (t.floor() as usize).min(self.len - 2);
        let mut s = i.saturating_sub(1);
        if self.breaks.contains(&i) {
            s = i;
        } else if self.breaks.contains(&(i + 1)) {
            s = i.saturating_sub(2);
        }
        let s = s.min(self.len - 4);
        let u = t - s as f64;
        // Cubic Lagrange weights on nodes s..s+3.
        let w = [
            -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0,
            u * (u - 2.0) * (u - 3.0) / 2.0,
            -u * (u - 1.0) * (u - 3.0) / 2.0,
            u * (u - 1.0) * (u - 2.0) / 6.0,
        ];
        for e in 0..nn {
            let mut ap = c(0.0);
            let mut aq = c(0.0);
            for (k, wk) in w.iter().enumerate() {
                ap += self.p[(s + k) * nn + e] * wk;
                aq += self.q[(s + k) * nn + e] * wk;
            }
            p[e] = ap;
            q[e] = aq;
        }
    }
}

// ---------------------------------------------------------------------------
// Flat Dormand-Prince for Y' = A(lambda, x) Y

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct FrameOptions {
    /// Spacing of the storage (re-orthonormalization) nodes.
    pub dx: f64,
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    /// Spacing of the coefficient table.
    pub table_dx: f64,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self { dx: 0.05, rtol: 1e-10, atol: 1e-10, h_max: 0.05, table_dx: 0.005 }
    }
}

/// `Y' = A(lambda, x) Y` for a 2n x m column-major block.
pub struct FlatSystem<'a> {
    pub table: &'a CoeffTable,
    pub lambda: C64,
    p: Vec<C64>,
    q: Vec<C64>,
}

impl<'a> FlatSystem<'a> {
    pub fn new(table: &'a CoeffTable, lambda: C64) -> Self {
        let nn = table.n * table.n;
        Self { table, lambda, p: vec![c(0.0); nn], q: vec![c(0.0); nn] }
    }

    fn rhs(&mut self, x: f64, y: &[C64], m: usize, out: &mut [C64]) {
        let n = self.table.n;
        self.table.pq_into(x, &mut self.p, &mut self.q);
        let li = &self.table.l2_inv;
        let lam = self.lambda;
        for col in 0..m {
            let yc = &y[col * 2 * n..(col + 1) * 2 * n];
            let oc = &mut out[col * 2 * n..(col + 1) * 2 * n];
            for r in 0..n {
                oc[r] = yc[n + r];
                let mut acc = c(0.0);
                for k in 0..n {
                    acc += (self.p[k * n + r] + lam * li[k * n + r]) * yc[k] + self.q[k * n + r] * yc[n + k];
                }
                oc[n + r] = acc;
            }
        }
    }
}

/// Reusable stage buffers.
pub struct Dopri {
    k: Vec<Vec<C64>>,
    tmp: Vec<C64>,
    y5: Vec<C64>,
    fsal: bool,
}

impl Dopri {
    pub fn new(size: usize) -> Self {
        Self { k: vec![vec![c(0.0); size]; 7], tmp: vec![c(0.0); size], y5: vec![c(0.0); size], fsal: false }
    }

    /// Advances `y` from `x0` to `x1` (either direction); `h` carries the step.
    pub fn integrate(&mut self, sys: &mut FlatSystem, m: usize, x0: f64, x1: f64, y: &mut [C64], h: &mut f64, opts: &FrameOptions) -> Result<()> {
        let size = y.len();
        let dir = if x1 >= x0 { 1.0 } else { -1.0 };
        let span = (x1 - x0).abs();
        let mut x = x0;
        let mut step = if *h > 0.0 { h.min(opts.h_max) } else { opts.h_max };
        self.fsal = false;
        let mut guard = 0usize;
        while (x1 - x) * dir > 1e-13 * span.max(1.0) {
            guard += 1;
            if guard > 1_000_000 {
                return numerical("frame integration exceeded the step budget");
            }
            let hs = step.min((x1 - x).abs());
            let hd = hs * dir;
            if !self.fsal {
                let (k0, _) = self.k.split_at_mut(1);
                sys.rhs(x, y, m, &mut k0[0]);
            }
            for s in 1..7 {
                for i in 0..size {
                    let mut acc = y[i];
                    for j in 0..s {
                        let a = DP_A[s][j];
                        if a != 0.0 {
                            acc += self.k[j][i] * (a * hd);
                        }
                    }
                    self.tmp[i] = acc;
                }
                let (_, rest) = self.k.split_at_mut(s);
                sys.rhs(x + DP_C[s] * hd, &self.tmp, m, &mut rest[0]);
            }
            let mut err: f64 = 0.0;
            for i in 0..size {
                let mut y5 = y[i];
                let mut e = c(0.0);
                for s in 0..7 {
                    if DP_B5[s] != 0.0 {
                        y5 += self.k[s][i] * (DP_B5[s] * hd);
                    }
                    if DP_E[s] != 0.0 {
                        e += self.k[s][i] * (DP_E[s] * hd);
                    }
                }
                self.y5[i] = y5;
                let sc = opts.atol + opts.rtol * y[i].norm().max(y5.norm());
                err = err.max(e.norm() / sc);
            }
            if !err.is_finite() {
                return numerical("non-finite values in frame integration");
            }
            if err <= 1.0 {
                x += hd;
                y.copy_from_slice(&self.y5);
                self.k.swap(0, 6);
                self.fsal = true;
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                *h = hs;
                step = (hs * fac).min(opts.h_max);
            } else {
                self.fsal = true;
                // k[0] still holds f(x, y).
                step = hs * (0.9 * err.powf(-0.2)).max(0.2);
                if step < 1e-12 {
                    return numerical("frame step size underflow");
                }
            }
        }
        Ok(())
    }
}

/// Modified Gram-Schmidt (two passes) on a 2n x m column-major block.
/// Returns R (m x m, column-major) with positive real diagonal.
fn qr_flat(y: &mut [C64], rows: usize, m: usize, r: &mut [C64]) -> Result<()> {
    r.iter_mut().for_each(|z| *z = c(0.0));
    for j in 0..m {
        for _ in 0..2 {
            for k in 0..j {
                let mut dot = c(0.0);
                for i in 0..rows {
                    dot += y[k * rows + i].conj() * y[j * rows + i];
                }
                for i in 0..rows {
                    let qk = y[k * rows + i];
                    y[j * rows + i] -= dot * qk;
                }
                r[j * m + k] += dot;
            }
        }
        let norm = (0..rows).map(|i| y[j * rows + i].norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return numerical(format!("frame column {j} collapsed"));
        }
        for i in 0..rows {
            y[j * rows + i] /= norm;
        }
        r[j * m + j] = c(norm);
    }
    Ok(())
}

/// Inverse of an upper triangular column-major m x m block.
fn upper_inv_flat(r: &[C64], m: usize, out: &mut [C64]) {
    out.iter_mut().for_each(|z| *z = c(0.0));
    for j in 0..m {
        out[j * m + j] = c(1.0) / r[j * m + j];
        for i in (0..j).rev() {
            let mut s = c(0.0);
            for k in i + 1..=j {
                s += r[k * m + i] * out[j * m + k];
            }
            out[j * m + i] = -s / r[i * m + i];
        }
    }
}

// ---------------------------------------------------------------------------
// Frames

/// Which parts of the line to integrate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameSpan {
    /// Phi+ on [0, x_hi], Phi- on [x_lo, 0].
    Evans,
    /// Both frames on the whole node grid.
    Full,
}

/// QR-stabilized frames on the node grid `x_k = x_lo + k dx`. With
/// `Phi(x_k) = Q_k T_k`, side + has `T_k = R_k T_{k+1}` and side - has
/// `T_{k+1} = R_{k+1} T_k`; `log det T_k` is kept in `cum_*`.
#[derive(Debug, Clone)]
pub struct BasisBundle {
    pub lambda: C64,
    pub n: usize,
    pub x_lo: f64,
    pub dx: f64,
    pub len: usize,
    /// Node index of x = 0.
    pub k0: usize,
    pub span: FrameSpan,
    /// Seeding roots: the n stable roots on side + and n unstable on side -.
    pub nu_plus: Vec<C64>,
    pub nu_minus: Vec<C64>,
    /// Q blocks (2n x n column-major) per node; empty where not integrated.
    pub q_plus: Vec<C64>,
    pub q_minus: Vec<C64>,
    /// Inverses of the R factors (n x n).
    pub r_plus_inv: Vec<C64>,
    pub r_minus_inv: Vec<C64>,
    pub cum_plus: Vec<f64>,
    pub cum_minus: Vec<f64>,
    /// First n columns of `[Q+ Q-]^{-1} S^{-1}` per node (Full span only).
    pub h_cols: Vec<C64>,
}

impl BasisBundle {
    pub fn x(&self, k: usize) -> f64 {
        self.x_lo + k as f64 * self.dx
    }

    pub fn x_hi(&self) -> f64 {
        self.x(self.len - 1)
    }

    pub fn node(&self, x: f64) -> usize {
        (((x - self.x_lo) / self.dx).round().max(0.0) as usize).min(self.len - 1)
    }

    fn block(&self, v: &[C64], k: usize, rows: usize) -> CMat {
        let n = self.n;
        CMat::from_column_slice(rows, n, &v[k * rows * n..(k + 1) * rows * n])
    }

    pub fn q(&self, plus: bool, k: usize) -> CMat {
        self.block(if plus { &self.q_plus } else { &self.q_minus }, k, 2 * self.n)
    }

    pub fn r_inv(&self, plus: bool, k: usize) -> CMat {
        self.block(if plus { &self.r_plus_inv } else { &self.r_minus_inv }, k, self.n)
    }

    pub fn h(&self, k: usize) -> CMat {
        self.block(&self.h_cols, k, 2 * self.n)
    }

    /// `[Q+ Q-]` at node k.
    pub fn frame(&self, k: usize) -> CMat {
        let n = self.n;
        let mut w = CMat::zeros(2 * n, 2 * n);
        w.view_mut((0, 0), (2 * n, n)).copy_from(&self.q(true, k));
        w.view_mut((0, n), (2 * n, n)).copy_from(&self.q(false, k));
        w
    }

    pub fn has_plus(&self, k: usize) -> bool {
        self.span == FrameSpan::Full || k >= self.k0
    }

    pub fn has_minus(&self, k: usize) -> bool {
        self.span == FrameSpan::Full || k <= self.k0
    }

    /// `T_i T_j^{-1}` for side + (i >= j) or side - (i <= j).
    pub fn transfer(&self, plus: bool, i: usize, j: usize) -> CMat {
        let n = self.n;
        let mut m = CMat::identity(n, n);
        if plus {
            // R_{i-1}^{-1} ... R_j^{-1}
            for k in j..i {
                m = self.r_inv(true, k) * m;
            }
        } else {
            // R_{i+1}^{-1} ... R_j^{-1}
            for k in (i + 1..=j).rev() {
                m = self.r_inv(false, k) * m;
            }
        }
        m
    }

    /// Exponential growth fit `log|Phi col|` per unit x on nodes in [a, b]
    /// (sum over the frame, i.e. the trace of the rates).
    pub fn growth_rate(&self, plus: bool, a: f64, b: f64) -> f64 {
        let cum = if plus { &self.cum_plus } else { &self.cum_minus };
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..self.len)
            .filter(|&k| {
                let x = self.x(k);
                x >= a && x <= b && if plus { self.has_plus(k) } else { self.has_minus(k) }
            })
            .map(|k| (self.x(k), cum[k]))
            .unzip();
        crate::linalg::fit_line(&xs, &ys).1
    }
}

/// Seed block `(v, nu v)` columns for the given roots.
fn seed(sym: &Symbols, plus: bool, lambda: C64, roots: &[C64]) -> Result<Vec<C64>> {
    let n = sym.n;
    let mut y = vec![c(0.0); 2 * n * roots.len()];
    for (j, &nu) in roots.iter().enumerate() {
        let v = if n == 1 {
            crate::linalg::CVec::from_element(1, c(1.0))
        } else {
            let np = crate::linalg::null_pair(&sym.pencil(plus, lambda, nu))?;
            normalize_analytic(np.right)
        };
        for r in 0..n {
            y[j * 2 * n + r] = v[r];
            y[j * 2 * n + n + r] = nu * v[r];
        }
    }
    Ok(y)
}

/// Splits the side roots into the frame sets: side + gives the n smallest
/// real parts, side - the n largest. Fails when the sets are not separated.
pub fn frame_roots(sym: &Symbols, lambda: C64, prev: Option<(&[C64], &[C64])>) -> Result<(Vec<C64>, Vec<C64>)> {
    let n = sym.n;
    let rp = side_roots(sym, true, lambda, None)?;
    let rm = side_roots(sym, false, lambda, None)?;
    if rp[n - 1].re >= rp[n].re - 1e-12 || rm[n - 1].re >= rm[n].re - 1e-12 {
        return Err(Error::Numerical(format!("spatial eigenvalues not separated at lambda = {lambda}")));
    }
    let mut sp: Vec<C64> = rp[..n].to_vec();
    let mut sm: Vec<C64> = rm[n..].to_vec();
    if let Some((pp, pm)) = prev {
        sp = crate::spectrum::match_to(pp, sp);
        sm = crate::spectrum::match_to(pm, sm);
    }
    Ok((sp, sm))
}

/// Engine holding the operator data needed for many lambda evaluations.
#[derive(Debug, Clone)]
pub struct FrameEngine {
    pub table: CoeffTable,
    pub sym: Symbols,
    pub opts: FrameOptions,
    /// Interval that must be covered by Full frames.
    pub lo: f64,
    pub hi: f64,
    /// `-l2^{-1}` (the lower block of the first n columns of S^{-1}).
    neg_l2_inv: CMat,
}

impl FrameEngine {
    pub fn new(op: &WeightedOperator, opts: FrameOptions) -> Result<Self> {
        let table = CoeffTable::new(op, opts.table_dx)?;
        let sym = Symbols::from_operator(op);
        Ok(Self { lo: op.x_cut_minus, hi: op.x_cut_plus, neg_l2_inv: -op.l2_inv().clone(), table, sym, opts })
    }

    /// Widens the covered interval.
    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.lo = self.lo.min(lo);
        self.hi = self.hi.max(hi);
        self
    }

    pub fn n(&self) -> usize {
        self.sym.n
    }

    pub fn node_grid(&self) -> (f64, usize, usize) {
        let dx = self.opts.dx;
        let lo = -(-self.lo / dx).ceil() * dx;
        let hi = (self.hi / dx).ceil() * dx;
        let k0 = (-lo / dx).round() as usize;
        let len = ((hi - lo) / dx).round() as usize + 1;
        (lo, len, k0)
    }

    pub fn frames(&self, lambda: C64, span: FrameSpan, prev: Option<(&[C64], &[C64])>) -> Result<BasisBundle> {
        let (nu_plus, nu_minus) = frame_roots(&self.sym, lambda, prev)?;
        self.frames_with(lambda, span, nu_plus, nu_minus)
    }

    pub fn frames_with(&self, lambda: C64, span: FrameSpan, nu_plus: Vec<C64>, nu_minus: Vec<C64>) -> Result<BasisBundle> {
        let n = self.n();
        let (x_lo, len, k0) = self.node_grid();
        let dx = self.opts.dx;
        let xk = |k: usize| x_lo + k as f64 * dx;
        let nu_max = nu_plus.iter().chain(nu_minus.iter()).map(|z| z.norm()).fold(1.0, f64::max);
        let mut opts = self.opts;
        opts.h_max = opts.h_max.min(0.5 / nu_max);
        let bs = 2 * n * n;
        let mut q_plus = vec![c(0.0); len * bs];
        let mut q_minus = vec![c(0.0); len * bs];
        let mut r_plus_inv = vec![c(0.0); len * n * n];
        let mut r_minus_inv = vec![c(0.0); len * n * n];
        let mut cum_plus = vec![0.0; len];
        let mut cum_minus = vec![0.0; len];
        let mut sys = FlatSystem::new(&self.table, lambda);
        let mut ode = Dopri::new(bs);
        let mut r = vec![c(0.0); n * n];
        let mut ri = vec![c(0.0); n * n];
        let logdiag = |r: &[C64]| (0..n).map(|j| r[j * n + j].re.ln()).sum::<f64>();

        // Side +: from x_hi downwards.
        let stop_plus = if span == FrameSpan::Full { 0 } else { k0 };
        let mut y = seed(&self.sym, true, lambda, &nu_plus)?;
        qr_flat(&mut y, 2 * n, n, &mut r)?;
        let top = len - 1;
        q_plus[top * bs..(top + 1) * bs].copy_from_slice(&y);
        cum_plus[top] = logdiag(&r);
        let mut h = 0.0;
        for k in (stop_plus..top).rev() {
            ode.integrate(&mut sys, n, xk(k + 1), xk(k), &mut y, &mut h, &opts)?;
            qr_flat(&mut y, 2 * n, n, &mut r)?;
            upper_inv_flat(&r, n, &mut ri);
            q_plus[k * bs..(k + 1) * bs].copy_from_slice(&y);
            r_plus_inv[k * n * n..(k + 1) * n * n].copy_from_slice(&ri);
            cum_plus[k] = cum_plus[k + 1] + logdiag(&r);
        }

        // Side -: from x_lo upwards.
        let stop_minus = if span == FrameSpan::Full { top } else { k0 };
        let mut y = seed(&self.sym, false, lambda, &nu_minus)?;
        qr_flat(&mut y, 2 * n, n, &mut r)?;
        q_minus[..bs].copy_from_slice(&y);
        cum_minus[0] = logdiag(&r);
        let mut h = 0.0;
        for k in 1..=stop_minus {
            ode.integrate(&mut sys, n, xk(k - 1), xk(k), &mut y, &mut h, &opts)?;
            qr_flat(&mut y, 2 * n, n, &mut r)?;
            upper_inv_flat(&r, n, &mut ri);
            q_minus[k * bs..(k + 1) * bs].copy_from_slice(&y);
            r_minus_inv[k * n * n..(k + 1) * n * n].copy_from_slice(&ri);
            cum_minus[k] = cum_minus[k - 1] + logdiag(&r);
        }

        let mut b = BasisBundle {
            lambda,
            n,
            x_lo,
            dx,
            len,
            k0,
            span,
            nu_plus,
            nu_minus,
            q_plus,
            q_minus,
            r_plus_inv,
            r_minus_inv,
            cum_plus,
            cum_minus,
            h_cols: Vec::new(),
        };
        if span == FrameSpan::Full {
            let mut h_cols = Vec::with_capacity(len * bs);
            let mut rhs = CMat::zeros(2 * n, n);
            rhs.view_mut((n, 0), (n, n)).copy_from(&self.neg_l2_inv);
            for k in 0..len {
                let w = b.frame(k);
                let hk = w.lu().solve(&rhs).ok_or_else(|| Error::Numerical(format!("singular frame at x = {:.3}", xk(k))))?;
                h_cols.extend_from_slice(hk.as_slice());
            }
            b.h_cols = h_cols;
        }
        Ok(b)
    }

    /// Evolves a 2n x m block from `x0` to `x1` without re-orthonormalization.
    pub fn evolve(&self, lambda: C64, y0: &CMat, x0: f64, x1: f64) -> Result<CMat> {
        let mut sys = FlatSystem::new(&self.table, lambda);
        let m = y0.ncols();
        let mut y = y0.as_slice().to_vec();
        let mut ode = Dopri::new(y.len());
        let mut h = 0.0;
        ode.integrate(&mut sys, m, x0, x1, &mut y, &mut h, &self.opts)?;
        Ok(CMat::from_column_slice(y0.nrows(), m, &y))
    }

    /// `A(lambda, x)` from the table.
    pub fn a_matrix(&self, lambda: C64, x: f64) -> CMat {
        let n = self.n();
        let mut p = vec![c(0.0); n * n];
        let mut q = vec![c(0.0); n * n];
        self.table.pq_into(x, &mut p, &mut q);
        let li = CMat::from_column_slice(n, n, &self.table.l2_inv);
        let mut a = CMat::zeros(2 * n, 2 * n);
        for i in 0..n {
            a[(i, n + i)] = c(1.0);
        }
        let pm = CMat::from_column_slice(n, n, &p) + li * lambda;
        a.view_mut((n, 0), (n, n)).copy_from(&pm);
        a.view_mut((n, n), (n, n)).copy_from(&CMat::from_column_slice(n, n, &q));
        a
    }

    pub fn evans(&self, lambda: C64, prev: Option<(&[C64], &[C64])>) -> Result<EvansValue> {
        let b = self.frames(lambda, FrameSpan::Evans, prev)?;
        Ok(evans_value(&b))
    }
}

// ---------------------------------------------------------------------------
// Evans function

#[derive(Debug, Clone)]
pub struct EvansValue {
    pub lambda: C64,
    pub log_abs: f64,
    /// arg E in (-pi, pi].
    pub arg: f64,
    pub nu_plus: Vec<C64>,
    pub nu_minus: Vec<C64>,
}

impl EvansValue {
    /// `E` scaled by `exp(-log_scale)`.
    pub fn scaled(&self, log_scale: f64) -> C64 {
        C64::from_polar((self.log_abs - log_scale).exp(), self.arg)
    }
}

/// `E = det[Phi+ Phi-](0)` with `Phi+_j ~ e^{nu_j x} (v_j, nu_j v_j)` at +infinity
/// and the analogue at -infinity; only the basis-independent zero set and
/// winding are meaningful.
pub fn evans_value(b: &BasisBundle) -> EvansValue {
    let k0 = b.k0;
    let d = crate::linalg::det(&b.frame(k0));
    let x_hi = b.x_hi();
    let ex: C64 = b.nu_plus.iter().map(|nu| nu * x_hi).sum::<C64>() + b.nu_minus.iter().map(|nu| nu * b.x_lo).sum::<C64>();
    let log_abs = d.norm().ln() + b.cum_plus[k0] + b.cum_minus[k0] + ex.re;
    let arg = C64::from_polar(1.0, d.arg() + ex.im).arg();
    EvansValue { lambda: b.lambda, log_abs, arg, nu_plus: b.nu_plus.clone(), nu_minus: b.nu_minus.clone() }
}

fn wrap(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    a - t * ((a + std::f64::consts::PI) / t).floor()
}

#[derive(Debug, Clone)]
pub struct WindingResult {
    pub count: i64,
    /// Accumulated phase / 2 pi before rounding.
    pub raw: f64,
    pub residual: f64,
    pub nodes: Vec<EvansValue>,
    pub min_log_abs: f64,
}

/// Accumulates the phase of E along a closed polygonal path (the last point
/// connects back to the first), refining segments whose phase increment
/// exceeds 0.5 rad or whose spatial roots move too far.
pub fn winding_number(engine: &FrameEngine, path: &[C64]) -> Result<WindingResult> {
    if path.len() < 3 {
        return invalid("contour needs at least three points");
    }
    let mut pts = path.to_vec();
    pts.push(path[0]);
    let first = engine.evans(pts[0], None)?;
    let mut nodes = vec![first.clone()];
    let mut total = 0.0;
    let mut cur = first.clone();
    for w in pts.windows(2) {
        // Depth-first refinement of the segment [w0, w1].
        let mut stack = vec![(w[1], 0usize)];
        let mut a = w[0];
        while let Some(&(b, depth)) = stack.last() {
            let prev = (cur.nu_plus.as_slice(), cur.nu_minus.as_slice());
            let val = engine.evans(b, Some(prev))?;
            let sep = min_pair_distance(&[cur.nu_plus.clone(), cur.nu_minus.clone()].concat()).max(1e-3);
            let moved = cur
                .nu_plus
                .iter()
                .zip(&val.nu_plus)
                .chain(cur.nu_minus.iter().zip(&val.nu_minus))
                .map(|(p, q)| (p - q).norm())
                .fold(0.0, f64::max);
            let inc = wrap(val.arg - cur.arg);
            if (inc.abs() > 0.5 || moved > 0.25 * sep) && depth < 14 {
                stack.push((0.5 * (a + b), depth + 1));
                continue;
            }
            if inc.abs() > 0.5 {
                return numerical(format!("unresolved Evans phase jump near lambda = {b}"));
            }
            total += inc;
            nodes.push(val.clone());
            cur = val;
            a = b;
            stack.pop();
        }
    }
    // Closing consistency: the frame roots must return to their labels.
    let last = nodes.last().unwrap();
    let drift = first
        .nu_plus
        .iter()
        .zip(&last.nu_plus)
        .chain(first.nu_minus.iter().zip(&last.nu_minus))
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max);
    if drift > 1e-6 {
        return numerical("spatial eigenvalue labels do not close along the contour (Jordan point enclosed?)");
    }
    let raw = total / std::f64::consts::TAU;
    let count = raw.round() as i64;
    let min_log_abs = nodes.iter().map(|v| v.log_abs).fold(f64::INFINITY, f64::min);
    Ok(WindingResult { count, raw, residual: (raw - count as f64).abs(), nodes, min_log_abs })
}

/// Counter-clockwise boundary of `Lambda_theta` cut to `|lambda| <= R`:
/// lower ray from -theta, arc, upper ray back.
pub fn region_contour(region: &LambdaRegion, ray_points: usize, arc_points: usize) -> Vec<C64> {
    let sm = region.s_max();
    let mut pts = Vec::with_capacity(2 * ray_points + arc_points);
    for k in 0..ray_points {
        let s = sm * k as f64 / ray_points as f64;
        pts.push(region.boundary_point(-s));
    }
    let end = region.boundary_point(-sm);
    let phi = end.arg().abs();
    for k in 0..arc_points {
        let a = -phi + 2.0 * phi * k as f64 / arc_points as f64;
        pts.push(C64::from_polar(region.radius, a));
    }
    for k in 0..ray_points {
        let s = sm * (1.0 - k as f64 / ray_points as f64);
        pts.push(region.boundary_point(s));
    }
    pts
}

pub fn circle_contour(center: C64, radius: f64, points: usize) -> Vec<C64> {
    (0..points).map(|k| center + C64::from_polar(radius, std::f64::consts::TAU * k as f64 / points as f64)).collect()
}

// ---------------------------------------------------------------------------
// Jordan scan

/// `prod_{i<j} (nu_i - nu_j)^2` over the roots of one side.
pub fn discriminant(sym: &Symbols, plus: bool, lambda: C64) -> Result<C64> {
    let r = side_roots(sym, plus, lambda, None)?;
    let mut d = c(1.0);
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            d *= (r[i] - r[j]) * (r[i] - r[j]);
        }
    }
    Ok(d)
}

#[derive(Debug, Clone)]
pub struct JordanPoint {
    pub lambda: C64,
    pub plus: bool,
    pub distance: f64,
}

/// Grid scan of `|disc|` on `[re0, re1] x [im0, im1]`, refined by Newton on
/// the (analytic) discriminant. Points with root distance below 1e-6 are kept.
pub fn jordan_scan(sym: &Symbols, re: (f64, f64), im: (f64, f64), cells: usize) -> Result<Vec<JordanPoint>> {
    let mut out: Vec<JordanPoint> = Vec::new();
    let cells = cells.max(4);
    for plus in [false, true] {
        let mut grid = vec![vec![0.0; cells + 1]; cells + 1];
        let at = |i: usize, j: usize| {
            C64::new(re.0 + (re.1 - re.0) * i as f64 / cells as f64, im.0 + (im.1 - im.0) * j as f64 / cells as f64)
        };
        for (i, row) in grid.iter_mut().enumerate() {
            for (j, g) in row.iter_mut().enumerate() {
                *g = discriminant(sym, plus, at(i, j))?.norm();
            }
        }
        for i in 0..=cells {
            for j in 0..=cells {
                let v = grid[i][j];
                let mut is_min = true;
                for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)] {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a >= 0 && b >= 0 && a <= cells as i64 && b <= cells as i64 && grid[a as usize][b as usize] < v {
                        is_min = false;
                    }
                }
                if !is_min {
                    continue;
                }
                // Newton on disc(lambda).
                let mut lam = at(i, j);
                let step = 1e-6 * (1.0 + lam.norm());
                for _ in 0..50 {
                    let f = discriminant(sym, plus, lam)?;
                    let df = (discriminant(sym, plus, lam + step)? - discriminant(sym, plus, lam - step)?) / (2.0 * step);
                    if df.norm() == 0.0 {
                        break;
                    }
                    let d = f / df;
                    lam -= d;
                    if d.norm() < 1e-14 * (1.0 + lam.norm()) {
                        break;
                    }
                }
                let roots = side_roots(sym, plus, lam, None)?;
                let distance = min_pair_distance(&roots);
                let inside = lam.re >= re.0 - 1e-9 && lam.re <= re.1 + 1e-9 && lam.im >= im.0 - 1e-9 && lam.im <= im.1 + 1e-9;
                if distance < 1e-6 && inside && !out.iter().any(|p| p.plus == plus && (p.lambda - lam).norm() < 1e-6) {
                    out.push(JordanPoint { lambda: lam, plus, distance });
                }
            }
        }
    }
    Ok(out)
}

/// Half the distance from 0 to the nearest Jordan point, searched in a box.
pub fn jordan_free_radius(points: &[JordanPoint], cap: f64) -> f64 {
    points.iter().map(|p| 0.5 * p.lambda.norm()).fold(cap, f64::min)
}

#[derive(Debug, Clone)]
pub struct RegionChoice {
    pub region: LambdaRegion,
    pub c_rate: f64,
    pub m: f64,
    pub halvings: usize,
    pub jordan: Vec<JordanPoint>,
    pub gap: crate::spectrum::GapCheck,
}

/// Halves theta from `theta0` until no Jordan point lies in the region and the
/// calibrated gap holds on the verification sample.
pub fn choose_region(sym: &Symbols, theta0: f64, radius: f64, max_halvings: usize) -> Result<RegionChoice> {
    let jordan = jordan_scan(sym, (-2.0 * radius.min(5.0), 1.0), (-radius.min(5.0), radius.min(5.0)), 60)?;
    let m = jordan_free_radius(&jordan, 1.0);
    let mut theta = theta0;
    for h in 0..=max_halvings {
        let region = LambdaRegion { theta, radius };
        let inside = jordan.iter().any(|p| region.contains(p.lambda) && p.lambda.norm() <= radius);
        if !inside {
            let cal = crate::spectrum::calibrate_rate(sym, &region, m, 2000)?;
            if cal.c_rate > 0.0 {
                let gap = crate::spectrum::check_gap(sym, &region, m, cal.c_rate, 200)?;
                if gap.violations == 0 {
                    return Ok(RegionChoice { region, c_rate: cal.c_rate, m, halvings: h, jordan, gap });
                }
            }
        }
        theta *= 0.5;
    }
    Err(Error::Assumption(format!("no admissible sector found down to theta = {:.3e}", theta * 2.0)))
}

/// Dual rows `(S(y) [Phi+ Phi-](y))^{-1}` at node k, in node coordinates.
pub fn dual_bases(engine: &FrameEngine, op: &WeightedOperator, b: &BasisBundle, k: usize) -> Result<CMat> {
    let _ = engine;
    let (s, _) = op.s_matrix(b.x(k));
    let m = s * b.frame(k);
    let cond = crate::linalg::condition(&m);
    if cond > 1e12 {
        return numerical(format!("frame near-singular at y = {:.3} (condition {cond:.2e})", b.x(k)));
    }
    inverse(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fisher, nagumo};
    use crate::profile::closed_form;
    use crate::weights::build_omega;

    fn fisher_op(weighted: bool) -> WeightedOperator {
        let m = fisher();
        let p = closed_form(&m, 0.0, 60.0, 0.02).unwrap();
        let om = if weighted { Some(build_omega(2.0 / 6f64.sqrt(), 0.0).unwrap()) } else { None };
        WeightedOperator::new(m, p, om).unwrap()
    }

    #[test]
    fn table_matches_direct_coefficients() {
        let op = fisher_op(true);
        let t = CoeffTable::new(&op, 0.005).unwrap();
        let mut p = [c(0.0)];
        let mut q = [c(0.0)];
        for x in [-5.3, -1.0, -0.9987, 0.3, 0.9999, 1.0013, 7.77] {
            t.pq_into(x, &mut p, &mut q);
            let k = op.coeffs(x);
            assert!((p[0] + k.l0[(0, 0)]).norm() < 1e-8, "x = {x}");
            assert!((q[0] + k.l1[(0, 0)]).norm() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn flat_integrator_on_constant_system() {
        let op = fisher_op(true);
        let eng = FrameEngine::new(&op, FrameOptions::default()).unwrap();
        let lam = c(1.0);
        // Beyond the right cut the decaying mode is exactly exp(nu x).
        let nu = side_roots(&eng.sym, true, lam, None).unwrap()[0];
        let x0 = eng.hi + 5.0;
        let y0 = CMat::from_column_slice(2, 1, &[c(1.0), nu]);
        let y = eng.evolve(lam, &y0, x0, x0 - 3.0).unwrap();
        let exact = (nu * -3.0).exp();
        assert!((y[(0, 0)] - exact).norm() < 1e-8 * exact.norm());
    }

    #[test]
    fn translation_mode_at_zero() {
        let op = fisher_op(true);
        let eng = FrameEngine::new(&op, FrameOptions::default()).unwrap();
        let b = eng.frames(c(0.0), FrameSpan::Full, None).unwrap();
        let om = op.omega.unwrap();
        let mut worst: f64 = 0.0;
        let mut ratio = None;
        for k in (0..b.len).step_by(40) {
            let x = b.x(k);
            if !(-20.0..=20.0).contains(&x) {
                continue;
            }
            let (_, du, ddu) = op.profile.eval(x);
            let (o, o1, _) = om.derivs(x);
            let w = du[0] / o;
            let wp = ddu[0] / o - du[0] * o1 / (o * o);
            let q = b.q(false, k);
            let r = q[(0, 0)] / w;
            let r2 = q[(1, 0)] / wp;
            // Same complex multiple on both components at a node.
            worst = worst.max((r - r2).norm() / r.norm());
            let _ = ratio.get_or_insert(r);
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn growth_rate_matches_stable_root() {
        let op = fisher_op(true);
        let eng = FrameEngine::new(&op, FrameOptions::default()).unwrap();
        let b = eng.frames(c(1.0), FrameSpan::Full, None).unwrap();
        let g = b.growth_rate(true, 5.0, 30.0);
        // Phi+ ~ exp(nu_{-1} x), nu_{-1} the negative root of nu^2 + nu / sqrt(6) = 1.
        let s = 1.0 / 6f64.sqrt();
        let nu = (-s - (s * s + 4.0).sqrt()) / 2.0;
        assert!((g - nu).abs() < 0.05 * nu.abs(), "{g}");
    }

    #[test]
    fn fisher_jordan_point() {
        let op = fisher_op(true);
        let sym = Symbols::from_operator(&op);
        let j = jordan_scan(&sym, (-0.2, 0.1), (-0.1, 0.1), 30).unwrap();
        let plus: Vec<_> = j.iter().filter(|p| p.plus).collect();
        assert_eq!(plus.len(), 1, "{j:?}");
        assert!((plus[0].lambda - c(-1.0 / 24.0)).norm() < 1e-8);
    }

    #[test]
    fn nagumo_translation_winding() {
        let m = nagumo(0.25);
        let p = closed_form(&m, 0.0, 60.0, 0.02).unwrap();
        let op = WeightedOperator::new(m, p, None).unwrap();
        let eng = FrameEngine::new(&op, FrameOptions::default()).unwrap();
        let w = winding_number(&eng, &circle_contour(c(0.0), 0.05, 16)).unwrap();
        assert_eq!(w.count, 1);
        assert!(w.residual < 0.05);
        let mut back = circle_contour(c(0.0), 0.05, 16);
        back.reverse();
        assert_eq!(winding_number(&eng, &back).unwrap().count, -1);
    }

    #[test]
    fn fisher_region_and_winding() {
        let op = fisher_op(true);
        let eng = FrameEngine::new(&op, FrameOptions::default()).unwrap();
        let rc = choose_region(&eng.sym, 0.05, 10.0, 6).unwrap();
        assert_eq!(rc.halvings, 5);
        assert!((rc.m - 1.0 / 48.0).abs() < 1e-8);
        let w = winding_number(&eng, &region_contour(&rc.region, 20, 40)).unwrap();
        assert_eq!(w.count, 0, "{}", w.raw);
        assert!(w.residual < 0.05);
    }
}
