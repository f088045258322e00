//! Adaptive Dormand-Prince 5(4) for linear matrix ODEs `Y' = A(x) Y`.

use crate::error::{numerical, Result};
use crate::linalg::CMat;

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-10, h_max: 0.05 }
    }
}

/// Integrates from `x0` to `x1` (either direction). `h` carries the last
/// accepted step size between calls; pass 0 to start fresh.
pub fn integrate(a_at: &dyn Fn(f64) -> CMat, x0: f64, x1: f64, y0: &CMat, h: &mut f64, opts: &OdeOptions) -> Result<CMat> {
    let dir = if x1 >= x0 { 1.0 } else { -1.0 };
    let span = (x1 - x0).abs();
    if span == 0.0 {
        return Ok(y0.clone());
    }
    let mut y = y0.clone();
    let mut x = x0;
    let mut step = if *h > 0.0 { h.min(opts.h_max) } else { opts.h_max.min(span) };
    let mut k: Vec<CMat> = Vec::with_capacity(7);
    let mut fsal: Option<CMat> = None;
    let mut guard = 0usize;
    while (x1 - x) * dir > 1e-14 * span.max(1.0) {
        guard += 1;
        if guard > 10_000_000 {
            return numerical("ODE integration exceeded the step budget");
        }
        let hs = step.min((x1 - x).abs());
        let hd = hs * dir;
        k.clear();
        k.push(match fsal.take() {
            Some(f) => f,
            None => a_at(x) * &y,
        });
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    ys += kj * crate::linalg::c(a * hd);
                }
            }
            k.push(a_at(x + C[s] * hd) * &ys);
        }
        let mut y5 = y.clone();
        let mut errm = CMat::zeros(y.nrows(), y.ncols());
        for s in 0..7 {
            if B5[s] != 0.0 {
                y5 += &k[s] * crate::linalg::c(B5[s] * hd);
            }
            let e = B5[s] - B4[s];
            if e != 0.0 {
                errm += &k[s] * crate::linalg::c(e * hd);
            }
        }
        let mut err: f64 = 0.0;
        for (e, (a, b)) in errm.iter().zip(y.iter().zip(y5.iter())) {
            let sc = opts.atol + opts.rtol * a.norm().max(b.norm());
            err = err.max(e.norm() / sc);
        }
        if !err.is_finite() {
            return numerical("non-finite values in ODE integration");
        }
        if err <= 1.0 {
            x += hd;
            y = y5;
            fsal = Some(k[6].clone());
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            *h = hs;
            step = (hs * fac).min(opts.h_max);
        } else {
            step = hs * (0.9 * err.powf(-0.2)).max(0.2);
            if step < 1e-12 {
                return numerical("ODE step size underflow");
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, C64};

    #[test]
    fn harmonic_oscillator() {
        let a = |_x: f64| CMat::from_row_slice(2, 2, &[c(0.0), c(1.0), c(-1.0), c(0.0)]);
        let y0 = CMat::from_row_slice(2, 1, &[c(1.0), c(0.0)]);
        let mut h = 0.0;
        let y = integrate(&a, 0.0, 3.0, &y0, &mut h, &OdeOptions::default()).unwrap();
        assert!((y[(0, 0)] - c(3f64.cos())).norm() < 1e-9);
        assert!((y[(1, 0)] - c(-3f64.sin())).norm() < 1e-9);
    }

    #[test]
    fn backward_exponential() {
        let lam = C64::new(-0.5, 2.0);
        let a = move |_x: f64| CMat::from_element(1, 1, lam);
        let y0 = CMat::from_element(1, 1, c(1.0));
        let mut h = 0.0;
        let y = integrate(&a, 2.0, -1.0, &y0, &mut h, &OdeOptions::default()).unwrap();
        assert!((y[(0, 0)] - (lam * -3.0).exp()).norm() < 1e-8);
    }
}
