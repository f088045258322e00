//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::f64::consts::{LN_2, PI};
use std::time::Instant;

use frontstab::config::RunConfig;
use frontstab::evans::{choose_region, circle_contour, region_contour, winding_number, FrameEngine, FrameOptions};
use frontstab::evolve::{
    bootstrap_check, decay_monitor, linear_mol, linear_snapshots, linearization_defect, phase_shift, run, EvolveOptions, InitialData, Trajectory,
};
use frontstab::kernel::{
    apply_semigroup, build_contour, contour_equivalence, fit_envelope, g1_peak, kernel_checks, sector_nodes, verify_kernel_bounds, vertical_nodes,
    ContourOptions, KernelEngine,
};
use frontstab::linalg::{c, fit_line, C64};
use frontstab::model::{fisher, nagumo};
use frontstab::operator::WeightedOperator;
use frontstab::pipeline;
use frontstab::profile::closed_form;
use frontstab::spectrum::{check_essential_assumptions, check_gap, projection_at, side_roots, EssentialOptions, MarginalData, Symbols};
use frontstab::weights::{build_omega, certify, ratio_criterion, sample_grid, staircase_weight, standard_weights, SubExpWeight, WeightKind};

type Outcome = Result<(bool, String), String>;

fn s6() -> f64 {
    6f64.sqrt()
}

fn fisher_op() -> WeightedOperator {
    let m = fisher();
    let p = closed_form(&m, 0.0, 60.0, 0.02).unwrap();
    WeightedOperator::new(m, p, Some(build_omega(2.0 / s6(), 0.0).unwrap())).unwrap()
}

fn marginal(op: &WeightedOperator) -> MarginalData {
    let sym = Symbols::from_operator(op);
    check_essential_assumptions(&sym, 0.0, None, &EssentialOptions::default()).unwrap().marginal.unwrap()
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn evolve_opts(t_end: f64) -> EvolveOptions {
    EvolveOptions { l: 100.0, h: 0.1, dt: None, t_end, output_every: 1.0, inflow_speed: Some(1.0 / s6()) }
}

// 1. Spectral constants reported by the check stage.
fn spectral_constants() -> Outcome {
    let t0 = Instant::now();
    let dir = std::env::temp_dir().join(format!("frontstab-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(e)?;
    let rep = pipeline::cmd_check(&RunConfig::default(), &dir).map_err(e)?;
    let mut rd = csv::Reader::from_path(dir.join(pipeline::CONSTANTS_FILE)).map_err(e)?;
    let mut get = std::collections::HashMap::new();
    for r in rd.records() {
        let r = r.map_err(e)?;
        get.insert(r[0].to_string(), r[1].parse::<f64>().map_err(e)?);
    }
    let _ = std::fs::remove_dir_all(&dir);
    let want = [("kappa", 2.0 / s6()), ("alpha1", 1.0 / s6()), ("alpha2_re", 1.0), ("alpha2_im", 0.0), ("xi0", 0.0)];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (k, v) in want {
        let got = *get.get(k).ok_or(format!("{k} missing"))?;
        worst = worst.max((got - v).abs());
        parts.push(format!("{k} = {got:.6}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((rep.passed() && worst <= 1e-3 && secs < 60.0, format!("{}; max dev {worst:.1e} (tol 1e-3); all check items pass: {}; {secs:.1} s", parts.join(", "), rep.passed())))
}

// 2. Spatial roots and the calibrated gap.
fn spatial_roots() -> Outcome {
    let sym = Symbols::from_operator(&fisher_op());
    // Weighted side +: nu^2 + nu / sqrt6 - lambda = 0.
    let s = 1.0 / s6();
    let quad = |lam: f64| {
        let r = (s * s + 4.0 * lam).sqrt();
        [(-s - r) / 2.0, (-s + r) / 2.0]
    };
    let mut worst: f64 = 0.0;
    for lam in [0.0, 1.0, 2.0] {
        let roots = side_roots(&sym, true, c(lam), None).map_err(e)?;
        for (z, w) in roots.iter().zip(quad(lam)) {
            worst = worst.max((z - c(w)).norm());
        }
    }
    // The listed values at lambda = 1 are the roots at lambda = 2.
    let listed = side_roots(&sym, true, c(2.0), None).map_err(e)?;
    let listed_dev = (listed[0].re + 4.0 / s6()).abs().max((listed[1].re - 3.0 / s6()).abs());
    let rc = choose_region(&sym, 0.05, 10.0, 8).map_err(e)?;
    let gap = check_gap(&sym, &rc.region, rc.m, rc.c_rate, 200).map_err(e)?;
    Ok((
        worst < 1e-8 && gap.violations == 0 && gap.samples == 200,
        format!(
            "roots at lambda = 0, 1, 2 vs quadratic: max dev {worst:.1e} (tol 1e-8); listed {{-1.632993, 1.224745}} matched at lambda = 2 to {listed_dev:.1e}; gap: {} violations on {} points, C = {:.3e}, worst slack {:.2e}",
            gap.violations, gap.samples, rc.c_rate, gap.worst_slack
        ),
    ))
}

// 3. Evans windings.
fn evans_windings() -> Outcome {
    let t0 = Instant::now();
    let op = fisher_op();
    let eng = FrameEngine::new(&op, FrameOptions::default()).map_err(e)?;
    let rc = choose_region(&eng.sym, 0.05, 10.0, 8).map_err(e)?;
    let w = winding_number(&eng, &region_contour(&rc.region, 20, 40)).map_err(e)?;
    let m = nagumo(0.25);
    let p = closed_form(&m, 0.0, 60.0, 0.02).map_err(e)?;
    let nop = WeightedOperator::new(m, p, None).map_err(e)?;
    let neng = FrameEngine::new(&nop, FrameOptions::default()).map_err(e)?;
    let nw = winding_number(&neng, &circle_contour(c(0.0), 0.05, 16)).map_err(e)?;
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        w.count == 0 && w.residual < 0.05 && nw.count == 1 && nw.residual < 0.05 && secs < 300.0,
        format!(
            "weighted Fisher on boundary of Lambda_theta (theta = {:.3e}) ∩ B(0,10): {} (residual {:.1e}); unweighted Nagumo on |lambda| = 0.05: {} (residual {:.1e}); {secs:.1} s",
            rc.region.theta, w.count, w.residual, nw.count, nw.residual
        ),
    ))
}

// 4. Jump, residuals and K2 scaling.
fn kernel_identities() -> Outcome {
    let op = fisher_op();
    let eng = KernelEngine::new(&op, FrameOptions::default(), -20.0, 20.0).map_err(e)?;
    let (mut jump, mut res): (f64, f64) = (0.0, 0.0);
    for lam in [C64::new(0.5, 0.3), C64::new(2.0, -1.0), C64::new(0.05, 1.5)] {
        let r = eng.resolvent(lam).map_err(e)?;
        for (x, y) in [(-1.3, 0.7), (2.1, -0.4), (0.3, 4.0)] {
            let ch = kernel_checks(&eng, &r, x, y).map_err(e)?;
            jump = jump.max(ch.jump_error);
            res = res.max(ch.x_residual).max(ch.y_residual);
        }
    }
    let rc = choose_region(&eng.sym, 0.05, 10.0, 8).map_err(e)?;
    let fits = verify_kernel_bounds(&eng, &[c(0.01), c(0.005)], &[-2.0, 0.0, 1.0, 3.0], rc.c_rate, rc.m).map_err(e)?;
    let k2: Vec<f64> = fits.iter().filter(|f| f.name == "K2").map(|f| f.c).collect();
    let ratio = k2[1] / k2[0];
    Ok((
        jump < 1e-6 && res < 1e-6 && (ratio - 1.0).abs() <= 0.25,
        format!("jump error {jump:.1e}, residual {res:.1e} (tol 1e-6); K2 bound constant ratio at lambda 0.01 -> 0.005: {ratio:.3} (1 ± 0.25)"),
    ))
}

// 5. Contour semigroup against direct linear evolution.
fn green_oracle() -> Outcome {
    let t0 = Instant::now();
    let op = fisher_op();
    let md = marginal(&op);
    let eng = KernelEngine::new(&op, FrameOptions::default(), -40.0, 40.0).map_err(e)?;
    let t = 5.0;
    let xs = eng.grid();
    let v0: Vec<C64> = xs.iter().map(|x| c((-x * x).exp())).collect();
    let mut outs = Vec::new();
    for refine in [1usize, 2] {
        let opts = ContourOptions { refine, ..ContourOptions::default() };
        let ct = build_contour(&md, 0.25, 0.5, t, &opts, true).map_err(e)?;
        outs.push((ct.nodes.len(), apply_semigroup(&eng, &ct, &[t], &v0).map_err(e)?.remove(0).total));
    }
    let (mx, mv) = linear_mol(&op, -60.0, 60.0, 0.025, &|x| vec![c((-x * x).exp())], &[t]).map_err(e)?;
    let (mut err, mut top, mut dbl): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        if x.abs() > 40.0 {
            continue;
        }
        let j = ((x + 60.0) / 0.025).round() as usize;
        if (mx[j] - x).abs() > 1e-9 {
            return Err("grids not aligned".into());
        }
        err = err.max((outs[0].1[i] - mv[0][j]).norm());
        top = top.max(mv[0][j].norm());
        dbl = dbl.max((outs[0].1[i] - outs[1].1[i]).norm());
    }
    let (rel, rel_dbl) = (err / top, dbl / top);
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        rel < 5e-3 && rel_dbl < 1e-8 && secs < 600.0,
        format!("relative Linf vs method of lines {rel:.2e} (tol 5e-3); node doubling {} -> {}: {rel_dbl:.1e} (tol 1e-8); {secs:.1} s", outs[0].0, outs[1].0),
    ))
}

// 6. Transport and Gaussian envelope of the scalar part.
fn transport() -> Outcome {
    let op = fisher_op();
    let sym = Symbols::from_operator(&op);
    let md = marginal(&op);
    let sigma = 1.0 / s6();
    let times = [10.0, 20.0, 40.0, 80.0];
    let mut peaks = Vec::new();
    for &t in &times {
        peaks.push(g1_peak(&sym, &md, 0.25, 0.5, t, 0.0, 2.0 * sigma * t + 20.0, 0.05).map_err(e)?);
    }
    let (_, speed) = fit_line(&times, &peaks);
    let rel = (speed - sigma).abs() / sigma;
    let env = fit_envelope(&sym, &md, 0.25, 0.5, &times, &[-5.0, 0.0, 5.0], 100).map_err(e)?;
    Ok((
        rel <= 0.15 && env.c > 0.0 && env.kappa_env > 0.0 && env.points >= 1000,
        format!(
            "peak speed {speed:.4} vs sigma {sigma:.4} ({:.1}%, tol 15%); envelope C = {:.4}, kappa_env = {} on {} points",
            100.0 * rel,
            env.c,
            env.kappa_env,
            env.points
        ),
    ))
}

// 7. Vertical and sectorial contours.
fn contour_equivalence_check() -> Outcome {
    let t0 = Instant::now();
    let op = fisher_op();
    let eng = KernelEngine::new(&op, FrameOptions::default(), -10.0, 10.0).map_err(e)?;
    let (t, x, y) = (5.0, 0.0, 5.0);
    // Truncation at |Im lambda| = 40: the kernel decays like exp(-Re sqrt(40 i) |x - y|) ~ 1e-10.
    let a = vertical_nodes(0.2, 40.0, 0.25, 8, true);
    let b = sector_nodes(0.2, 0.75 * PI, 40.0, 0.25, 8, true);
    let v2 = vertical_nodes(0.1, 40.0, 0.25, 8, true);
    let (r1, ia, _) = contour_equivalence(&eng, t, x, y, &a, &b, true).map_err(e)?;
    let (r2, _, _) = contour_equivalence(&eng, t, x, y, &a, &v2, true).map_err(e)?;
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        r1 < 1e-6 && r2 < 1e-6,
        format!("G(5, 0, 5) = {:.6e}: vertical Re = 0.2 vs sector 3pi/4 {r1:.1e}, vertical 0.2 vs 0.1 {r2:.1e} (tol 1e-6); {secs:.1} s", ia.re),
    ))
}

// 8. Sub-exponential weights and the staircase.
fn weights() -> Outcome {
    let (eta, m) = (0.4, 4.0);
    let ws = standard_weights(0.25, eta, m).map_err(e)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for w in &ws {
        let (pass, ch, ratio) = certify(w, eta, m, 500.0);
        ok &= pass;
        lines.push(format!("{} (growth {:.2}, conv {:.2}, ratio {:.2})", w.name, ch.growth_ratio, ch.convolution_ratio, ratio));
    }
    let op = fisher_op();
    let sym = Symbols::from_operator(&op);
    let nu1 = side_roots(&sym, true, c(0.0), None).map_err(e)?[1];
    let pi = projection_at(&sym, c(0.0), nu1).map_err(e)?;
    let init = InitialData::WeightedTail { amp: 0.01, eta: 0.25, cutoff: Some(80.0) };
    let xs = sample_grid(100.0, 0.05);
    let pv: Vec<f64> = xs.iter().map(|&x| (pi[(0, 0)] * init.v0(&op, x)[0]).norm()).collect();
    let e0 = pv.iter().cloned().fold(0.0, f64::max);
    let st = staircase_weight(&xs, &pv, e0, 5).map_err(e)?;
    let weighted = xs.iter().zip(&pv).map(|(&x, p)| st.eval(x) * p).fold(0.0, f64::max);
    let ratio = ratio_criterion(&st, LN_2, 2.0, &xs);
    let levels = match &st.kind {
        WeightKind::Staircase(k) => k.len() - 1,
        _ => 0,
    };
    ok &= weighted <= 2.0 * e0 && ratio <= 1.0 + 1e-12;
    Ok((
        ok,
        format!(
            "certified on [0, 500] with (eta, M) = ({eta}, {m}): {}; staircase ({levels} levels): sup rho|pi v0| / E0 = {:.3} (<= 2), ratio criterion (ln 2, 2) = {ratio:.3} (<= 1)",
            lines.join(", "),
            weighted / e0
        ),
    ))
}

fn tail_data(amp: f64) -> InitialData {
    InitialData::WeightedTail { amp, eta: 0.25, cutoff: Some(80.0) }
}

// 9. Bounded orbit and the bootstrap inequality.
fn bounded_orbit() -> Outcome {
    let t0 = Instant::now();
    let op = fisher_op();
    let lin = run(&op, &tail_data(1e-6), &evolve_opts(200.0), &[]).map_err(e)?;
    let nl = run(&op, &tail_data(0.01), &evolve_opts(200.0), &[]).map_err(e)?;
    let b = bootstrap_check(&lin, &nl);
    // The linear part of the stepper is the weighted operator: the defect is
    // quadratic in the amplitude.
    let times = [5.0, 10.0, 20.0];
    let mut scaled = Vec::new();
    for eps in [1e-4, 5e-5] {
        let init = InitialData::Bump { amp: eps, width: 2.0, center: 0.0 };
        let tr = run(&op, &init, &evolve_opts(20.0), &times).map_err(e)?;
        let ls = linear_snapshots(&op, &tr.xs, &tr.v0, &times).map_err(e)?;
        let d = linearization_defect(&tr, &ls, eps).map_err(e)?;
        scaled.push(d.iter().map(|p| p.1).fold(0.0, f64::max));
    }
    let q = scaled[1] / scaled[0];
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        b.e0 <= b.delta && b.bounded && b.inequality && (q - 1.0).abs() < 0.1,
        format!(
            "C1 = {:.3}, M = {:.3}, delta = {:.3e}, E0 = {:.3e}; sup Theta = {:.3e} <= 2 C1 E0 = {:.3e}: {}; bootstrap inequality at all times: {}; linearization defect / eps^2 {:.3e} -> {:.3e} as eps halves; {secs:.1} s",
            b.c1,
            b.m,
            b.delta,
            b.e0,
            b.sup_theta,
            2.0 * b.c1 * b.e0,
            b.bounded,
            b.inequality,
            scaled[0],
            scaled[1]
        ),
    ))
}

/// Position `s` minimizing `max |u - ubar(x - s)|` on `x <= x_max`.
fn front_position(op: &WeightedOperator, tr: &Trajectory, x_max: f64) -> f64 {
    let om = op.omega.unwrap();
    let pts: Vec<(f64, C64)> =
        tr.xs.iter().zip(&tr.v_final).filter(|(x, _)| **x <= x_max).map(|(&x, v)| (x, op.profile.eval(x).0[0] + om.value(x) * v)).collect();
    let dist = |s: f64| pts.iter().map(|(x, u)| (u - op.profile.eval(x - s).0[0]).norm()).fold(0.0, f64::max);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (-1.0, 1.0);
    for _ in 0..60 {
        let (x1, x2) = (b - g * (b - a), a + g * (b - a));
        if dist(x1) < dist(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    0.5 * (a + b)
}

fn bounded_ratio(ratio: &[f64], times: &[f64]) -> bool {
    let first = times.iter().zip(ratio).filter(|(t, _)| **t <= 100.0).map(|p| *p.1).fold(0.0, f64::max);
    let last = times.iter().zip(ratio).filter(|(t, _)| **t > 100.0).map(|p| *p.1).fold(0.0, f64::max);
    first.is_finite() && last <= 1.05 * first
}

// 10. Asymptotic phase and weighted decay.
fn phase_and_decay() -> Outcome {
    let t0 = Instant::now();
    let op = fisher_op();
    let sigma = 1.0 / s6();
    let shift = run(&op, &InitialData::Shift(0.1), &evolve_opts(200.0), &[]).map_err(e)?;
    let u0 = InitialData::Shift(0.1).u0(&op, &shift.xs);
    let ph = phase_shift(&op, &shift.xs, &u0).map_err(e)?;
    let pos = front_position(&op, &shift, 50.0);

    let rho = SubExpWeight::new("power(0.25)", WeightKind::Power(0.25), 0.4, 4.0);
    let tr = run(&op, &tail_data(0.01), &evolve_opts(200.0), &[]).map_err(e)?;
    // Largest C in the candidate list with a non-growing ratio.
    let mut fitted = None;
    for cc in [sigma, sigma / 2.0, sigma / 4.0] {
        let rep = decay_monitor(&tr, &op, &rho, sigma, cc, (50.0, 200.0)).map_err(e)?;
        if bounded_ratio(&rep.ratio, &rep.times) {
            fitted = Some(rep);
            break;
        }
    }
    let rep = match fitted {
        Some(r) => r,
        None => decay_monitor(&tr, &op, &rho, sigma, sigma / 4.0, (50.0, 200.0)).map_err(e)?,
    };
    let bounded = bounded_ratio(&rep.ratio, &rep.times);
    let max_ratio = rep.ratio.iter().cloned().fold(0.0, f64::max);

    // Untruncated tail: reported only.
    let sharp = run(&op, &InitialData::WeightedTail { amp: 0.01, eta: 0.25, cutoff: None }, &evolve_opts(200.0), &[]).map_err(e)?;
    let sharp_rep = decay_monitor(&sharp, &op, &rho, sigma, sigma / 4.0, (50.0, 200.0)).map_err(e)?;
    println!("INFO [10] untruncated weighted tail max(1,x)^-0.25: decay exponent {:.3} on [50, 200]", sharp_rep.exponent);

    let secs = t0.elapsed().as_secs_f64();
    let ok = (ph.x_inf - 0.1).abs() <= 1e-3 && (pos - 0.1).abs() <= 1e-3 && rep.exponent >= 0.20 && bounded && rep.precondition && secs < 1800.0;
    Ok((
        ok,
        format!(
            "x_inf from data {:.6}, front position at t = 200 {pos:.6} (0.100 ± 1e-3); decay exponent {:.3} on [50, 200] (>= 0.20); ratio with C = {:.4}: max {max_ratio:.3}, bounded {bounded}; {secs:.1} s",
            ph.x_inf, rep.exponent, rep.c_rho
        ),
    ))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("Fisher spectral constants", spectral_constants),
        ("spatial eigenvalues and gap", spatial_roots),
        ("Evans winding numbers", evans_windings),
        ("resolvent kernel identities", kernel_identities),
        ("Green kernel vs linear evolution", green_oracle),
        ("transport and Gaussian envelope", transport),
        ("contour equivalence", contour_equivalence_check),
        ("sub-exponential weights", weights),
        ("bounded orbit and bootstrap", bounded_orbit),
        ("asymptotic phase and weighted decay", phase_and_decay),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(msg) => (false, format!("error: {msg}")),
        };
        println!("{} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" }, k + 1);
        if !ok {
            failed += 1;
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
