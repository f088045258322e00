//! Stage drivers behind the command-line subcommands. Every stage rebuilds the
//! front and weighted operator from the config, writes its CSV artifacts into
//! the output directory and returns a pass/fail report.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};

use crate::config::{DataSpec, RunConfig, WeightSpec};
use crate::error::{Error, Result};
use crate::evans::{choose_region, circle_contour, region_contour, winding_number, FrameEngine, FrameOptions, RegionChoice, WindingResult};
use crate::evolve::{decay_monitor, phase_shift, run, EvolveOptions, InitialData};
use crate::kernel::{build_contour, check_contour, fit_envelope, g1_peak, green_pass, ContourOptions, KernelEngine};
use crate::linalg::{c, fit_line, C64};
use crate::model::{builtin, check_equilibria, SystemModel};
use crate::operator::WeightedOperator;
use crate::profile::{asymptotic_fit, closed_form, profile_residual, solve_profile, tanh_guess, AsymptoticFit, SolveOptions, WaveProfile};
use crate::report::AssumptionReport;
use crate::spectrum::{check_essential_assumptions, check_gap_at, essential_curves, side_roots, xi_grid, EssentialCheck, EssentialOptions, MarginalData, Symbols};
use crate::weights::{build_omega, SubExpWeight, WeightKind};

pub const CHECK_FILE: &str = "check.csv";
pub const CONSTANTS_FILE: &str = "constants.csv";
pub const GREEN_SUMMARY_FILE: &str = "green_summary.csv";
pub const EVOLVE_SUMMARY_FILE: &str = "evolve_summary.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Profile residual accepted by `check`.
const RESIDUAL_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Setup {
    pub model: SystemModel,
    pub profile: WaveProfile,
    pub residual: f64,
    pub fit: AsymptoticFit,
    pub kappa: f64,
    pub xi0: f64,
    pub op: WeightedOperator,
    pub sym: Symbols,
}

pub fn load_model(cfg: &RunConfig) -> Result<SystemModel> {
    match &cfg.model.inline {
        Some(spec) => spec.build(),
        None => builtin(&cfg.model.name),
    }
}

/// Front, tail fit and weighted operator. `weight.kappa = 0` gives the
/// unweighted operator.
pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    let model = load_model(cfg)?;
    let (l, h) = (cfg.profile.half_width, cfg.profile.h);
    let profile = if model.exact.is_some() {
        closed_form(&model, 0.0, l, h)?
    } else {
        solve_profile(&model, model.c, l, h, &tanh_guess(&model, 0.0), SolveOptions::default())?
    };
    let residual = profile_residual(&profile, &model);
    let fit = asymptotic_fit(&profile, &model)?;
    let (kappa_auto, xi0_auto) = tail_rate(&fit);
    let kappa = cfg.weight.kappa.unwrap_or(kappa_auto);
    let xi0 = cfg.weight.xi0.unwrap_or(xi0_auto);
    let omega = if kappa > 0.0 { Some(build_omega(kappa, xi0)?) } else { None };
    let op = WeightedOperator::new(model.clone(), profile.clone(), omega)?;
    let sym = Symbols::from_operator(&op);
    Ok(Setup { model, profile, residual, fit, kappa, xi0, op, sym })
}

/// The weak stable spatial rate at `U_plus` when the log-linear fit identifies
/// it (the fit alone is only accurate to a few digits), else the fit.
pub fn tail_rate(fit: &AsymptoticFit) -> (f64, f64) {
    let w = fit.weak_rate;
    if (fit.kappa + w.re).abs() <= 1e-2 * w.re.abs().max(1.0) && (fit.xi0 - w.im).abs() <= 1e-2 {
        (-w.re, w.im)
    } else {
        (fit.kappa, fit.xi0)
    }
}

fn optimal_weight(st: &Setup) -> (bool, String) {
    let ok = st.kappa > 0.0 && (st.kappa - st.fit.kappa).abs() <= 1e-3 * st.fit.kappa.max(1.0);
    // A double root makes the tail x e^{-kappa x}; e^{kappa x} u' is then unbounded.
    let ok = ok && !st.fit.polynomial_prefactor;
    (ok, format!("weight kappa = {:.6}, profile tail rate = {:.6}", st.kappa, st.fit.kappa))
}

fn essential(st: &Setup) -> Result<EssentialCheck> {
    check_essential_assumptions(&st.sym, st.xi0, Some(optimal_weight(st)), &EssentialOptions::default())
}

fn marginal(st: &Setup) -> Result<MarginalData> {
    let ess = essential(st)?;
    ess.marginal.ok_or_else(|| {
        let failed: Vec<String> = ess.report.items.iter().filter(|i| !i.passed).map(|i| format!("{}: {}", i.name, i.detail)).collect();
        Error::Assumption(format!("no marginal contact data ({})", failed.join("; ")))
    })
}

// ---------------------------------------------------------------------------
// CSV plumbing

fn num(x: f64) -> String {
    // `+ 0.0` maps -0 to 0
    format!("{:.10e}", x + 0.0)
}

struct Table {
    comments: Vec<String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { comments: Vec::new(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in &self.comments {
            writeln!(f, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(f);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn read_table(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn require(out: &Path, names: &[&str]) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = names.iter().map(|n| out.join(n)).collect();
    let missing: Vec<&str> = names.iter().zip(&paths).filter(|(_, p)| !p.is_file()).map(|(n, _)| *n).collect();
    if missing.is_empty() {
        Ok(paths)
    } else {
        Err(Error::MissingArtifact(format!("{} in {}", missing.join(", "), out.display())))
    }
}

/// Downstream stages need a passing `check` unless forced.
fn require_check(out: &Path, force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    let p = require(out, &[CHECK_FILE])?;
    let failed: Vec<String> = read_table(&p[0])?.iter().filter(|r| r.get(1) != Some("true")).map(|r| r.get(0).unwrap_or("?").to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Assumption(format!("check reported failures ({}); rerun check or pass --force", failed.join(", "))))
    }
}

fn write_report(report: &AssumptionReport, path: &Path) -> Result<()> {
    let mut t = Table::new(&["item", "passed", "detail"]);
    for it in &report.items {
        t.rows.push(vec![it.name.clone(), it.passed.to_string(), it.detail.clone()]);
    }
    t.write(path)
}

// ---------------------------------------------------------------------------
// check / evans

fn evans_stage(st: &Setup, cfg: &RunConfig) -> Result<(RegionChoice, WindingResult)> {
    let s = &cfg.spectrum;
    let rc = choose_region(&st.sym, s.theta0, s.radius, s.max_halvings)?;
    let engine = FrameEngine::new(&st.op, FrameOptions::default())?;
    let w = winding_number(&engine, &region_contour(&rc.region, s.ray_points, s.arc_points))?;
    Ok((rc, w))
}

/// Random boundary points of the region, reproducible from the seed.
fn random_boundary(rc: &RegionChoice, count: usize, seed: u64) -> Vec<C64> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let sm = rc.region.s_max();
    (0..count).map(|_| rc.region.boundary_point(sm * rng.random_range(-1.0..=1.0))).collect()
}

pub fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<AssumptionReport> {
    let model = load_model(cfg)?;
    let mut rep = check_equilibria(&model)?;
    let monostable = rep.passed();
    let st = setup(cfg)?;
    rep.push("profile residual", st.residual < RESIDUAL_TOL, format!("max residual {:.3e} (tol {RESIDUAL_TOL:.0e})", st.residual));
    rep.push(
        "tail fit",
        st.fit.generic && !st.fit.polynomial_prefactor,
        format!("kappa = {:.6}, xi0 = {:.3e}, window [{:.1}, {:.1}]", st.fit.kappa, st.fit.xi0, st.fit.window.0, st.fit.window.1),
    );
    let ess = essential(&st)?;
    rep.extend(ess.report.clone());

    let mut consts = Table::new(&["name", "value", "unit"]);
    let mut put = |name: &str, v: f64, unit: &str| consts.rows.push(vec![name.into(), num(v), unit.into()]);
    put("c", st.model.c, "length/time");
    put("kappa", st.kappa, "1/length");
    put("xi0", st.xi0, "1/length");
    if let Some(md) = ess.marginal {
        put("alpha1", md.alpha1, "length/time");
        put("alpha2_re", md.alpha2.re, "length^2/time");
        put("alpha2_im", md.alpha2.im, "length^2/time");
        put("eta", md.eta, "1/time");
        put("Xi", md.xi_window, "1/length");
        match evans_stage(&st, cfg) {
            Ok((rc, w)) => {
                rep.push(
                    "jordan-free region",
                    true,
                    format!("theta = {:.6e} after {} halvings, {} Jordan point(s) found, M = {:.4e}", rc.region.theta, rc.halvings, rc.jordan.len(), rc.m),
                );
                let pts = random_boundary(&rc, cfg.spectrum.gap_samples, cfg.seed);
                let g = check_gap_at(&st.sym, &pts, rc.m, rc.c_rate)?;
                rep.push(
                    "spatial gap (random sample)",
                    g.violations == 0,
                    format!("{} points (seed {}), {} violations, worst slack {:.3e} at {:.4}", g.samples, cfg.seed, g.violations, g.worst_slack, g.witness),
                );
                rep.push("evans winding", w.count == 0 && w.residual < 0.05, format!("winding {} (raw {:.6}), min log|E| {:.3}", w.count, w.raw, w.min_log_abs));
                put("theta", rc.region.theta, "1");
                put("radius", rc.region.radius, "1/time");
                put("c_rate", rc.c_rate, "1");
                put("M", rc.m, "1/time");
                put("winding", w.count as f64, "1");
            }
            Err(Error::Assumption(msg)) => rep.push("jordan-free region", false, msg),
            Err(e) => return Err(e),
        }
    } else {
        rep.push("evans winding", false, "skipped: no marginal contact data");
    }
    if !monostable {
        // Translation eigenvalue of the unweighted operator (bistable fixtures).
        let op = WeightedOperator::new(st.model.clone(), st.profile.clone(), None)?;
        let eng = FrameEngine::new(&op, FrameOptions::default())?;
        let w = winding_number(&eng, &circle_contour(c(0.0), 0.05, 16))?;
        rep.push("fixture: Evans zero at 0", w.count == 1 && w.residual < 0.05, format!("unweighted winding on |lambda| = 0.05: {} (raw {:.6})", w.count, w.raw));
    }
    write_report(&rep, &out.join(CHECK_FILE))?;
    consts.write(&out.join(CONSTANTS_FILE))?;
    Ok(rep)
}

pub fn cmd_evans(cfg: &RunConfig, out: &Path) -> Result<AssumptionReport> {
    let st = setup(cfg)?;
    marginal(&st)?;
    let (rc, w) = evans_stage(&st, cfg)?;
    let mut t = Table::new(&["re_lambda [1/time]", "im_lambda [1/time]", "log_abs_E [1]", "arg_E [rad]"]);
    t.comments.push(format!("region theta = {:e}, radius = {}", rc.region.theta, rc.region.radius));
    t.comments.push(format!("winding = {}, raw = {:.8}", w.count, w.raw));
    for v in &w.nodes {
        t.rows.push(vec![num(v.lambda.re), num(v.lambda.im), num(v.log_abs), num(v.arg)]);
    }
    t.write(&out.join("evans.csv"))?;
    let mut rep = AssumptionReport::default();
    rep.push("evans winding", w.count == 0 && w.residual < 0.05, format!("winding {} over {} nodes (raw {:.6})", w.count, w.nodes.len(), w.raw));
    Ok(rep)
}

// ---------------------------------------------------------------------------
// profile / spectrum

pub fn cmd_profile(cfg: &RunConfig, out: &Path) -> Result<AssumptionReport> {
    let st = setup(cfg)?;
    let p = &st.profile;
    let n = p.n;
    let mut header = vec!["x [length]".to_string()];
    for k in 1..=n {
        header.extend([format!("re_u{k} [1]"), format!("im_u{k} [1]"), format!("re_du{k} [1/length]"), format!("im_du{k} [1/length]")]);
    }
    let mut t = Table { comments: Vec::new(), header, rows: Vec::new() };
    t.comments.push(format!("c = {:.12e}", p.c));
    t.comments.push(format!("kappa = {:.12e}", st.fit.kappa));
    t.comments.push(format!("xi0 = {:.12e}", st.fit.xi0));
    t.comments.push(format!("L = {}", p.l()));
    t.comments.push(format!("h = {}", p.h));
    for i in 0..p.len() {
        let mut row = vec![num(p.xs[i])];
        for k in 0..n {
            let (u, du) = (p.at(i)[k], p.deriv_at(i)[k]);
            row.extend([num(u.re), num(u.im), num(du.re), num(du.im)]);
        }
        t.rows.push(row);
    }
    t.write(&out.join("profile.csv"))?;
    let mut rep = AssumptionReport::default();
    rep.push("profile residual", st.residual < RESIDUAL_TOL, format!("max residual {:.3e}", st.residual));
    Ok(rep)
}

pub fn cmd_spectrum(cfg: &RunConfig, out: &Path) -> Result<AssumptionReport> {
    let st = setup(cfg)?;
    let ess = essential(&st)?;
    let grid = xi_grid(st.xi0, 10.0, 0.02);
    let mut t = Table::new(&["side", "curve", "xi [1/length]", "re_lambda [1/time]", "im_lambda [1/time]"]);
    for (side, plus) in [("minus", false), ("plus", true)] {
        let cur = essential_curves(&st.sym, plus, &grid)?;
        for (k, curve) in cur.curves.iter().enumerate() {
            for (xi, z) in grid.iter().zip(curve) {
                t.rows.push(vec![side.into(), k.to_string(), num(*xi), num(z.re), num(z.im)]);
            }
        }
    }
    t.write(&out.join("spectrum.csv"))?;

    let mut roots = Table::new(&["re_lambda [1/time]", "im_lambda [1/time]", "side", "index", "re_nu [1/length]", "im_nu [1/length]"]);
    for lam in [c(0.0), c(1.0)] {
        for (side, plus) in [("minus", false), ("plus", true)] {
            for (k, nu) in side_roots(&st.sym, plus, lam, None)?.iter().enumerate() {
                roots.rows.push(vec![num(lam.re), num(lam.im), side.into(), k.to_string(), num(nu.re), num(nu.im)]);
            }
        }
    }
    roots.write(&out.join("spatial_roots.csv"))?;

    if let Some(md) = ess.marginal {
        let mut tab = toml::Table::new();
        tab.insert("xi0".into(), md.xi0.into());
        tab.insert("xi_window".into(), md.xi_window.into());
        tab.insert("eta".into(), md.eta.into());
        tab.insert("alpha1".into(), md.alpha1.into());
        tab.insert("alpha2".into(), toml::Value::Array(vec![md.alpha2.re.into(), md.alpha2.im.into()]));
        tab.insert("kappa".into(), md.kappa.into());
        let mut root = toml::Table::new();
        root.insert("marginal".into(), tab.into());
        std::fs::write(out.join("marginal.toml"), toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    Ok(ess.report)
}

// ---------------------------------------------------------------------------
// green

fn contour_options(cfg: &RunConfig) -> ContourOptions {
    ContourOptions { gamma0_nodes: cfg.contour.gamma0_nodes, panel: cfg.contour.panel, tol: cfg.contour.tol, ..ContourOptions::default() }
}

fn part_columns(n: usize, header: &mut Vec<String>) {
    for k in 1..=n {
        for part in ["total", "s1", "s2", "s3", "s4"] {
            header.push(format!("{part}_{k}_re [1]"));
            header.push(format!("{part}_{k}_im [1]"));
        }
    }
}

pub fn cmd_green(cfg: &RunConfig, out: &Path, force: bool) -> Result<AssumptionReport> {
    require_check(out, force)?;
    let st = setup(cfg)?;
    let md = marginal(&st)?;
    let rc = choose_region(&st.sym, cfg.spectrum.theta0, cfg.spectrum.radius, cfg.spectrum.max_halvings)?;
    let g = &cfg.green;
    let eng = KernelEngine::new(&st.op, FrameOptions { dx: cfg.contour.dx, ..FrameOptions::default() }, -g.domain, g.domain)?;
    let n = eng.n();
    let xs = eng.grid();
    let v0: Vec<C64> = xs.iter().flat_map(|&x| std::iter::repeat_n(c((-(x / g.width).powi(2)).exp()), n)).collect();
    let half = eng.real && md.xi0.abs() < 1e-12;
    let nearest = |x: f64| (0..xs.len()).min_by(|&a, &b| (xs[a] - x).abs().partial_cmp(&(xs[b] - x).abs()).unwrap()).unwrap();
    let i0 = nearest(0.0);
    let pairs: Vec<(usize, usize)> = (0..=40).map(|k| (i0, nearest(-10.0 + 0.5 * k as f64))).collect();

    let mut rep = AssumptionReport::default();
    let mut summary = Table::new(&["quantity", "t [time]", "value", "unit"]);
    for &t in &g.times {
        let contour = build_contour(&md, cfg.contour.alpha, cfg.contour.theta, t, &contour_options(cfg), half)?;
        check_contour(&st.sym, &contour, &rc.jordan)?;
        let (v, kern) = green_pass(&eng, &contour, t, &v0, &pairs)?;

        let mut header = vec!["t [time]".to_string(), "x [length]".to_string()];
        part_columns(n, &mut header);
        let mut tab = Table { comments: Vec::new(), header, rows: Vec::new() };
        tab.comments.push(format!("e^(tL) v0 with v0 = exp(-(x/{})^2); {} contour nodes, Xi_max = {:.6}", g.width, contour.nodes.len(), contour.xi_max));
        let mut checksum = 0.0f64;
        let mut sup = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            if x.abs() > g.domain + 1e-9 {
                continue;
            }
            let mut row = vec![num(t), num(x)];
            for k in 0..n {
                let j = i * n + k;
                let parts = [v.total[j], v.k1[j], v.k2[j], v.k3[j], v.k4[j]];
                checksum = checksum.max((parts[0] - parts[1] - parts[2] - parts[3] - parts[4]).norm());
                sup = sup.max(parts[0].norm());
                for z in parts {
                    row.extend([num(z.re), num(z.im)]);
                }
            }
            tab.rows.push(row);
        }
        tab.write(&out.join(format!("green_t{t}.csv")))?;

        let mut header = vec!["t [time]".to_string(), "x [length]".to_string(), "y [length]".to_string()];
        for a in 1..=n {
            for b in 1..=n {
                for part in ["total", "s1", "s2", "s3", "s4"] {
                    header.push(format!("g{a}{b}_{part}_re [1/length]"));
                    header.push(format!("g{a}{b}_{part}_im [1/length]"));
                }
            }
        }
        let mut ktab = Table { comments: Vec::new(), header, rows: Vec::new() };
        for (&(i, j), p) in pairs.iter().zip(&kern) {
            let mut row = vec![num(t), num(xs[i]), num(xs[j])];
            for a in 0..n {
                for b in 0..n {
                    for m in [&p.k, &p.k1, &p.k2, &p.k3, &p.k4] {
                        row.extend([num(m[(a, b)].re), num(m[(a, b)].im)]);
                    }
                }
            }
            ktab.rows.push(row);
        }
        ktab.write(&out.join(format!("kernel_t{t}.csv")))?;

        summary.rows.push(vec!["checksum".into(), num(t), num(checksum), "1".into()]);
        summary.rows.push(vec!["sup_abs_v".into(), num(t), num(sup), "1".into()]);
        summary.rows.push(vec!["contour_nodes".into(), num(t), contour.nodes.len().to_string(), "1".into()]);
        rep.push(format!("green parts sum t={t}"), checksum < 1e-10, format!("max |total - sum of parts| = {checksum:.3e}"));
    }

    let (alpha, theta) = (cfg.contour.alpha, cfg.contour.theta);
    let tt = &g.transport_times;
    let mut peaks = Vec::with_capacity(tt.len());
    for &t in tt {
        let p = g1_peak(&st.sym, &md, alpha, theta, t, 0.0, 2.0 * md.alpha1 * t + 20.0, 0.05)?;
        summary.rows.push(vec!["g1_peak".into(), num(t), num(p), "length".into()]);
        peaks.push(p);
    }
    let (_, speed) = fit_line(tt, &peaks);
    summary.rows.push(vec!["transport_speed".into(), "".into(), num(speed), "length/time".into()]);
    let rel = (speed - md.alpha1).abs() / md.alpha1;
    rep.push("transport speed", rel <= 0.15, format!("fitted {speed:.4} vs alpha1 = {:.4} ({:.1}%)", md.alpha1, 100.0 * rel));
    let env = fit_envelope(&st.sym, &md, alpha, theta, tt, &[-5.0, 0.0, 5.0], 100)?;
    summary.rows.push(vec!["envelope_C".into(), "".into(), num(env.c), "1".into()]);
    summary.rows.push(vec!["envelope_kappa".into(), "".into(), num(env.kappa_env), "1".into()]);
    summary.rows.push(vec!["envelope_points".into(), "".into(), env.points.to_string(), "1".into()]);
    rep.push("gaussian envelope", env.c > 0.0 && env.kappa_env > 0.0, format!("C = {:.4}, kappa_env = {} on {} points", env.c, env.kappa_env, env.points));
    summary.write(&out.join(GREEN_SUMMARY_FILE))?;
    Ok(rep)
}

// ---------------------------------------------------------------------------
// evolve

pub fn sub_exp(spec: &WeightSpec) -> SubExpWeight {
    match *spec {
        WeightSpec::Const => SubExpWeight::constant(),
        WeightSpec::Power { a, eta, m } => SubExpWeight::new(format!("power({a})"), WeightKind::Power(a), eta, m),
        WeightSpec::Log { a, eta, m } => SubExpWeight::new(format!("log({a})"), WeightKind::Log(a), eta, m),
    }
}

pub fn initial_data(d: &DataSpec) -> InitialData {
    match *d {
        DataSpec::Shift { s } => InitialData::Shift(s),
        DataSpec::Bump { amp, width, center } => InitialData::Bump { amp, width, center },
        DataSpec::WeightedTail { amp, eta, cutoff } => InitialData::WeightedTail { amp, eta, cutoff },
    }
}

fn label(d: &DataSpec) -> String {
    match *d {
        DataSpec::Shift { s } => format!("shift({s})"),
        DataSpec::Bump { amp, width, center } => format!("bump({amp},{width},{center})"),
        DataSpec::WeightedTail { amp, eta, cutoff } => match cutoff {
            Some(x) => format!("weighted-tail({amp},{eta},{x})"),
            None => format!("weighted-tail({amp},{eta})"),
        },
    }
}

pub fn cmd_evolve(cfg: &RunConfig, out: &Path, force: bool) -> Result<AssumptionReport> {
    require_check(out, force)?;
    let st = setup(cfg)?;
    let md = marginal(&st)?;
    let e = &cfg.evolve;
    let sigma = md.alpha1;
    let opts = EvolveOptions { l: e.l, h: e.h, dt: e.dt, t_end: e.t_end, output_every: e.output_every, inflow_speed: Some(sigma) };
    let rho = sub_exp(&e.rho);
    let window = (0.25 * e.t_end, e.t_end);
    let mut rep = AssumptionReport::default();
    let mut summary = Table::new(&["run", "data", "quantity", "value", "unit"]);
    for (k, d) in e.data.iter().enumerate() {
        let init = initial_data(d);
        let name = label(d);
        let tr = run(&st.op, &init, &opts, &[])?;
        let dec = decay_monitor(&tr, &st.op, &rho, sigma, sigma / 4.0, window)?;
        let mut t = Table::new(&["t [time]", "v_inf [1]", "vx_inf [1/length]", "theta_rho [1]", "ratio [1]"]);
        t.comments.push(format!("data = {name}, rho = {}, C = {:.6}", rho.name, dec.c_rho));
        for i in 0..tr.times.len() {
            t.rows.push(vec![num(tr.times[i]), num(tr.v_inf[i]), num(tr.vx_inf[i]), num(dec.theta_rho[i]), num(dec.ratio[i])]);
        }
        t.write(&out.join(format!("evolve_{k}.csv")))?;

        let w1 = tr.w1inf();
        let e0 = w1[0];
        let sup = w1.iter().cloned().fold(0.0, f64::max);
        let max_ratio = dec.ratio.iter().cloned().fold(0.0, f64::max);
        let mut put = |q: &str, v: f64, unit: &str| summary.rows.push(vec![k.to_string(), name.clone(), q.into(), num(v), unit.into()]);
        put("E0", e0, "1");
        put("sup_w1inf", sup, "1");
        put("sup_over_E0", if e0 > 0.0 { sup / e0 } else { 0.0 }, "1");
        put("decay_exponent", dec.exponent, "1");
        put("e0_rho", dec.e0_rho, "1");
        put("max_ratio", max_ratio, "1");
        put("c_rho", dec.c_rho, "length/time");
        if let DataSpec::Shift { .. } = d {
            let u0 = init.u0(&st.op, &tr.xs);
            let ph = phase_shift(&st.op, &tr.xs, &u0)?;
            put("x_inf", ph.x_inf, "length");
            put("b_re", ph.b.re, "1");
            rep.push(format!("phase shift [{name}]"), ph.x_inf.is_finite(), format!("x_inf = {:.6} (b = {:.6e})", ph.x_inf, ph.b.re));
        }
        rep.push(
            format!("bounded orbit [{name}]"),
            sup.is_finite(),
            format!("sup |v|_W1inf = {sup:.4e}, E0 = {e0:.4e}, decay exponent {:.3} on [{}, {}], max ratio {max_ratio:.3}", dec.exponent, window.0, window.1),
        );
    }
    summary.write(&out.join(EVOLVE_SUMMARY_FILE))?;
    Ok(rep)
}

// ---------------------------------------------------------------------------
// report

/// Merges the check, green and evolve artifacts into `summary.csv`.
pub fn cmd_report(out: &Path) -> Result<AssumptionReport> {
    let p = require(out, &[CHECK_FILE, GREEN_SUMMARY_FILE, EVOLVE_SUMMARY_FILE])?;
    let mut rep = AssumptionReport::default();
    let mut t = Table::new(&["item", "quantity", "value", "unit", "source"]);

    let check = read_table(&p[0])?;
    let passed = check.iter().filter(|r| r.get(1) == Some("true")).count();
    t.rows.push(vec!["assumptions".into(), "items passed".into(), format!("{passed}/{}", check.len()), "1".into(), CHECK_FILE.into()]);
    rep.push("assumptions", passed == check.len(), format!("{passed} of {} check items passed", check.len()));

    for r in read_table(&p[2])? {
        let (data, q, v, unit) = (r.get(1).unwrap_or(""), r.get(2).unwrap_or(""), r.get(3).unwrap_or(""), r.get(4).unwrap_or(""));
        let item = match q {
            "sup_w1inf" | "sup_over_E0" | "E0" => "item 1: bounded orbit",
            "x_inf" => "item 2: asymptotic phase",
            "decay_exponent" | "max_ratio" | "c_rho" => "item 3: weighted decay",
            _ => continue,
        };
        t.rows.push(vec![item.into(), format!("{q} [{data}]"), v.into(), unit.into(), EVOLVE_SUMMARY_FILE.into()]);
    }
    let mut have_env = false;
    for r in read_table(&p[1])? {
        let (q, tt, v, unit) = (r.get(0).unwrap_or(""), r.get(1).unwrap_or(""), r.get(2).unwrap_or(""), r.get(3).unwrap_or(""));
        let item = match q {
            "envelope_C" | "envelope_kappa" | "envelope_points" => {
                have_env = true;
                "gaussian envelope"
            }
            "transport_speed" => "transport",
            "checksum" => "kernel parts",
            _ => continue,
        };
        let q = if tt.is_empty() { q.to_string() } else { format!("{q} [t={tt}]") };
        t.rows.push(vec![item.into(), q, v.into(), unit.into(), GREEN_SUMMARY_FILE.into()]);
    }
    rep.push("envelope fit present", have_env, "Gaussian envelope constants merged");
    t.write(&out.join(SUMMARY_FILE))?;
    Ok(rep)
}
