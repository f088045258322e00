//! Run configuration (TOML). Unknown keys are rejected and every numeric
//! field is range-checked by `validate`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Builtin name (`fisher`, `nagumo`, `kpp2`); ignored when `inline` is set.
    #[serde(default = "d_model")]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<ModelSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default = "d_profile_l")]
    pub half_width: f64,
    #[serde(default = "d_profile_h")]
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    /// Omega decay rate; absent means the fitted tail rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default = "d_theta0")]
    pub theta0: f64,
    #[serde(default = "d_radius")]
    pub radius: f64,
    #[serde(default = "d_halvings")]
    pub max_halvings: usize,
    #[serde(default = "d_gap_samples")]
    pub gap_samples: usize,
    #[serde(default = "d_ray_points")]
    pub ray_points: usize,
    #[serde(default = "d_arc_points")]
    pub arc_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContourConfig {
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_theta_c")]
    pub theta: f64,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_panel")]
    pub panel: f64,
    #[serde(default = "d_gamma0")]
    pub gamma0_nodes: usize,
    /// Node spacing of the kernel frames.
    #[serde(default = "d_dx")]
    pub dx: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GreenConfig {
    #[serde(default = "d_times")]
    pub times: Vec<f64>,
    /// Kernel grid is `[-domain, domain]`.
    #[serde(default = "d_domain")]
    pub domain: f64,
    /// Width of the Gaussian initial datum `exp(-(x / width)^2)`.
    #[serde(default = "d_width")]
    pub width: f64,
    /// Times at which the peak of the scalar kernel part is tracked.
    #[serde(default = "d_transport")]
    pub transport_times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightSpec {
    Const,
    Power { a: f64, eta: f64, m: f64 },
    Log { a: f64, eta: f64, m: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Shift { s: f64 },
    Bump { amp: f64, width: f64, center: f64 },
    WeightedTail {
        amp: f64,
        eta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cutoff: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    #[serde(default = "d_l")]
    pub l: f64,
    #[serde(default = "d_h")]
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "d_t_end")]
    pub t_end: f64,
    #[serde(default = "d_every")]
    pub output_every: f64,
    #[serde(default = "d_data")]
    pub data: Vec<DataSpec>,
    /// Weight used by the decay monitor.
    #[serde(default = "d_rho")]
    pub rho: WeightSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out")]
    pub out: String,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
    #[serde(default)]
    pub weight: WeightConfig,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub contour: ContourConfig,
    #[serde(default)]
    pub green: GreenConfig,
    #[serde(default = "d_weights")]
    pub weights: Vec<WeightSpec>,
    #[serde(default)]
    pub evolve: EvolveConfig,
}

fn d_model() -> String {
    "fisher".into()
}
fn d_profile_l() -> f64 {
    60.0
}
fn d_profile_h() -> f64 {
    0.02
}
fn d_theta0() -> f64 {
    0.05
}
fn d_radius() -> f64 {
    10.0
}
fn d_halvings() -> usize {
    8
}
fn d_gap_samples() -> usize {
    200
}
fn d_ray_points() -> usize {
    20
}
fn d_arc_points() -> usize {
    40
}
fn d_alpha() -> f64 {
    0.25
}
fn d_theta_c() -> f64 {
    0.5
}
fn d_tol() -> f64 {
    1e-12
}
fn d_panel() -> f64 {
    0.25
}
fn d_gamma0() -> usize {
    400
}
fn d_dx() -> f64 {
    0.05
}
fn d_times() -> Vec<f64> {
    vec![5.0, 10.0, 20.0]
}
fn d_transport() -> Vec<f64> {
    vec![10.0, 20.0, 40.0, 80.0]
}
fn d_domain() -> f64 {
    40.0
}
fn d_width() -> f64 {
    1.0
}
fn d_l() -> f64 {
    100.0
}
fn d_h() -> f64 {
    0.1
}
fn d_t_end() -> f64 {
    200.0
}
fn d_every() -> f64 {
    1.0
}
fn d_data() -> Vec<DataSpec> {
    vec![DataSpec::Shift { s: 0.1 }]
}
fn d_rho() -> WeightSpec {
    WeightSpec::Power { a: 0.25, eta: 0.4, m: 4.0 }
}
fn d_weights() -> Vec<WeightSpec> {
    vec![WeightSpec::Const, WeightSpec::Power { a: 0.25, eta: 0.4, m: 4.0 }, WeightSpec::Log { a: 0.25, eta: 0.4, m: 4.0 }]
}
fn d_out() -> String {
    "out".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: d_model(), inline: None }
    }
}
impl Default for ProfileConfig {
    fn default() -> Self {
        Self { half_width: d_profile_l(), h: d_profile_h() }
    }
}
impl Default for WeightConfig {
    fn default() -> Self {
        Self { kappa: None, xi0: None }
    }
}
impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { theta0: d_theta0(), radius: d_radius(), max_halvings: d_halvings(), gap_samples: d_gap_samples(), ray_points: d_ray_points(), arc_points: d_arc_points() }
    }
}
impl Default for ContourConfig {
    fn default() -> Self {
        Self { alpha: d_alpha(), theta: d_theta_c(), tol: d_tol(), panel: d_panel(), gamma0_nodes: d_gamma0(), dx: d_dx() }
    }
}
impl Default for GreenConfig {
    fn default() -> Self {
        Self { times: d_times(), domain: d_domain(), width: d_width(), transport_times: d_transport() }
    }
}
impl Default for EvolveConfig {
    fn default() -> Self {
        Self { l: d_l(), h: d_h(), dt: None, t_end: d_t_end(), output_every: d_every(), data: d_data(), rho: d_rho() }
    }
}
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: d_out(),
            model: ModelConfig::default(),
            profile: ProfileConfig::default(),
            weight: WeightConfig::default(),
            spectrum: SpectrumConfig::default(),
            contour: ContourConfig::default(),
            green: GreenConfig::default(),
            weights: d_weights(),
            evolve: EvolveConfig::default(),
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} out of range")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical TOML: every field written out with defaults filled in.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.profile;
        check(p.half_width >= 10.0 && p.half_width <= 500.0, "profile.half_width (10..500)")?;
        check(p.h > 0.0 && p.h <= 0.5, "profile.h (0..0.5]")?;
        if let Some(k) = self.weight.kappa {
            check((0.0..=20.0).contains(&k), "weight.kappa [0, 20]")?;
        }
        if let Some(x) = self.weight.xi0 {
            check(x.is_finite(), "weight.xi0")?;
        }
        let s = &self.spectrum;
        check(s.theta0 > 0.0 && s.theta0 <= 1.0, "spectrum.theta0 (0, 1]")?;
        check(s.radius > 0.0 && s.radius <= 100.0, "spectrum.radius (0, 100]")?;
        check(s.max_halvings <= 30, "spectrum.max_halvings <= 30")?;
        check(s.gap_samples >= 10 && s.gap_samples <= 100_000, "spectrum.gap_samples [10, 1e5]")?;
        check(s.ray_points >= 4 && s.arc_points >= 4, "spectrum.ray_points/arc_points >= 4")?;
        let c = &self.contour;
        check(c.alpha >= 0.0 && c.alpha < 10.0, "contour.alpha [0, 10)")?;
        check(c.theta > 0.0 && c.theta <= 10.0, "contour.theta (0, 10]")?;
        check(c.tol > 0.0 && c.tol < 1e-3, "contour.tol (0, 1e-3)")?;
        check(c.panel > 0.0 && c.panel <= 2.0, "contour.panel (0, 2]")?;
        check(c.gamma0_nodes >= 16, "contour.gamma0_nodes >= 16")?;
        check(c.dx > 0.0 && c.dx <= 0.2, "contour.dx (0, 0.2]")?;
        let g = &self.green;
        check(!g.times.is_empty() && g.times.iter().all(|&t| t >= 0.1 && t <= 1000.0), "green.times [0.1, 1000]")?;
        check(g.domain >= 5.0 && g.domain <= 200.0, "green.domain [5, 200]")?;
        check(g.width > 0.0 && g.width <= 10.0, "green.width (0, 10]")?;
        check(g.transport_times.len() >= 2 && g.transport_times.iter().all(|&t| t >= 1.0 && t <= 1000.0), "green.transport_times (>= 2 values in [1, 1000])")?;
        for w in self.weights.iter().chain(std::iter::once(&self.evolve.rho)) {
            match *w {
                WeightSpec::Const => {}
                WeightSpec::Power { a, eta, m } | WeightSpec::Log { a, eta, m } => {
                    check(a >= 0.0 && a <= 10.0, "weight exponent a [0, 10]")?;
                    check(eta > 0.0 && m >= 1.0, "weight constants (eta > 0, M >= 1)")?;
                }
            }
        }
        let e = &self.evolve;
        check(e.l >= 10.0 && e.l <= 1000.0, "evolve.l [10, 1000]")?;
        check(e.h > 0.0 && e.h <= 0.5, "evolve.h (0, 0.5]")?;
        if let Some(dt) = e.dt {
            check(dt > 0.0, "evolve.dt > 0")?;
        }
        check(e.t_end > 0.0 && e.t_end <= 500.0, "evolve.t_end (0, 500]")?;
        check(e.output_every > 0.0 && e.output_every <= e.t_end, "evolve.output_every")?;
        for d in &e.data {
            match *d {
                DataSpec::Shift { s } => check(s.abs() <= 10.0, "shift |s| <= 10")?,
                DataSpec::Bump { amp, width, .. } => check(amp.is_finite() && width > 0.0, "bump amp/width")?,
                DataSpec::WeightedTail { amp, eta, .. } => check(amp.is_finite() && eta >= 0.0, "weighted-tail amp/eta")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[contour]\nalpah = 0.1").is_err());
    }

    #[test]
    fn ranges_checked() {
        assert!(RunConfig::parse("[contour]\ntheta = -1.0").is_err());
        assert!(RunConfig::parse("[evolve]\nt_end = 1000.0").is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let text = "seed = 7\n[model]\nname = \"nagumo\"\n[[evolve.data]]\nkind = \"bump\"\namp = 0.01\nwidth = 2.0\ncenter = 0.0\n";
        let cfg = RunConfig::parse(text).unwrap();
        let canon = cfg.canonical().unwrap();
        let again = RunConfig::parse(&canon).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(canon, again.canonical().unwrap());
    }
}
