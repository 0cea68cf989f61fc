//! Scenario files: TOML with named presets only.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::*;
use crate::error::{Error, Result};
use crate::fpe1d::FpScheme;
use crate::simulator::{CostKind, Coupling, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub dim: usize,
    #[serde(default = "unit")]
    pub alpha: f64,
    /// b(x) = -rate x.
    #[serde(default = "unit")]
    pub rate: f64,
    #[serde(default)]
    pub sigma_hat: f64,
    /// Strength of the quadratic interaction W = s |x - y|^2 / 2.
    #[serde(default)]
    pub s: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Example21(Example21Params),
    Granular(GranularParams),
    #[serde(rename = "orderpreserving")]
    OrderPreserving(OrderParams),
    Ou(OuParams),
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::Example21(p) => p.dim,
            ModelConfig::Granular(p) => p.dim,
            ModelConfig::OrderPreserving(p) => p.dim,
            ModelConfig::Ou(p) => p.dim,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ModelConfig::Example21(_) => "example21",
            ModelConfig::Granular(_) => "granular",
            ModelConfig::OrderPreserving(_) => "orderpreserving",
            ModelConfig::Ou(_) => "ou",
        }
    }

    pub fn coefficients(&self) -> CoefficientSet {
        match self {
            ModelConfig::Example21(p) => example21_coefficients(p),
            ModelConfig::Granular(p) => granular_coefficients(p),
            ModelConfig::OrderPreserving(p) => order_preserving_coefficients(p),
            ModelConfig::Ou(p) => ou_coefficients(p.dim, p.alpha, p.rate, p.sigma_hat, p.s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Example21(p) => p.validate(),
            ModelConfig::Granular(p) => p.validate(),
            ModelConfig::OrderPreserving(p) => p.validate(),
            ModelConfig::Ou(p) => {
                if p.dim == 0 || p.alpha < 0.0 || p.rate.is_nan() {
                    Err(Error::Config("ou: dim >= 1 and alpha >= 0 required".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PsiSpec {
    Identity,
    Power {
        p: f64,
    },
    /// First mixed Dirichlet-Neumann eigenfunction on [0, l]; K is estimated from the drift when absent.
    Eigen {
        l: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<f64>,
    },
    /// Concave profile built from the Gamma constants of the model.
    Explicit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nodes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitLaw {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Dirac { at: f64 },
}

impl InitLaw {
    /// Distribution function of one coordinate, for the PDE initial condition.
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            InitLaw::Normal { mean, std } => {
                0.5 * statrs::function::erf::erfc(-(x - mean) / (std * std::f64::consts::SQRT_2))
            }
            InitLaw::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            InitLaw::Dirac { at } => {
                if x >= at {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn validate(&self, which: &str) -> Result<()> {
        let ok = match *self {
            InitLaw::Normal { mean, std } => mean.is_finite() && std > 0.0 && std.is_finite(),
            InitLaw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            InitLaw::Dirac { at } => at.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("init.{which}: invalid parameters {self:?}")))
        }
    }
}

fn yes() -> bool {
    true
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub mu: InitLaw,
    pub nu: InitLaw,
    /// Pair the initial samples by an optimal assignment under the run cost.
    #[serde(default = "yes")]
    pub matching: bool,
    /// Replace (x, y) by (x max y, x min y) componentwise so that X0 >= Y0.
    #[serde(default, skip_serializing_if = "is_false")]
    pub order_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpeSection {
    pub m: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default)]
    pub scheme: FpScheme,
    /// Write a density snapshot every this many steps; 0 writes only the final state.
    #[serde(default)]
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    #[serde(default = "default_beta_grid")]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_l_grid")]
    pub l_grid: Vec<f64>,
    #[serde(default = "default_k1_grid")]
    pub k1_grid: Vec<f64>,
    /// Multi-start count and per-start evaluation cap of the pattern search.
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_evals")]
    pub evals: usize,
    /// Radius of the probe box used for suprema and hypothesis checks.
    #[serde(default = "default_radius")]
    pub probe_radius: f64,
    /// Number of random lines for the puncture mass.
    #[serde(default = "default_lines")]
    pub lines: usize,
}

fn default_beta_grid() -> Vec<f64> {
    vec![0.001, 0.00316, 0.01, 0.0316, 0.1, 0.316, 1.0]
}
fn default_l_grid() -> Vec<f64> {
    vec![3.0, 4.0, 5.0, 6.0]
}
fn default_k1_grid() -> Vec<f64> {
    vec![0.3, 0.4, 0.45, 0.49]
}
fn default_starts() -> usize {
    24
}
fn default_evals() -> usize {
    4000
}
fn default_radius() -> f64 {
    50.0
}
fn default_lines() -> usize {
    1000
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig {
            beta_grid: default_beta_grid(),
            l_grid: default_l_grid(),
            k1_grid: default_k1_grid(),
            starts: default_starts(),
            evals: default_evals(),
            probe_radius: default_radius(),
            lines: default_lines(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
    /// Dump particle snapshots at every recorded step.
    #[serde(default, skip_serializing_if = "is_false")]
    pub snapshots: bool,
}

fn default_dir() -> String {
    "out".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelConfig,
    pub psi: PsiSpec,
    pub sim: SimConfig,
    pub init: InitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpe: Option<FpeSection>,
    #[serde(default)]
    pub rates: RatesConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

pub const BUILTIN_SCENARIOS: [&str; 4] = ["example21", "granular", "orderpreserving", "ou"];

fn sim(n: usize, h: f64, t: f64, coupling: Coupling, cost: CostKind) -> SimConfig {
    SimConfig {
        n,
        h,
        t,
        coupling,
        cost,
        ..SimConfig::default()
    }
}

pub fn builtin_scenario(name: &str) -> Option<Scenario> {
    let normal = |mean, std| InitLaw::Normal { mean, std };
    let sc = match name {
        "example21" => Scenario {
            name: name.into(),
            model: ModelConfig::Example21(Example21Params::default()),
            psi: PsiSpec::Eigen { l: 5.0, k: None },
            sim: sim(2000, 1e-3, 5.0, Coupling::Reflection, CostKind::Weighted),
            init: InitConfig {
                mu: normal(2.0, 0.5),
                nu: normal(-2.0, 0.5),
                matching: true,
                order_split: false,
            },
            fpe: None,
            rates: RatesConfig::default(),
            output: OutputConfig::default(),
        },
        "granular" => Scenario {
            name: name.into(),
            model: ModelConfig::Granular(GranularParams::default()),
            psi: PsiSpec::Explicit { nodes: None },
            sim: sim(4096, 1e-3, 6.0, Coupling::Reflection, CostKind::W1),
            init: InitConfig {
                mu: normal(1.5, 0.5),
                nu: normal(-1.0, 0.3),
                matching: true,
                order_split: false,
            },
            fpe: Some(FpeSection {
                m: 512,
                x_lo: -6.0,
                x_hi: 6.0,
                t: 2.0,
                dt: None,
                scheme: FpScheme::Explicit,
                record_every: 0,
            }),
            rates: RatesConfig {
                probe_radius: 10.0,
                ..RatesConfig::default()
            },
            output: OutputConfig::default(),
        },
        "orderpreserving" => Scenario {
            name: name.into(),
            model: ModelConfig::OrderPreserving(OrderParams::default()),
            psi: PsiSpec::Identity,
            sim: sim(4096, 1e-3, 8.0, Coupling::Synchronous, CostKind::Phi),
            init: InitConfig {
                mu: normal(1.0, 1.0),
                nu: normal(-1.0, 1.0),
                matching: false,
                order_split: true,
            },
            fpe: None,
            rates: RatesConfig::default(),
            output: OutputConfig::default(),
        },
        "ou" => Scenario {
            name: name.into(),
            model: ModelConfig::Ou(OuParams {
                dim: 1,
                alpha: 1.0,
                rate: 1.0,
                sigma_hat: 0.0,
                s: 0.0,
            }),
            psi: PsiSpec::Identity,
            sim: sim(2000, 1e-3, 5.0, Coupling::Synchronous, CostKind::W1),
            init: InitConfig {
                mu: normal(1.0, 0.5),
                nu: normal(0.0, 0.5),
                matching: true,
                order_split: false,
            },
            fpe: Some(FpeSection {
                m: 512,
                x_lo: -6.0,
                x_hi: 6.0,
                t: 2.0,
                dt: None,
                scheme: FpScheme::Explicit,
                record_every: 0,
            }),
            rates: RatesConfig {
                probe_radius: 10.0,
                ..RatesConfig::default()
            },
            output: OutputConfig::default(),
        },
        _ => return None,
    };
    Some(sc)
}

/// Apply `a.b.c=value` overrides to a TOML document; values parse as TOML, else as strings.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not KEY=VALUE")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut *doc;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

impl Scenario {
    /// Parse TOML text, reporting the failing field and position.
    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot emit scenario: {e}")))
    }

    /// Built-in name or file path, with optional overrides.
    pub fn load_with(name_or_path: &str, overrides: &[String]) -> Result<Scenario> {
        let text = match builtin_scenario(name_or_path) {
            Some(sc) => sc.to_toml_string()?,
            None => std::fs::read_to_string(name_or_path).map_err(|e| {
                Error::Config(format!(
                    "`{name_or_path}` is neither a built-in scenario ({}) nor a readable file: {e}",
                    BUILTIN_SCENARIOS.join(", ")
                ))
            })?,
        };
        if overrides.is_empty() {
            return Scenario::from_toml_str(&text);
        }
        let mut doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Scenario::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.sim;
        if s.n < 2 {
            return Err(Error::Config(format!("sim.n = {} must be at least 2", s.n)));
        }
        if !(s.h > 0.0) || !s.h.is_finite() {
            return Err(Error::Config(format!("sim.h = {} must be positive", s.h)));
        }
        if !(s.t >= s.h) || !s.t.is_finite() {
            return Err(Error::Config(format!("sim.t = {} must be at least sim.h", s.t)));
        }
        if s.record_every == 0 {
            return Err(Error::Config("sim.record_every must be positive".into()));
        }
        if let Some(e) = s.eps_couple {
            if !(e > 0.0) {
                return Err(Error::Config(format!("sim.eps_couple = {e} must be positive")));
            }
        }
        if s.seed > i64::MAX as u64 {
            return Err(Error::Config("sim.seed must fit in a signed 64-bit integer".into()));
        }
        self.init.mu.validate("mu")?;
        self.init.nu.validate("nu")?;
        match self.psi {
            PsiSpec::Power { p } if !(p > 0.0) => {
                return Err(Error::Config(format!("psi.p = {p} must be positive")));
            }
            PsiSpec::Eigen { l, .. } if !(l > 0.0) => {
                return Err(Error::Config(format!("psi.l = {l} must be positive")));
            }
            _ => {}
        }
        if let Some(f) = &self.fpe {
            if f.m < 3 || !(f.x_hi > f.x_lo) || !(f.t > 0.0) {
                return Err(Error::Config("fpe: need m >= 3, x_hi > x_lo, t > 0".into()));
            }
            if self.model.dim() != 1 {
                return Err(Error::Config("fpe: the PDE solver is one-dimensional".into()));
            }
        }
        if self.rates.beta_grid.iter().any(|b| !(*b > 0.0)) || self.rates.l_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("rates: beta and l grids must be positive".into()));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> CoefficientSet {
        self.model.coefficients()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// SHA-256 of the canonical TOML emission.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

pub fn load_scenario(name_or_path: &str) -> Result<Scenario> {
    Scenario::load_with(name_or_path, &[])
}

pub fn emit_scenario(sc: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, sc.to_toml_string()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtins_load_and_validate() {
        for name in BUILTIN_SCENARIOS {
            let sc = load_scenario(name).unwrap();
            assert_eq!(sc.name, name);
            assert_eq!(sc, builtin_scenario(name).unwrap());
        }
        let ex = load_scenario("example21").unwrap();
        match &ex.model {
            ModelConfig::Example21(p) => assert_eq!(p.p, 0.5),
            m => panic!("wrong family {m:?}"),
        }
        assert_eq!(ex.coefficients().interaction.name(), "moment_phi");
    }

    #[test]
    fn missing_dim_is_named() {
        let sc = builtin_scenario("granular").unwrap();
        let text = sc.to_toml_string().unwrap();
        let broken: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with("dim ="))
            .collect::<Vec<_>>()
            .join("\n");
        let err = Scenario::from_toml_str(&broken).unwrap_err().to_string();
        assert!(err.contains("dim"), "{err}");
    }

    #[test]
    fn unknown_variant_rejected() {
        let text = builtin_scenario("ou")
            .unwrap()
            .to_toml_string()
            .unwrap()
            .replace("kind = \"ou\"", "kind = \"nope\"");
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let sc = Scenario::load_with("orderpreserving", &["model.strength=0.6".into(), "sim.n=100".into()]).unwrap();
        match sc.model {
            ModelConfig::OrderPreserving(p) => assert_eq!(p.strength, 0.6),
            _ => unreachable!(),
        }
        assert_eq!(sc.sim.n, 100);
    }

    #[test]
    fn emit_to_file_and_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        let sc = builtin_scenario("granular").unwrap();
        emit_scenario(&sc, &path).unwrap();
        assert_eq!(load_scenario(path.to_str().unwrap()).unwrap(), sc);
        assert_eq!(sc.hash().unwrap().len(), 64);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            (-1e6f64..1e6),
            (1e-300f64..1e-3),
            any::<f64>().prop_filter("finite", |v| v.is_finite())
        ]
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            h in 1e-9f64..1e-1,
            extra in 0.0f64..10.0,
            mean in finite(),
            std in 1e-12f64..1e3,
            seed in 0u64..(i64::MAX as u64),
            strength in 0.0f64..1.0,
            beta in proptest::collection::vec(1e-9f64..10.0, 1..6),
            eps in proptest::option::of(1e-6f64..1.0),
        ) {
            let mut sc = builtin_scenario("orderpreserving").unwrap();
            sc.sim.h = h;
            sc.sim.t = h * (1.0 + extra);
            sc.sim.seed = seed;
            sc.sim.eps_couple = eps;
            sc.init.mu = InitLaw::Normal { mean, std };
            sc.rates.beta_grid = beta;
            if let ModelConfig::OrderPreserving(p) = &mut sc.model {
                p.strength = strength;
            }
            let text = sc.to_toml_string().unwrap();
            let back = Scenario::from_toml_str(&text).unwrap();
            prop_assert_eq!(&back, &sc);
            prop_assert_eq!(back.sim.h.to_bits(), sc.sim.h.to_bits());
        }
    }
}
