//! Experiment configuration: TOML with nested sections, fail-closed on
//! unknown keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wave_plate_core::dynamics::{IntegratorConfig, Scheme};
use wave_plate_core::potentialwell::DepthOptions;
use wave_plate_core::sources::SourceParams;
use wave_plate_core::{GridSpec, SourceSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub geometry: Geometry,
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub initial: InitialData,
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub analyses: Analyses,
    #[serde(default)]
    pub well: WellSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

/// Either `n` (all axes) or `n_per_axis`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dim: usize,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub n_per_axis: Option<Vec<usize>>,
}

impl Geometry {
    pub fn spec(&self) -> Result<GridSpec, ConfigError> {
        match (&self.n, &self.n_per_axis) {
            (Some(n), None) => Ok(GridSpec::uniform(self.dim, *n)),
            (None, Some(v)) => Ok(GridSpec {
                dim: self.dim,
                n_per_axis: v.clone(),
            }),
            (Some(_), Some(_)) => Err(invalid("geometry: give either `n` or `n_per_axis`, not both")),
            (None, None) => Err(invalid("geometry: `n` or `n_per_axis` is required")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            name: "zero".into(),
            params: BTreeMap::new(),
        }
    }
}

impl SourceSection {
    pub fn build(&self) -> Result<SourceSpec, ConfigError> {
        let mut p = SourceParams::default();
        let mut unknown = Vec::new();
        for (k, &v) in &self.params {
            let slot = match k.as_str() {
                "p" => &mut p.p,
                "q" => &mut p.q,
                "c" => &mut p.c,
                "offset" => &mut p.offset,
                "scale" => &mut p.scale,
                "theta" => &mut p.theta,
                _ => {
                    unknown.push(format!("source.params.{k}"));
                    continue;
                }
            };
            *slot = Some(v);
        }
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        SourceSpec::builtin(&self.name, &p).map_err(|e| invalid(format!("source: {e}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Zero,
    SingleMode,
    Random,
    Modes,
}

/// Component of the initial state addressed by `single_mode`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    U0,
    U1,
    #[default]
    W0,
    W1,
}

/// Initial data in eigenmode coefficients (mass-normalized modes).
///
/// * `zero`
/// * `single_mode`: `amplitude` times mode `which` (1-based) of `field`
/// * `random`: uniform coefficients in `[-scale, scale]` on the lowest
///   `modes` modes of every component; displacement coefficients are divided
///   by `sqrt(λ_k)` so each mode carries comparable energy
/// * `modes`: explicit coefficient lists `u0`, `u1`, `w0`, `w1`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    #[serde(default)]
    pub preset: Preset,
    pub which: Option<usize>,
    pub amplitude: Option<f64>,
    pub field: Option<Component>,
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub modes: Option<usize>,
    pub u0: Option<Vec<f64>>,
    pub u1: Option<Vec<f64>>,
    pub w0: Option<Vec<f64>>,
    pub w1: Option<Vec<f64>>,
}

impl InitialData {
    fn validate(&self) -> Result<(), ConfigError> {
        let given: [(&str, bool); 10] = [
            ("which", self.which.is_some()),
            ("amplitude", self.amplitude.is_some()),
            ("field", self.field.is_some()),
            ("seed", self.seed.is_some()),
            ("scale", self.scale.is_some()),
            ("modes", self.modes.is_some()),
            ("u0", self.u0.is_some()),
            ("u1", self.u1.is_some()),
            ("w0", self.w0.is_some()),
            ("w1", self.w1.is_some()),
        ];
        let allowed: &[&str] = match self.preset {
            Preset::Zero => &[],
            Preset::SingleMode => &["which", "amplitude", "field"],
            Preset::Random => &["seed", "scale", "modes"],
            Preset::Modes => &["u0", "u1", "w0", "w1"],
        };
        let stray: Vec<&str> = given
            .iter()
            .filter(|(k, set)| *set && !allowed.contains(k))
            .map(|(k, _)| *k)
            .collect();
        if !stray.is_empty() {
            return Err(invalid(format!(
                "initial: {} not used by preset `{}`",
                stray.join(", "),
                preset_name(self.preset)
            )));
        }
        match self.preset {
            Preset::SingleMode => {
                let a = self
                    .amplitude
                    .ok_or_else(|| invalid("initial: single_mode needs `amplitude`"))?;
                if !a.is_finite() {
                    return Err(invalid("initial: amplitude must be finite"));
                }
                if self.which == Some(0) {
                    return Err(invalid("initial: `which` is 1-based"));
                }
            }
            Preset::Random => {
                if let Some(s) = self.scale {
                    if !(s.is_finite() && s >= 0.0) {
                        return Err(invalid("initial: scale must be >= 0"));
                    }
                }
                if self.modes == Some(0) {
                    return Err(invalid("initial: modes must be >= 1"));
                }
            }
            Preset::Modes => {
                for v in [&self.u0, &self.u1, &self.w0, &self.w1].into_iter().flatten() {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(invalid("initial: mode coefficients must be finite"));
                    }
                }
            }
            Preset::Zero => {}
        }
        Ok(())
    }
}

pub fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Zero => "zero",
        Preset::SingleMode => "single_mode",
        Preset::Random => "random",
        Preset::Modes => "modes",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSection {
    pub scheme: Scheme,
    pub dt: f64,
    pub horizon: f64,
    /// Observer stride in steps.
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "default_nonlinear_tol")]
    pub nonlinear_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_nonlinear_iters: usize,
}

fn one() -> usize {
    1
}

fn default_nonlinear_tol() -> f64 {
    1e-12
}

fn default_max_iters() -> usize {
    100
}

impl IntegratorSection {
    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            scheme: self.scheme,
            dt: self.dt,
            nonlinear_tol: self.nonlinear_tol,
            max_nonlinear_iters: self.max_nonlinear_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDependence {
    pub epsilon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Analyses {
    #[serde(default)]
    pub energy_identity: bool,
    #[serde(default)]
    pub gronwall: bool,
    #[serde(default)]
    pub well_invariance: bool,
    #[serde(default)]
    pub continuous_dependence: Option<ContinuousDependence>,
    #[serde(default)]
    pub truncation_consistency: bool,
    /// Relative tolerance of the energy checks; defaults per scheme.
    #[serde(default)]
    pub energy_tolerance: Option<f64>,
}

impl Analyses {
    /// Energy tolerance: tight for the conservative implicit schemes, loose
    /// for leapfrog whose energy only oscillates at `O(dt²)`.
    pub fn energy_tolerance(&self, scheme: Scheme) -> f64 {
        self.energy_tolerance.unwrap_or(match scheme {
            Scheme::ImplicitMidpoint | Scheme::DiscreteGradient => 1e-8,
            Scheme::Leapfrog => 1e-3,
        })
    }

    /// Tolerance of the total-energy drift inside the invariance check;
    /// the implicit midpoint rule conserves `ℰ` only to `O(dt²)`.
    pub fn invariance_tolerance(&self, scheme: Scheme) -> f64 {
        self.energy_tolerance.unwrap_or(match scheme {
            Scheme::DiscreteGradient => 1e-8,
            Scheme::ImplicitMidpoint | Scheme::Leapfrog => 1e-3,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellSection {
    /// Estimate the depth and classify every trace sample.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_well_modes")]
    pub modes: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    #[serde(default)]
    pub full: bool,
}

fn yes() -> bool {
    true
}

fn default_well_modes() -> usize {
    DepthOptions::default().modes
}

fn default_restarts() -> usize {
    DepthOptions::default().restarts
}

fn default_sweeps() -> usize {
    DepthOptions::default().sweeps
}

impl Default for WellSection {
    fn default() -> Self {
        Self {
            enabled: true,
            modes: default_well_modes(),
            restarts: default_restarts(),
            sweeps: default_sweeps(),
            full: false,
        }
    }
}

impl WellSection {
    pub fn options(&self, seed: u64) -> DepthOptions {
        DepthOptions {
            modes: self.modes,
            restarts: self.restarts,
            sweeps: self.sweeps,
            seed,
            full: self.full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_trace")]
    pub trace: String,
    #[serde(default = "default_summary")]
    pub summary: String,
    #[serde(default = "default_final_state")]
    pub final_state: String,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_trace() -> String {
    "trace.csv".into()
}

fn default_summary() -> String {
    "summary.json".into()
}

fn default_final_state() -> String {
    "final_state.json".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            trace: default_trace(),
            summary: default_summary(),
            final_state: default_final_state(),
        }
    }
}

/// Cartesian product over dotted config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub axes: Vec<SweepAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    /// Dotted path such as `initial.amplitude`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, toml::Value), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let cfg = Self::from_value(raw.clone())?;
        Ok((cfg, raw))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_value(raw)
    }

    /// Deserializes and validates, collecting every unknown key.
    pub fn from_value(raw: toml::Value) -> Result<Self, ConfigError> {
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(raw, |path| unknown.push(path.to_string()))
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.spec()?;
        let source = self.source.build()?;
        let it = &self.integrator;
        if !(it.dt.is_finite() && it.dt > 0.0) {
            return Err(invalid(format!("integrator: dt must be > 0, got {}", it.dt)));
        }
        if !(it.horizon.is_finite() && it.horizon > 0.0) {
            return Err(invalid(format!("integrator: horizon must be > 0, got {}", it.horizon)));
        }
        if it.stride == 0 {
            return Err(invalid("integrator: stride must be >= 1"));
        }
        if !(it.nonlinear_tol.is_finite() && it.nonlinear_tol > 0.0) || it.max_nonlinear_iters == 0 {
            return Err(invalid(
                "integrator: nonlinear_tol and max_nonlinear_iters must be positive",
            ));
        }
        self.initial.validate()?;
        let a = &self.analyses;
        if a.gronwall && source.linear_growth_c().is_none() {
            return Err(invalid(format!(
                "analyses: gronwall needs a source of linear growth, `{}` has none",
                source.name()
            )));
        }
        if a.well_invariance {
            if !self.well.enabled {
                return Err(invalid("analyses: well_invariance needs [well] enabled"));
            }
            if source.theta().is_none() && !source.is_zero() {
                return Err(invalid(format!(
                    "analyses: well_invariance needs a superlinear source, `{}` has no AR exponent",
                    source.name()
                )));
            }
        }
        if let Some(cd) = &a.continuous_dependence {
            if !(cd.epsilon.is_finite() && cd.epsilon > 0.0) {
                return Err(invalid("analyses: continuous_dependence.epsilon must be > 0"));
            }
        }
        if let Some(t) = a.energy_tolerance {
            if !(t.is_finite() && t > 0.0) {
                return Err(invalid("analyses: energy_tolerance must be > 0"));
            }
        }
        if self.well.enabled && (self.well.modes == 0 || self.well.restarts == 0) {
            return Err(invalid("well: modes and restarts must be >= 1"));
        }
        if let Some(sw) = &self.sweep {
            if sw.axes.is_empty() {
                return Err(invalid("sweep: at least one axis is required"));
            }
            for ax in &sw.axes {
                if ax.values.is_empty() {
                    return Err(invalid(format!("sweep: axis `{}` has no values", ax.key)));
                }
                if ax.key.starts_with("sweep") {
                    return Err(invalid("sweep: an axis cannot address the sweep section"));
                }
            }
        }
        Ok(())
    }
}

/// One sweep cell: the assignments applied and the resulting config.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
    pub config: ExperimentConfig,
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| invalid(format!("sweep: `{key}` does not address a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    Err(invalid("sweep: empty key"))
}

/// Expands the `[sweep]` section of `raw` into cells in row-major order
/// (the last axis varies fastest).
pub fn expand_sweep(raw: &toml::Value) -> Result<Vec<SweepCell>, ConfigError> {
    let cfg = ExperimentConfig::from_value(raw.clone())?;
    let sweep = cfg
        .sweep
        .ok_or_else(|| invalid("sweep: the config has no [sweep] section"))?;
    let mut base = raw.clone();
    if let Some(t) = base.as_table_mut() {
        t.remove("sweep");
    }
    let sizes: Vec<usize> = sweep.axes.iter().map(|a| a.values.len()).collect();
    let total: usize = sizes.iter().product();
    let mut cells = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut picks = vec![0; sizes.len()];
        for a in (0..sizes.len()).rev() {
            picks[a] = rem % sizes[a];
            rem /= sizes[a];
        }
        let mut value = base.clone();
        let mut assignments = Vec::new();
        for (ax, &k) in sweep.axes.iter().zip(&picks) {
            set_dotted(&mut value, &ax.key, ax.values[k].clone())?;
            assignments.push((ax.key.clone(), ax.values[k].clone()));
        }
        let config = ExperimentConfig::from_value(value).map_err(|e| match e {
            ConfigError::Invalid(m) => invalid(format!("sweep cell {index}: {m}")),
            other => other,
        })?;
        cells.push(SweepCell {
            index,
            assignments,
            config,
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[geometry]
dim = 2
n = 8
[integrator]
scheme = "implicit_midpoint"
dt = 0.01
horizon = 0.1
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.source.name, "zero");
        assert_eq!(c.initial.preset, Preset::Zero);
        assert_eq!(c.integrator.stride, 1);
        assert_eq!(c.output.trace, "trace.csv");
        assert_eq!(c.geometry.spec().unwrap(), GridSpec::uniform(2, 8));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text = format!("{BASE}\nbogus = 1\n[analyses]\nenergy_identity = true\ngronwal = true\n");
        match ExperimentConfig::parse(&text) {
            Err(ConfigError::UnknownKeys(k)) => {
                assert!(k.contains(&"integrator.bogus".to_string()), "{k:?}");
                assert!(k.contains(&"analyses.gronwal".to_string()), "{k:?}");
            }
            other => panic!("{other:?}"),
        }
        let text = format!("{BASE}\n[source]\nname = \"power\"\nparams = {{ p = 3.0, r = 1.0 }}\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::UnknownKeys(k)) if k == ["source.params.r"]));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad_dt = BASE.replace("dt = 0.01", "dt = -1.0");
        assert!(matches!(ExperimentConfig::parse(&bad_dt), Err(ConfigError::Invalid(_))));
        let bad_source = format!("{BASE}\n[source]\nname = \"cosine\"\n");
        assert!(matches!(
            ExperimentConfig::parse(&bad_source),
            Err(ConfigError::Invalid(_))
        ));
        let gron = format!("{BASE}\n[source]\nname = \"power\"\n[analyses]\ngronwall = true\n");
        assert!(matches!(ExperimentConfig::parse(&gron), Err(ConfigError::Invalid(_))));
        let stray = format!("{BASE}\n[initial]\npreset = \"zero\"\namplitude = 1.0\n");
        assert!(matches!(ExperimentConfig::parse(&stray), Err(ConfigError::Invalid(_))));
        let wrong_type = BASE.replace("n = 8", "n = \"eight\"");
        assert!(matches!(
            ExperimentConfig::parse(&wrong_type),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn sweep_expands_row_major() {
        let text = format!(
            "{BASE}\n[initial]\npreset = \"single_mode\"\namplitude = 1.0\n[sweep]\naxes = [\n  {{ key = \"initial.amplitude\", values = [0.1, 1.0, 10.0] }},\n  {{ key = \"integrator.dt\", values = [0.01, 0.005] }},\n]\n"
        );
        let raw: toml::Value = text.parse().unwrap();
        let cells = expand_sweep(&raw).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1].config.initial.amplitude, Some(0.1));
        assert_eq!(cells[1].config.integrator.dt, 0.005);
        assert_eq!(cells[4].config.initial.amplitude, Some(10.0));
        assert!(cells.iter().all(|c| c.config.sweep.is_none()));
    }
}
