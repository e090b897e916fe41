//! Experiment configuration: four TOML sections of flat `key = value` pairs.
//!
//! ```toml
//! [model]
//! operator = "wave"
//! dim = 1
//! correlation = "white"
//! sigma = "cos"
//! sigma_params = [1.0, 0.25]
//!
//! [grid]
//! nx = 64
//!
//! [task]
//! y = 1.0
//!
//! [output]
//! directory = "out"
//! ```
//!
//! Missing keys take the defaults of [`ExperimentConfig::default`]; unknown keys are
//! rejected. `--set section.key=value` overrides are applied to the parsed document
//! before validation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covkernel::{Correlation, CovarianceSpec, Operator};
use crate::error::{Error, Result};
use crate::noise::GridSpec;
use crate::solver::{Coefficient, InitialCondition, ModelSpec, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `wave` or `heat`
    pub operator: String,
    pub dim: usize,
    /// `white` or `riesz`
    pub correlation: String,
    pub beta: Option<f64>,
    /// `const`, `affine-clamped`, `cos` or `tanh`
    pub sigma: String,
    pub sigma_params: Vec<f64>,
    pub drift: String,
    pub drift_params: Vec<f64>,
    /// `zero` or `bump`
    pub init: String,
    /// `[u0, u1, width]` for `bump`
    pub init_params: Vec<f64>,
    pub sigma0: f64,
    pub eps: f64,
    pub eps_list: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            operator: "wave".into(),
            dim: 1,
            correlation: "white".into(),
            beta: None,
            sigma: "cos".into(),
            sigma_params: vec![1.0, 0.25],
            drift: "tanh".into(),
            drift_params: vec![0.5],
            init: "bump".into(),
            init_params: vec![0.3, 0.0, 0.3],
            sigma0: 0.75,
            eps: 1.0,
            eps_list: vec![1.0, 0.7, 0.5, 0.35],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// half side `L` of the periodic box `[-L, L)^d`
    pub half_width: f64,
    pub nx: usize,
    pub nt: usize,
    pub nk: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { half_width: 1.5, nx: 64, nt: 16, nk: 16, horizon: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Option<f64>,
    pub y_grid: Vec<f64>,
    pub replicas: usize,
    /// smoothing levels of the support experiment; `2^max` must divide `grid.nt`
    pub levels: Vec<u32>,
    pub theta: f64,
    pub budgets: Vec<f64>,
    pub n_controls: usize,
    /// known `I(y)`; otherwise the rate artifact is read
    pub rate: Option<f64>,
    /// directory holding a previous `rate` run (defaults to the output directory)
    pub rate_dir: Option<String>,
    pub bandwidth: Option<f64>,
    pub tol_c: Option<f64>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            t: 1.0,
            x: vec![0.0],
            y: None,
            y_grid: Vec::new(),
            replicas: 10_000,
            levels: vec![1, 2, 3, 4],
            theta: 0.75,
            budgets: vec![1.0, 10.0, 100.0],
            n_controls: 8,
            rate: None,
            rate_dir: None,
            bandwidth: None,
            tol_c: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
    /// `csv` is always written; `bin` adds binary payloads
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: "out".into(), formats: vec!["csv".into(), "bin".into()] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub task: TaskSection,
    pub output: OutputSection,
}

fn coefficient(name: &str, p: &[f64], which: &str) -> Result<Coefficient> {
    let want = |n: usize| {
        if p.len() == n {
            Ok(())
        } else {
            Err(Error::Config(format!("model.{which} = \"{name}\" takes {n} parameters, got {}", p.len())))
        }
    };
    match name {
        "const" => want(1).map(|_| Coefficient::Const { c: p[0] }),
        "affine-clamped" => {
            want(4)?;
            if !(p[2] < p[3]) {
                return Err(Error::Config(format!("model.{which}: clamp interval [{}, {}] is empty", p[2], p[3])));
            }
            Ok(Coefficient::AffineClamped { a: p[0], b: p[1], lo: p[2], hi: p[3] })
        }
        "cos" => want(2).map(|_| Coefficient::Cosine { a: p[0], b: p[1] }),
        "tanh" => want(1).map(|_| Coefficient::Tanh { a: p[0] }),
        other => Err(Error::Config(format!(
            "model.{which}: unknown function \"{other}\" (expected const, affine-clamped, cos or tanh)"
        ))),
    }
}

impl ExperimentConfig {
    /// Parses a document and applies `section.key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        // direct deserialization keeps line and column in error messages
        toml::from_str::<ExperimentConfig>(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML of the resolved configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Canonical TOML with `output.directory` reset, so that the same experiment written
    /// to different places has the same text.
    pub fn portable(&self) -> String {
        let mut c = self.clone();
        c.output.directory = OutputSection::default().directory;
        c.canonical()
    }

    /// SHA-256 of the portable text in git blob framing (`blob <len>\0<text>`).
    pub fn hash(&self) -> String {
        let text = self.portable();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", text.len()).as_bytes());
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        let m = &self.model;
        let operator = match m.operator.as_str() {
            "wave" => Operator::Wave,
            "heat" => Operator::Heat,
            other => return Err(Error::Config(format!("model.operator: unknown \"{other}\" (expected wave or heat)"))),
        };
        let correlation = match (m.correlation.as_str(), m.beta) {
            ("white", None) => Correlation::White,
            ("white", Some(_)) => {
                return Err(Error::Config("model.beta is only used with correlation = \"riesz\"".into()))
            }
            ("riesz", Some(beta)) => Correlation::Riesz { beta },
            ("riesz", None) => return Err(Error::Config("model.beta is required with correlation = \"riesz\"".into())),
            (other, _) => {
                return Err(Error::Config(format!("model.correlation: unknown \"{other}\" (expected white or riesz)")))
            }
        };
        CovarianceSpec::new(correlation, m.dim, operator)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let init = match m.init.as_str() {
            "zero" => InitialCondition::Zero,
            "bump" => {
                if m.init_params.len() != 3 {
                    return Err(Error::Config("model.init = \"bump\" takes [u0, u1, width]".into()));
                }
                InitialCondition::Bump { u0: m.init_params[0], u1: m.init_params[1], width: m.init_params[2] }
            }
            other => return Err(Error::Config(format!("model.init: unknown \"{other}\" (expected zero or bump)"))),
        };
        let spec = ModelSpec {
            cov: self.covariance()?,
            sigma: coefficient(&m.sigma, &m.sigma_params, "sigma")?,
            drift: coefficient(&m.drift, &m.drift_params, "drift")?,
            init,
            eps: m.eps,
            sigma0: m.sigma0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = &self.grid;
        GridSpec::new(g.half_width, g.nx, g.nt, g.horizon, g.nk, g.seed)
    }

    pub fn observation(&self) -> Result<Observation> {
        let grid = self.grid_spec()?;
        let cov = self.covariance()?;
        if self.task.x.len() != cov.dim() {
            return Err(Error::Config(format!(
                "task.x has {} coordinates, model.dim is {}",
                self.task.x.len(),
                cov.dim()
            )));
        }
        grid.check_domain(&cov, &self.task.x)?;
        Observation::new(&grid, self.task.t, &self.task.x)
    }

    pub fn writes_binary(&self) -> bool {
        self.output.formats.iter().any(|f| f == "bin")
    }

    /// Re-checks every physical constraint.
    pub fn check(&self) -> Result<()> {
        self.model_spec()?;
        self.observation()?;
        for f in &self.output.formats {
            if f != "csv" && f != "bin" {
                return Err(Error::Config(format!("output.formats: unknown format \"{f}\" (expected csv or bin)")));
            }
        }
        if self.model.eps_list.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::Config("model.eps_list entries must lie in (0, 1]".into()));
        }
        if self.task.y_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("task.y_grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Applies `section.key=value`; the value is read as a TOML literal and falls back to a
/// bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override \"{spec}\" is not of the form section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override key \"{path}\" is not of the form section.key")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let entry = doc.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("\"{section}\" is not a section"))),
    }
}
