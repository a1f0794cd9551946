//! Experiment configuration (JSON).

use std::f64::consts::PI;

use ifk_core::forward::{ForwardFilter, ForwardKind, ForwardState};
use ifk_core::inverse::{CompositeJacobian, InverseFilter, InverseKind, InverseState};
use ifk_core::matkit::{self, Mat, Vector};
use ifk_core::models::{self, builtin_model, builtin_schedule, InputSchedule, LinearParts, SystemModel};
use ifk_core::rng::CounterRng;
use serde::{Deserialize, Serialize};

use crate::error::{IfkError, Result};

/// Every top-level key accepted in a config document.
pub const CONFIG_KEYS: &[&str] = &[
    "label",
    "model",
    "forward",
    "inverse",
    "steps",
    "runs",
    "seed",
    "x0",
    "fwd_x0",
    "fwd_sigma0",
    "fwd_u0",
    "fwd_sigma_u0",
    "fwd_sigma_xu0",
    "replica_sigma0",
    "inv_x0",
    "inv_u0",
    "inv_sigma0",
    "inv_j0",
    "input",
    "q",
    "r",
    "sigma_eps",
    "q_enlargement",
    "r_enlargement",
    "jacobian",
    "out_csv",
    "out_svg",
];

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: String,
    pub model: ModelSpec,
    pub forward: String,
    pub inverse: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// True initial state.
    #[serde(default = "zeros")]
    pub x0: VectorInit,
    #[serde(default = "zeros")]
    pub fwd_x0: VectorInit,
    #[serde(default = "unit_cov")]
    pub fwd_sigma0: CovSpec,
    #[serde(default)]
    pub fwd_u0: Option<Vec<f64>>,
    #[serde(default)]
    pub fwd_sigma_u0: Option<CovSpec>,
    /// `n × m` rows.
    #[serde(default)]
    pub fwd_sigma_xu0: Option<Vec<Vec<f64>>>,
    /// Initial covariance of the defender's copy of the forward gain
    /// recursion; defaults to `fwd_sigma0`.
    #[serde(default)]
    pub replica_sigma0: Option<CovSpec>,
    #[serde(default = "truth")]
    pub inv_x0: VectorInit,
    #[serde(default)]
    pub inv_u0: Option<VectorInit>,
    #[serde(default = "inv_cov")]
    pub inv_sigma0: CovSpec,
    /// Initial information of the inverse bound; defaults to `inv_sigma0⁻¹`.
    #[serde(default)]
    pub inv_j0: Option<CovSpec>,
    /// Input schedule; defaults to the built-in schedule of the model.
    #[serde(default)]
    pub input: Option<InputSpec>,
    #[serde(default)]
    pub q: Option<CovSpec>,
    #[serde(default)]
    pub r: Option<CovSpec>,
    #[serde(default)]
    pub sigma_eps: Option<CovSpec>,
    #[serde(default)]
    pub q_enlargement: Option<f64>,
    #[serde(default)]
    pub r_enlargement: Option<f64>,
    #[serde(default = "default_jacobian")]
    pub jacobian: String,
    #[serde(default)]
    pub out_csv: Option<String>,
    #[serde(default)]
    pub out_svg: Option<String>,
}

fn default_steps() -> usize {
    100
}
fn default_runs() -> usize {
    200
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn zeros() -> VectorInit {
    VectorInit::Named(Named::Zeros)
}
fn truth() -> VectorInit {
    VectorInit::Named(Named::Truth)
}
fn unit_cov() -> CovSpec {
    CovSpec::Scaled(1.0)
}
fn inv_cov() -> CovSpec {
    CovSpec::Scaled(5.0)
}
fn default_jacobian() -> String {
    "chain-rule".into()
}

/// `"<name>:<variant>"` or an inline linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Builtin(String),
    Linear(InlineLinear),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineLinear {
    pub f: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    pub h: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Option<Vec<Vec<f64>>>,
    pub g: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub sigma_eps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Named {
    /// The true value known to the defender (`x₀` or `u₀`).
    Truth,
    Zeros,
}

/// A vector given as a keyword or component-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorInit {
    Named(Named),
    Components(Vec<Component>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Component {
    Fixed(f64),
    Random(Distribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Distribution {
    /// `[mean, std]`
    Normal([f64; 2]),
    /// `[low, high)`
    Uniform([f64; 2]),
}

/// Scalar (`c·I`), diagonal, or full matrix rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Scaled(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InputSpec {
    None,
    Constant(Vec<f64>),
    Step {
        before: Vec<f64>,
        after: Vec<f64>,
        switch_after: usize,
    },
}

impl ExperimentConfig {
    /// Parse a JSON document; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            IfkError::config(key, e.into_inner().to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn model_label(&self) -> String {
        match &self.model {
            ModelSpec::Builtin(s) => s.clone(),
            ModelSpec::Linear(_) => "inline-linear".into(),
        }
    }

    /// Validate and resolve everything that does not depend on the run.
    pub fn prepare(&self) -> Result<Prepared> {
        if self.runs == 0 {
            return Err(IfkError::config("runs", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(IfkError::config("steps", "must be at least 1"));
        }
        let forward = ForwardKind::parse(&self.forward).ok_or_else(|| {
            IfkError::config(
                "forward",
                format!(
                    "unknown filter `{}`; expected one of {}",
                    self.forward,
                    ForwardKind::ALL.map(|k| k.as_str()).join(", ")
                ),
            )
        })?;
        let inverse = InverseKind::parse(&self.inverse).ok_or_else(|| {
            IfkError::config(
                "inverse",
                format!(
                    "unknown filter `{}`; expected one of {}",
                    self.inverse,
                    InverseKind::ALL.map(|k| k.as_str()).join(", ")
                ),
            )
        })?;
        if inverse.forward_kind() != forward {
            return Err(IfkError::config(
                "inverse",
                format!(
                    "`{}` inverts `{}`, not `{}`",
                    inverse.as_str(),
                    inverse.forward_kind().as_str(),
                    forward.as_str()
                ),
            ));
        }
        let jacobian = match self.jacobian.as_str() {
            "chain-rule" => CompositeJacobian::ChainRule,
            "finite-difference" => CompositeJacobian::FiniteDifference,
            other => {
                return Err(IfkError::config(
                    "jacobian",
                    format!("unknown mode `{other}`; expected chain-rule or finite-difference"),
                ))
            }
        };
        let (mut model, family) = self.build_model()?;
        let n = model.n;
        if let Some(q) = &self.q {
            model.q = cov_matrix(q, n, "q")?;
        }
        if let Some(r) = &self.r {
            model.r = cov_matrix(r, model.p, "r")?;
        }
        if let Some(s) = &self.sigma_eps {
            model.sigma_eps = cov_matrix(s, model.na, "sigma_eps")?;
        }
        if let Some(d) = self.q_enlargement {
            model.q_enlargement = d;
        }
        if let Some(d) = self.r_enlargement {
            model.r_enlargement = d;
        }
        ForwardFilter::new(forward, &model).map_err(|e| IfkError::config("forward", e.to_string()))?;
        let inverse_filter = InverseFilter::new(inverse, &model)
            .map_err(|e| IfkError::config("inverse", e.to_string()))?
            .with_jacobian(jacobian);

        let schedule = match &self.input {
            Some(spec) => spec.schedule(),
            None => match family {
                Some((name, variant)) => builtin_schedule(name, variant),
                None if model.m == 0 => InputSchedule::None,
                None => return Err(IfkError::config("input", "required for inline models with inputs")),
            },
        };
        if schedule.dim() != model.m {
            return Err(IfkError::config(
                "input",
                format!("has dimension {} but the model has {} inputs", schedule.dim(), model.m),
            ));
        }

        let sigma0 = cov_matrix(&self.fwd_sigma0, n, "fwd_sigma0")?;
        let replica_sigma0 = match &self.replica_sigma0 {
            Some(c) => cov_matrix(c, n, "replica_sigma0")?,
            None => sigma0.clone(),
        };
        let sigma_u0 = self
            .fwd_sigma_u0
            .as_ref()
            .map(|c| cov_matrix(c, model.m, "fwd_sigma_u0"))
            .transpose()?;
        let sigma_xu0 = match &self.fwd_sigma_xu0 {
            Some(rows) => Some(rows_matrix(rows, n, model.m, "fwd_sigma_xu0")?),
            None if forward == ForwardKind::KfWdf => Some(Mat::zeros(n, model.m)),
            None => None,
        };
        let u0 = match &self.fwd_u0 {
            Some(v) if v.len() != model.m => {
                return Err(IfkError::config("fwd_u0", format!("expected {} entries", model.m)))
            }
            Some(v) => Vector::from_column_slice(v),
            None => Vector::zeros(model.m),
        };
        let inv_dim = if inverse.augmented() { n + model.m } else { n };
        let inv_sigma0 = cov_matrix(&self.inv_sigma0, inv_dim, "inv_sigma0")?;
        let inv_bound0 = match &self.inv_j0 {
            Some(j) => matkit::inv_spd(&cov_matrix(j, inv_dim, "inv_j0")?, "inv_j0")
                .map_err(|e| IfkError::config("inv_j0", e.to_string()))?,
            None => inv_sigma0.clone(),
        };
        check_init(&self.x0, n, "x0", false)?;
        check_init(&self.fwd_x0, n, "fwd_x0", false)?;
        check_init(&self.inv_x0, n, "inv_x0", true)?;
        if let Some(u) = &self.inv_u0 {
            check_init(u, model.m, "inv_u0", true)?;
        }
        Ok(Prepared {
            config: self.clone(),
            model,
            schedule,
            forward,
            inverse,
            inverse_filter,
            sigma0,
            replica_sigma0,
            sigma_u0,
            sigma_xu0,
            u0,
            inv_sigma0,
            inv_bound0,
        })
    }

    fn build_model(&self) -> Result<(SystemModel, Option<(models::ModelName, models::Variant)>)> {
        match &self.model {
            ModelSpec::Builtin(s) => {
                let (name, variant) = models::parse_model_spec(s).map_err(|e| IfkError::config("model", e.to_string()))?;
                Ok((builtin_model(name, variant)?, Some((name, variant))))
            }
            ModelSpec::Linear(l) => {
                let f = rows_any(&l.f, "model.f")?;
                let n = f.nrows();
                let h = rows_any(&l.h, "model.h")?;
                let b = match &l.b {
                    Some(b) => rows_any(b, "model.b")?,
                    None => Mat::zeros(n, 0),
                };
                let d = match &l.d {
                    Some(d) => rows_any(d, "model.d")?,
                    None => Mat::zeros(h.nrows(), b.ncols()),
                };
                let parts = LinearParts {
                    f,
                    b,
                    h,
                    d,
                    g: rows_any(&l.g, "model.g")?,
                };
                let model = SystemModel::linear(
                    "inline-linear",
                    parts,
                    rows_any(&l.q, "model.q")?,
                    rows_any(&l.r, "model.r")?,
                    rows_any(&l.sigma_eps, "model.sigma_eps")?,
                )
                .map_err(|e| IfkError::config("model", e.to_string()))?;
                Ok((model, None))
            }
        }
    }
}

impl InputSpec {
    pub fn schedule(&self) -> InputSchedule {
        match self {
            InputSpec::None => InputSchedule::None,
            InputSpec::Constant(v) => InputSchedule::Constant(v.clone()),
            InputSpec::Step {
                before,
                after,
                switch_after,
            } => InputSchedule::Step {
                before: before.clone(),
                after: after.clone(),
                switch_after: *switch_after,
            },
        }
    }
}

fn rows_any(rows: &[Vec<f64>], key: &str) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    rows_matrix(rows, r, c, key)
}

fn rows_matrix(rows: &[Vec<f64>], r: usize, c: usize, key: &str) -> Result<Mat> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(IfkError::config(key, format!("expected a {r}x{c} matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Mat::from_row_slice(r, c, &flat))
}

/// Resolve a covariance specification to a `dim × dim` PSD matrix.
pub fn cov_matrix(spec: &CovSpec, dim: usize, key: &str) -> Result<Mat> {
    let m = match spec {
        CovSpec::Scaled(c) => Mat::identity(dim, dim) * *c,
        CovSpec::Diagonal(d) => {
            if d.len() != dim {
                return Err(IfkError::config(key, format!("expected {dim} diagonal entries")));
            }
            Mat::from_diagonal(&Vector::from_column_slice(d))
        }
        CovSpec::Full(rows) => rows_matrix(rows, dim, dim, key)?,
    };
    if !matkit::psd_check(&m, 1e-12 * (1.0 + matkit::max_abs(&m)))? {
        return Err(IfkError::config(key, "not a symmetric positive semi-definite matrix"));
    }
    Ok(m)
}

fn check_init(init: &VectorInit, dim: usize, key: &str, truth_ok: bool) -> Result<()> {
    match init {
        VectorInit::Named(Named::Truth) if !truth_ok => Err(IfkError::config(key, "`truth` is only valid for inverse-filter initializations")),
        VectorInit::Named(_) => Ok(()),
        VectorInit::Components(c) if c.len() != dim => Err(IfkError::config(key, format!("expected {dim} components"))),
        VectorInit::Components(c) => {
            for comp in c {
                match comp {
                    Component::Random(Distribution::Normal([_, s])) if *s < 0.0 => {
                        return Err(IfkError::config(key, "normal standard deviation must be non-negative"))
                    }
                    Component::Random(Distribution::Uniform([lo, hi])) if hi < lo => {
                        return Err(IfkError::config(key, "uniform bounds out of order"))
                    }
                    _ => {}
                }
            }
            Ok(())
        }
    }
}

/// A validated configuration with its resolved model and initial covariances.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub model: SystemModel,
    pub schedule: InputSchedule,
    pub forward: ForwardKind,
    pub inverse: InverseKind,
    pub inverse_filter: InverseFilter,
    pub sigma0: Mat,
    pub replica_sigma0: Mat,
    pub sigma_u0: Option<Mat>,
    pub sigma_xu0: Option<Mat>,
    pub u0: Vector,
    pub inv_sigma0: Mat,
    /// `J̄₀⁻¹`.
    pub inv_bound0: Mat,
}

/// Initial conditions of one run.
#[derive(Debug, Clone)]
pub struct RunInit {
    pub x0: Vector,
    pub forward: ForwardState,
    pub replica: ForwardState,
    pub inverse: InverseState,
}

impl Prepared {
    /// Draw the initial conditions of a run from `rng` (in the order
    /// `x0`, `fwd_x0`, `inv_x0`, `inv_u0`).
    pub fn draw_init(&self, rng: &mut CounterRng) -> RunInit {
        let cfg = &self.config;
        let m = &self.model;
        let mut x0 = draw(&cfg.x0, m.n, rng, None);
        m.wrap_state(&mut x0);
        let mut fx0 = draw(&cfg.fwd_x0, m.n, rng, None);
        m.wrap_state(&mut fx0);
        let mut fwd = ForwardState::new(fx0, self.sigma0.clone());
        if self.forward.tracks_input() {
            fwd = fwd.with_input(self.u0.clone(), self.sigma_u0.clone());
        }
        if let Some(xu) = &self.sigma_xu0 {
            fwd = fwd.with_cross(xu.clone());
        }
        let mut replica = fwd.clone();
        replica.sigma_x = self.replica_sigma0.clone();
        let mut ix0 = draw(&cfg.inv_x0, m.n, rng, Some(&x0));
        m.wrap_state(&mut ix0);
        let mut inv = InverseState::new(ix0, self.inv_sigma0.clone());
        if self.inverse.augmented() {
            let u_true = self.schedule.at(0);
            let mut u = match &cfg.inv_u0 {
                Some(init) => draw(init, m.m, rng, Some(&u_true)),
                None => Vector::zeros(m.m),
            };
            m.wrap_input(&mut u);
            inv = inv.with_input(u);
        }
        RunInit {
            x0,
            forward: fwd,
            replica,
            inverse: inv,
        }
    }
}

fn draw(init: &VectorInit, dim: usize, rng: &mut CounterRng, truth: Option<&Vector>) -> Vector {
    match init {
        VectorInit::Named(Named::Zeros) => Vector::zeros(dim),
        VectorInit::Named(Named::Truth) => truth.cloned().unwrap_or_else(|| Vector::zeros(dim)),
        VectorInit::Components(c) => Vector::from_iterator(
            dim,
            c.iter().map(|comp| match comp {
                Component::Fixed(v) => *v,
                Component::Random(Distribution::Normal([mu, s])) => mu + s * rng.normal(),
                Component::Random(Distribution::Uniform([lo, hi])) => rng.uniform_range(*lo, *hi),
            }),
        ),
    }
}

/// `λ ~ N(0, 1)`, `θ ~ U[−π, π)` as used for FM initial states.
pub fn fm_random_init() -> VectorInit {
    VectorInit::Components(vec![
        Component::Random(Distribution::Normal([0.0, 1.0])),
        Component::Random(Distribution::Uniform([-PI, PI])),
    ])
}
