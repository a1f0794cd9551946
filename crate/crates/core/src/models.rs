//! State-space models: transition `f`, adversary observation `h`, defender
//! observation `g`, noise covariances and Jacobians, plus ground-truth
//! trajectory simulation.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::matkit::{self, Mat, Vector};
use crate::rng::CounterRng;

/// `(state, input) -> vector`.
pub type VecMap = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;
/// `(state, input) -> Jacobian`.
pub type JacMap = Arc<dyn Fn(&Vector, &Vector) -> Mat + Send + Sync>;
/// `state -> vector` (the defender's action map `g`).
pub type StateMap = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
/// `state -> Jacobian` of `g`.
pub type StateJac = Arc<dyn Fn(&Vector) -> Mat + Send + Sync>;

/// Relative step used by [`jacobian_fd`]; the absolute floor is the same value.
pub const FD_STEP: f64 = 1e-6;

/// Which Jacobian provider produced a linearization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianSource {
    Analytic,
    FiniteDifference,
}

/// Built-in system families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelName {
    /// Three-state linear system with a scalar unknown input.
    Linear3,
    /// Two-state FM demodulator `(λ, θ)`.
    Fm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    NoInput,
    WithoutDf,
    WithDf,
}

impl ModelName {
    pub const ALL: [ModelName; 2] = [ModelName::Linear3, ModelName::Fm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Linear3 => "linear3",
            ModelName::Fm => "fm",
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoInput, Variant::WithoutDf, Variant::WithDf];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoInput => "no-input",
            Variant::WithoutDf => "without-df",
            Variant::WithDf => "with-df",
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

/// Parse `"<name>:<variant>"`.
pub fn parse_model_spec(spec: &str) -> Result<(ModelName, Variant)> {
    let (name, variant) = spec
        .split_once(':')
        .ok_or_else(|| Error::UnknownModel(spec.to_string()))?;
    Ok((name.parse()?, variant.parse()?))
}

/// Matrices of a linear model `x' = Fx + Bu + w`, `y = Hx + Du + v`, `a = Gx̂ + ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParts {
    pub f: Mat,
    pub b: Mat,
    pub h: Mat,
    pub d: Mat,
    pub g: Mat,
}

/// Maps and Jacobian providers for a general (nonlinear) model.
#[derive(Clone)]
pub struct NonlinearSpec {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub na: usize,
    pub feedthrough: bool,
    pub f: VecMap,
    pub h: VecMap,
    pub g: StateMap,
    pub jac_f_x: Option<JacMap>,
    pub jac_f_u: Option<JacMap>,
    pub jac_h_x: Option<JacMap>,
    pub jac_h_u: Option<JacMap>,
    pub jac_g: Option<StateJac>,
    pub q: Mat,
    pub r: Mat,
    pub sigma_eps: Mat,
}

/// A state-space description shared by the forward and inverse filters.
///
/// Without feed-through, `h` ignores its input argument. Models with `m == 0`
/// receive an empty input vector.
#[derive(Clone)]
pub struct SystemModel {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub na: usize,
    pub feedthrough: bool,
    f: VecMap,
    h: VecMap,
    g: StateMap,
    jac_f_x: Option<JacMap>,
    jac_f_u: Option<JacMap>,
    jac_h_x: Option<JacMap>,
    jac_h_u: Option<JacMap>,
    jac_g: Option<StateJac>,
    pub q: Mat,
    pub r: Mat,
    pub sigma_eps: Mat,
    /// `ΔQ`: added to `Q` (as `δ·I`) inside filters and information recursions,
    /// and to the inverse-filter process covariance.
    pub q_enlargement: f64,
    /// `ΔR`: added to `R` inside forward filters and to `Σ_ε` inside inverse filters.
    pub r_enlargement: f64,
    /// State components wrapped to `[−π, π)`.
    pub angle_dims: Vec<usize>,
    /// Input-estimate components wrapped to `[−π, π)`.
    pub input_angle_dims: Vec<usize>,
    pub linear: Option<LinearParts>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("label", &self.label)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.p)
            .field("na", &self.na)
            .field("feedthrough", &self.feedthrough)
            .field("linear", &self.linear.is_some())
            .finish()
    }
}

fn check_cov(name: &'static str, c: &Mat, dim: usize) -> Result<()> {
    if c.shape() != (dim, dim) {
        return Err(Error::DimMismatch {
            context: name,
            expected: alloc::format!("{dim}x{dim}"),
            got: alloc::format!("{}x{}", c.nrows(), c.ncols()),
        });
    }
    if !matkit::psd_check(c, 1e-9 * (1.0 + matkit::max_abs(c)))? {
        return Err(Error::NotSpd { context: name });
    }
    Ok(())
}

impl SystemModel {
    /// Linear model with analytic Jacobians.
    pub fn linear(label: &str, parts: LinearParts, q: Mat, r: Mat, sigma_eps: Mat) -> Result<Self> {
        let n = parts.f.nrows();
        let m = parts.b.ncols();
        let p = parts.h.nrows();
        let na = parts.g.nrows();
        let shapes_ok = parts.f.shape() == (n, n)
            && parts.b.nrows() == n
            && parts.h.ncols() == n
            && parts.d.shape() == (p, m)
            && parts.g.ncols() == n;
        if !shapes_ok {
            return Err(Error::DimMismatch {
                context: "SystemModel::linear",
                expected: "consistent F, B, H, D, G shapes".into(),
                got: alloc::format!(
                    "F {:?}, B {:?}, H {:?}, D {:?}, G {:?}",
                    parts.f.shape(),
                    parts.b.shape(),
                    parts.h.shape(),
                    parts.d.shape(),
                    parts.g.shape()
                ),
            });
        }
        let feedthrough = parts.d.iter().any(|&v| v != 0.0);
        let (fm, bm, hm, dm, gm) = (
            parts.f.clone(),
            parts.b.clone(),
            parts.h.clone(),
            parts.d.clone(),
            parts.g.clone(),
        );
        let f: VecMap = Arc::new(move |x: &Vector, u: &Vector| {
            if u.is_empty() {
                &fm * x
            } else {
                &fm * x + &bm * u
            }
        });
        let h: VecMap = Arc::new(move |x: &Vector, u: &Vector| {
            if u.is_empty() {
                &hm * x
            } else {
                &hm * x + &dm * u
            }
        });
        let g: StateMap = Arc::new(move |x: &Vector| &gm * x);
        let (jf, jb, jh, jd, jg) = (
            parts.f.clone(),
            parts.b.clone(),
            parts.h.clone(),
            parts.d.clone(),
            parts.g.clone(),
        );
        let spec = NonlinearSpec {
            label: label.to_string(),
            n,
            m,
            p,
            na,
            feedthrough,
            f,
            h,
            g,
            jac_f_x: Some(Arc::new(move |_, _| jf.clone())),
            jac_f_u: Some(Arc::new(move |_, _| jb.clone())),
            jac_h_x: Some(Arc::new(move |_, _| jh.clone())),
            jac_h_u: Some(Arc::new(move |_, _| jd.clone())),
            jac_g: Some(Arc::new(move |_| jg.clone())),
            q,
            r,
            sigma_eps,
        };
        let mut model = Self::from_spec(spec)?;
        model.linear = Some(parts);
        Ok(model)
    }

    pub fn from_spec(spec: NonlinearSpec) -> Result<Self> {
        check_cov("Q", &spec.q, spec.n)?;
        check_cov("R", &spec.r, spec.p)?;
        check_cov("Sigma_eps", &spec.sigma_eps, spec.na)?;
        Ok(Self {
            label: spec.label,
            n: spec.n,
            m: spec.m,
            p: spec.p,
            na: spec.na,
            feedthrough: spec.feedthrough,
            f: spec.f,
            h: spec.h,
            g: spec.g,
            jac_f_x: spec.jac_f_x,
            jac_f_u: spec.jac_f_u,
            jac_h_x: spec.jac_h_x,
            jac_h_u: spec.jac_h_u,
            jac_g: spec.jac_g,
            q: spec.q,
            r: spec.r,
            sigma_eps: spec.sigma_eps,
            q_enlargement: 0.0,
            r_enlargement: 0.0,
            angle_dims: Vec::new(),
            input_angle_dims: Vec::new(),
            linear: None,
        })
    }

    /// Same model with all analytic Jacobian providers removed.
    pub fn without_analytic_jacobians(mut self) -> Self {
        self.jac_f_x = None;
        self.jac_f_u = None;
        self.jac_h_x = None;
        self.jac_h_u = None;
        self.jac_g = None;
        self
    }

    pub fn is_linear(&self) -> bool {
        self.linear.is_some()
    }

    pub fn no_input(&self) -> Vector {
        Vector::zeros(self.m)
    }

    pub fn f(&self, x: &Vector, u: &Vector) -> Vector {
        (self.f)(x, u)
    }

    pub fn h(&self, x: &Vector, u: &Vector) -> Vector {
        (self.h)(x, u)
    }

    pub fn g(&self, x: &Vector) -> Vector {
        (self.g)(x)
    }

    pub fn jac_f_x(&self, x: &Vector, u: &Vector) -> Result<(Mat, JacobianSource)> {
        match &self.jac_f_x {
            Some(j) => Ok((j(x, u), JacobianSource::Analytic)),
            None => Ok((
                jacobian_fd(|z: &Vector| self.f(z, u), x, "f")?,
                JacobianSource::FiniteDifference,
            )),
        }
    }

    pub fn jac_f_u(&self, x: &Vector, u: &Vector) -> Result<(Mat, JacobianSource)> {
        match &self.jac_f_u {
            Some(j) => Ok((j(x, u), JacobianSource::Analytic)),
            None => Ok((
                jacobian_fd(|z: &Vector| self.f(x, z), u, "f")?,
                JacobianSource::FiniteDifference,
            )),
        }
    }

    pub fn jac_h_x(&self, x: &Vector, u: &Vector) -> Result<(Mat, JacobianSource)> {
        match &self.jac_h_x {
            Some(j) => Ok((j(x, u), JacobianSource::Analytic)),
            None => Ok((
                jacobian_fd(|z: &Vector| self.h(z, u), x, "h")?,
                JacobianSource::FiniteDifference,
            )),
        }
    }

    pub fn jac_h_u(&self, x: &Vector, u: &Vector) -> Result<(Mat, JacobianSource)> {
        match &self.jac_h_u {
            Some(j) => Ok((j(x, u), JacobianSource::Analytic)),
            None => Ok((
                jacobian_fd(|z: &Vector| self.h(x, z), u, "h")?,
                JacobianSource::FiniteDifference,
            )),
        }
    }

    pub fn jac_g(&self, x: &Vector) -> Result<(Mat, JacobianSource)> {
        match &self.jac_g {
            Some(j) => Ok((j(x), JacobianSource::Analytic)),
            None => Ok((
                jacobian_fd(|z: &Vector| self.g(z), x, "g")?,
                JacobianSource::FiniteDifference,
            )),
        }
    }

    /// `Q + ΔQ·I`. Simulation always uses the plain `Q`.
    pub fn q_filter(&self) -> Mat {
        matkit::add_identity(&self.q, self.q_enlargement)
    }

    /// `R + ΔR·I`.
    pub fn r_filter(&self) -> Mat {
        matkit::add_identity(&self.r, self.r_enlargement)
    }

    /// `Σ_ε + ΔR·I`.
    pub fn sigma_eps_filter(&self) -> Mat {
        matkit::add_identity(&self.sigma_eps, self.r_enlargement)
    }

    pub fn wrap_state(&self, x: &mut Vector) {
        for &i in &self.angle_dims {
            x[i] = wrap_angle(x[i]);
        }
    }

    pub fn wrap_input(&self, u: &mut Vector) {
        for &i in &self.input_angle_dims {
            u[i] = wrap_angle(u[i]);
        }
    }

    /// `a − b` with angle components wrapped.
    pub fn state_diff(&self, a: &Vector, b: &Vector) -> Vector {
        let mut d = a - b;
        self.wrap_state(&mut d);
        d
    }

    /// `a − b` over input vectors, wrapping angle inputs.
    pub fn input_diff(&self, a: &Vector, b: &Vector) -> Vector {
        let mut d = a - b;
        self.wrap_input(&mut d);
        d
    }
}

/// Wrap an angle into `[−π, π)`.
pub fn wrap_angle(v: f64) -> f64 {
    let mut r = v - TAU * math::floor((v + PI) / TAU);
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r += TAU;
    }
    r
}

/// Central-difference Jacobian of `map` at `at`, with per-coordinate step
/// `max(1e-6, 1e-6·|at_i|)`.
pub fn jacobian_fd<F>(map: F, at: &Vector, what: &'static str) -> Result<Mat>
where
    F: Fn(&Vector) -> Vector,
{
    let base = map(at);
    if base.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEvaluation(what));
    }
    let mut jac = Mat::zeros(base.len(), at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let step = FD_STEP.max(FD_STEP * at[i].abs());
        probe[i] = at[i] + step;
        let plus = map(&probe);
        probe[i] = at[i] - step;
        let minus = map(&probe);
        probe[i] = at[i];
        if plus.len() != base.len() || minus.len() != base.len() {
            return Err(Error::DimMismatch {
                context: "jacobian_fd",
                expected: alloc::format!("{}", base.len()),
                got: alloc::format!("{}/{}", plus.len(), minus.len()),
            });
        }
        for r in 0..base.len() {
            let d = (plus[r] - minus[r]) / (2.0 * step);
            if !d.is_finite() {
                return Err(Error::NonFiniteEvaluation(what));
            }
            jac[(r, i)] = d;
        }
    }
    Ok(jac)
}

/// Piecewise-constant input schedule: `before` for `k ≤ switch_after`, `after` later.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSchedule {
    None,
    Constant(Vec<f64>),
    Step {
        before: Vec<f64>,
        after: Vec<f64>,
        switch_after: usize,
    },
}

impl InputSchedule {
    pub fn at(&self, k: usize) -> Vector {
        match self {
            InputSchedule::None => Vector::zeros(0),
            InputSchedule::Constant(v) => Vector::from_column_slice(v),
            InputSchedule::Step {
                before,
                after,
                switch_after,
            } => {
                if k <= *switch_after {
                    Vector::from_column_slice(before)
                } else {
                    Vector::from_column_slice(after)
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSchedule::None => 0,
            InputSchedule::Constant(v) => v.len(),
            InputSchedule::Step { before, .. } => before.len(),
        }
    }
}

/// Default input schedule of a built-in model (step change after `k = 50`).
pub fn builtin_schedule(name: ModelName, variant: Variant) -> InputSchedule {
    match (name, variant) {
        (_, Variant::NoInput) => InputSchedule::None,
        (ModelName::Linear3, _) => InputSchedule::Step {
            before: vec![50.0],
            after: vec![-50.0],
            switch_after: 50,
        },
        (ModelName::Fm, _) => InputSchedule::Step {
            before: vec![PI / 4.0],
            after: vec![-PI / 4.0],
            switch_after: 50,
        },
    }
}

const FM_T: f64 = TAU / 16.0;
const FM_BETA: f64 = 100.0;

/// FM demodulator transition matrix.
pub fn fm_transition() -> Mat {
    let e = math::exp(-FM_T / FM_BETA);
    Mat::from_row_slice(2, 2, &[e, 0.0, -FM_BETA * e - 1.0, 1.0])
}

/// Construct one of the built-in systems.
pub fn builtin_model(name: ModelName, variant: Variant) -> Result<SystemModel> {
    match name {
        ModelName::Linear3 => linear3(variant),
        ModelName::Fm => fm(variant),
    }
}

fn linear3(variant: Variant) -> Result<SystemModel> {
    let f = matkit::mat_from_rows(3, 3, &[0.1, 0.5, 0.08, 0.6, 0.01, 0.04, 0.1, 0.7, 0.05])?;
    let h = matkit::mat_from_rows(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0])?;
    let g = matkit::mat_from_rows(1, 3, &[1.0, 1.0, 1.0])?;
    let (b, d) = match variant {
        Variant::NoInput => (Mat::zeros(3, 0), Mat::zeros(2, 0)),
        Variant::WithoutDf => (Mat::from_column_slice(3, 1, &[0.0, 2.0, 1.0]), Mat::zeros(2, 1)),
        Variant::WithDf => (
            Mat::from_column_slice(3, 1, &[0.0, 2.0, 1.0]),
            Mat::from_column_slice(2, 1, &[0.0, 1.0]),
        ),
    };
    let label = alloc::format!("linear3:{variant}");
    SystemModel::linear(
        &label,
        LinearParts { f, b, h, d, g },
        Mat::identity(3, 3),
        Mat::identity(2, 2) * 2.0,
        Mat::from_element(1, 1, 5.0),
    )
}

fn fm(variant: Variant) -> Result<SystemModel> {
    let s2 = core::f64::consts::SQRT_2;
    let f_mat = fm_transition();
    let noise_col = Vector::from_column_slice(&[1.0, -FM_BETA]);
    let q = &noise_col * noise_col.transpose() * 0.01;
    let (m, feedthrough, input_col) = match variant {
        Variant::NoInput => (0, false, None),
        Variant::WithoutDf => (1, false, Some(Vector::from_column_slice(&[0.001, 1.0]))),
        Variant::WithDf => (1, true, None),
    };

    let fm1 = f_mat.clone();
    let col = input_col.clone();
    let f: VecMap = Arc::new(move |x: &Vector, u: &Vector| {
        let mut out = &fm1 * x;
        if let Some(c) = &col {
            out += c * u[0];
        }
        out
    });
    let fm2 = f_mat.clone();
    let jac_f_x: JacMap = Arc::new(move |_, _| fm2.clone());
    let col2 = input_col.clone();
    let jac_f_u: JacMap = Arc::new(move |_, _| match &col2 {
        Some(c) => Mat::from_column_slice(2, 1, c.as_slice()),
        None => Mat::zeros(2, m),
    });

    let phase = move |x: &Vector, u: &Vector| -> f64 {
        if feedthrough {
            x[1] + u[0]
        } else {
            x[1]
        }
    };
    let h: VecMap = Arc::new(move |x: &Vector, u: &Vector| {
        let th = phase(x, u);
        Vector::from_column_slice(&[s2 * math::sin(th), s2 * math::cos(th)])
    });
    let jac_h_x: JacMap = Arc::new(move |x: &Vector, u: &Vector| {
        let th = phase(x, u);
        Mat::from_row_slice(2, 2, &[0.0, s2 * math::cos(th), 0.0, -s2 * math::sin(th)])
    });
    let jac_h_u: JacMap = Arc::new(move |x: &Vector, u: &Vector| {
        if feedthrough {
            let th = phase(x, u);
            Mat::from_row_slice(2, 1, &[s2 * math::cos(th), -s2 * math::sin(th)])
        } else {
            Mat::zeros(2, m)
        }
    });

    let quadratic = variant == Variant::NoInput;
    let g: StateMap = Arc::new(move |x: &Vector| {
        if quadratic {
            Vector::from_element(1, x[0] * x[0])
        } else {
            Vector::from_element(1, x[0])
        }
    });
    let jac_g: StateJac = Arc::new(move |x: &Vector| {
        if quadratic {
            Mat::from_row_slice(1, 2, &[2.0 * x[0], 0.0])
        } else {
            Mat::from_row_slice(1, 2, &[1.0, 0.0])
        }
    });

    let mut model = SystemModel::from_spec(NonlinearSpec {
        label: alloc::format!("fm:{variant}"),
        n: 2,
        m,
        p: 2,
        na: 1,
        feedthrough,
        f,
        h,
        g,
        jac_f_x: Some(jac_f_x),
        jac_f_u: Some(jac_f_u),
        jac_h_x: Some(jac_h_x),
        jac_h_u: Some(jac_h_u),
        jac_g: Some(jac_g),
        q,
        r: Mat::identity(2, 2),
        sigma_eps: Mat::from_element(1, 1, 5.0),
    })?;
    model.q_enlargement = 1e-10;
    model.angle_dims = vec![1];
    if feedthrough {
        model.input_angle_dims = vec![0];
    }
    Ok(model)
}

/// Ground-truth run: `x_0..x_K`, `u_0..u_K`, `y_1..y_K` and the noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    /// `observations[k - 1]` holds `y_k`.
    pub observations: Vec<Vector>,
    /// `process_noise[k]` holds `w_k` (drives `x_{k+1}`).
    pub process_noise: Vec<Vector>,
    /// `measurement_noise[k - 1]` holds `v_k`.
    pub measurement_noise: Vec<Vector>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    /// `y_k` for `1 ≤ k ≤ K`.
    pub fn y(&self, k: usize) -> &Vector {
        &self.observations[k - 1]
    }
}

/// Simulate `K` steps of the model from `x0`.
///
/// Process and measurement noise come from `splitmix64-ctr` keyed by `seed`;
/// per step, `w_k` is drawn before `v_{k+1}`.
pub fn simulate_trajectory(
    model: &SystemModel,
    x0: &Vector,
    input_fn: &dyn Fn(usize) -> Vector,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    if x0.len() != model.n {
        return Err(Error::DimMismatch {
            context: "simulate_trajectory x0",
            expected: alloc::format!("{}", model.n),
            got: alloc::format!("{}", x0.len()),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("simulate_trajectory needs at least one step"));
    }
    let q_factor = matkit::psd_factor(&model.q)?.transpose();
    let r_factor = matkit::psd_factor(&model.r)?.transpose();
    let mut rng = CounterRng::new(seed);

    let mut x = x0.clone();
    model.wrap_state(&mut x);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    let mut process_noise = Vec::with_capacity(steps);
    let mut measurement_noise = Vec::with_capacity(steps);
    states.push(x.clone());
    let mut u = input_fn(0);
    if u.len() != model.m {
        return Err(Error::DimMismatch {
            context: "simulate_trajectory input",
            expected: alloc::format!("{}", model.m),
            got: alloc::format!("{}", u.len()),
        });
    }
    inputs.push(u.clone());
    for k in 0..steps {
        let w = rng.gaussian(&q_factor);
        let mut next = model.f(&x, &u) + &w;
        model.wrap_state(&mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
        let u_next = input_fn(k + 1);
        let v = rng.gaussian(&r_factor);
        let y = model.h(&next, &u_next) + &v;
        process_noise.push(w);
        measurement_noise.push(v);
        observations.push(y);
        states.push(next.clone());
        inputs.push(u_next.clone());
        x = next;
        u = u_next;
    }
    Ok(Trajectory {
        states,
        inputs,
        observations,
        process_noise,
        measurement_noise,
        seed,
    })
}
