//! The adversary's filters.
//!
//! Every step is a pure function `(state, observation) -> state`. Filters
//! with an unknown input track it alongside the state: the without-DF
//! variants carry the delayed estimate `û_{k-1}`, the with-DF variants the
//! current `û_k`.

use alloc::string::ToString;

use crate::error::{Error, Result};
use crate::matkit::{self, Mat, Vector};
use crate::models::{JacobianSource, SystemModel};

/// Relative threshold for the input-information rank check.
pub const INPUT_RANK_TOL: f64 = 1e-10;
/// Relative singular-value threshold for structural rank checks.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ForwardKind {
    /// Standard KF with known input.
    Kf,
    /// KF with unknown input, no direct feed-through.
    KfWodf,
    /// KF with unknown input and direct feed-through.
    KfWdf,
    /// Two-step EKF without unknown input.
    Ekf,
    /// EKF with unknown input, no direct feed-through (delayed input estimate).
    EkfWodf,
    /// EKF with unknown input and direct feed-through.
    EkfWdf,
    /// One-step-prediction EKF.
    EkfOneStep,
}

impl ForwardKind {
    pub const ALL: [ForwardKind; 7] = [
        ForwardKind::Kf,
        ForwardKind::KfWodf,
        ForwardKind::KfWdf,
        ForwardKind::Ekf,
        ForwardKind::EkfWodf,
        ForwardKind::EkfWdf,
        ForwardKind::EkfOneStep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ForwardKind::Kf => "kf",
            ForwardKind::KfWodf => "kf-wodf",
            ForwardKind::KfWdf => "kf-wdf",
            ForwardKind::Ekf => "ekf",
            ForwardKind::EkfWodf => "ekf-wodf",
            ForwardKind::EkfWdf => "ekf-wdf",
            ForwardKind::EkfOneStep => "ekf-one-step",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether the filter tracks an input estimate.
    pub fn tracks_input(self) -> bool {
        matches!(
            self,
            ForwardKind::KfWodf | ForwardKind::KfWdf | ForwardKind::EkfWodf | ForwardKind::EkfWdf
        )
    }
}

/// Linearization and intermediate quantities of the last step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Linearization {
    /// `F_k`.
    pub f: Option<Mat>,
    /// `B_k`.
    pub b: Option<Mat>,
    /// `H_{k+1}` (or `H_k` for the one-step form).
    pub h: Option<Mat>,
    /// `D_k`.
    pub d: Option<Mat>,
    pub x_pred: Option<Vector>,
    pub sigma_pred: Option<Mat>,
    /// Innovation covariance `S`.
    pub s: Option<Mat>,
    pub source: Option<JacobianSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    pub k: usize,
    pub x_hat: Vector,
    /// `û_{k-1}` (without DF) or `û_k` (with DF).
    pub u_hat: Option<Vector>,
    pub sigma_x: Mat,
    pub sigma_u: Option<Mat>,
    pub sigma_xu: Option<Mat>,
    /// Last state gain.
    pub k_x: Option<Mat>,
    /// Last input gain (`Kᵘ` or `M`).
    pub k_u: Option<Mat>,
    pub lin: Linearization,
}

impl ForwardState {
    pub fn new(x_hat: Vector, sigma_x: Mat) -> Self {
        Self {
            k: 0,
            x_hat,
            u_hat: None,
            sigma_x,
            sigma_u: None,
            sigma_xu: None,
            k_x: None,
            k_u: None,
            lin: Linearization::default(),
        }
    }

    pub fn with_input(mut self, u_hat: Vector, sigma_u: Option<Mat>) -> Self {
        self.u_hat = Some(u_hat);
        self.sigma_u = sigma_u;
        self
    }

    pub fn with_cross(mut self, sigma_xu: Mat) -> Self {
        self.sigma_xu = Some(sigma_xu);
        self
    }

    /// Joint covariance `[[Σˣ, Σˣᵘ], [Σᵘˣ, Σᵘ]]` where all blocks are present.
    pub fn joint_covariance(&self) -> Option<Mat> {
        let (su, sxu) = (self.sigma_u.as_ref()?, self.sigma_xu.as_ref()?);
        let n = self.sigma_x.nrows();
        let m = su.nrows();
        let mut j = Mat::zeros(n + m, n + m);
        j.view_mut((0, 0), (n, n)).copy_from(&self.sigma_x);
        j.view_mut((0, n), (n, m)).copy_from(sxu);
        j.view_mut((n, 0), (m, n)).copy_from(&sxu.transpose());
        j.view_mut((n, n), (m, m)).copy_from(su);
        Some(j)
    }
}

fn innovation_err(e: Error, context: &'static str) -> Error {
    match e {
        Error::NotSpd { .. } => Error::SingularInnovation(context),
        other => other,
    }
}

fn merge_source(a: JacobianSource, b: JacobianSource) -> JacobianSource {
    if a == JacobianSource::FiniteDifference || b == JacobianSource::FiniteDifference {
        JacobianSource::FiniteDifference
    } else {
        JacobianSource::Analytic
    }
}

fn check_finite(x: &Vector, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

fn check_obs(model: &SystemModel, y: &Vector) -> Result<()> {
    if y.len() != model.p {
        return Err(Error::DimMismatch {
            context: "observation",
            expected: alloc::format!("{}", model.p),
            got: alloc::format!("{}", y.len()),
        });
    }
    Ok(())
}

fn linear_parts<'a>(model: &'a SystemModel, filter: &'static str) -> Result<&'a crate::models::LinearParts> {
    model.linear.as_ref().ok_or_else(|| Error::IncompatibleModel {
        filter,
        model: model.label.to_string(),
        reason: "requires a linear model",
    })
}

/// `Σ Hᵀ S⁻¹` with `S = HΣHᵀ + R`; returns `(K, S)`.
fn kalman_gain(sigma_pred: &Mat, h: &Mat, r: &Mat, context: &'static str) -> Result<(Mat, Mat)> {
    let s = matkit::symmetrize(&(h * sigma_pred * h.transpose() + r))?;
    let k = matkit::right_solve_spd(&(sigma_pred * h.transpose()), &s, context)
        .map_err(|e| innovation_err(e, context))?;
    Ok((k, s))
}

/// Check `λ_min(A) > tol·trace(A)/m` on an input information matrix.
fn input_information_inverse(info: &Mat) -> Result<Mat> {
    let m = info.nrows();
    let sym = matkit::symmetrize(info)?;
    let min_eig = matkit::min_eigenvalue(&sym)?;
    let threshold = INPUT_RANK_TOL * sym.trace().abs() / m as f64;
    // also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(min_eig > threshold) {
        return Err(Error::InputCovSingular { min_eig, threshold });
    }
    matkit::inv_spd(&sym, "input covariance")
}

/// Standard KF step with Joseph-form covariance update.
pub fn kf_step(
    state: &ForwardState,
    model: &SystemModel,
    y: &Vector,
    u_known: Option<&Vector>,
) -> Result<ForwardState> {
    let lin = linear_parts(model, "kf")?;
    check_obs(model, y)?;
    let n = model.n;
    let mut x_pred = &lin.f * &state.x_hat;
    if model.m > 0 {
        let u = u_known.ok_or(Error::MissingInput("kf needs the known input u_k"))?;
        x_pred += &lin.b * u;
    }
    let sigma_pred = &lin.f * &state.sigma_x * lin.f.transpose() + model.q_filter();
    let r = model.r_filter();
    let (k, s) = kalman_gain(&sigma_pred, &lin.h, &r, "kf")?;
    let x_hat = &x_pred + &k * (y - &lin.h * &x_pred);
    let a = Mat::identity(n, n) - &k * &lin.h;
    let sigma = matkit::symmetrize(&(&a * &sigma_pred * a.transpose() + &k * &r * k.transpose()))?;
    check_finite(&x_hat, state.k + 1)?;
    Ok(ForwardState {
        k: state.k + 1,
        x_hat,
        u_hat: None,
        sigma_x: sigma,
        sigma_u: None,
        sigma_xu: None,
        k_x: Some(k),
        k_u: None,
        lin: Linearization {
            f: Some(lin.f.clone()),
            b: Some(lin.b.clone()),
            h: Some(lin.h.clone()),
            d: None,
            x_pred: Some(x_pred),
            sigma_pred: Some(sigma_pred),
            s: Some(s),
            source: Some(JacobianSource::Analytic),
        },
    })
}

/// KF with unknown input and no direct feed-through.
///
/// The input is estimated with one step of delay (`û_k` from `y_{k+1}`),
/// used for an intermediate state update, and the state is then corrected
/// again with the same observation.
pub fn kf_wodf_step(state: &ForwardState, model: &SystemModel, y: &Vector) -> Result<ForwardState> {
    let lin = linear_parts(model, "kf-wodf")?;
    check_obs(model, y)?;
    let (n, m) = (model.n, model.m);
    let x_pred = &lin.f * &state.x_hat;
    let sigma_pred = &lin.f * &state.sigma_x * lin.f.transpose() + model.q_filter();
    let r = model.r_filter();
    let s = matkit::symmetrize(&(&lin.h * &sigma_pred * lin.h.transpose() + &r))?;
    let chol = matkit::cholesky_jittered(&s, "kf-wodf").map_err(|e| innovation_err(e, "kf-wodf"))?;
    let s_inv_h = chol.solve(&lin.h); // S⁻¹H
    // K = Σ Hᵀ S⁻¹ = (S⁻¹ H Σ)ᵀ
    let k = (&s_inv_h * &sigma_pred).transpose();
    let innov = y - &lin.h * &x_pred;

    let (x_tilde, sigma_tilde, m_gain, u_hat, sigma_u, bm) = if m > 0 {
        let hb = &lin.h * &lin.b;
        let s_inv_hb = chol.solve(&hb);
        let info = hb.transpose() * &s_inv_hb;
        let sigma_u = matkit::inv_spd(&matkit::symmetrize(&info)?, "kf-wodf input")?;
        let m_gain = &sigma_u * s_inv_hb.transpose();
        let u_hat = &m_gain * &innov;
        let x_tilde = &x_pred + &lin.b * &u_hat;
        let bm = &lin.b * &m_gain;
        let t = Mat::identity(n, n) - &bm * &lin.h;
        let sigma_tilde = &t * &sigma_pred * t.transpose() + &bm * &r * bm.transpose();
        (x_tilde, sigma_tilde, m_gain, Some(u_hat), Some(sigma_u), bm)
    } else {
        (
            x_pred.clone(),
            sigma_pred.clone(),
            Mat::zeros(0, model.p),
            None,
            None,
            Mat::zeros(n, model.p),
        )
    };
    let x_hat = &x_tilde + &k * (y - &lin.h * &x_tilde);
    let cross = &sigma_tilde * lin.h.transpose() - &bm * &r;
    let sigma = matkit::symmetrize(&(&sigma_tilde - &k * cross.transpose()))?;
    check_finite(&x_hat, state.k + 1)?;
    Ok(ForwardState {
        k: state.k + 1,
        x_hat,
        u_hat,
        sigma_x: sigma,
        sigma_u,
        sigma_xu: None,
        k_x: Some(k),
        k_u: Some(m_gain),
        lin: Linearization {
            f: Some(lin.f.clone()),
            b: Some(lin.b.clone()),
            h: Some(lin.h.clone()),
            d: None,
            x_pred: Some(x_pred),
            sigma_pred: Some(sigma_pred),
            s: Some(s),
            source: Some(JacobianSource::Analytic),
        },
    })
}

/// KF with unknown input and direct feed-through (no input delay).
pub fn kf_wdf_step(state: &ForwardState, model: &SystemModel, y: &Vector) -> Result<ForwardState> {
    let lin = linear_parts(model, "kf-wdf")?;
    check_obs(model, y)?;
    let (n, m) = (model.n, model.m);
    let u_prev = state
        .u_hat
        .clone()
        .unwrap_or_else(|| Vector::zeros(m));
    let sigma_u_prev = state.sigma_u.clone().unwrap_or_else(|| Mat::zeros(m, m));
    let sigma_xu_prev = state.sigma_xu.clone().unwrap_or_else(|| Mat::zeros(n, m));

    let x_pred = &lin.f * &state.x_hat + &lin.b * &u_prev;
    let fb = {
        let mut fb = Mat::zeros(n, n + m);
        fb.view_mut((0, 0), (n, n)).copy_from(&lin.f);
        fb.view_mut((0, n), (n, m)).copy_from(&lin.b);
        fb
    };
    let joint = {
        let mut j = Mat::zeros(n + m, n + m);
        j.view_mut((0, 0), (n, n)).copy_from(&state.sigma_x);
        j.view_mut((0, n), (n, m)).copy_from(&sigma_xu_prev);
        j.view_mut((n, 0), (m, n)).copy_from(&sigma_xu_prev.transpose());
        j.view_mut((n, n), (m, m)).copy_from(&sigma_u_prev);
        j
    };
    let sigma_pred = matkit::symmetrize(&(&fb * joint * fb.transpose() + model.q_filter()))?;
    let r = model.r_filter();
    let s = matkit::symmetrize(&(&lin.h * &sigma_pred * lin.h.transpose() + &r))?;
    let chol = matkit::cholesky_jittered(&s, "kf-wdf").map_err(|e| innovation_err(e, "kf-wdf"))?;
    let k = (chol.solve(&lin.h) * &sigma_pred).transpose();
    let innov = y - &lin.h * &x_pred;

    let (u_hat, sigma_u, m_gain, sigma_xu, sigma) = if m > 0 {
        let s_inv_d = chol.solve(&lin.d);
        let info = lin.d.transpose() * &s_inv_d;
        let sigma_u = matkit::inv_spd(&matkit::symmetrize(&info)?, "kf-wdf input")?;
        let m_gain = &sigma_u * s_inv_d.transpose();
        let u_hat = &m_gain * &innov;
        let dsd = &lin.d * &sigma_u * lin.d.transpose();
        let sigma = matkit::symmetrize(&(&sigma_pred - &k * (&s - dsd) * k.transpose()))?;
        let sigma_xu = -(&k * &lin.d * &sigma_u);
        (u_hat, sigma_u, m_gain, sigma_xu, sigma)
    } else {
        let sigma = matkit::symmetrize(&(&sigma_pred - &k * &s * k.transpose()))?;
        (
            Vector::zeros(0),
            Mat::zeros(0, 0),
            Mat::zeros(0, model.p),
            Mat::zeros(n, 0),
            sigma,
        )
    };
    let x_hat = &x_pred + &k * (&innov - &lin.d * &u_hat);
    check_finite(&x_hat, state.k + 1)?;
    Ok(ForwardState {
        k: state.k + 1,
        x_hat,
        u_hat: Some(u_hat),
        sigma_x: sigma,
        sigma_u: Some(sigma_u),
        sigma_xu: Some(sigma_xu),
        k_x: Some(k),
        k_u: Some(m_gain),
        lin: Linearization {
            f: Some(lin.f.clone()),
            b: Some(lin.b.clone()),
            h: Some(lin.h.clone()),
            d: Some(lin.d.clone()),
            x_pred: Some(x_pred),
            sigma_pred: Some(sigma_pred),
            s: Some(s),
            source: Some(JacobianSource::Analytic),
        },
    })
}

/// Two-step EKF for a model without unknown input.
pub fn ekf_step(state: &ForwardState, model: &SystemModel, y: &Vector) -> Result<ForwardState> {
    check_obs(model, y)?;
    let n = model.n;
    let none = model.no_input();
    let (f, sf) = model.jac_f_x(&state.x_hat, &none)?;
    let mut x_pred = model.f(&state.x_hat, &none);
    model.wrap_state(&mut x_pred);
    check_finite(&x_pred, state.k + 1)?;
    let sigma_pred = matkit::symmetrize(&(&f * &state.sigma_x * f.transpose() + model.q_filter()))?;
    let (h, sh) = model.jac_h_x(&x_pred, &none)?;
    let (k, s) = kalman_gain(&sigma_pred, &h, &model.r_filter(), "ekf")?;
    let mut x_hat = &x_pred + &k * (y - model.h(&x_pred, &none));
    model.wrap_state(&mut x_hat);
    check_finite(&x_hat, state.k + 1)?;
    let sigma = matkit::symmetrize(&((Mat::identity(n, n) - &k * &h) * &sigma_pred))?;
    Ok(ForwardState {
        k: state.k + 1,
        x_hat,
        u_hat: None,
        sigma_x: sigma,
        sigma_u: None,
        sigma_xu: None,
        k_x: Some(k),
        k_u: None,
        lin: Linearization {
            f: Some(f),
            b: None,
            h: Some(h),
            d: None,
            x_pred: Some(x_pred),
            sigma_pred: Some(sigma_pred),
            s: Some(s),
            source: Some(merge_source(sf, sh)),
        },
    })
}

/// EKF with unknown input and no direct feed-through.
///
/// `state.u_hat` holds `û_{k-1}` (zero if absent); the returned state holds
/// `û_k`, estimated from `y_{k+1}`.
pub fn ekf_wodf_step(state: &ForwardState, model: &SystemModel, y: &Vector) -> Result<ForwardState> {
    check_obs(model, y)?;
    let (n, m) = (model.n, model.m);
    let u_prev = state.u_hat.clone().unwrap_or_else(|| Vector::zeros(m));
    let (f, sf) = model.jac_f_x(&state.x_hat, &u_prev)?;
    let (b, sb) = model.jac_f_u(&state.x_hat, &u_prev)?;
    let mut x_pred = model.f(&state.x_hat, &u_prev);
    model.wrap_state(&mut x_pred);
    check_finite(&x_pred, state.k + 1)?;
    let sigma_pred = matkit::symmetrize(&(&f * &state.sigma_x * f.transpose() + model.q_filter()))?;
    let zero_u = Vector::zeros(m);
    let (h, sh) = model.jac_h_x(&x_pred, &zero_u)?;
    let r = model.r_filter();
    let (kx, s) = kalman_gain(&sigma_pred, &h, &r, "ekf-wodf")?;
    let r_inv = matkit::inv_spd(&r, "R").map_err(|e| innovation_err(e, "ekf-wodf R"))?;
    let hb = &h * &b;
    let proj = Mat::identity(model.p, model.p) - &h * &kx;
    let w = hb.transpose() * &r_inv * &proj;
    let sigma_u = input_information_inverse(&(&w * &hb))?;
    let ku = &sigma_u * &w;
    let innov = y - model.h(&x_pred, &zero_u);
    let mut x_hat = &x_pred + &kx * &innov;
    model.wrap_state(&mut x_hat);
    let mut u_hat = &ku * (&innov + &hb * &u_prev);
    model.wrap_input(&mut u_hat);
    check_finite(&x_hat, state.k + 1)?;
    check_finite(&u_hat, state.k + 1)?;
    let a = Mat::identity(n, n) - &kx * &h;
    let sigma = matkit::symmetrize(
        &(&a * (&sigma_pred + &b * &sigma_u * b.transpose() * a.transpose())),
    )?;
    Ok(ForwardState {
        k: state.k + 1,
        x_hat,
        u_hat: Some(u_hat),
        sigma_x: sigma,
        sigma_u: Some(sigma_u),
        sigma_xu: None,
        k_x: Some(kx),
        k_u: Some(ku),
        lin: Linearization {
            f: Some(f),
            b: Some(b),
            h: Some(h),
            d: None,
            x_pred: Some(x_pred),
            sigma_pred: Some(sigma_pred),
            s: Some(s),
            source: Some(merge_source(merge_source(sf, sb), sh)),
        },
    })
}

/// EKF with unknown input and direct feed-through; `state.u_hat` is `û_k`.
///
/// `D_k` is linearized once per step at `(x̂_{k+1|k}, û_k)`.
pub fn ekf_wdf_step(state: &ForwardState, model: &SystemModel, y: &Vector) -> Result<ForwardState> {
    check_obs(model, y)?;
    let (n, m) = (model.n, model.m);
    let u_prev = state.u_hat.clone().unwrap_or_else(|| Vector::zeros(m));
    let (f, sf) = model.jac_f_x(&state.x_hat, &u_prev)?;
    let mut x_pred = model.f(&state.x_hat, &u_prev);
    model.wrap_state(&mut x_pred);
    check_finite(&x_pred, state.k + 1)?;
    let sigma_pred = matkit::symmetrize(&(&f * &state.sigma_x * f.transpose() + model.q_filter()))?;
    let (h, sh) = model.jac_h_x(&x_pred, &u_prev)?;
    let (d, sd) = model.jac_h_u(&x_pred, &u_prev)?;
    let rank = matkit::numerical_rank(&d, RANK_TOL);
    if rank < m {
        return Err(Error::RankDeficient {
            what: "D_k",
            rank,
            required: m,
        });
    }
    let r = model.r_filter();
    let (kx, s) = kalman_gain(&sigma_pred, &h, &r, "ekf-wdf")?;
    let r_inv = matkit::inv_spd(&r, "R").map_err(|e| innovation_err(e, "ekf-wdf R"))?;
    let proj = Mat::identity(model.p, model.p) - &h * &kx;
    let w = d.transpose() * &r_inv * &proj;
    let sigma_u = input_information_inverse(&(&w * &d))?;
    let ku = &sigma_u * &w;
    let innov = y - model.h(&x_pred, &u_prev);
    let u_raw = &ku * (&innov + &d * &u_prev);
    let mut x_hat = &x_pred + &kx * (&innov - &d * (&u_raw - &u_prev));
    model.wrap_state(&mut x_hat);
    let mut u_hat = u_raw;
    model.wrap_input(&mut u_hat);
    check_finite(&x_hat, state.k + 1)?;
    check_finite(&u_hat, state.k + 1)?;
    let eye = Mat::identity(n, n);
    let lead = &eye + &kx * &d * &sigma_u * d.transpose() * &r_inv * &h;
    let sigma = matkit::symmetrize(&(lead * (&eye - &kx * &h) * &sigma_pred))?;
    Ok(ForwardState {
        k: state.k + 1,
        x_hat,
        u_hat: Some(u_hat),
        sigma_x: sigma,
        sigma_u: Some(sigma_u),
        sigma_xu: None,
        k_x: Some(kx),
        k_u: Some(ku),
        lin: Linearization {
            f: Some(f),
            b: None,
            h: Some(h),
            d: Some(d),
            x_pred: Some(x_pred),
            sigma_pred: Some(sigma_pred),
            s: Some(s),
            source: Some(merge_source(merge_source(sf, sh), sd)),
        },
    })
}

/// One-step-prediction EKF: `state` holds `x̂_k`, `Σ_k` (both predictions
/// given `y_1..y_{k-1}`) and `y` is `y_k`.
pub fn ekf_one_step(state: &ForwardState, model: &SystemModel, y: &Vector) -> Result<ForwardState> {
    check_obs(model, y)?;
    let none = model.no_input();
    let (f, sf) = model.jac_f_x(&state.x_hat, &none)?;
    let (h, sh) = model.jac_h_x(&state.x_hat, &none)?;
    let r = model.r_filter();
    let s = matkit::symmetrize(&(&h * &state.sigma_x * h.transpose() + &r))?;
    let k = matkit::right_solve_spd(&(&f * &state.sigma_x * h.transpose()), &s, "ekf-one-step")
        .map_err(|e| innovation_err(e, "ekf-one-step"))?;
    let mut x_next = model.f(&state.x_hat, &none) + &k * (y - model.h(&state.x_hat, &none));
    model.wrap_state(&mut x_next);
    check_finite(&x_next, state.k + 1)?;
    let sigma = matkit::symmetrize(
        &(&f * &state.sigma_x * f.transpose() + model.q_filter() - &k * &s * k.transpose()),
    )?;
    Ok(ForwardState {
        k: state.k + 1,
        x_hat: x_next,
        u_hat: None,
        sigma_x: sigma,
        sigma_u: None,
        sigma_xu: None,
        k_x: Some(k),
        k_u: None,
        lin: Linearization {
            f: Some(f),
            b: None,
            h: Some(h),
            d: None,
            x_pred: None,
            sigma_pred: None,
            s: Some(s),
            source: Some(merge_source(sf, sh)),
        },
    })
}

/// A forward filter bound to a model, with existence conditions checked once.
#[derive(Debug, Clone)]
pub struct ForwardFilter {
    kind: ForwardKind,
    model: SystemModel,
}

fn incompatible(kind: ForwardKind, model: &SystemModel, reason: &'static str) -> Error {
    Error::IncompatibleModel {
        filter: kind.as_str(),
        model: model.label.clone(),
        reason,
    }
}

impl ForwardFilter {
    pub fn new(kind: ForwardKind, model: &SystemModel) -> Result<Self> {
        if !matkit::psd_check(&model.r_filter(), 0.0)? || matkit::min_eigenvalue(&model.r_filter())? <= 0.0 {
            return Err(Error::NotSpd { context: "R" });
        }
        match kind {
            ForwardKind::Kf => {
                linear_parts(model, kind.as_str())?;
                if model.feedthrough {
                    return Err(incompatible(kind, model, "known-input KF has no feed-through term"));
                }
            }
            ForwardKind::KfWodf => {
                let lin = linear_parts(model, kind.as_str())?;
                if model.feedthrough {
                    return Err(incompatible(kind, model, "model has direct feed-through"));
                }
                if model.m > 0 {
                    let rank_b = matkit::numerical_rank(&lin.b, RANK_TOL);
                    if rank_b < model.m {
                        return Err(Error::RankDeficient {
                            what: "B",
                            rank: rank_b,
                            required: model.m,
                        });
                    }
                    let rank_hb = matkit::numerical_rank(&(&lin.h * &lin.b), RANK_TOL);
                    if rank_hb < model.m {
                        return Err(Error::RankDeficient {
                            what: "HB",
                            rank: rank_hb,
                            required: model.m,
                        });
                    }
                }
            }
            ForwardKind::KfWdf => {
                let lin = linear_parts(model, kind.as_str())?;
                let rank = if model.m > 0 { matkit::numerical_rank(&lin.d, RANK_TOL) } else { 0 };
                if rank < model.m {
                    return Err(Error::RankDeficient {
                        what: "D",
                        rank,
                        required: model.m,
                    });
                }
            }
            ForwardKind::Ekf | ForwardKind::EkfOneStep => {
                if model.m > 0 {
                    return Err(incompatible(kind, model, "model has an unknown input"));
                }
            }
            ForwardKind::EkfWodf => {
                if model.m == 0 {
                    return Err(incompatible(kind, model, "model has no unknown input"));
                }
                if model.feedthrough {
                    return Err(incompatible(kind, model, "model has direct feed-through"));
                }
                if model.p < model.m {
                    return Err(incompatible(kind, model, "needs p >= m"));
                }
            }
            ForwardKind::EkfWdf => {
                if model.m == 0 || !model.feedthrough {
                    return Err(incompatible(kind, model, "needs an input with direct feed-through"));
                }
                if model.p < model.m {
                    return Err(incompatible(kind, model, "needs p >= m"));
                }
            }
        }
        Ok(Self {
            kind,
            model: model.clone(),
        })
    }

    pub fn kind(&self) -> ForwardKind {
        self.kind
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    /// Advance one step. `u_known` is only read by [`ForwardKind::Kf`].
    pub fn step(&self, state: &ForwardState, y: &Vector, u_known: Option<&Vector>) -> Result<ForwardState> {
        let m = &self.model;
        match self.kind {
            ForwardKind::Kf => kf_step(state, m, y, u_known),
            ForwardKind::KfWodf => kf_wodf_step(state, m, y),
            ForwardKind::KfWdf => kf_wdf_step(state, m, y),
            ForwardKind::Ekf => ekf_step(state, m, y),
            ForwardKind::EkfWodf => ekf_wodf_step(state, m, y),
            ForwardKind::EkfWdf => ekf_wdf_step(state, m, y),
            ForwardKind::EkfOneStep => ekf_one_step(state, m, y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{builtin_model, LinearParts, ModelName, Variant};

    fn m1(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn scalar(f: f64, b: Option<f64>, h: f64, d: Option<f64>, q: f64, r: f64) -> SystemModel {
        let (bm, dm) = match (b, d) {
            (None, None) => (Mat::zeros(1, 0), Mat::zeros(1, 0)),
            (b, d) => (m1(b.unwrap_or(0.0)), m1(d.unwrap_or(0.0))),
        };
        SystemModel::linear(
            "scalar",
            LinearParts {
                f: m1(f),
                b: bm,
                h: m1(h),
                d: dm,
                g: m1(1.0),
            },
            m1(q),
            m1(r),
            m1(5.0),
        )
        .unwrap()
    }

    #[test]
    fn kf_scalar_oracle() {
        let model = scalar(1.0, None, 1.0, None, 1.0, 1.0);
        let s0 = ForwardState::new(Vector::zeros(1), m1(1.0));
        let s1 = kf_step(&s0, &model, &Vector::from_element(1, 2.0), None).unwrap();
        assert!((s1.x_hat[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((s1.sigma_x[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kf_measurement_limits() {
        let lin = LinearParts {
            f: Mat::identity(2, 2),
            b: Mat::zeros(2, 0),
            h: Mat::identity(2, 2),
            d: Mat::zeros(2, 0),
            g: Mat::identity(2, 2),
        };
        let precise = SystemModel::linear(
            "p",
            lin.clone(),
            Mat::identity(2, 2),
            Mat::identity(2, 2) * 1e-12,
            Mat::identity(2, 2),
        )
        .unwrap();
        let y = Vector::from_column_slice(&[3.0, -1.0]);
        let s = kf_step(&ForwardState::new(Vector::zeros(2), Mat::identity(2, 2)), &precise, &y, None).unwrap();
        assert!((&s.x_hat - &y).abs().max() < 1e-9);

        let blind = SystemModel::linear(
            "b",
            lin,
            Mat::zeros(2, 2),
            Mat::identity(2, 2) * 1e12,
            Mat::identity(2, 2),
        )
        .unwrap();
        let x0 = Vector::from_column_slice(&[0.5, 0.25]);
        let s = kf_step(&ForwardState::new(x0.clone(), Mat::identity(2, 2)), &blind, &y, None).unwrap();
        assert!((&s.x_hat - &x0).abs().max() < 1e-9);
    }

    #[test]
    fn kf_wodf_scalar_oracle() {
        let model = scalar(1.0, Some(1.0), 1.0, Some(0.0), 1.0, 1.0);
        let s0 = ForwardState::new(Vector::zeros(1), m1(1.0));
        let s1 = kf_wodf_step(&s0, &model, &Vector::from_element(1, 5.0)).unwrap();
        assert!((s1.u_hat.as_ref().unwrap()[0] - 5.0).abs() < 1e-12);
        assert!((s1.x_hat[0] - 5.0).abs() < 1e-12);
        assert!((s1.sigma_x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((s1.k_x.as_ref().unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s1.k_u.as_ref().unwrap()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kf_wodf_rejects_zero_b() {
        let model = scalar(1.0, Some(0.0), 1.0, Some(0.0), 1.0, 1.0);
        assert!(matches!(
            ForwardFilter::new(ForwardKind::KfWodf, &model),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn kf_wodf_linear3_prediction() {
        let model = builtin_model(ModelName::Linear3, Variant::WithoutDf).unwrap();
        let s0 = ForwardState::new(Vector::zeros(3), Mat::identity(3, 3));
        let s1 = kf_wodf_step(&s0, &model, &Vector::from_column_slice(&[1.0, 2.0])).unwrap();
        let xp = s1.lin.x_pred.unwrap();
        assert!(xp.iter().all(|&v| v == 0.0));
        // 0.1² + 0.5² + 0.08² + 1
        let sp = s1.lin.sigma_pred.unwrap();
        assert!((sp[(0, 0)] - 1.2664).abs() < 1e-12);
    }

    #[test]
    fn kf_wdf_scalar_oracle() {
        let model = scalar(1.0, Some(0.0), 1.0, Some(1.0), 1.0, 1.0);
        let s0 = ForwardState::new(Vector::zeros(1), m1(1.0))
            .with_input(Vector::zeros(1), Some(m1(1.0)))
            .with_cross(m1(0.0));
        let s1 = kf_wdf_step(&s0, &model, &Vector::from_element(1, 3.0)).unwrap();
        assert!((s1.u_hat.as_ref().unwrap()[0] - 3.0).abs() < 1e-12);
        assert!(s1.x_hat[0].abs() < 1e-12);
        assert!((s1.sigma_u.as_ref().unwrap()[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((s1.sigma_x[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((s1.sigma_xu.as_ref().unwrap()[(0, 0)] + 2.0).abs() < 1e-12);
        let joint = s1.joint_covariance().unwrap();
        // det [[2,-2],[-2,3]] = 2 > 0 with positive diagonal
        let det = joint[(0, 0)] * joint[(1, 1)] - joint[(0, 1)] * joint[(1, 0)];
        assert!(det > 0.0 && joint[(0, 0)] > 0.0);
        assert!(matkit::psd_check(&joint, 1e-8).unwrap());
    }

    #[test]
    fn kf_wdf_rejects_zero_d() {
        let model = scalar(1.0, Some(1.0), 1.0, Some(0.0), 1.0, 1.0);
        assert!(matches!(
            ForwardFilter::new(ForwardKind::KfWdf, &model),
            Err(Error::RankDeficient { what: "D", .. })
        ));
    }

    #[test]
    fn one_step_scalar_gain() {
        let model = scalar(1.0, None, 1.0, None, 1.0, 1.0);
        let s = ekf_one_step(&ForwardState::new(Vector::zeros(1), m1(1.0)), &model, &Vector::zeros(1)).unwrap();
        assert!((s.k_x.unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_step_zero_gain_limit() {
        let model = SystemModel::linear(
            "blind",
            LinearParts {
                f: Mat::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
                b: Mat::zeros(2, 0),
                h: Mat::identity(2, 2),
                d: Mat::zeros(2, 0),
                g: Mat::identity(2, 2),
            },
            Mat::zeros(2, 2),
            Mat::identity(2, 2) * 1e14,
            Mat::identity(2, 2),
        )
        .unwrap();
        let sigma = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = ekf_one_step(&ForwardState::new(Vector::zeros(2), sigma.clone()), &model, &Vector::zeros(2)).unwrap();
        let f = model.linear.as_ref().unwrap().f.clone();
        let expected = &f * sigma * f.transpose();
        assert!((s.sigma_x - expected).abs().max() < 1e-9);
    }

    #[test]
    fn ekf_wodf_zero_innovation_gives_zero_input() {
        let model = builtin_model(ModelName::Fm, Variant::WithoutDf).unwrap();
        let s0 = ForwardState::new(Vector::from_column_slice(&[0.3, 0.2]), Mat::identity(2, 2) * 10.0)
            .with_input(Vector::zeros(1), None);
        let xp = model.f(&s0.x_hat, &Vector::zeros(1));
        let y = model.h(&xp, &Vector::zeros(1));
        let s1 = ekf_wodf_step(&s0, &model, &y).unwrap();
        assert!(s1.u_hat.unwrap()[0].abs() < 1e-12);
        assert!(matkit::psd_check(&s1.sigma_x, 1e-8).unwrap());
    }

    #[test]
    fn ekf_wdf_zero_innovation_fixed_point() {
        let model = builtin_model(ModelName::Fm, Variant::WithDf).unwrap();
        let u = Vector::from_element(1, 0.4);
        let s0 = ForwardState::new(Vector::from_column_slice(&[0.3, 0.2]), Mat::identity(2, 2) * 10.0)
            .with_input(u.clone(), None);
        let xp = model.f(&s0.x_hat, &u);
        let y = model.h(&xp, &u);
        let s1 = ekf_wdf_step(&s0, &model, &y).unwrap();
        assert!((s1.u_hat.unwrap()[0] - 0.4).abs() < 1e-12);
        let mut xw = xp.clone();
        model.wrap_state(&mut xw);
        assert!((s1.x_hat - xw).abs().max() < 1e-12);
    }

    #[test]
    fn ekf_wdf_wraps_input() {
        let model = builtin_model(ModelName::Fm, Variant::WithDf).unwrap();
        let s0 = ForwardState::new(Vector::from_column_slice(&[0.3, 0.2]), Mat::identity(2, 2) * 10.0)
            .with_input(Vector::from_element(1, 3.1), None);
        // observation consistent with a phase beyond π
        let y = Vector::from_column_slice(&[2f64.sqrt() * (0.2f64 + 3.5).sin(), 2f64.sqrt() * (0.2f64 + 3.5).cos()]);
        let s1 = ekf_wdf_step(&s0, &model, &y).unwrap();
        let u = s1.u_hat.unwrap()[0];
        assert!((-core::f64::consts::PI..core::f64::consts::PI).contains(&u));
    }

    #[test]
    fn existence_checks_fire() {
        let fm_df = builtin_model(ModelName::Fm, Variant::WithDf).unwrap();
        assert!(ForwardFilter::new(ForwardKind::EkfWodf, &fm_df).is_err());
        let fm = builtin_model(ModelName::Fm, Variant::NoInput).unwrap();
        assert!(ForwardFilter::new(ForwardKind::EkfWdf, &fm).is_err());
        assert!(ForwardFilter::new(ForwardKind::KfWodf, &fm).is_err());
        // H·B = 0 makes the input information singular at every step
        let blind_input = SystemModel::linear(
            "hb0",
            LinearParts {
                f: Mat::identity(2, 2),
                b: Mat::from_column_slice(2, 1, &[0.0, 1.0]),
                h: Mat::from_row_slice(1, 2, &[1.0, 0.0]),
                d: Mat::zeros(1, 1),
                g: Mat::identity(2, 2),
            },
            Mat::identity(2, 2),
            m1(1.0),
            Mat::identity(2, 2),
        )
        .unwrap();
        let s0 = ForwardState::new(Vector::zeros(2), Mat::identity(2, 2));
        assert!(matches!(
            ekf_wodf_step(&s0, &blind_input, &Vector::zeros(1)),
            Err(Error::InputCovSingular { .. })
        ));
        assert!(matches!(
            ForwardFilter::new(ForwardKind::KfWodf, &blind_input),
            Err(Error::RankDeficient { what: "HB", .. })
        ));
    }
}
