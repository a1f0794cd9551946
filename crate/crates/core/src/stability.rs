//! Stability checks for the inverse filters.
//!
//! Linear case: the forward KF without feed-through converges to limiting
//! gains `K̄, M̄`, after which the inverse filter is a time-invariant KF on
//! `x̂_{k+1} = F̄x̂_k + ĒHx_{k+1} + Ēv_{k+1}`. Its error dynamics are stable
//! when the closed loop `F̄ − F̄Σ̄Gᵀ(GΣ̄Gᵀ+Σ_ε)⁻¹G` has spectral radius
//! below one, with `Σ̄` the stationary inverse Riccati solution.
//!
//! Nonlinear case: the sufficient conditions involve bounds on Jacobians,
//! covariances and unknown diagonal "instrumental" matrices. They are
//! estimated here as finite-sample extrema over a run ensemble, which is
//! evidence rather than proof.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::forward::{self, ForwardState};
use crate::matkit::{self, Mat, Vector};
use crate::models::{SystemModel, Trajectory};

/// Relative singular-value threshold of the rank tests.
pub const RANK_TOL: f64 = 1e-10;
/// Closed-loop spectral radius must stay below `1 − STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

const RICCATI_MAX_ITER: usize = 100_000;
const RICCATI_TOL: f64 = 1e-12;
const RICCATI_BLOWUP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct LimitingGains {
    pub k_bar: Mat,
    pub m_bar: Mat,
    pub f_bar: Mat,
    pub e_bar: Mat,
    pub q_bar: Mat,
    /// Fixed point of the one-step prediction covariance `Σ_{k+1|k}`.
    pub sigma_fix: Mat,
    pub iterations: usize,
    pub residual: f64,
}

/// Iterate the forward KF-without-DF covariance recursion to its fixed point.
pub fn limiting_kf_wodf_gains(model: &SystemModel, sigma0: &Mat, max_iter: usize, tol: f64) -> Result<LimitingGains> {
    forward::ForwardFilter::new(forward::ForwardKind::KfWodf, model)?;
    let lin = model.linear.as_ref().expect("checked by the filter constructor");
    let y = Vector::zeros(model.p);
    let mut state = ForwardState::new(Vector::zeros(model.n), sigma0.clone());
    let mut prev: Option<Mat> = None;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        state = forward::kf_wodf_step(&state, model, &y)?;
        let sp = state.lin.sigma_pred.clone().expect("kf-wodf reports Σ_{k+1|k}");
        if let Some(p) = &prev {
            residual = matkit::max_abs(&(&sp - p));
            if residual < tol {
                let n = model.n;
                let k_bar = state.k_x.clone().expect("gain");
                let m_bar = state.k_u.clone().unwrap_or_else(|| Mat::zeros(model.m, model.p));
                let eye = Mat::identity(n, n);
                let bm = &lin.b * &m_bar;
                let f_bar = (&eye - &k_bar * &lin.h) * (&eye - &bm * &lin.h) * &lin.f;
                let e_bar = &bm - &k_bar * &lin.h * &bm + &k_bar;
                let q_bar = matkit::symmetrize(&(&e_bar * model.r_filter() * e_bar.transpose()))?;
                return Ok(LimitingGains {
                    k_bar,
                    m_bar,
                    f_bar,
                    e_bar,
                    q_bar,
                    sigma_fix: sp,
                    iterations: it,
                    residual,
                });
            }
        }
        prev = Some(sp);
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub n: usize,
    pub observability_rank: usize,
    pub controllability_rank: usize,
    /// Stationary inverse Riccati solution, if the iteration converged.
    pub sigma_bar: Option<Mat>,
    pub riccati_iterations: usize,
    pub riccati_residual: f64,
    /// Spectral radius of the closed loop (or of `F̄` when the Riccati iteration diverged).
    pub spectral_radius: f64,
    pub f_bar_radius: f64,
    pub pass: bool,
}

impl Theorem1Report {
    /// Whether `(F̄, G)` is observable and `(F̄, C)` controllable.
    pub fn structural_conditions_hold(&self) -> bool {
        self.observability_rank == self.n && self.controllability_rank == self.n
    }
}

fn riccati_map(s: &Mat, f: &Mat, g: &Mat, se: &Mat, q: &Mat) -> Result<Mat> {
    let inn = matkit::symmetrize(&(g * s * g.transpose() + se))?;
    let sg = s * g.transpose();
    let upd = s - &sg * matkit::solve_spd(&inn, &sg.transpose())?;
    matkit::symmetrize(&(f * upd * f.transpose() + q))
}

/// Closed-loop stability test of the inverse filter on limiting gains.
pub fn theorem1_check(gains: &LimitingGains, g: &Mat, sigma_eps: &Mat) -> Result<Theorem1Report> {
    let n = gains.f_bar.nrows();
    let f = &gains.f_bar;
    let mut obs = Mat::zeros(g.nrows() * n, n);
    let mut block = g.clone();
    for i in 0..n {
        obs.view_mut((i * g.nrows(), 0), (g.nrows(), n)).copy_from(&block);
        block = &block * f;
    }
    let c_t = matkit::psd_factor(&gains.q_bar)?.transpose();
    let mut ctrl = Mat::zeros(n, c_t.ncols() * n);
    let mut block = c_t.clone();
    for i in 0..n {
        ctrl.view_mut((0, i * c_t.ncols()), (n, c_t.ncols())).copy_from(&block);
        block = f * &block;
    }
    let observability_rank = matkit::numerical_rank(&obs, RANK_TOL);
    let controllability_rank = matkit::numerical_rank(&ctrl, RANK_TOL);
    let f_bar_radius = matkit::spectral_radius(f)?;

    let mut s = matkit::add_identity(&gains.q_bar, 1.0);
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for it in 1..=RICCATI_MAX_ITER {
        let next = riccati_map(&s, f, g, sigma_eps, &gains.q_bar)?;
        residual = matkit::max_abs(&(&next - &s));
        s = next;
        iterations = it;
        if !matkit::all_finite(&s) || matkit::max_abs(&s) > RICCATI_BLOWUP {
            break;
        }
        if residual < RICCATI_TOL * (1.0 + matkit::max_abs(&s)) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Ok(Theorem1Report {
            n,
            observability_rank,
            controllability_rank,
            sigma_bar: None,
            riccati_iterations: iterations,
            riccati_residual: residual,
            spectral_radius: f_bar_radius,
            f_bar_radius,
            pass: false,
        });
    }
    let residual = matkit::max_abs(&(riccati_map(&s, f, g, sigma_eps, &gains.q_bar)? - &s));
    let inn = matkit::symmetrize(&(g * &s * g.transpose() + sigma_eps))?;
    let gain = matkit::right_solve_spd(&(&s * g.transpose()), &inn, "inverse Riccati")?;
    let closed = f - f * gain * g;
    let radius = matkit::spectral_radius(&closed)?;
    Ok(Theorem1Report {
        n,
        observability_rank,
        controllability_rank,
        sigma_bar: Some(s),
        riccati_iterations: iterations,
        riccati_residual: residual,
        spectral_radius: radius,
        f_bar_radius,
        pass: radius < 1.0 - STABILITY_MARGIN,
    })
}

/// Per-step quantities of one filter run used for bound estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Transition Jacobian (`F_k`, or the inverse filter's `F̃_k`).
    pub f: Mat,
    /// Observation Jacobian (`H_{k+1}`, or `G_{k+1}`).
    pub h: Mat,
    pub gain: Mat,
    /// Prediction covariance.
    pub sigma_pred: Mat,
    /// Process covariance used by the filter.
    pub q: Mat,
    /// Measurement covariance used by the filter.
    pub r: Mat,
    /// Spectral norm of the state instrumental matrix, if estimable at this step.
    pub u_state: Option<f64>,
    /// Spectral norm of the observation instrumental matrix, if estimable.
    pub u_obs: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Forward,
    Inverse,
}

/// Empirical extrema over an ensemble. `None` marks a bound not estimated
/// for the chosen side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundEstimates {
    pub f_bar: Option<f64>,
    pub h_bar: Option<f64>,
    pub g_bar: Option<f64>,
    pub k_bar: Option<f64>,
    pub sigma_lo: Option<f64>,
    pub sigma_hi: Option<f64>,
    pub q_lo: Option<f64>,
    pub q_hi: Option<f64>,
    pub r_lo: Option<f64>,
    pub r_hi: Option<f64>,
    pub p_lo: Option<f64>,
    pub p_hi: Option<f64>,
    pub alpha_bar: Option<f64>,
    pub beta_bar: Option<f64>,
    pub gamma_bar: Option<f64>,
    pub c_bar: Option<f64>,
    pub d_bar: Option<f64>,
    pub q_hat: Option<f64>,
    pub r_hat: Option<f64>,
    pub c_hat: Option<f64>,
    pub d_hat: Option<f64>,
    /// Names of bounds that were set by assumption rather than estimated.
    pub assumed: Vec<&'static str>,
    pub steps: usize,
}

struct Extrema {
    lo: f64,
    hi: f64,
}

impl Extrema {
    fn new() -> Self {
        Self {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, v: f64) {
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
    }

    fn hi(&self) -> Option<f64> {
        self.hi.is_finite().then_some(self.hi)
    }

    fn lo(&self) -> Option<f64> {
        self.lo.is_finite().then_some(self.lo)
    }
}

/// Bounds from an ensemble of runs.
///
/// The forward side fills `f̄, h̄, k̄, σ̲, σ̄, q, r, ᾱ, β̄, γ̄, q̂, r̂`; the
/// inverse side fills `ḡ, p̲, p̄, c̄, d̄, ĉ, d̂` (plus the shared `f̄, k̄`).
/// `γ̄` and `d̄` bound matrices the filters never form and are set to 1.
pub fn estimate_bounds(ensemble: &[Vec<StepRecord>], side: Side) -> Result<BoundEstimates> {
    let steps: usize = ensemble.iter().map(|r| r.len()).sum();
    if steps == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut f = Extrema::new();
    let mut h = Extrema::new();
    let mut k = Extrema::new();
    let mut sig = Extrema::new();
    let mut q = Extrema::new();
    let mut r = Extrema::new();
    let mut us = Extrema::new();
    let mut uo = Extrema::new();
    let mut q_hat = Extrema::new();
    for rec in ensemble.iter().flatten() {
        f.push(matkit::spectral_norm(&rec.f));
        h.push(matkit::spectral_norm(&rec.h));
        k.push(matkit::spectral_norm(&rec.gain));
        let e = matkit::sym_eigenvalues(&rec.sigma_pred)?;
        sig.push(e[0]);
        sig.push(e[e.len() - 1]);
        let e = matkit::sym_eigenvalues(&rec.q)?;
        q.push(e[0]);
        q.push(e[e.len() - 1]);
        let e = matkit::sym_eigenvalues(&rec.r)?;
        r.push(e[0]);
        r.push(e[e.len() - 1]);
        if let Some(v) = rec.u_state {
            us.push(v);
        }
        if let Some(v) = rec.u_obs {
            uo.push(v);
        }
        if side == Side::Forward && rec.gain.nrows() == rec.f.ncols() {
            let fk = &rec.f * &rec.gain;
            let m = &rec.q + &fk * &rec.r * fk.transpose();
            q_hat.push(matkit::min_eigenvalue(&matkit::symmetrize(&m)?)?);
        }
    }
    let mut b = BoundEstimates {
        f_bar: f.hi(),
        k_bar: k.hi(),
        steps,
        ..Default::default()
    };
    match side {
        Side::Forward => {
            b.h_bar = h.hi();
            b.sigma_lo = sig.lo();
            b.sigma_hi = sig.hi();
            b.q_lo = q.lo();
            b.q_hi = q.hi();
            b.r_lo = r.lo();
            b.r_hi = r.hi();
            b.alpha_bar = us.hi();
            b.beta_bar = uo.hi();
            b.gamma_bar = Some(1.0);
            b.assumed.push("gamma_bar");
            b.q_hat = q_hat.lo();
            b.r_hat = r.lo();
        }
        Side::Inverse => {
            b.g_bar = h.hi();
            b.p_lo = sig.lo();
            b.p_hi = sig.hi();
            b.c_bar = uo.hi();
            b.d_bar = Some(1.0);
            b.assumed.push("d_bar");
            b.c_hat = q.lo();
            b.d_hat = r.lo();
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InequalityReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub margin: f64,
    pub pass: bool,
}

/// Forward: `σ̄γ̄h̄²β̄² < r̂`. Inverse: `p̄d̄ḡ²c̄² < d̂`.
pub fn check_inequality(b: &BoundEstimates, which: Side) -> Result<InequalityReport> {
    let need = |v: Option<f64>, name: &'static str| v.ok_or(Error::MissingBound(name));
    let (lhs, rhs) = match which {
        Side::Forward => {
            let s = need(b.sigma_hi, "sigma_hi")?;
            let g = need(b.gamma_bar, "gamma_bar")?;
            let h = need(b.h_bar, "h_bar")?;
            let be = need(b.beta_bar, "beta_bar")?;
            (s * g * h * h * be * be, need(b.r_hat, "r_hat")?)
        }
        Side::Inverse => {
            let p = need(b.p_hi, "p_hi")?;
            let d = need(b.d_bar, "d_bar")?;
            let g = need(b.g_bar, "g_bar")?;
            let c = need(b.c_bar, "c_bar")?;
            (p * d * g * g * c * c, need(b.d_hat, "d_hat")?)
        }
    };
    Ok(InequalityReport {
        lhs,
        rhs,
        margin: rhs - lhs,
        pass: lhs < rhs,
    })
}

/// Per-step diagonal entries of an instrumental matrix; `None` marks an
/// entry skipped because its denominator fell below the guard.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstrumentalDiag {
    /// `Ûˣ_k` diagonals, one vector per step `k = 0..K-1`.
    pub state: Vec<Vec<Option<f64>>>,
    /// `Ûʸ_{k+1}` diagonals, one vector per step.
    pub obs: Vec<Vec<Option<f64>>>,
}

impl InstrumentalDiag {
    /// Largest absolute computed entry per step (the spectral norm of a
    /// diagonal matrix), `None` when every entry was skipped.
    pub fn state_norms(&self) -> Vec<Option<f64>> {
        self.state.iter().map(|d| diag_norm(d)).collect()
    }

    pub fn obs_norms(&self) -> Vec<Option<f64>> {
        self.obs.iter().map(|d| diag_norm(d)).collect()
    }

    pub fn skipped(&self) -> usize {
        self.state.iter().chain(&self.obs).flatten().filter(|e| e.is_none()).count()
    }
}

fn diag_norm(d: &[Option<f64>]) -> Option<f64> {
    d.iter().flatten().map(|v| v.abs()).fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Ratio `numer_i / denom_i` where `|denom_i| > guard`.
pub fn instrumental_entries(numer: &Vector, denom: &Vector, guard: f64) -> Vec<Option<f64>> {
    numer
        .iter()
        .zip(denom.iter())
        .map(|(n, d)| (d.abs() > guard).then(|| n / d))
        .collect()
}

/// Instrumental diagonals along a forward run.
///
/// `run[k]` is the filter state at time `k` (`run[0]` the initialization);
/// `x̃_{k+1|k} − w_k = Ûˣ_k F_k x̃_k` and `ỹ_{k+1} − v_{k+1} = Ûʸ_{k+1} H_{k+1} x̃_{k+1|k}`.
pub fn estimate_instrumental_diag(
    model: &SystemModel,
    truth: &Trajectory,
    run: &[ForwardState],
    guard: f64,
) -> Result<InstrumentalDiag> {
    let mut out = InstrumentalDiag::default();
    for k in 0..run.len().saturating_sub(1).min(truth.steps()) {
        let next = &run[k + 1];
        let (Some(f), Some(h), Some(x_pred)) = (&next.lin.f, &next.lin.h, &next.lin.x_pred) else {
            return Err(Error::InvalidArgument("filter run lacks linearization records"));
        };
        let err = model.state_diff(&truth.states[k], &run[k].x_hat);
        let err_pred = model.state_diff(&truth.states[k + 1], x_pred);
        let numer = &err_pred - &truth.process_noise[k];
        out.state.push(instrumental_entries(&numer, &(f * &err), guard));
        let u_used = if model.feedthrough {
            next.u_hat.clone().unwrap_or_else(|| Vector::zeros(model.m))
        } else {
            Vector::zeros(model.m)
        };
        let y_res = truth.y(k + 1) - model.h(x_pred, &u_used);
        let numer = y_res - &truth.measurement_noise[k];
        out.obs.push(instrumental_entries(&numer, &(h * &err_pred), guard));
    }
    Ok(out)
}

/// Bound-estimation records from a forward run (`run[0]` the initialization).
pub fn forward_records(model: &SystemModel, run: &[ForwardState], diag: Option<&InstrumentalDiag>) -> Vec<StepRecord> {
    let q = model.q_filter();
    let r = model.r_filter();
    let (us, uo) = match diag {
        Some(d) => (d.state_norms(), d.obs_norms()),
        None => (Vec::new(), Vec::new()),
    };
    run.iter()
        .skip(1)
        .enumerate()
        .filter_map(|(i, s)| {
            Some(StepRecord {
                f: s.lin.f.clone()?,
                h: s.lin.h.clone()?,
                gain: s.k_x.clone()?,
                sigma_pred: s.lin.sigma_pred.clone()?,
                q: q.clone(),
                r: r.clone(),
                u_state: us.get(i).copied().flatten(),
                u_obs: uo.get(i).copied().flatten(),
            })
        })
        .collect()
}
