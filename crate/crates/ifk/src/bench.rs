//! Monte-Carlo harness for (forward, inverse) filter pairs.

use std::time::{Duration, Instant};

use ifk_core::forward::{ForwardFilter, ForwardState};
use ifk_core::inverse::{ForwardReplica, InverseInputs, InverseKind, InverseState};
use ifk_core::matkit::{self, Mat, Vector};
use ifk_core::metrics;
use ifk_core::models::{simulate_trajectory, Trajectory};
use ifk_core::rcrlb;
use ifk_core::rng::{derive_seed, CounterRng};
use ifk_core::Error as CoreError;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Prepared};
use crate::error::{is_numerical, IfkError, Result};

/// Tolerance of the covariance PSD sweep.
pub const PSD_TOL: f64 = 1e-8;

/// Environment variable capping the number of worker threads (0 = auto).
pub const THREADS_ENV: &str = "IFK_THREADS";

/// Per-step series; entry `i` belongs to `k = i + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub k: Vec<usize>,
    pub rmse_fwd: Vec<f64>,
    pub amse_fwd: Vec<f64>,
    pub rcrlb_fwd: Vec<f64>,
    pub amse_inv: Vec<f64>,
    pub rcrlb_inv: Vec<f64>,
}

impl Series {
    pub const HEADER: [&'static str; 6] = ["k", "rmse_fwd", "amse_fwd", "rcrlb_fwd", "amse_inv", "rcrlb_inv"];

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// Value columns in header order (without `k`).
    pub fn columns(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("rmse_fwd", &self.rmse_fwd),
            ("amse_fwd", &self.amse_fwd),
            ("rcrlb_fwd", &self.rcrlb_fwd),
            ("amse_inv", &self.amse_inv),
            ("rcrlb_inv", &self.rcrlb_inv),
        ]
    }

    /// Row of step `k` (1-based).
    pub fn at(&self, k: usize) -> Option<[f64; 5]> {
        let i = self.k.iter().position(|&v| v == k)?;
        Some([self.rmse_fwd[i], self.amse_fwd[i], self.rcrlb_fwd[i], self.amse_inv[i], self.rcrlb_inv[i]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergedRun {
    pub run: usize,
    pub step: usize,
    pub reason: String,
}

/// `‖x_K − x̂_K‖` and `‖x̂_K − x̂̂_K‖` of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalError {
    pub run: usize,
    pub forward: f64,
    pub inverse: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub series: Series,
    pub rmse_inv: Vec<f64>,
    /// Indices of the runs that entered the averages.
    pub runs_used: Vec<usize>,
    /// Squared error norms per used run, `k = 1..K`.
    pub sq_fwd: Vec<Vec<f64>>,
    pub sq_inv: Vec<Vec<f64>>,
    pub terminal: Vec<TerminalError>,
    pub diverged: Vec<DivergedRun>,
    /// Run-averaged bound covariances `k = 0..K` (`J⁻¹`).
    pub bound_fwd: Vec<Mat>,
    pub bound_inv: Vec<Mat>,
    pub psd_checked: usize,
    pub psd_violations: usize,
    pub rcrlb_method: String,
    pub wall_time: Duration,
}

impl ExperimentResult {
    /// Deterministic `key=value` lines describing the run (no timings).
    pub fn metadata(&self) -> Vec<String> {
        let diverged: Vec<String> = self.diverged.iter().map(|d| format!("{}@{}", d.run, d.step)).collect();
        vec![
            format!("config={}", self.config.to_json()),
            format!("rng={}", ifk_core::rng::ALGORITHM),
            format!("runs_used={}", self.runs_used.len()),
            format!("diverged={}", self.diverged.len()),
            format!("diverged_runs={}", diverged.join(" ")),
            format!("psd_checked={}", self.psd_checked),
            format!("psd_violations={}", self.psd_violations),
            format!("rcrlb={}", self.rcrlb_method),
        ]
    }
}

/// Everything one Monte-Carlo run produces.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub run: usize,
    pub truth: Trajectory,
    /// `x̂_0..x̂_K` with filter internals.
    pub forward: Vec<ForwardState>,
    /// `a_0..a_K`; `a_0` is only read by the one-step inverse filter.
    pub actions: Vec<Vector>,
    /// `x̂̂_0..x̂̂_K`.
    pub inverse: Vec<InverseState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub run: usize,
    pub step: usize,
    pub error: CoreError,
}

fn fail(run: usize, step: usize) -> impl Fn(CoreError) -> RunFailure {
    move |error| RunFailure { run, step, error }
}

/// Key of run `run`; sub-streams 0, 1, 2 drive the truth, the
/// initializations and the action noise.
pub fn run_key(seed: u64, run: usize) -> u64 {
    derive_seed(seed, run as u64)
}

/// Simulate the truth, the forward filter, the actions and the inverse filter of one run.
pub fn simulate_pair(p: &Prepared, run: usize) -> std::result::Result<PairRun, RunFailure> {
    let steps = p.config.steps;
    let model = &p.model;
    let key = run_key(p.config.seed, run);
    let init = p.draw_init(&mut CounterRng::stream(key, 1));
    let sched = &p.schedule;
    let truth = simulate_trajectory(model, &init.x0, &|k| sched.at(k), steps, derive_seed(key, 0)).map_err(|e| {
        let step = match e {
            CoreError::NonFiniteState { step } => step,
            _ => 0,
        };
        RunFailure { run, step, error: e }
    })?;

    let filter = ForwardFilter::new(p.forward, model).map_err(fail(run, 0))?;
    let mut forward = Vec::with_capacity(steps + 1);
    forward.push(init.forward);
    for k in 1..=steps {
        let next = filter
            .step(&forward[k - 1], truth.y(k), Some(&truth.inputs[k - 1]))
            .map_err(fail(run, k))?;
        forward.push(next);
    }

    let eps = matkit::psd_factor(&model.sigma_eps).map_err(fail(run, 0))?.transpose();
    let mut rng = CounterRng::stream(key, 2);
    let actions: Vec<Vector> = forward.iter().map(|s| model.g(&s.x_hat) + rng.gaussian(&eps)).collect();

    let one_step = p.inverse == InverseKind::IekfOneStep;
    let mut replica = ForwardReplica::new(p.forward, init.replica);
    let mut inverse = Vec::with_capacity(steps + 1);
    inverse.push(init.inverse);
    for k in 0..steps {
        let inputs = InverseInputs {
            a: if one_step { &actions[k] } else { &actions[k + 1] },
            x_true: &truth.states[k],
            x_true_next: &truth.states[k + 1],
            u_true_next: Some(&truth.inputs[k + 1]),
        };
        let (next, rep) = p.inverse_filter.step(&inverse[k], &replica, &inputs).map_err(fail(run, k + 1))?;
        inverse.push(next);
        replica = rep;
    }
    Ok(PairRun {
        run,
        truth,
        forward,
        actions,
        inverse,
    })
}

/// Bound covariances `P_k = J_k⁻¹`, `k = 0..K`, along the run's truth.
pub fn forward_bounds(p: &Prepared, pair: &PairRun) -> std::result::Result<Vec<Mat>, RunFailure> {
    let model = &p.model;
    let run = pair.run;
    let q = model.q_filter();
    let r_inv = matkit::inv_spd(&model.r_filter(), "R").map_err(fail(run, 0))?;
    let mut out = Vec::with_capacity(pair.truth.steps() + 1);
    out.push(p.sigma0.clone());
    for k in 0..pair.truth.steps() {
        let t = &pair.truth;
        let (f, _) = model.jac_f_x(&t.states[k], &t.inputs[k]).map_err(fail(run, k + 1))?;
        let (h, _) = model.jac_h_x(&t.states[k + 1], &t.inputs[k + 1]).map_err(fail(run, k + 1))?;
        let info = h.transpose() * &r_inv * &h;
        let next = rcrlb::bound_step_covariance(&out[k], &f, &q, &info).map_err(fail(run, k + 1))?;
        out.push(next);
    }
    Ok(out)
}

/// Inverse-filter state sitting exactly on the forward filter's values at `k`.
fn truth_inverse_state(p: &Prepared, pair: &PairRun, k: usize) -> InverseState {
    let fwd = &pair.forward;
    let n = p.model.n;
    let dim = if p.inverse.augmented() { n + p.model.m } else { n };
    let mut s = InverseState::new(fwd[k].x_hat.clone(), Mat::identity(dim, dim));
    s.k = k;
    s.x_dhat_prev = fwd[k.saturating_sub(1)].x_hat.clone();
    let u_of = |j: usize| fwd[j].u_hat.clone().unwrap_or_else(|| Vector::zeros(p.model.m));
    match p.inverse {
        // slot holds û_{k−2}; forward state j carries û_{j−1}
        InverseKind::IekfWodf => s.with_input(u_of(k.saturating_sub(1))),
        InverseKind::IkfWdf | InverseKind::IekfWdf => s.with_input(u_of(k)),
        _ => s,
    }
}

/// Inverse bound covariances `k = 0..K` along the forward filter's estimates.
///
/// The inverse transition is linearized at the forward filter's actual
/// values with its actual gains; the non-additive noise enters through
/// `Q̄ = F̃ᵛ·cov·F̃ᵛᵀ`.
pub fn inverse_bounds(p: &Prepared, pair: &PairRun) -> std::result::Result<Vec<Mat>, RunFailure> {
    let model = &p.model;
    let run = pair.run;
    let n = model.n;
    let dim = if p.inverse.augmented() { n + model.m } else { n };
    let se_inv = matkit::inv_spd(&model.sigma_eps_filter(), "Sigma_eps").map_err(fail(run, 0))?;
    let one_step = p.inverse == InverseKind::IekfOneStep;
    let mut out = Vec::with_capacity(pair.truth.steps() + 1);
    out.push(p.inv_bound0.clone());
    for k in 0..pair.truth.steps() {
        let t = &pair.truth;
        let state = truth_inverse_state(p, pair, k);
        let replica = ForwardReplica::new(p.forward, pair.forward[k].clone());
        let inputs = InverseInputs {
            a: if one_step { &pair.actions[k] } else { &pair.actions[k + 1] },
            x_true: &t.states[k],
            x_true_next: &t.states[k + 1],
            u_true_next: Some(&t.inputs[k + 1]),
        };
        let (next, _) = p.inverse_filter.step(&state, &replica, &inputs).map_err(fail(run, k + 1))?;
        let f = next.diag.f_tilde.expect("inverse step reports F̃");
        let q = next.diag.q_bar.expect("inverse step reports Q̄");
        let (gx, _) = model.jac_g(&pair.forward[k + 1].x_hat).map_err(fail(run, k + 1))?;
        let mut g = Mat::zeros(model.na, dim);
        g.view_mut((0, 0), (model.na, n)).copy_from(&gx);
        let info = g.transpose() * &se_inv * &g;
        let next = rcrlb::bound_step_covariance(&out[k], &f, &q, &info).map_err(fail(run, k + 1))?;
        out.push(next);
    }
    Ok(out)
}

/// Error, bound and PSD bookkeeping of one run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub run: usize,
    pub sq_fwd: Vec<f64>,
    pub sq_inv: Vec<f64>,
    pub p_fwd: Vec<Mat>,
    pub p_inv: Vec<Mat>,
    pub psd_checked: usize,
    pub psd_violations: usize,
    pub terminal: TerminalError,
}

fn psd_count(mats: impl IntoIterator<Item = Mat>) -> (usize, usize) {
    let mut checked = 0;
    let mut bad = 0;
    for m in mats {
        checked += 1;
        if !matkit::psd_check(&m, PSD_TOL).unwrap_or(false) {
            bad += 1;
        }
    }
    (checked, bad)
}

pub fn evaluate_run(p: &Prepared, pair: &PairRun) -> std::result::Result<RunMetrics, RunFailure> {
    let model = &p.model;
    let steps = pair.truth.steps();
    let mut sq_fwd = Vec::with_capacity(steps);
    let mut sq_inv = Vec::with_capacity(steps);
    for k in 1..=steps {
        let ef = model.state_diff(&pair.truth.states[k], &pair.forward[k].x_hat);
        let ei = model.state_diff(&pair.forward[k].x_hat, &pair.inverse[k].x_dhat);
        sq_fwd.push(metrics::squared_norm(&ef));
        sq_inv.push(metrics::squared_norm(&ei));
    }
    let p_fwd = forward_bounds(p, pair)?;
    let p_inv = inverse_bounds(p, pair)?;

    let covs = pair
        .forward
        .iter()
        .skip(1)
        .flat_map(|s| [Some(s.sigma_x.clone()), s.sigma_u.clone(), s.joint_covariance()])
        .flatten()
        .chain(pair.inverse.iter().skip(1).map(|s| s.sigma_bar.clone()))
        .chain(p_fwd.iter().cloned())
        .chain(p_inv.iter().cloned());
    let (psd_checked, psd_violations) = psd_count(covs);
    let terminal = TerminalError {
        run: pair.run,
        forward: sq_fwd.last().copied().unwrap_or(0.0).sqrt(),
        inverse: sq_inv.last().copied().unwrap_or(0.0).sqrt(),
    };
    Ok(RunMetrics {
        run: pair.run,
        sq_fwd,
        sq_inv,
        p_fwd,
        p_inv,
        psd_checked,
        psd_violations,
        terminal,
    })
}

/// Worker count from `IFK_THREADS` (unset, empty or 0 means automatic).
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

/// Map `f` over run indices in parallel, preserving order.
pub fn par_runs<T, F>(runs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let threads = thread_count();
    let job = || (0..runs).into_par_iter().map(&f).collect::<Vec<T>>();
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(job),
        Err(_) => (0..runs).map(&f).collect(),
    }
}

fn mean_mats(mats: &[&Vec<Mat>], k: usize) -> Mat {
    let first = &mats[0][k];
    let sum = mats.iter().fold(Mat::zeros(first.nrows(), first.ncols()), |acc, m| acc + &m[k]);
    sum / mats.len() as f64
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let p = cfg.prepare()?;
    let outcomes = par_runs(cfg.runs, |run| simulate_pair(&p, run).and_then(|pair| evaluate_run(&p, &pair)));

    let mut used = Vec::new();
    let mut diverged = Vec::new();
    for o in outcomes {
        match o {
            Ok(m) => used.push(m),
            Err(f) if is_numerical(&f.error) => diverged.push(DivergedRun {
                run: f.run,
                step: f.step,
                reason: f.error.to_string(),
            }),
            Err(f) => {
                return Err(IfkError::Run {
                    run: f.run,
                    step: f.step,
                    source: f.error,
                })
            }
        }
    }
    if used.is_empty() {
        return Err(IfkError::AllDiverged { runs: cfg.runs });
    }

    let n = p.model.n;
    let sq_fwd: Vec<Vec<f64>> = used.iter().map(|m| m.sq_fwd.clone()).collect();
    let sq_inv: Vec<Vec<f64>> = used.iter().map(|m| m.sq_inv.clone()).collect();
    let ms_fwd = metrics::mean_squared(&sq_fwd);
    let ms_inv = metrics::mean_squared(&sq_inv);
    let pf: Vec<&Vec<Mat>> = used.iter().map(|m| &m.p_fwd).collect();
    let pi: Vec<&Vec<Mat>> = used.iter().map(|m| &m.p_inv).collect();
    let bound_fwd: Vec<Mat> = (0..=cfg.steps).map(|k| mean_mats(&pf, k)).collect();
    let bound_inv: Vec<Mat> = (0..=cfg.steps).map(|k| mean_mats(&pi, k)).collect();
    let series = Series {
        k: (1..=cfg.steps).collect(),
        rmse_fwd: metrics::rmse_from_squared(&ms_fwd, n),
        amse_fwd: metrics::amse_from_squared(&ms_fwd, n),
        rcrlb_fwd: bound_fwd[1..].iter().map(|b| rcrlb::rcrlb_per_component(b, n)).collect(),
        amse_inv: metrics::amse_from_squared(&ms_inv, n),
        rcrlb_inv: bound_inv[1..].iter().map(|b| rcrlb::rcrlb_per_component(b, n)).collect(),
    };
    let (bound_mats_checked, bound_mats_bad) = psd_count(bound_fwd.iter().chain(&bound_inv).cloned());
    let rcrlb_method = if p.model.is_linear() {
        "additive recursion along each truth, averaged over runs".to_string()
    } else {
        "additive recursion along each truth, averaged over runs; inverse noise Gaussianized as F~v cov F~v' + dQ I"
            .to_string()
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        series,
        rmse_inv: metrics::rmse_from_squared(&ms_inv, n),
        runs_used: used.iter().map(|m| m.run).collect(),
        sq_fwd,
        sq_inv,
        terminal: used.iter().map(|m| m.terminal).collect(),
        diverged,
        bound_fwd,
        bound_inv,
        psd_checked: used.iter().map(|m| m.psd_checked).sum::<usize>() + bound_mats_checked,
        psd_violations: used.iter().map(|m| m.psd_violations).sum::<usize>() + bound_mats_bad,
        rcrlb_method,
        wall_time: start.elapsed(),
    })
}
