//! Stability reports: limiting-gain closed-loop test for linear models and
//! empirical bound inequalities over a run ensemble.

use std::fmt;

use ifk_core::forward::ForwardKind;
use ifk_core::matkit::{self, Mat};
use ifk_core::stability::{self, BoundEstimates, InequalityReport, Side, StepRecord, Theorem1Report};
use ifk_core::Error as CoreError;

use crate::bench::{par_runs, simulate_pair, PairRun};
use crate::config::{ExperimentConfig, Prepared};
use crate::error::{is_numerical, IfkError, Result};

/// Denominator guard of the instrumental-matrix estimates.
pub const INSTRUMENTAL_GUARD: f64 = 1e-9;
pub const LIMIT_MAX_ITER: usize = 500;
pub const LIMIT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub model: String,
    pub forward: String,
    pub inverse: String,
    /// `None` when the model has no limiting-gain test (nonlinear or with DF).
    pub limiting_gain: Option<std::result::Result<(stability::LimitingGains, Theorem1Report), String>>,
    pub runs_used: usize,
    pub diverged: usize,
    pub forward_bounds: Option<BoundEstimates>,
    pub inverse_bounds: Option<BoundEstimates>,
    pub forward_check: Option<std::result::Result<InequalityReport, String>>,
    pub inverse_check: Option<std::result::Result<InequalityReport, String>>,
    pub skipped_instrumental: usize,
}

/// Records of the inverse filter along one run.
///
/// The observation instrumental factor solves
/// `g(x̂_{k+1}) − g(x̂̂_{k+1|k}) = Û G (x̂_{k+1} − x̂̂_{k+1|k})` entrywise.
pub fn inverse_records(p: &Prepared, pair: &PairRun, skipped: &mut usize) -> Vec<StepRecord> {
    let model = &p.model;
    let n = model.n;
    let r = model.sigma_eps_filter();
    let mut out = Vec::new();
    for k in 0..pair.inverse.len().saturating_sub(1) {
        let d = &pair.inverse[k + 1].diag;
        let (Some(f), Some(g), Some(gain), Some(sp), Some(q), Some(zp)) =
            (&d.f_tilde, &d.g, &d.gain, &d.sigma_pred, &d.q_bar, &d.z_pred)
        else {
            continue;
        };
        let x_next = &pair.forward[k + 1].x_hat;
        let x_pred = zp.rows(0, n).into_owned();
        let numer = model.g(x_next) - model.g(&x_pred);
        let denom = g.columns(0, n) * model.state_diff(x_next, &x_pred);
        let entries = stability::instrumental_entries(&numer, &denom, INSTRUMENTAL_GUARD);
        *skipped += entries.iter().filter(|e| e.is_none()).count();
        let u_obs = entries.iter().flatten().map(|v| v.abs()).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        out.push(StepRecord {
            f: f.clone(),
            h: g.clone(),
            gain: gain.clone(),
            sigma_pred: sp.clone(),
            q: q.clone(),
            r: r.clone(),
            u_state: None,
            u_obs,
        });
    }
    out
}

fn limiting(p: &Prepared) -> Option<std::result::Result<(stability::LimitingGains, Theorem1Report), String>> {
    if p.forward != ForwardKind::KfWodf || !p.model.is_linear() {
        return None;
    }
    let run = || -> std::result::Result<_, CoreError> {
        let gains = stability::limiting_kf_wodf_gains(&p.model, &p.sigma0, LIMIT_MAX_ITER, LIMIT_TOL)?;
        let (g, _) = p.model.jac_g(&matkit::Vector::zeros(p.model.n))?;
        let rep = stability::theorem1_check(&gains, &g, &p.model.sigma_eps_filter())?;
        Ok((gains, rep))
    };
    Some(run().map_err(|e| e.to_string()))
}

pub fn stability_report(cfg: &ExperimentConfig) -> Result<StabilityReport> {
    let p = cfg.prepare()?;
    let outcomes = par_runs(cfg.runs, |run| {
        let pair = simulate_pair(&p, run)?;
        let diag = stability::estimate_instrumental_diag(&p.model, &pair.truth, &pair.forward, INSTRUMENTAL_GUARD)
            .map_err(|error| crate::bench::RunFailure { run, step: 0, error })?;
        let fwd = stability::forward_records(&p.model, &pair.forward, Some(&diag));
        let mut skipped = diag.skipped();
        let inv = inverse_records(&p, &pair, &mut skipped);
        Ok::<_, crate::bench::RunFailure>((fwd, inv, skipped))
    });
    let mut fwd = Vec::new();
    let mut inv = Vec::new();
    let mut skipped = 0;
    let mut diverged = 0;
    for o in outcomes {
        match o {
            Ok((f, i, s)) => {
                fwd.push(f);
                inv.push(i);
                skipped += s;
            }
            Err(f) if is_numerical(&f.error) => diverged += 1,
            Err(f) => {
                return Err(IfkError::Run {
                    run: f.run,
                    step: f.step,
                    source: f.error,
                })
            }
        }
    }
    if fwd.is_empty() {
        return Err(IfkError::AllDiverged { runs: cfg.runs });
    }
    let fb = stability::estimate_bounds(&fwd, Side::Forward).ok();
    let ib = stability::estimate_bounds(&inv, Side::Inverse).ok();
    let check = |b: &Option<BoundEstimates>, t| b.as_ref().map(|b| stability::check_inequality(b, t).map_err(|e| e.to_string()));
    Ok(StabilityReport {
        model: cfg.model_label(),
        forward: cfg.forward.clone(),
        inverse: cfg.inverse.clone(),
        limiting_gain: limiting(&p),
        runs_used: fwd.len(),
        diverged,
        forward_check: check(&fb, Side::Forward),
        inverse_check: check(&ib, Side::Inverse),
        forward_bounds: fb,
        inverse_bounds: ib,
        skipped_instrumental: skipped,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.6e}"))
}

fn fmt_mat(m: &Mat) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", "))
        .collect();
    format!("[{}]", rows.join("; "))
}

fn write_check(f: &mut fmt::Formatter<'_>, name: &str, what: &str, c: &Option<std::result::Result<InequalityReport, String>>) -> fmt::Result {
    match c {
        None => writeln!(f, "{name}: not evaluated"),
        Some(Err(e)) => writeln!(f, "{name}: not evaluated ({e})"),
        Some(Ok(r)) => writeln!(
            f,
            "{name}: {what}: lhs={:.6e} rhs={:.6e} margin={:.6e} -> {}",
            r.lhs,
            r.rhs,
            r.margin,
            if r.pass { "PASS" } else { "FAIL" }
        ),
    }
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model: {}  forward: {}  inverse: {}", self.model, self.forward, self.inverse)?;
        match &self.limiting_gain {
            None => writeln!(f, "limiting-gain test: not applicable (needs a linear kf-wodf forward filter)")?,
            Some(Err(e)) => writeln!(f, "limiting-gain test: failed ({e})")?,
            Some(Ok((g, r))) => {
                writeln!(f, "limiting gains: iterations={} residual={:.3e}", g.iterations, g.residual)?;
                writeln!(f, "  K_bar = {}", fmt_mat(&g.k_bar))?;
                writeln!(f, "  M_bar = {}", fmt_mat(&g.m_bar))?;
                writeln!(f, "  F_bar = {}", fmt_mat(&g.f_bar))?;
                writeln!(
                    f,
                    "  observability rank {}/{}  controllability rank {}/{} (threshold {:.0e} * sigma_max)",
                    r.observability_rank,
                    r.n,
                    r.controllability_rank,
                    r.n,
                    stability::RANK_TOL
                )?;
                writeln!(
                    f,
                    "  inverse Riccati: iterations={} residual={:.3e}",
                    r.riccati_iterations, r.riccati_residual
                )?;
                writeln!(
                    f,
                    "  closed-loop spectral radius {:.6} (F_bar radius {:.6}) -> {}",
                    r.spectral_radius,
                    r.f_bar_radius,
                    if r.pass { "PASS" } else { "FAIL" }
                )?;
            }
        }
        writeln!(f, "ensemble: {} runs used, {} diverged, {} instrumental entries skipped", self.runs_used, self.diverged, self.skipped_instrumental)?;
        if let Some(b) = &self.forward_bounds {
            writeln!(
                f,
                "forward bounds: f={} h={} k={} sigma=[{}, {}] q=[{}, {}] r=[{}, {}] alpha={} beta={} gamma={} q_hat={} r_hat={}",
                opt(b.f_bar),
                opt(b.h_bar),
                opt(b.k_bar),
                opt(b.sigma_lo),
                opt(b.sigma_hi),
                opt(b.q_lo),
                opt(b.q_hi),
                opt(b.r_lo),
                opt(b.r_hi),
                opt(b.alpha_bar),
                opt(b.beta_bar),
                opt(b.gamma_bar),
                opt(b.q_hat),
                opt(b.r_hat)
            )?;
        }
        if let Some(b) = &self.inverse_bounds {
            writeln!(
                f,
                "inverse bounds: f={} g={} k={} p=[{}, {}] c={} d={} c_hat={} d_hat={}",
                opt(b.f_bar),
                opt(b.g_bar),
                opt(b.k_bar),
                opt(b.p_lo),
                opt(b.p_hi),
                opt(b.c_bar),
                opt(b.d_bar),
                opt(b.c_hat),
                opt(b.d_hat)
            )?;
        }
        let assumed: Vec<&str> = self
            .forward_bounds
            .iter()
            .chain(&self.inverse_bounds)
            .flat_map(|b| b.assumed.iter().copied())
            .collect();
        if !assumed.is_empty() {
            writeln!(f, "assumed (not estimated): {}", assumed.join(", "))?;
        }
        write_check(f, "forward inequality", "sigma*gamma*h^2*beta^2 < r_hat", &self.forward_check)?;
        write_check(f, "inverse inequality", "p*d*g^2*c^2 < d_hat", &self.inverse_check)?;
        writeln!(f, "note: ensemble extrema are finite-sample estimates, not proofs")
    }
}
