//! Recursive Cramér–Rao lower bound.
//!
//! For `x_{k+1} = f(x_k) + w_k`, `y_{k+1} = h(x_{k+1}) + v_{k+1}` the Fisher
//! information follows
//! `J_{k+1} = D²² − D²¹(J_k + D¹¹)⁻¹D¹²` with
//! `D¹¹ = E[FᵀQ⁻¹F]`, `D¹² = −E[FᵀQ⁻¹] = (D²¹)ᵀ`, `D²² = E[Q⁻¹] + E[HᵀR⁻¹H]`.
//! When `F` and `Q` do not depend on the state this collapses to
//! `J_{k+1} = Q⁻¹ + HᵀR⁻¹H − Q⁻¹F(J_k + FᵀQ⁻¹F)⁻¹FᵀQ⁻¹`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::matkit::{self, Mat};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrix {
    pub j: Mat,
    pub k: usize,
}

impl InfoMatrix {
    pub fn new(j: Mat) -> Self {
        Self { j, k: 0 }
    }

    /// `J₀ = Σ₀⁻¹`.
    pub fn from_covariance(sigma0: &Mat) -> Result<Self> {
        Ok(Self::new(matkit::inv_spd(sigma0, "initial covariance")?))
    }

    /// `J⁻¹`.
    pub fn bound_covariance(&self) -> Result<Mat> {
        matkit::inv_spd(&self.j, "information matrix")
    }
}

/// Monte-Carlo estimates of the D-terms with elementwise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DTerms {
    pub d11: Mat,
    pub d12: Mat,
    pub d22: Mat,
    pub se11: Mat,
    pub se12: Mat,
    pub se22: Mat,
    pub samples: usize,
}

impl DTerms {
    pub fn d21(&self) -> Mat {
        self.d12.transpose()
    }
}

/// Linearized transition at one sampled true state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample {
    /// Jacobian of the transition mean at `x_k`.
    pub f: Mat,
    /// Transition noise covariance at `x_k` (additive or Gaussianized).
    pub q: Mat,
    /// Observation Jacobian at `x_{k+1}`.
    pub h: Mat,
    pub r: Mat,
}

fn symmetric(a: Mat) -> Result<Mat> {
    matkit::symmetrize(&a)
}

/// Additive-Gaussian step, literal form.
pub fn info_step_additive_literal(j: &InfoMatrix, f: &Mat, h: &Mat, q: &Mat, r: &Mat) -> Result<InfoMatrix> {
    let q_inv = matkit::inv_spd(q, "Q").map_err(|_| Error::DegenerateNoise)?;
    let r_inv = matkit::inv_spd(r, "R")?;
    let inner = &j.j + f.transpose() * &q_inv * f;
    let qf = &q_inv * f;
    let corr = &qf * matkit::solve_spd(&inner, &qf.transpose())?;
    Ok(InfoMatrix {
        j: symmetric(&q_inv + h.transpose() * r_inv * h - corr)?,
        k: j.k + 1,
    })
}

/// Additive-Gaussian step in the equivalent form
/// `J_{k+1} = (Q + F J_k⁻¹ Fᵀ)⁻¹ + HᵀR⁻¹H`.
///
/// Avoids forming `Q⁻¹`, so nearly singular `Q` does not cancel catastrophically.
pub fn info_step_additive(j: &InfoMatrix, f: &Mat, h: &Mat, q: &Mat, r: &Mat) -> Result<InfoMatrix> {
    let p = j.bound_covariance()?;
    let pred = symmetric(q + f * p * f.transpose())?;
    let r_inv = matkit::inv_spd(r, "R")?;
    let prior = matkit::inv_spd(&pred, "predicted bound covariance").map_err(|_| Error::DegenerateNoise)?;
    Ok(InfoMatrix {
        j: symmetric(prior + h.transpose() * r_inv * h)?,
        k: j.k + 1,
    })
}

/// Covariance-form step `P_{k+1} = ((Q + FPFᵀ)⁻¹ + I_meas)⁻¹` with
/// `I_meas = CCᵀ` the (expected) measurement information.
///
/// Equivalent to [`info_step_additive`] on `P = J⁻¹` but well defined when
/// `Q + FPFᵀ` is singular.
pub fn bound_step_covariance(p: &Mat, f: &Mat, q: &Mat, meas_info: &Mat) -> Result<Mat> {
    let pred = symmetric(q + f * p * f.transpose())?;
    let c = matkit::psd_factor(meas_info)?.transpose();
    let k = c.ncols();
    let s = symmetric(Mat::identity(k, k) + c.transpose() * &pred * &c)?;
    let pc = &pred * &c;
    let upd = &pc * matkit::solve_spd(&s, &pc.transpose())?;
    symmetric(pred - upd)
}

/// D-terms from a set of transition samples.
///
/// Standard errors are the elementwise sample standard deviations over `√N`.
pub fn estimate_dterms(samples: &[TransitionSample]) -> Result<DTerms> {
    let first = samples.first().ok_or(Error::EmptyEnsemble)?;
    let n = first.f.ncols();
    let count = samples.len();
    let mut acc = [Mat::zeros(n, n), Mat::zeros(n, n), Mat::zeros(n, n)];
    let mut acc2 = [Mat::zeros(n, n), Mat::zeros(n, n), Mat::zeros(n, n)];
    for s in samples {
        if matkit::max_abs(&s.q) == 0.0 {
            return Err(Error::DegenerateNoise);
        }
        let q_inv = matkit::inv_spd(&s.q, "transition noise").map_err(|_| Error::DegenerateNoise)?;
        let r_inv = matkit::inv_spd(&s.r, "R")?;
        let ft_qi = s.f.transpose() * &q_inv;
        let terms = [
            &ft_qi * &s.f,
            -ft_qi,
            &q_inv + s.h.transpose() * r_inv * &s.h,
        ];
        for (i, t) in terms.iter().enumerate() {
            acc[i] += t;
            acc2[i] += t.component_mul(t);
        }
    }
    let cnt = count as f64;
    let mut means = Vec::with_capacity(3);
    let mut ses = Vec::with_capacity(3);
    for i in 0..3 {
        let mean = &acc[i] / cnt;
        let var = (&acc2[i] / cnt - mean.component_mul(&mean)).map(|v| v.max(0.0));
        let denom = if count > 1 { cnt - 1.0 } else { 1.0 };
        let se = var.map(|v| math::sqrt(v * cnt / denom / cnt));
        means.push(mean);
        ses.push(se);
    }
    let d22 = symmetric(means.pop().unwrap())?;
    let d12 = means.pop().unwrap();
    let d11 = symmetric(means.pop().unwrap())?;
    let se22 = ses.pop().unwrap();
    let se12 = ses.pop().unwrap();
    let se11 = ses.pop().unwrap();
    Ok(DTerms {
        d11,
        d12,
        d22,
        se11,
        se12,
        se22,
        samples: count,
    })
}

/// `J_{k+1} = D²² − D²¹(J_k + D¹¹)⁻¹D¹²`.
pub fn info_step_from_dterms(j: &InfoMatrix, d: &DTerms) -> Result<InfoMatrix> {
    let inner = symmetric(&j.j + &d.d11)?;
    let corr = d.d21() * matkit::solve_spd(&inner, &d.d12)?;
    Ok(InfoMatrix {
        j: symmetric(&d.d22 - corr)?,
        k: j.k + 1,
    })
}

/// Result of a Monte-Carlo information step.
#[derive(Debug, Clone, PartialEq)]
pub struct McStep {
    pub info: InfoMatrix,
    pub dterms: DTerms,
    /// Elementwise standard error of `J_{k+1}` from batch means.
    pub se: Mat,
}

/// Number of batches used for the standard error of `J_{k+1}`.
pub const MC_BATCHES: usize = 10;

/// General-recursion step with D-terms estimated from `samples` draws of
/// `sampler`. Sample `i` uses stream `i` of `seed`.
pub fn info_step_general_mc<S>(j: &InfoMatrix, sampler: S, samples: usize, seed: u64) -> Result<McStep>
where
    S: Fn(&mut CounterRng) -> Result<TransitionSample>,
{
    if samples < 100 {
        return Err(Error::InvalidArgument("Monte-Carlo information step needs at least 100 samples"));
    }
    let mut draws = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut rng = CounterRng::stream(seed, i as u64);
        draws.push(sampler(&mut rng)?);
    }
    info_step_from_samples(j, &draws)
}

/// General-recursion step from pre-drawn transition samples.
pub fn info_step_from_samples(j: &InfoMatrix, draws: &[TransitionSample]) -> Result<McStep> {
    let dterms = estimate_dterms(draws)?;
    let info = info_step_from_dterms(j, &dterms)?;
    let batches = MC_BATCHES.min(draws.len());
    let n = j.j.nrows();
    let mut se = Mat::zeros(n, n);
    if batches >= 2 {
        let size = draws.len() / batches;
        let mut vals = Vec::with_capacity(batches);
        for b in 0..batches {
            let chunk = &draws[b * size..(b + 1) * size];
            vals.push(info_step_from_dterms(j, &estimate_dterms(chunk)?)?.j);
        }
        let mean = vals.iter().fold(Mat::zeros(n, n), |acc, v| acc + v) / batches as f64;
        let var = vals
            .iter()
            .fold(Mat::zeros(n, n), |acc, v| acc + (v - &mean).component_mul(&(v - &mean)))
            / (batches as f64 - 1.0);
        // batch-mean variance scaled to the full sample
        se = var.map(|v| math::sqrt(v / batches as f64));
    }
    Ok(McStep { info, dterms, se })
}

/// `√Tr(J⁻¹)`.
pub fn rcrlb_scalar(j: &InfoMatrix) -> Result<f64> {
    Ok(math::sqrt(j.bound_covariance()?.trace()))
}

/// `√(Tr(P_xx)/n)` over the leading `n×n` block of a bound covariance,
/// in the units of an RMSE.
pub fn rcrlb_per_component(p: &Mat, n: usize) -> f64 {
    let tr: f64 = (0..n).map(|i| p[(i, i)]).sum();
    math::sqrt(tr.max(0.0) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn scalar_first_step() {
        let j = InfoMatrix::new(m1(1.0));
        let lit = info_step_additive_literal(&j, &m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        let wb = info_step_additive(&j, &m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert!((lit.j[(0, 0)] - 1.5).abs() < 1e-15);
        assert!((wb.j[(0, 0)] - 1.5).abs() < 1e-15);
        assert_eq!(wb.k, 1);
    }

    #[test]
    fn no_measurement() {
        let j = InfoMatrix::new(m1(1.0));
        let out = info_step_additive_literal(&j, &m1(1.0), &m1(0.0), &m1(1.0), &m1(1.0)).unwrap();
        assert!((out.j[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prior_washout() {
        let j = InfoMatrix::new(Mat::identity(2, 2) * 3.0);
        let h = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let r = Mat::identity(2, 2) * 0.5;
        let out = info_step_additive(&j, &Mat::identity(2, 2), &h, &(Mat::identity(2, 2) * 1e12), &r).unwrap();
        let expected = h.transpose() * matkit::inv_spd(&r, "r").unwrap() * &h;
        assert!((out.j - expected).abs().max() < 1e-9);
    }

    #[test]
    fn rcrlb_examples() {
        assert!((rcrlb_scalar(&InfoMatrix::new(Mat::identity(3, 3))).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        let d = Mat::from_diagonal(&crate::matkit::Vector::from_column_slice(&[4.0, 1.0]));
        assert!((rcrlb_scalar(&InfoMatrix::new(d)).unwrap() - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn scalar_recursion_matches_direct_inverse() {
        let mut j = InfoMatrix::new(m1(1.0));
        let mut direct = 1.0f64;
        for _ in 0..10 {
            j = info_step_additive(&j, &m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
            direct = 1.0 / (1.0 + 1.0 / direct) + 1.0;
        }
        assert!((rcrlb_scalar(&j).unwrap() - (1.0 / direct).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn scalar_fixed_point() {
        // J = 1/(1 + 1/J) + 1 has the positive root (1 + √5)/2
        let target = (1.0 + 5f64.sqrt()) / 2.0;
        let mut j = InfoMatrix::new(m1(1.0));
        let mut prev = 1.0;
        let mut converged_at = None;
        for k in 0..200 {
            j = info_step_additive_literal(&j, &m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
            if (j.j[(0, 0)] - prev).abs() < 1e-10 && converged_at.is_none() {
                converged_at = Some(k);
            }
            prev = j.j[(0, 0)];
        }
        assert!(converged_at.is_some());
        assert!((prev - target).abs() < 1e-10);
    }

    #[test]
    fn covariance_form_matches_information_form() {
        let f = Mat::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
        let h = Mat::from_row_slice(1, 2, &[1.0, 0.3]);
        let q = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let r = m1(0.7);
        let j0 = InfoMatrix::new(Mat::identity(2, 2));
        let a = info_step_additive_literal(&j0, &f, &h, &q, &r).unwrap();
        let info = h.transpose() * &h / 0.7;
        let p = bound_step_covariance(&Mat::identity(2, 2), &f, &q, &info).unwrap();
        assert!((a.bound_covariance().unwrap() - p).abs().max() < 1e-12);
    }

    #[test]
    fn deterministic_transition_rejected() {
        let j = InfoMatrix::new(m1(1.0));
        let r = info_step_general_mc(
            &j,
            |_| {
                Ok(TransitionSample {
                    f: m1(1.0),
                    q: m1(0.0),
                    h: m1(1.0),
                    r: m1(1.0),
                })
            },
            100,
            1,
        );
        assert_eq!(r.unwrap_err(), Error::DegenerateNoise);
    }

    #[test]
    fn mc_consistency_under_doubling() {
        // random observation gain: h = 1 + 0.5·z
        let sampler = |rng: &mut CounterRng| {
            Ok(TransitionSample {
                f: m1(0.9),
                q: m1(1.0),
                h: m1(1.0 + 0.5 * rng.normal()),
                r: m1(1.0),
            })
        };
        let j = InfoMatrix::new(m1(1.0));
        let a = info_step_general_mc(&j, sampler, 1000, 3).unwrap();
        let b = info_step_general_mc(&j, sampler, 2000, 4).unwrap();
        let combined = (a.se[(0, 0)].powi(2) + b.se[(0, 0)].powi(2)).sqrt();
        assert!(combined > 0.0);
        assert!((a.info.j[(0, 0)] - b.info.j[(0, 0)]).abs() <= 2.0 * combined);
    }
}
