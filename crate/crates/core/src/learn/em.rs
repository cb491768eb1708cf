//! Expectation-maximization for a single LDS, the baseline learner
//! behind the `lds-fma` detector.
//!
//! E-step: Kalman filter plus Rauch-Tung-Striebel smoother with the
//! exact lag-one cross-covariance `cov(x_{t-1}, x_t | y) = J_{t-1}
//! Sigma_{t|T}`. M-step: closed-form updates of `(G, Q, C, R)`. The
//! initial-state law stays pinned at `N(0, Q)` to match the generative
//! model, so only the four matrices are re-estimated.

use nalgebra::{Matrix2, Vector2};

use crate::dist::psd_project2;
use crate::fkff::fkff_loglik;
use crate::model::{FldsModel, LdsParams, ObservationSeries};
use crate::{Error, Result};

/// Noise floor added after each M-step so covariances stay invertible.
const COV_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub params: LdsParams,
    /// Training log-likelihood after each iteration.
    pub loglik_trace: Vec<f64>,
}

struct Smoothed {
    mean: Vec<Vector2<f64>>,
    cov: Vec<Matrix2<f64>>,
    /// `E[x_t x_{t-1}^T]` for `t = 2..=T` (index 0 unused).
    cross: Vec<Matrix2<f64>>,
}

fn smooth(params: &LdsParams, obs: &ObservationSeries) -> Result<Smoothed> {
    let t_len = obs.len();
    let mut pred_mean = vec![Vector2::zeros(); t_len];
    let mut pred_cov = vec![Matrix2::zeros(); t_len];
    let mut upd_mean = vec![Vector2::zeros(); t_len];
    let mut upd_cov = vec![Matrix2::zeros(); t_len];

    for t in 0..t_len {
        let (pm, pc) = if t == 0 {
            (Vector2::zeros(), params.q)
        } else {
            (
                params.g * upd_mean[t - 1],
                params.g * upd_cov[t - 1] * params.g.transpose() + params.q,
            )
        };
        let s = params.c * pc * params.c.transpose() + params.r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::numerical("EM innovation covariance is singular"))?;
        let k = pc * params.c.transpose() * s_inv;
        let innovation = obs.samples[t] - params.c * pm;
        pred_mean[t] = pm;
        pred_cov[t] = pc;
        upd_mean[t] = pm + k * innovation;
        upd_cov[t] = psd_project2(&(pc - k * params.c * pc));
    }

    let mut sm_mean = upd_mean.clone();
    let mut sm_cov = upd_cov.clone();
    let mut cross = vec![Matrix2::zeros(); t_len];
    for t in (0..t_len - 1).rev() {
        let pc_next_inv = pred_cov[t + 1]
            .try_inverse()
            .ok_or_else(|| Error::numerical("EM predicted covariance is singular"))?;
        let j = upd_cov[t] * params.g.transpose() * pc_next_inv;
        sm_mean[t] = upd_mean[t] + j * (sm_mean[t + 1] - pred_mean[t + 1]);
        sm_cov[t] =
            psd_project2(&(upd_cov[t] + j * (sm_cov[t + 1] - pred_cov[t + 1]) * j.transpose()));
        // E[x_{t+1} x_t^T] = Sigma_{t+1|T} J_t^T + m_{t+1} m_t^T
        cross[t + 1] = sm_cov[t + 1] * j.transpose() + sm_mean[t + 1] * sm_mean[t].transpose();
    }
    Ok(Smoothed { mean: sm_mean, cov: sm_cov, cross })
}

/// Fits a single LDS by EM starting from a data-driven initialization.
pub fn em_fit_lds(obs: &ObservationSeries, iterations: usize) -> Result<EmOutcome> {
    if obs.len() < 4 {
        return Err(Error::invalid("EM needs at least 4 observations"));
    }
    if iterations == 0 {
        return Err(Error::invalid("EM needs at least one iteration"));
    }
    let n = obs.len() as f64;
    let mean = obs.samples.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for p in &obs.samples {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let half = psd_project2(&(cov * 0.5)) + Matrix2::identity() * 1e-4;
    let mut params = LdsParams::new(
        Matrix2::identity() * 0.5,
        Matrix2::identity(),
        half,
        half,
    )?;

    let mut loglik_trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let sm = smooth(&params, obs)?;
        let t_len = obs.len();

        let mut a_num = Matrix2::zeros();
        let mut a_den = Matrix2::zeros();
        for t in 1..t_len {
            a_num += sm.cross[t];
            a_den += sm.cov[t - 1] + sm.mean[t - 1] * sm.mean[t - 1].transpose();
        }
        let g = a_num
            * a_den
                .try_inverse()
                .ok_or_else(|| Error::numerical("EM transition normal matrix singular"))?;

        let mut q = Matrix2::zeros();
        for t in 1..t_len {
            let exx = sm.cov[t] + sm.mean[t] * sm.mean[t].transpose();
            q += exx - g * sm.cross[t].transpose();
        }
        q /= (t_len - 1) as f64;
        let q = psd_project2(&q) + Matrix2::identity() * COV_FLOOR;

        let mut c_num = Matrix2::zeros();
        let mut c_den = Matrix2::zeros();
        for t in 0..t_len {
            c_num += obs.samples[t] * sm.mean[t].transpose();
            c_den += sm.cov[t] + sm.mean[t] * sm.mean[t].transpose();
        }
        let c = c_num
            * c_den
                .try_inverse()
                .ok_or_else(|| Error::numerical("EM output normal matrix singular"))?;

        let mut r = Matrix2::zeros();
        for t in 0..t_len {
            r += obs.samples[t] * obs.samples[t].transpose()
                - c * sm.mean[t] * obs.samples[t].transpose();
        }
        r /= t_len as f64;
        let r = psd_project2(&r) + Matrix2::identity() * COV_FLOOR;

        params = LdsParams::new(g, c, q, r)?;
        let model = FldsModel::new(vec![params.clone()], true)?;
        loglik_trace.push(fkff_loglik(&model, obs, 1, obs.len())?);
    }
    Ok(EmOutcome { params, loglik_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_flds, InitialState};
    use crate::rng::RngHandle;

    #[test]
    fn em_loglik_is_nondecreasing_and_approaches_truth() {
        let model = FldsModel::study_config(1).unwrap();
        let mut rng = RngHandle::new(77, 0);
        let (obs, _) = simulate_flds(&model, 800, InitialState::Random, &mut rng).unwrap();
        let out = em_fit_lds(&obs, 30).unwrap();
        for w in out.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "EM log-likelihood decreased: {w:?}");
        }
        let true_ll = fkff_loglik(&model, &obs, 1, obs.len()).unwrap();
        let em_ll = *out.loglik_trace.last().unwrap();
        // ML fit on the training data should land near (often above) the
        // true-parameter likelihood
        assert!(
            em_ll > true_ll - 0.05 * obs.len() as f64,
            "EM ll {em_ll} far below truth {true_ll}"
        );
    }

    #[test]
    fn em_rejects_short_series() {
        let obs = ObservationSeries::new(vec![Vector2::zeros(); 3]);
        assert!(em_fit_lds(&obs, 5).is_err());
    }
}
