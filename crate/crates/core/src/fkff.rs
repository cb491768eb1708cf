//! Factorial Kalman forward filtering.
//!
//! Recursive per-chain prediction/update for the factorial LDS. The
//! per-chain blocks interact only through the factorial Kalman gain,
//! whose denominator couples every chain's predicted covariance, the
//! process-noise cross terms and an `M^2 R` observation-noise term. For
//! `M = 1` the recursion reduces exactly to the textbook Kalman filter.
//!
//! For `M > 1` the block-diagonal parameterization is an approximation
//! of the full joint filter; [`stacked`] implements the exact
//! full-covariance filter over the stacked `2M`-dimensional state so the
//! divergence can be measured instead of hidden.

use nalgebra::{Matrix2, Vector2};

use crate::dist::psd_project2;
use crate::model::{FldsModel, ObservationSeries};
use crate::{Error, Result};

/// Per-chain filtered and predicted moments at one time step.
#[derive(Debug, Clone)]
pub struct ChainMoments {
    pub pred_mean: Vector2<f64>,
    pub pred_cov: Matrix2<f64>,
    pub upd_mean: Vector2<f64>,
    pub upd_cov: Matrix2<f64>,
    pub gain: Matrix2<f64>,
}

/// Forward-filter state: per-chain moments plus the time index of the
/// last consumed observation (0 before the first step).
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub chains: Vec<ChainMoments>,
    pub t: usize,
}

/// One-step predictive observation density `N(mean, cov)` evaluated at
/// the consumed observation.
#[derive(Debug, Clone)]
pub struct PredictiveLikelihood {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub log_density: f64,
}

/// Initializes the filter: predicted moments `(0, Q^m)` per chain, so the
/// first step's predictive density is `N(0, sum_m C Q C^T + M^2 R)`.
pub fn fkff_init(model: &FldsModel) -> Result<ForwardState> {
    if model.num_sources() == 0 {
        return Err(Error::invalid("filter needs at least one chain"));
    }
    let chains = model
        .sources()
        .iter()
        .map(|p| ChainMoments {
            pred_mean: Vector2::zeros(),
            pred_cov: p.q,
            upd_mean: Vector2::zeros(),
            upd_cov: Matrix2::zeros(),
            gain: Matrix2::zeros(),
        })
        .collect();
    Ok(ForwardState { chains, t: 0 })
}

/// Advances the filter by one observation and returns the predictive
/// likelihood of that observation.
pub fn fkff_step(
    state: &mut ForwardState,
    model: &FldsModel,
    p_t: &Vector2<f64>,
) -> Result<PredictiveLikelihood> {
    let m_count = state.chains.len();
    if m_count != model.num_sources() {
        return Err(Error::invalid(format!(
            "state has {m_count} chains, model has {}",
            model.num_sources()
        )));
    }
    let mf = m_count as f64;

    // Prediction step.
    for (chain, p) in state.chains.iter_mut().zip(model.sources()) {
        chain.pred_mean = p.g * chain.upd_mean;
        chain.pred_cov = if state.t == 0 {
            p.q
        } else {
            p.g * chain.upd_cov * p.g.transpose() + p.q
        };
    }

    // Predictive observation density: mu = sum C mubar,
    // Sigma = sum_m (C Sigmabar C^T + M R).
    let mut mu_p = Vector2::zeros();
    let mut sigma_p = Matrix2::zeros();
    for (chain, p) in state.chains.iter().zip(model.sources()) {
        mu_p += p.c * chain.pred_mean;
        sigma_p += p.c * chain.pred_cov * p.c.transpose() + p.r * mf;
    }
    sigma_p = (sigma_p + sigma_p.transpose()) * 0.5;

    // Gain denominator: sum_n C Sigmabar C^T
    //                 + sum_n sum_{m != n} C^n Q^n C^m^T + M^2 R.
    let mut denom = Matrix2::zeros();
    let mut r_acc = Matrix2::zeros();
    for (n_idx, (chain_n, pn)) in state.chains.iter().zip(model.sources()).enumerate() {
        denom += pn.c * chain_n.pred_cov * pn.c.transpose();
        r_acc += pn.r;
        for (m_idx, pm) in model.sources().iter().enumerate() {
            if m_idx != n_idx {
                denom += pn.c * pn.q * pm.c.transpose();
            }
        }
    }
    denom += r_acc * mf;
    let denom_inv = denom.try_inverse().ok_or_else(|| {
        Error::numerical(format!("singular gain denominator at t = {}", state.t + 1))
    })?;

    // Per-chain gains and measurement update.
    let innovation = p_t - mu_p;
    for (idx, (chain, p)) in state.chains.iter_mut().zip(model.sources()).enumerate() {
        let mut numer = chain.pred_cov * p.c.transpose();
        for (n_idx, pn) in model.sources().iter().enumerate() {
            if n_idx != idx {
                numer += pn.q * pn.c.transpose();
            }
        }
        let gain = numer * denom_inv;
        chain.upd_mean = chain.pred_mean + gain * innovation;
        chain.upd_cov = psd_project2(&(chain.pred_cov - gain * numer.transpose()));
        chain.gain = gain;
    }
    state.t += 1;

    let log_density = log_gaussian2(p_t, &mu_p, &sigma_p)?;
    Ok(PredictiveLikelihood { mean: mu_p, cov: sigma_p, log_density })
}

/// Log-density of `N(mean, cov)` at `x` via Cholesky.
pub fn log_gaussian2(x: &Vector2<f64>, mean: &Vector2<f64>, cov: &Matrix2<f64>) -> Result<f64> {
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numerical("predictive covariance is not PD".to_string()))?;
    let diff = x - mean;
    let solved = chol.solve(&diff);
    let log_det = 2.0 * (chol.l()[(0, 0)].ln() + chol.l()[(1, 1)].ln());
    Ok(-0.5 * (diff.dot(&solved) + log_det + 2.0 * (2.0 * std::f64::consts::PI).ln()))
}

/// Sum of log predictive densities for observations `from..=to` (1-based),
/// with the filter conditioned on the full past from `t = 1`.
pub fn fkff_loglik(
    model: &FldsModel,
    observations: &ObservationSeries,
    from: usize,
    to: usize,
) -> Result<f64> {
    if from < 1 || from > to || to > observations.len() {
        return Err(Error::invalid(format!(
            "window [{from}, {to}] out of range for series of length {}",
            observations.len()
        )));
    }
    let mut state = fkff_init(model)?;
    let mut total = 0.0;
    for (idx, p) in observations.samples[..to].iter().enumerate() {
        let lik = fkff_step(&mut state, model, p)?;
        if idx + 1 >= from {
            total += lik.log_density;
        }
    }
    Ok(total)
}

/// Runs the filter to (near) steady state on a zero observation stream
/// and returns the converged state. The gains and covariances of a
/// stable model converge regardless of the observations (they do not
/// depend on the data), so driving with zeros is purely a convenience.
pub fn fkff_converge(model: &FldsModel, max_steps: usize, tol: f64) -> Result<ForwardState> {
    let mut state = fkff_init(model)?;
    let zero = Vector2::zeros();
    let mut prev: Vec<Matrix2<f64>> = state.chains.iter().map(|c| c.upd_cov).collect();
    for _ in 0..max_steps {
        fkff_step(&mut state, model, &zero)?;
        let delta = state
            .chains
            .iter()
            .zip(&prev)
            .map(|(c, p)| (c.upd_cov - p).abs().max())
            .fold(0.0f64, f64::max);
        if delta < tol && state.t > 1 {
            return Ok(state);
        }
        prev = state.chains.iter().map(|c| c.upd_cov).collect();
    }
    Err(Error::numerical(format!(
        "filter covariance did not converge within {max_steps} steps"
    )))
}

/// Per-step filter trace row for debugging dumps.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: usize,
    pub mu_p: Vector2<f64>,
    pub log_det_sigma_p: f64,
    pub gain_frobenius: Vec<f64>,
}

/// Runs the filter over a series collecting per-step trace rows.
pub fn fkff_trace(model: &FldsModel, observations: &ObservationSeries) -> Result<Vec<TraceRow>> {
    let mut state = fkff_init(model)?;
    let mut rows = Vec::with_capacity(observations.len());
    for p in &observations.samples {
        let lik = fkff_step(&mut state, model, p)?;
        rows.push(TraceRow {
            t: state.t,
            mu_p: lik.mean,
            log_det_sigma_p: lik.cov.determinant().ln(),
            gain_frobenius: state.chains.iter().map(|c| c.gain.norm()).collect(),
        });
    }
    Ok(rows)
}

/// Writes a trace as CSV: `t,mu_p_i,mu_p_q,logdet_sigma_p,k_fro_1,...`.
pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.gain_frobenius.len());
    write!(out, "t,mu_p_i,mu_p_q,logdet_sigma_p")?;
    for k in 1..=m {
        write!(out, ",k_fro_{k}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{},{},{},{}", r.t, r.mu_p[0], r.mu_p[1], r.log_det_sigma_p)?;
        for g in &r.gain_frobenius {
            write!(out, ",{g}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub mod stacked {
    //! Exact full-covariance Kalman filter over the stacked `2M`-state.
    //!
    //! Independent of the factorial recursion above: block transition
    //! matrix `diag(G^m)`, stacked output `[C^1 ... C^M]`, observation
    //! noise `M R` (the sum of the per-source draws). Serves as the
    //! oracle for the `M = 1` equivalence tests and as the reference the
    //! factorial approximation is measured against for `M > 1`.

    use nalgebra::{DMatrix, DVector};

    use crate::model::{FldsModel, ObservationSeries};
    use crate::{Error, Result};

    pub struct StackedFilter {
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        pub mean: DVector<f64>,
        pub cov: DMatrix<f64>,
        pub t: usize,
    }

    impl StackedFilter {
        pub fn new(model: &FldsModel) -> Result<Self> {
            let m = model.num_sources();
            if m == 0 {
                return Err(Error::invalid("filter needs at least one chain"));
            }
            let d = 2 * m;
            let mut f = DMatrix::zeros(d, d);
            let mut h = DMatrix::zeros(2, d);
            let mut q = DMatrix::zeros(d, d);
            let mut r = DMatrix::zeros(2, 2);
            for (k, p) in model.sources().iter().enumerate() {
                for i in 0..2 {
                    for j in 0..2 {
                        f[(2 * k + i, 2 * k + j)] = p.g[(i, j)];
                        h[(i, 2 * k + j)] = p.c[(i, j)];
                        q[(2 * k + i, 2 * k + j)] = p.q[(i, j)];
                        r[(i, j)] += p.r[(i, j)];
                    }
                }
            }
            // initial predicted covariance: x_1^m ~ N(0, Q^m)
            let cov = q.clone();
            Ok(StackedFilter { f, h, q, r, mean: DVector::zeros(d), cov, t: 0 })
        }

        /// One predict-update step; returns the log predictive density.
        pub fn step(&mut self, p_t: &nalgebra::Vector2<f64>) -> Result<f64> {
            let (pred_mean, pred_cov) = if self.t == 0 {
                (self.mean.clone(), self.cov.clone())
            } else {
                (
                    &self.f * &self.mean,
                    &self.f * &self.cov * self.f.transpose() + &self.q,
                )
            };
            let mu = &self.h * &pred_mean;
            let s = &self.h * &pred_cov * self.h.transpose() + &self.r;
            let s_chol = s
                .clone()
                .cholesky()
                .ok_or_else(|| Error::numerical("stacked innovation covariance not PD"))?;
            let innovation = DVector::from_column_slice(&[p_t[0] - mu[0], p_t[1] - mu[1]]);
            let gain = &pred_cov * self.h.transpose() * s_chol.inverse();
            self.mean = &pred_mean + &gain * &innovation;
            let cov = &pred_cov - &gain * &self.h * &pred_cov;
            self.cov = (&cov + cov.transpose()) * 0.5;
            self.t += 1;

            let solved = s_chol.solve(&innovation);
            let log_det = s_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            Ok(-0.5
                * (innovation.dot(&solved) + log_det + 2.0 * (2.0 * std::f64::consts::PI).ln()))
        }
    }

    /// Stacked-filter log-likelihood over `from..=to` (1-based).
    pub fn stacked_loglik(
        model: &FldsModel,
        observations: &ObservationSeries,
        from: usize,
        to: usize,
    ) -> Result<f64> {
        if from < 1 || from > to || to > observations.len() {
            return Err(Error::invalid(format!(
                "window [{from}, {to}] out of range for series of length {}",
                observations.len()
            )));
        }
        let mut filter = StackedFilter::new(model)?;
        let mut total = 0.0;
        for (idx, p) in observations.samples[..to].iter().enumerate() {
            let l = filter.step(p)?;
            if idx + 1 >= from {
                total += l;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_flds, InitialState, LdsParams};
    use crate::rng::RngHandle;
    use rand::Rng;

    fn random_stable_model(rng: &mut RngHandle) -> FldsModel {
        let eps: f64 = 0.3 + 0.65 * rng.gen::<f64>();
        let theta: f64 = rng.gen::<f64>() * std::f64::consts::PI;
        let q = Matrix2::identity() * (0.005 + 0.05 * rng.gen::<f64>());
        let r = Matrix2::identity() * (0.005 + 0.05 * rng.gen::<f64>());
        let mut p = LdsParams::rotation(eps, theta, q, r).unwrap();
        // random non-degenerate output matrix
        p.c = Matrix2::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ) + Matrix2::identity() * 0.5;
        FldsModel::new(vec![p], true).unwrap()
    }

    #[test]
    fn init_uses_process_noise_for_prediction() {
        let model = FldsModel::study_config(4).unwrap();
        let state = fkff_init(&model).unwrap();
        for chain in &state.chains {
            assert_eq!(chain.pred_cov, Matrix2::identity() * 0.01);
            assert_eq!(chain.pred_mean, Vector2::zeros());
        }
    }

    #[test]
    fn init_rejects_empty_model() {
        assert!(FldsModel::new(vec![], true).is_err());
    }

    #[test]
    fn identical_chains_stay_identical() {
        let p = FldsModel::study_config(1).unwrap().sources()[0].clone();
        let model = FldsModel::new(vec![p.clone(), p.clone(), p], true).unwrap();
        let mut state = fkff_init(&model).unwrap();
        let mut rng = RngHandle::new(3, 0);
        for _ in 0..50 {
            let obs = Vector2::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            fkff_step(&mut state, &model, &obs).unwrap();
            for c in &state.chains[1..] {
                assert!((c.upd_cov - state.chains[0].upd_cov).abs().max() < 1e-14);
                assert!((c.upd_mean - state.chains[0].upd_mean).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn single_chain_matches_textbook_filter_per_step() {
        // M = 1 reduction: the stacked filter *is* the textbook filter.
        let mut seed_rng = RngHandle::new(42, 0);
        let model = random_stable_model(&mut seed_rng);
        let (obs, _) =
            simulate_flds(&model, 1000, InitialState::Random, &mut RngHandle::new(1, 1)).unwrap();

        let mut fact = fkff_init(&model).unwrap();
        let mut exact = stacked::StackedFilter::new(&model).unwrap();
        for p in &obs.samples {
            let lik = fkff_step(&mut fact, &model, p).unwrap();
            let l2 = exact.step(p).unwrap();
            assert!(
                (lik.log_density - l2).abs() < 1e-12 * l2.abs().max(1.0),
                "per-step likelihood mismatch"
            );
        }
    }

    #[test]
    fn four_source_covariance_converges() {
        let model = FldsModel::study_config(4).unwrap();
        let state = fkff_converge(&model, 20_000, 1e-10).unwrap();
        assert!(state.t < 20_000);
        // converged within the length used by the studies
        assert!(state.t < 2000, "took {} steps", state.t);
    }

    #[test]
    fn riccati_contraction_scalar_oracle() {
        // Q = 0, G = I, C = I, R = I: gain = P (P + I)^{-1} and the
        // updated covariance follows p' = p - p^2/(p+1), monotone down.
        let p0 = LdsParams::new(
            Matrix2::identity(),
            Matrix2::identity(),
            Matrix2::zeros(),
            Matrix2::identity(),
        )
        .unwrap();
        let model = FldsModel::new(vec![p0], true).unwrap();
        let mut state = fkff_init(&model).unwrap();
        // seed a nonzero covariance by hand (Q = 0 would keep it at zero)
        state.chains[0].upd_cov = Matrix2::identity() * 2.0;
        state.t = 1;
        let mut scalar_p = 2.0f64;
        let zero = Vector2::zeros();
        for _ in 0..40 {
            fkff_step(&mut state, &model, &zero).unwrap();
            let pred = scalar_p; // G = I, Q = 0
            let upd = pred - pred * pred / (pred + 1.0);
            assert!(
                (state.chains[0].upd_cov[(0, 0)] - upd).abs() < 1e-12,
                "riccati mismatch"
            );
            assert!(upd <= scalar_p);
            scalar_p = upd;
        }
    }

    #[test]
    fn loglik_one_step_reduction() {
        // Single Gaussian sample, G = 0, C = I: predictive is N(0, Q + R).
        let q = Matrix2::identity() * 0.3;
        let r = Matrix2::identity() * 0.2;
        let p = LdsParams::new(Matrix2::zeros(), Matrix2::identity(), q, r).unwrap();
        let model = FldsModel::new(vec![p], true).unwrap();
        let x = Vector2::new(0.4, -0.1);
        let obs = ObservationSeries::new(vec![x]);
        let got = fkff_loglik(&model, &obs, 1, 1).unwrap();
        let expect = log_gaussian2(&x, &Vector2::zeros(), &(q + r)).unwrap();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn loglik_telescopes_exactly() {
        let model = FldsModel::study_config(2).unwrap();
        let (obs, _) =
            simulate_flds(&model, 300, InitialState::Random, &mut RngHandle::new(8, 0)).unwrap();
        let full = fkff_loglik(&model, &obs, 1, 300).unwrap();
        for k in [1, 57, 150, 299] {
            let a = fkff_loglik(&model, &obs, 1, k).unwrap();
            let b = fkff_loglik(&model, &obs, k + 1, 300).unwrap();
            assert!((full - (a + b)).abs() < 1e-12, "split at {k}");
        }
    }

    #[test]
    fn two_source_loglik_close_to_stacked_oracle() {
        // The factorial recursion is an approximation for M > 1; measure
        // the divergence and require it stays within a recorded budget.
        let model = FldsModel::study_config(2).unwrap();
        let (obs, _) =
            simulate_flds(&model, 200, InitialState::Random, &mut RngHandle::new(12, 0)).unwrap();
        let fact = fkff_loglik(&model, &obs, 1, 200).unwrap();
        let exact = stacked::stacked_loglik(&model, &obs, 1, 200).unwrap();
        let per_step = (fact - exact).abs() / 200.0;
        // budget: the factorial filter assumes more observation noise
        // (M^2 R vs M R), so a systematic per-step gap is expected.
        assert!(per_step < 0.5, "per-step divergence {per_step}");
    }

    #[test]
    fn covariances_stay_symmetric() {
        let model = FldsModel::study_config(4).unwrap();
        let (obs, _) =
            simulate_flds(&model, 500, InitialState::Random, &mut RngHandle::new(4, 0)).unwrap();
        let mut state = fkff_init(&model).unwrap();
        for p in &obs.samples {
            fkff_step(&mut state, &model, p).unwrap();
            for c in &state.chains {
                assert!((c.upd_cov - c.upd_cov.transpose()).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn gain_converges_for_stable_models() {
        let mut rng = RngHandle::new(17, 0);
        for _ in 0..10 {
            let model = random_stable_model(&mut rng);
            let mut state = fkff_init(&model).unwrap();
            let zero = Vector2::zeros();
            let mut prev = Matrix2::zeros();
            let mut converged = false;
            for _ in 0..10_000 {
                fkff_step(&mut state, &model, &zero).unwrap();
                let g = state.chains[0].gain;
                if (g - prev).abs().max() < 1e-10 {
                    converged = true;
                    break;
                }
                prev = g;
            }
            assert!(converged);
        }
    }

    #[test]
    fn loglik_rejects_bad_window() {
        let model = FldsModel::study_config(1).unwrap();
        let obs = ObservationSeries::new(vec![Vector2::zeros(); 10]);
        assert!(fkff_loglik(&model, &obs, 0, 5).is_err());
        assert!(fkff_loglik(&model, &obs, 3, 2).is_err());
        assert!(fkff_loglik(&model, &obs, 1, 11).is_err());
    }
}
