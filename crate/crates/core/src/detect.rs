//! Transient signal detection on top of the forward filter.
//!
//! A single H0 filter is run on the raw observations; the H1 predictive
//! density is the H0 predictive shifted by the known waveform, so the
//! per-sample log-likelihood ratio collapses to the quadratic form
//!
//! ```text
//! L_t = (p_t - mu_p - y_t / 2)^T Sigma_p^{-1} y_t
//! ```
//!
//! Stopping rules threshold either the L_t stream directly (Shewhart),
//! its running max-sum (CUSUM) or the sum of the last `w` values (FMA).
//! Under stationarity the window sum is Gaussian with closed-form
//! moments, giving the threshold formula and the false-alarm /
//! missed-detection bounds.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dist::{std_normal_cdf, std_normal_quantile};
use crate::fkff::{fkff_step, ForwardState, PredictiveLikelihood};
use crate::model::{FldsModel, ObservationSeries};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Log-likelihood ratio
// ---------------------------------------------------------------------------

/// Quadratic-form LLR given a predictive density and the waveform value.
pub fn llr_from_predictive(
    lik: &PredictiveLikelihood,
    y_t: &Vector2<f64>,
    p_t: &Vector2<f64>,
) -> Result<f64> {
    let chol = lik
        .cov
        .cholesky()
        .ok_or_else(|| Error::numerical("predictive covariance is singular".to_string()))?;
    let lhs = p_t - lik.mean - y_t * 0.5;
    Ok(lhs.dot(&chol.solve(y_t)))
}

/// Advances the H0 filter on the raw observation `p_t` and returns the
/// LLR for a hypothesised waveform value `y_t` at this step.
pub fn llr_step(
    state: &mut ForwardState,
    model: &FldsModel,
    y_t: &Vector2<f64>,
    p_t: &Vector2<f64>,
) -> Result<f64> {
    let lik = fkff_step(state, model, p_t)?;
    llr_from_predictive(&lik, y_t, p_t)
}

// ---------------------------------------------------------------------------
// Stopping rules
// ---------------------------------------------------------------------------

/// A sequential stopping rule fed one LLR value per step.
pub trait StoppingRule {
    /// Consumes one LLR value; returns true if the statistic is at or
    /// above threshold at this step (an alarm instant).
    fn step(&mut self, llr: f64) -> bool;
    /// First alarm time, if any has fired.
    fn alarm_time(&self) -> Option<usize>;
    /// Current statistic value.
    fn statistic(&self) -> f64;
    /// Steps consumed so far.
    fn time(&self) -> usize;
    /// Clears all state for reuse.
    fn reset(&mut self);
}

fn check_threshold(h: f64) -> Result<()> {
    if !h.is_finite() {
        return Err(Error::invalid(format!("threshold must be finite, got {h}")));
    }
    Ok(())
}

/// Finite-moving-average rule: alarm when the sum of the last `w` LLR
/// values reaches `h`, inert for the first `w - 1` observations.
///
/// The window sum is maintained in O(1) with a ring buffer; after the
/// first alarm the detector keeps running so multi-alarm evaluation and
/// trace export stay possible. Call [`StoppingRule::reset`] for
/// production re-arming.
#[derive(Debug, Clone)]
pub struct FmaDetector {
    w: usize,
    h: f64,
    buf: Vec<f64>,
    stat: f64,
    t: usize,
    first_alarm: Option<usize>,
}

impl FmaDetector {
    pub fn new(w: usize, h: f64) -> Result<Self> {
        if w == 0 {
            return Err(Error::invalid("window length must be positive"));
        }
        check_threshold(h)?;
        Ok(FmaDetector { w, h, buf: vec![0.0; w], stat: 0.0, t: 0, first_alarm: None })
    }

    pub fn window(&self) -> usize {
        self.w
    }

    pub fn threshold(&self) -> f64 {
        self.h
    }
}

impl StoppingRule for FmaDetector {
    fn step(&mut self, llr: f64) -> bool {
        let slot = self.t % self.w;
        self.stat += llr - self.buf[slot];
        self.buf[slot] = llr;
        self.t += 1;
        let fired = self.t >= self.w && self.stat >= self.h;
        if fired && self.first_alarm.is_none() {
            self.first_alarm = Some(self.t);
        }
        fired
    }

    fn alarm_time(&self) -> Option<usize> {
        self.first_alarm
    }

    fn statistic(&self) -> f64 {
        self.stat
    }

    fn time(&self) -> usize {
        self.t
    }

    fn reset(&mut self) {
        self.buf.iter_mut().for_each(|v| *v = 0.0);
        self.stat = 0.0;
        self.t = 0;
        self.first_alarm = None;
    }
}

/// CUSUM rule: `W_t = max(0, W_{t-1}) + L_t`, equal to the max over k of
/// the partial sums `sum_{i=k}^t L_i`.
#[derive(Debug, Clone)]
pub struct CusumDetector {
    h: f64,
    stat: f64,
    t: usize,
    first_alarm: Option<usize>,
}

impl CusumDetector {
    pub fn new(h: f64) -> Result<Self> {
        check_threshold(h)?;
        Ok(CusumDetector { h, stat: 0.0, t: 0, first_alarm: None })
    }
}

impl StoppingRule for CusumDetector {
    fn step(&mut self, llr: f64) -> bool {
        self.stat = self.stat.max(0.0) + llr;
        self.t += 1;
        let fired = self.stat >= self.h;
        if fired && self.first_alarm.is_none() {
            self.first_alarm = Some(self.t);
        }
        fired
    }

    fn alarm_time(&self) -> Option<usize> {
        self.first_alarm
    }

    fn statistic(&self) -> f64 {
        self.stat
    }

    fn time(&self) -> usize {
        self.t
    }

    fn reset(&mut self) {
        self.stat = 0.0;
        self.t = 0;
        self.first_alarm = None;
    }
}

/// Shewhart rule: alarm on a single-sample exceedance `L_t >= h`.
/// Identical to an FMA rule with `w = 1`.
#[derive(Debug, Clone)]
pub struct ShewhartDetector {
    h: f64,
    last: f64,
    t: usize,
    first_alarm: Option<usize>,
}

impl ShewhartDetector {
    pub fn new(h: f64) -> Result<Self> {
        check_threshold(h)?;
        Ok(ShewhartDetector { h, last: 0.0, t: 0, first_alarm: None })
    }
}

impl StoppingRule for ShewhartDetector {
    fn step(&mut self, llr: f64) -> bool {
        self.last = llr;
        self.t += 1;
        let fired = llr >= self.h;
        if fired && self.first_alarm.is_none() {
            self.first_alarm = Some(self.t);
        }
        fired
    }

    fn alarm_time(&self) -> Option<usize> {
        self.first_alarm
    }

    fn statistic(&self) -> f64 {
        self.last
    }

    fn time(&self) -> usize {
        self.t
    }

    fn reset(&mut self) {
        self.last = 0.0;
        self.t = 0;
        self.first_alarm = None;
    }
}

// ---------------------------------------------------------------------------
// Statistic moments, threshold, bounds
// ---------------------------------------------------------------------------

/// Per-sample LLR moments under H0: `mu = -1/2 y^T Sigma_p^{-1} y`,
/// `sigma^2 = y^T Sigma_p^{-1} y`, so `sigma^2 = -2 mu` always.
pub fn h0_moments(y: &Vector2<f64>, sigma_p: &Matrix2<f64>) -> Result<(f64, f64)> {
    let chol = sigma_p
        .cholesky()
        .ok_or_else(|| Error::numerical("Sigma_p is singular".to_string()))?;
    let quad = y.dot(&chol.solve(y));
    Ok((-0.5 * quad, quad))
}

/// Output of the H1 mean recursion.
#[derive(Debug, Clone)]
pub struct H1Recursion {
    /// Per-step LLR means under H1.
    pub mu_seq: Vec<f64>,
    /// Mean at convergence (successive difference of `e_t` below 1e-8).
    pub mu_converged: f64,
    /// Observation-error trace `e_t`.
    pub e_trace: Vec<Vector2<f64>>,
    /// Step at which convergence was declared.
    pub converged_at: usize,
}

/// Iterates the post-change observation-error recursion
/// `psi_t = G (psi_{t-1} + K e_{t-1})`, `e_t = y_t - sum_m C psi_t^m`
/// from `psi_0 = 0, e_0 = y_1`, using the converged gains of the H0
/// filter, and returns the per-step LLR means
/// `mu_t = (e_t - y_t/2)^T Sigma_p^{-1} y_t`.
pub fn h1_mean_recursion(
    converged: &ForwardState,
    model: &FldsModel,
    y_at: impl Fn(usize) -> Vector2<f64>,
    max_steps: usize,
) -> Result<H1Recursion> {
    let sigma_p = predictive_cov(converged, model);
    let chol = sigma_p
        .cholesky()
        .ok_or_else(|| Error::numerical("converged Sigma_p is singular".to_string()))?;
    let mut psi = vec![Vector2::<f64>::zeros(); model.num_sources()];
    let mut e_prev = y_at(1);
    let mut mu_seq = Vec::new();
    let mut e_trace = Vec::new();
    let mut converged_at = None;
    for t in 1..=max_steps {
        for (m, params) in model.sources().iter().enumerate() {
            psi[m] = params.g * (psi[m] + converged.chains[m].gain * e_prev);
        }
        let y_t = y_at(t);
        let mut e_t = y_t;
        for (m, params) in model.sources().iter().enumerate() {
            e_t -= params.c * psi[m];
        }
        if e_t.amax() > 1e9 {
            let rho = closed_loop_spectral_radius(converged, model);
            return Err(Error::numerical(format!(
                "H1 recursion diverged at step {t}; closed-loop spectral radius {rho:.4}"
            )));
        }
        let mu_t = (e_t - y_t * 0.5).dot(&chol.solve(&y_t));
        mu_seq.push(mu_t);
        if converged_at.is_none() && (e_t - e_prev).amax() < 1e-8 && t > 1 {
            converged_at = Some(t);
        }
        e_trace.push(e_t);
        e_prev = e_t;
        if converged_at.is_some() {
            break;
        }
    }
    let converged_at = converged_at.ok_or_else(|| {
        Error::numerical(format!(
            "H1 recursion did not converge within {max_steps} steps"
        ))
    })?;
    let mu_converged = *mu_seq.last().unwrap();
    Ok(H1Recursion { mu_seq, mu_converged, e_trace, converged_at })
}

/// Predictive observation covariance implied by a forward state:
/// `sum_m (C Sigmabar C^T + M R)`.
pub fn predictive_cov(state: &ForwardState, model: &FldsModel) -> Matrix2<f64> {
    let mf = model.num_sources() as f64;
    let mut sigma = Matrix2::zeros();
    for (chain, p) in state.chains.iter().zip(model.sources()) {
        sigma += p.c * chain.pred_cov * p.c.transpose() + p.r * mf;
    }
    (sigma + sigma.transpose()) * 0.5
}

/// Spectral radius of the stacked closed-loop matrix
/// `diag(G^m) (I - K_col C_row)` driving the H1 error recursion.
fn closed_loop_spectral_radius(state: &ForwardState, model: &FldsModel) -> f64 {
    use nalgebra::DMatrix;
    let m = model.num_sources();
    let d = 2 * m;
    let mut gk = DMatrix::zeros(d, d);
    let mut kc = DMatrix::identity(d, d);
    for (k, (chain, p)) in state.chains.iter().zip(model.sources()).enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                gk[(2 * k + i, 2 * k + j)] = p.g[(i, j)];
            }
        }
        for i in 0..2 {
            for (l, pl) in model.sources().iter().enumerate() {
                for j in 0..2 {
                    kc[(2 * k + i, 2 * l + j)] -= chain.gain.row(i)
                        .iter()
                        .zip(pl.c.column(j).iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
        }
    }
    let closed = gk * kc;
    closed
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Inputs to the Gaussian threshold/bound formulas.
///
/// `var_h1 = var_h0` by construction (the post-change LLR variance equals
/// the pre-change one); `mu_h0 = -var_h0 / 2` for a constant waveform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    pub mu_h0: f64,
    pub var_h0: f64,
    pub mu_h1: f64,
    pub var_h1: f64,
    pub w: usize,
    pub w_alpha: usize,
    pub alpha_tilde: f64,
}

impl PerfModel {
    pub fn new(
        mu_h0: f64,
        var_h0: f64,
        mu_h1: f64,
        w: usize,
        w_alpha: usize,
        alpha_tilde: f64,
    ) -> Result<Self> {
        if !(var_h0 > 0.0) {
            return Err(Error::invalid(format!("var_h0 must be positive, got {var_h0}")));
        }
        if w == 0 || w_alpha == 0 {
            return Err(Error::invalid("w and w_alpha must be at least 1"));
        }
        if !(alpha_tilde > 0.0 && alpha_tilde < 1.0) {
            return Err(Error::invalid(format!(
                "alpha_tilde must lie strictly inside (0,1), got {alpha_tilde}"
            )));
        }
        Ok(PerfModel { mu_h0, var_h0, mu_h1, var_h1: var_h0, w, w_alpha, alpha_tilde })
    }

    /// Builds the performance model from a converged filter state and a
    /// constant waveform: H0 moments from the converged predictive
    /// covariance, the H1 mean from the error recursion.
    pub fn from_converged(
        converged: &ForwardState,
        model: &FldsModel,
        y: &Vector2<f64>,
        w: usize,
        w_alpha: usize,
        alpha_tilde: f64,
    ) -> Result<Self> {
        let sigma_p = predictive_cov(converged, model);
        let (mu_h0, var_h0) = h0_moments(y, &sigma_p)?;
        let rec = h1_mean_recursion(converged, model, |_| *y, 10_000)?;
        PerfModel::new(mu_h0, var_h0, rec.mu_converged, w, w_alpha, alpha_tilde)
    }
}

/// Closed-form FMA threshold
/// `h = sqrt(w var_h0) * Phi^{-1}[(1 - alpha~)^{1/w_alpha}] + w mu_h0`.
pub fn fma_threshold(perf: &PerfModel) -> Result<f64> {
    let u = (1.0 - perf.alpha_tilde).powf(1.0 / perf.w_alpha as f64);
    let q = std_normal_quantile(u)?;
    Ok((perf.w as f64 * perf.var_h0).sqrt() * q + perf.w as f64 * perf.mu_h0)
}

/// Theorem-style bounds at threshold `h`:
/// false-alarm bound `alpha = 1 - Phi((h - w mu_h0)/sqrt(w var))^{w_alpha}`
/// and missed-detection bound `beta = Phi((h - w mu_h1)/sqrt(w var))`.
pub fn perf_bounds(perf: &PerfModel, h: f64) -> (f64, f64) {
    let wf = perf.w as f64;
    let sd0 = (wf * perf.var_h0).sqrt();
    let sd1 = (wf * perf.var_h1).sqrt();
    let alpha = 1.0 - std_normal_cdf((h - wf * perf.mu_h0) / sd0).powf(perf.w_alpha as f64);
    let beta = std_normal_cdf((h - wf * perf.mu_h1) / sd1);
    (alpha, beta)
}

// ---------------------------------------------------------------------------
// Gaussian background baseline
// ---------------------------------------------------------------------------

/// I.i.d. Gaussian background model fit by maximum likelihood; its LLR
/// uses the same quadratic form with constant `(mu_p, Sigma_p)`.
#[derive(Debug, Clone)]
pub struct GaussianBackground {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl GaussianBackground {
    pub fn fit(series: &ObservationSeries) -> Result<Self> {
        if series.len() < 3 {
            return Err(Error::invalid("need at least 3 samples to fit"));
        }
        let n = series.len() as f64;
        let mean = series.samples.iter().sum::<Vector2<f64>>() / n;
        let mut cov = Matrix2::zeros();
        for p in &series.samples {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        Ok(GaussianBackground { mean, cov })
    }

    pub fn llr(&self, y_t: &Vector2<f64>, p_t: &Vector2<f64>) -> Result<f64> {
        let chol = self
            .cov
            .cholesky()
            .ok_or_else(|| Error::numerical("fitted covariance is singular".to_string()))?;
        let lhs = p_t - self.mean - y_t * 0.5;
        Ok(lhs.dot(&chol.solve(y_t)))
    }
}

// ---------------------------------------------------------------------------
// Detection report
// ---------------------------------------------------------------------------

/// Machine-readable outcome of one detection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detector: String,
    pub w: usize,
    pub h: f64,
    /// First alarm time, if any.
    pub tau: Option<usize>,
    /// Every alarm instant (the detector keeps running after firing).
    pub alarms: Vec<usize>,
    /// `(alpha, beta)` bounds when a performance model applies.
    pub bound_alpha: Option<f64>,
    pub bound_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic_trace: Option<Vec<f64>>,
}

/// Writes `t,llr,W` rows for a statistic trace.
pub fn write_statistic_csv<W: std::io::Write>(
    llr: &[f64],
    stat: &[f64],
    mut out: W,
) -> Result<()> {
    writeln!(out, "t,llr,W")?;
    for (i, (l, s)) in llr.iter().zip(stat).enumerate() {
        writeln!(out, "{},{},{}", i + 1, l, s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fkff::fkff_converge;
    use crate::rng::RngHandle;
    use rand::Rng;

    #[test]
    fn llr_midpoint_and_zero_waveform() {
        let lik = PredictiveLikelihood {
            mean: Vector2::new(0.3, -0.2),
            cov: Matrix2::identity(),
            log_density: 0.0,
        };
        let y = Vector2::new(0.8, 0.4);
        let p = lik.mean + y * 0.5;
        assert!(llr_from_predictive(&lik, &y, &p).unwrap().abs() < 1e-14);
        let p2 = Vector2::new(3.0, -1.0);
        assert_eq!(llr_from_predictive(&lik, &Vector2::zeros(), &p2).unwrap(), 0.0);
    }

    #[test]
    fn llr_hand_quadratic_form() {
        let lik = PredictiveLikelihood {
            mean: Vector2::zeros(),
            cov: Matrix2::identity(),
            log_density: 0.0,
        };
        let y = Vector2::new(1.0, 0.0);
        let p = Vector2::new(1.0, 0.0);
        let llr = llr_from_predictive(&lik, &y, &p).unwrap();
        assert!((llr - 0.5).abs() < 1e-14);
    }

    #[test]
    fn fma_constant_stream() {
        let mut d = FmaDetector::new(5, f64::MAX / 2.0).unwrap();
        for t in 1..=20 {
            d.step(2.0);
            if t >= 5 {
                assert!((d.statistic() - 10.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fma_earliest_alarm_is_w() {
        let mut d = FmaDetector::new(4, 0.0).unwrap();
        for _ in 0..3 {
            assert!(!d.step(1e9));
        }
        assert!(d.step(1e9));
        assert_eq!(d.alarm_time(), Some(4));
    }

    #[test]
    fn fma_matches_brute_force_window_sum() {
        let mut rng = RngHandle::new(5, 0);
        let llrs: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let w = 37;
        let mut d = FmaDetector::new(w, f64::MAX / 2.0).unwrap();
        for (i, &l) in llrs.iter().enumerate() {
            d.step(l);
            let lo = (i + 1).saturating_sub(w);
            let brute: f64 = llrs[lo..=i].iter().sum();
            assert!((d.statistic() - brute).abs() < 1e-9, "at t={}", i + 1);
        }
    }

    #[test]
    fn cusum_never_fires_on_negative_stream() {
        let mut d = CusumDetector::new(0.5).unwrap();
        for _ in 0..1000 {
            assert!(!d.step(-0.3));
            assert!(d.statistic() <= -0.3 + 1e-15);
        }
        assert_eq!(d.alarm_time(), None);
    }

    #[test]
    fn cusum_matches_brute_force_max_form() {
        let mut rng = RngHandle::new(6, 0);
        let llrs: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut d = CusumDetector::new(f64::MAX / 2.0).unwrap();
        for (i, &l) in llrs.iter().enumerate() {
            d.step(l);
            let brute = (0..=i)
                .map(|k| llrs[k..=i].iter().sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(d.statistic(), brute, "exact recursion mismatch at t={}", i + 1);
        }
    }

    #[test]
    fn shewhart_rejects_non_finite_threshold() {
        assert!(ShewhartDetector::new(f64::NEG_INFINITY).is_err());
        assert!(FmaDetector::new(3, f64::NAN).is_err());
        assert!(CusumDetector::new(f64::INFINITY).is_err());
    }

    #[test]
    fn shewhart_equals_fma_with_unit_window() {
        let mut rng = RngHandle::new(7, 0);
        let mut s = ShewhartDetector::new(0.7).unwrap();
        let mut f = FmaDetector::new(1, 0.7).unwrap();
        for _ in 0..5000 {
            let l = rng.gen::<f64>() * 2.0 - 1.0;
            assert_eq!(s.step(l), f.step(l));
        }
        assert_eq!(s.alarm_time(), f.alarm_time());
    }

    #[test]
    fn h0_moment_identities() {
        assert_eq!(h0_moments(&Vector2::zeros(), &Matrix2::identity()).unwrap(), (0.0, 0.0));
        let (mu, var) = h0_moments(&Vector2::new(1.0, 1.0), &Matrix2::identity()).unwrap();
        assert!((mu - (-1.0)).abs() < 1e-14);
        assert!((var - 2.0).abs() < 1e-14);
        let mut rng = RngHandle::new(8, 0);
        for _ in 0..100 {
            let y = Vector2::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0);
            let a = rng.gen::<f64>() + 0.2;
            let b = rng.gen::<f64>() + 0.2;
            let c = rng.gen::<f64>() * 0.1;
            let sigma = Matrix2::new(a, c, c, b);
            let (mu, var) = h0_moments(&y, &sigma).unwrap();
            assert!((var + 2.0 * mu).abs() < 1e-12 * var.abs().max(1.0));
        }
    }

    #[test]
    fn h1_recursion_trivial_cases() {
        // y = 0 -> e = 0, mu = 0
        let model = FldsModel::study_config(1).unwrap();
        let conv = fkff_converge(&model, 10_000, 1e-12).unwrap();
        let rec = h1_mean_recursion(&conv, &model, |_| Vector2::zeros(), 100).unwrap();
        assert!(rec.mu_converged.abs() < 1e-15);
        assert!(rec.e_trace.iter().all(|e| e.amax() == 0.0));
    }

    #[test]
    fn h1_recursion_memoryless_reduction() {
        // G = 0 -> psi = 0, e = y, mu = sigma^2/2.
        use crate::model::LdsParams;
        let p = LdsParams::new(
            Matrix2::zeros(),
            Matrix2::identity(),
            Matrix2::identity() * 0.1,
            Matrix2::identity() * 0.1,
        )
        .unwrap();
        let model = FldsModel::new(vec![p], true).unwrap();
        let conv = fkff_converge(&model, 10_000, 1e-12).unwrap();
        let y = Vector2::new(0.6, -0.2);
        let sigma_p = predictive_cov(&conv, &model);
        let (_, var) = h0_moments(&y, &sigma_p).unwrap();
        let rec = h1_mean_recursion(&conv, &model, |_| y, 100).unwrap();
        assert!((rec.mu_converged - var / 2.0).abs() < 1e-12);
    }

    #[test]
    fn h1_recursion_converges_on_study_model() {
        let model = FldsModel::study_config(4).unwrap();
        let conv = fkff_converge(&model, 20_000, 1e-10).unwrap();
        let y = Vector2::new(0.48, 0.48);
        let rec = h1_mean_recursion(&conv, &model, |_| y, 10_000).unwrap();
        assert!(rec.converged_at < 10_000);
        // plateau: the last few error values are flat
        let n = rec.e_trace.len();
        assert!((rec.e_trace[n - 1] - rec.e_trace[n - 2]).amax() < 1e-8);
    }

    #[test]
    fn threshold_and_bounds_round_trip() {
        let perf = PerfModel::new(-1.0, 2.0, 1.5, 200, 1000, 0.01).unwrap();
        let h = fma_threshold(&perf).unwrap();
        let (alpha, beta) = perf_bounds(&perf, h);
        assert!((alpha - 0.01).abs() < 1e-12);
        assert!(beta > 0.0 && beta < 1.0);
    }

    #[test]
    fn threshold_median_case() {
        // (1 - alpha~)^{1/w_alpha} = 0.5 -> h = w mu_h0.
        let w_alpha = 8usize;
        let alpha_tilde = 1.0 - 0.5f64.powi(w_alpha as i32);
        let perf = PerfModel::new(-0.7, 1.4, 0.9, 50, w_alpha, alpha_tilde).unwrap();
        let h = fma_threshold(&perf).unwrap();
        assert!((h - 50.0 * -0.7).abs() < 1e-10);
    }

    #[test]
    fn threshold_monotone_in_alpha() {
        let mut prev = f64::INFINITY;
        for i in 1..50 {
            let a = i as f64 / 50.0;
            let perf = PerfModel::new(-1.0, 2.0, 1.0, 100, 50, a).unwrap();
            let h = fma_threshold(&perf).unwrap();
            assert!(h < prev);
            prev = h;
        }
    }

    #[test]
    fn bounds_saturate_at_infinite_thresholds() {
        let perf = PerfModel::new(-1.0, 2.0, 1.0, 100, 50, 0.05).unwrap();
        assert_eq!(perf_bounds(&perf, f64::INFINITY), (0.0, 1.0));
        assert_eq!(perf_bounds(&perf, f64::NEG_INFINITY), (1.0, 0.0));
    }

    #[test]
    fn quantile_oracle_cross_check() {
        // h for w=200, w_alpha=1000, alpha~=0.01, var=2, mu=-1 against a
        // bisection quantile oracle on the CDF.
        let perf = PerfModel::new(-1.0, 2.0, 1.0, 200, 1000, 0.01).unwrap();
        let h = fma_threshold(&perf).unwrap();
        let target = (1.0f64 - 0.01).powf(1.0 / 1000.0);
        let (mut lo, mut hi) = (-10.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if std_normal_cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h_oracle = (200.0f64 * 2.0).sqrt() * 0.5 * (lo + hi) + 200.0 * -1.0;
        assert!((h - h_oracle).abs() < 1e-9, "{h} vs {h_oracle}");
    }

    #[test]
    fn gaussian_background_fit_and_llr() {
        let mut rng = RngHandle::new(9, 0);
        let samples: Vec<Vector2<f64>> = (0..20_000)
            .map(|_| {
                Vector2::new(
                    rng.gen::<f64>() + rng.gen::<f64>() - 1.0 + 0.5,
                    rng.gen::<f64>() + rng.gen::<f64>() - 1.0,
                )
            })
            .collect();
        let bg = GaussianBackground::fit(&ObservationSeries::new(samples)).unwrap();
        assert!((bg.mean[0] - 0.5).abs() < 0.02);
        let y = Vector2::new(1.0, 0.0);
        let p = bg.mean + y * 0.5;
        assert!(bg.llr(&y, &p).unwrap().abs() < 1e-12);
    }
}
