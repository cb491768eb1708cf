//! MCMC parameter learning for the infinite factorial LDS.
//!
//! Three iterative stages per sweep: slice sampling of the chain count
//! ([`slice`]), particle Gibbs with ancestor sampling for the local
//! variables `(X, S, Z)` ([`pgas`]), and conjugate Gibbs updates of the
//! globals `(a, b, gamma, G, Q, C, R)` ([`gibbs`]). All-idle chains are
//! pruned at the end of every iteration and the stick order restored by
//! relabeling.
//!
//! [`em`] holds the single-LDS expectation-maximization baseline used by
//! the benchmark comparisons.

pub mod em;
pub mod gibbs;
pub mod pgas;
pub mod slice;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dist::{sample_mniw, MniwPrior};
use crate::model::{
    marginal_transition_prob, sticky_transition_prob, FldsModel, LdsParams, ObservationSeries,
};
use crate::rng::RngHandle;
use crate::{Error, Result};

pub use gibbs::{gibbs_globals, transition_counts, SuffStats, TransitionCounts};
pub use pgas::{pgas_sweep, pgas_sweep_chain};
pub use slice::slice_extend_chains;

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// Model hyper-parameters: stick-breaking concentration, Beta priors for
/// the transition and sticky probabilities, and the shared MNIW prior
/// for both the latent transition pair `(G, Q)` and the output pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyper {
    pub alpha: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub mniw: MniwPrior,
    /// With sticky control off the persistence variables are pinned to
    /// one, which reduces the prior to the plain (non-sticky) MIBP.
    pub sticky: bool,
    /// Chains instantiated (all active) at the start of a run.
    pub init_chains: usize,
}

impl Hyper {
    /// The simulation-study defaults
    /// (`alpha = 1, beta = (2, 0.1), gamma = (10, 1), M0 = 0, K0 = I,
    /// n0 = 4, S0 = 0.75 * Sbar`) with `Sbar` the observed covariance of
    /// the training series split across `m_hint` sources.
    pub fn study_default(observations: &ObservationSeries, m_hint: usize) -> Self {
        let n = observations.len().max(1) as f64;
        let mean = observations.samples.iter().sum::<Vector2<f64>>() / n;
        let mut cov = Matrix2::zeros();
        for p in &observations.samples {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n * m_hint.max(1) as f64;
        Self::study_default_scale(cov, m_hint)
    }

    /// Same as [`Hyper::study_default`] with an explicit covariance scale.
    pub fn study_default_scale(sbar: Matrix2<f64>, _m_hint: usize) -> Self {
        let s0 = sbar * 0.75 + Matrix2::identity() * 1e-6;
        Hyper {
            alpha: 1.0,
            beta0: 2.0,
            beta1: 0.1,
            gamma0: 10.0,
            gamma1: 1.0,
            mniw: MniwPrior::new(Matrix2::zeros(), Matrix2::identity(), 4.0, s0)
                .expect("default MNIW prior is valid"),
            sticky: true,
            init_chains: 1,
        }
    }
}

/// One represented chain: stick weight, transition/sticky probabilities,
/// LDS parameters and the local trajectories.
///
/// `params.r` stores the chain's view of the observation noise divided
/// by the represented chain count, so the model-level total matches the
/// `M * R` observation covariance convention.
#[derive(Debug, Clone)]
pub struct Chain {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub params: LdsParams,
    pub s: Vec<bool>,
    pub z: Vec<bool>,
    pub x: Vec<Vector2<f64>>,
}

impl Chain {
    pub fn any_active(&self) -> bool {
        self.s.iter().any(|&s| s)
    }

    pub fn active_steps(&self) -> usize {
        self.s.iter().filter(|&&s| s).count()
    }
}

/// Full MCMC state.
#[derive(Debug, Clone)]
pub struct IfldsState {
    pub t_len: usize,
    pub chains: Vec<Chain>,
    pub hyper: Hyper,
}

impl IfldsState {
    /// A state with no represented chains (the slice stage bootstraps).
    pub fn empty(t_len: usize, hyper: Hyper) -> Self {
        IfldsState { t_len, chains: Vec::new(), hyper }
    }

    /// A prior draw with a single always-active chain, used to seed the
    /// first sweep's reference trajectory.
    pub fn init_prior(t_len: usize, hyper: Hyper, rng: &mut RngHandle) -> Result<Self> {
        Self::init_prior_chains(t_len, hyper, 1, rng)
    }

    /// A prior draw with `m_init` always-active chains whose sticks
    /// follow the stick-breaking prior ordering. The noise covariances
    /// are drawn once and shared by every chain, matching the model.
    pub fn init_prior_chains(
        t_len: usize,
        hyper: Hyper,
        m_init: usize,
        rng: &mut RngHandle,
    ) -> Result<Self> {
        if t_len == 0 {
            return Err(Error::invalid("training series must be non-empty"));
        }
        if m_init == 0 {
            return Err(Error::invalid("need at least one initial chain"));
        }
        let q_shared = crate::dist::sample_inverse_wishart2(hyper.mniw.n0, &hyper.mniw.s0, rng)?;
        let sigma_obs = crate::dist::sample_inverse_wishart2(hyper.mniw.n0, &hyper.mniw.s0, rng)?;
        let mut chains = Vec::with_capacity(m_init);
        let mut stick = 1.0;
        for _ in 0..m_init {
            stick *= crate::dist::sample_beta(hyper.alpha, 1.0, rng)?.clamp(1e-12, 1.0 - 1e-12);
            let b = crate::dist::sample_beta(hyper.beta0, hyper.beta1, rng)?
                .clamp(1e-12, 1.0 - 1e-12);
            let gamma = if hyper.sticky {
                crate::dist::sample_beta(hyper.gamma0, hyper.gamma1, rng)?
                    .clamp(1e-12, 1.0 - 1e-12)
            } else {
                1.0
            };
            let g = crate::dist::sample_matrix_normal2(
                &hyper.mniw.m0,
                &q_shared,
                &hyper.mniw.k0,
                rng,
            )?;
            let c = crate::dist::sample_matrix_normal2(
                &hyper.mniw.m0,
                &sigma_obs,
                &hyper.mniw.k0,
                rng,
            )?;
            let params = LdsParams::new(g, c, q_shared, sigma_obs / m_init as f64)?;
            let mut x = Vec::with_capacity(t_len);
            let mut cur = crate::dist::sample_gaussian2(&Vector2::zeros(), params.q_sqrt(), rng);
            for t in 0..t_len {
                x.push(cur);
                if t + 1 < t_len {
                    cur = params.g * cur
                        + crate::dist::sample_gaussian2(&Vector2::zeros(), params.q_sqrt(), rng);
                }
            }
            chains.push(Chain {
                a: stick,
                b,
                gamma,
                params,
                s: vec![true; t_len],
                z: vec![true; t_len],
                x,
            });
        }
        Ok(IfldsState { t_len, chains, hyper })
    }

    /// Chains with at least one active step.
    pub fn active_count(&self) -> usize {
        self.chains.iter().filter(|c| c.any_active()).count()
    }

    /// Drops all-idle chains (run after the global update).
    pub fn prune_idle(&mut self) {
        self.chains.retain(|c| c.any_active());
    }

    /// Restores the sorted-stick invariant `a^(1) > a^(2) > ...`.
    pub fn relabel_sorted(&mut self) {
        self.chains
            .sort_by(|l, r| r.a.partial_cmp(&l.a).unwrap_or(std::cmp::Ordering::Equal));
    }

    /// Total observation covariance used by the learner: the sum of the
    /// per-chain `R` views, i.e. `M * mean(R)`.
    pub fn obs_covariance(&self) -> Matrix2<f64> {
        if self.chains.is_empty() {
            return Matrix2::identity();
        }
        let mut r = Matrix2::zeros();
        for c in &self.chains {
            r += c.params.r;
        }
        r
    }

    /// Exports the represented chains as a factorial LDS model.
    pub fn to_flds_model(&self) -> Result<FldsModel> {
        FldsModel::new(self.chains.iter().map(|c| c.params.clone()).collect(), false)
    }

    /// Complete-data joint log-likelihood: activity transitions, sticky
    /// draws, latent transitions and the observation terms. Pure prior
    /// factors over the globals are omitted (the point estimate only
    /// needs a consistent ranking across iterations).
    pub fn joint_log_likelihood(&self, observations: &ObservationSeries) -> Result<f64> {
        if observations.len() != self.t_len {
            return Err(Error::invalid(format!(
                "observations ({}) do not match state length ({})",
                observations.len(),
                self.t_len
            )));
        }
        if self.chains.is_empty() {
            return Err(Error::invalid("state has no chains"));
        }
        let sigma_obs = self.obs_covariance();
        let mut total = 0.0;
        for chain in &self.chains {
            let mut prev = false;
            for t in 0..self.t_len {
                let (s_t, z_t) = (chain.s[t], chain.z[t]);
                let p_s = sticky_transition_prob(chain.a, chain.b, z_t, prev, s_t);
                if p_s <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                total += p_s.ln();
                if self.hyper.sticky {
                    total += if z_t { chain.gamma.ln() } else { (1.0 - chain.gamma).ln() };
                }
                let mean = if t == 0 {
                    Vector2::zeros()
                } else if s_t {
                    chain.params.g * chain.x[t - 1]
                } else {
                    chain.x[t - 1]
                };
                total += crate::fkff::log_gaussian2(&chain.x[t], &mean, &chain.params.q)?;
                prev = s_t;
            }
        }
        for (t, p) in observations.samples.iter().enumerate() {
            let mut mean = Vector2::zeros();
            for chain in &self.chains {
                if chain.s[t] {
                    mean += chain.params.c * chain.x[t];
                }
            }
            total += crate::fkff::log_gaussian2(p, &mean, &sigma_obs)?;
        }
        Ok(total)
    }

    pub(crate) fn marginal_transition(&self, chain: &Chain, from: bool, to: bool) -> f64 {
        if self.hyper.sticky {
            marginal_transition_prob(chain.a, chain.b, chain.gamma, from, to)
        } else {
            sticky_transition_prob(chain.a, chain.b, true, from, to)
        }
    }
}

// ---------------------------------------------------------------------------
// Learning loop
// ---------------------------------------------------------------------------

/// One trace checkpoint row: enough to analyze a run offline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub m_active: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Per chain: G, C, Q, R flattened row-major, 16 values each.
    pub params_flat: Vec<Vec<f64>>,
    pub joint_log_likelihood: f64,
}

impl TraceRow {
    fn from_state(iteration: usize, state: &IfldsState, loglik: f64) -> Self {
        let flat = |m: &Matrix2<f64>| vec![m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]];
        TraceRow {
            iteration,
            m_active: state.active_count(),
            a: state.chains.iter().map(|c| c.a).collect(),
            b: state.chains.iter().map(|c| c.b).collect(),
            gamma: state.chains.iter().map(|c| c.gamma).collect(),
            params_flat: state
                .chains
                .iter()
                .map(|c| {
                    let mut v = flat(&c.params.g);
                    v.extend(flat(&c.params.c));
                    v.extend(flat(&c.params.q));
                    v.extend(flat(&c.params.r));
                    v
                })
                .collect(),
            joint_log_likelihood: loglik,
        }
    }
}

/// Outcome of a learning run: the iteration trace, the point-estimate
/// state (maximum joint log-likelihood iterate) and the chain-count
/// estimate (mode of active counts over the second half of the trace).
#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub trace: Vec<TraceRow>,
    pub point_estimate: IfldsState,
    pub m_hat: usize,
}

/// Independent slice-extension attempts per iteration. Fresh sticks sit
/// at the `1/T` scale, so any single slice draw rarely represents a new
/// chain; repeated draws of the auxiliary variable are valid kernel
/// applications and give the sampler a workable birth rate.
const GROWTH_ATTEMPTS: usize = 12;
/// Single-chain conditional-SMC sweeps granted to a freshly represented
/// chain so it can couple to unmodeled structure before pruning.
const NUCLEATION_SWEEPS: usize = 10;

/// Runs `iterations` sweeps of slice extension, PGAS and global Gibbs.
pub fn learn(
    observations: &ObservationSeries,
    hyper: &Hyper,
    iterations: usize,
    particles: usize,
    rng: &mut RngHandle,
) -> Result<LearnOutcome> {
    if iterations == 0 {
        return Err(Error::invalid("need at least one iteration"));
    }
    if particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let mut state = IfldsState::init_prior_chains(
        observations.len(),
        hyper.clone(),
        hyper.init_chains.max(1),
        rng,
    )?;
    let mut trace = Vec::with_capacity(iterations);
    let mut best: Option<(f64, IfldsState)> = None;
    for iteration in 0..iterations {
        for _ in 0..GROWTH_ATTEMPTS {
            let added = slice_extend_chains(&mut state, rng)?;
            if added > 0 {
                // let the new chains try to couple, refitting their
                // coefficients as the activity grows; drop idle ones
                let first_new = state.chains.len() - added;
                let nucleation_particles = particles.max(50);
                for round in 0..NUCLEATION_SWEEPS {
                    for idx in first_new..state.chains.len() {
                        pgas_sweep_chain(
                            &mut state,
                            idx,
                            observations,
                            nucleation_particles,
                            rng,
                        )?;
                    }
                    let any = state.chains[first_new..].iter().any(|c| c.any_active());
                    if any {
                        for idx in first_new..state.chains.len() {
                            gibbs::gibbs_refit_chain(&mut state, idx, observations, rng)?;
                        }
                    } else if round >= 2 {
                        break;
                    }
                }
                state.prune_idle();
            }
        }
        pgas_sweep(&mut state, observations, particles, rng)?;
        // inner refinement cycles: per-chain conditional refreshes and
        // global draws co-adapt latents and parameters much faster than
        // one joint sweep per iteration
        for _ in 0..2 {
            for idx in 0..state.chains.len() {
                pgas_sweep_chain(&mut state, idx, observations, particles, rng)?;
            }
            gibbs_globals(&mut state, observations, rng)?;
        }
        state.prune_idle();
        let loglik = if state.chains.is_empty() {
            f64::NEG_INFINITY
        } else {
            state.joint_log_likelihood(observations)?
        };
        trace.push(TraceRow::from_state(iteration, &state, loglik));
        if best.as_ref().map_or(true, |(b, _)| loglik > *b) {
            best = Some((loglik, state.clone()));
        }
    }
    let half = trace.len() / 2;
    let counts: Vec<usize> = trace[half..].iter().map(|r| r.m_active).collect();
    let m_hat = crate::stats::mode(&counts).unwrap_or(0);
    let (_, point_estimate) = best.expect("at least one iteration ran");
    Ok(LearnOutcome { trace, point_estimate, m_hat })
}

/// Mean squared reconstruction error
/// `1/T sum |p_t - sum_m s_t^m C^m x_t^m|^2` under the given state.
pub fn reconstruction_error(observations: &ObservationSeries, state: &IfldsState) -> Result<f64> {
    if observations.len() != state.t_len {
        return Err(Error::invalid(format!(
            "observations ({}) do not match state length ({})",
            observations.len(),
            state.t_len
        )));
    }
    let mut total = 0.0;
    for (t, p) in observations.samples.iter().enumerate() {
        let mut recon = Vector2::zeros();
        for chain in &state.chains {
            if chain.s[t] {
                recon += chain.params.c * chain.x[t];
            }
        }
        total += (p - recon).norm_squared();
    }
    Ok(total / observations.len() as f64)
}

/// Serializes a trace as a JSON checkpoint.
pub fn write_trace_json<W: std::io::Write>(trace: &[TraceRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, trace)
        .map_err(|e| Error::Parse(format!("trace serialization: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_flds, InitialState};

    #[test]
    fn reconstruction_error_trivial_cases() {
        // state that reproduces the observations exactly: C = I, x = p
        let obs = ObservationSeries::new(vec![
            Vector2::new(1.0, 2.0),
            Vector2::new(-0.5, 0.25),
            Vector2::new(0.0, 0.0),
        ]);
        let hyper = Hyper::study_default(&obs, 1);
        let params = LdsParams::new(
            Matrix2::identity(),
            Matrix2::identity(),
            Matrix2::identity() * 0.01,
            Matrix2::identity() * 0.01,
        )
        .unwrap();
        let chain = Chain {
            a: 0.5,
            b: 0.5,
            gamma: 0.9,
            params,
            s: vec![true; 3],
            z: vec![true; 3],
            x: obs.samples.clone(),
        };
        let state = IfldsState { t_len: 3, chains: vec![chain], hyper };
        assert_eq!(reconstruction_error(&obs, &state).unwrap(), 0.0);

        // constant offset [1, 0] gives unit mean squared error
        let shifted = ObservationSeries::new(
            obs.samples.iter().map(|p| p + Vector2::new(1.0, 0.0)).collect(),
        );
        assert!((reconstruction_error(&shifted, &state).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn trace_length_equals_iterations() {
        let model = FldsModel::study_config(1).unwrap();
        let mut rng = RngHandle::new(2, 0);
        let (obs, _) = simulate_flds(&model, 120, InitialState::Random, &mut rng).unwrap();
        let hyper = Hyper::study_default(&obs, 1);
        let out = learn(&obs, &hyper, 5, 10, &mut rng).unwrap();
        assert_eq!(out.trace.len(), 5);
    }

    #[test]
    fn learn_rejects_degenerate_args() {
        let obs = ObservationSeries::new(vec![Vector2::zeros(); 10]);
        let hyper = Hyper::study_default(&obs, 1);
        let mut rng = RngHandle::new(0, 0);
        assert!(learn(&obs, &hyper, 0, 10, &mut rng).is_err());
        assert!(learn(&obs, &hyper, 1, 0, &mut rng).is_err());
    }

    #[test]
    fn joint_loglik_finite_on_prior_draw() {
        let model = FldsModel::study_config(1).unwrap();
        let mut rng = RngHandle::new(3, 0);
        let (obs, _) = simulate_flds(&model, 50, InitialState::Random, &mut rng).unwrap();
        let hyper = Hyper::study_default(&obs, 1);
        let state = IfldsState::init_prior(50, hyper, &mut rng).unwrap();
        let ll = state.joint_log_likelihood(&obs).unwrap();
        assert!(ll.is_finite());
    }
}
