//! Conjugate Gibbs updates of the global variables.
//!
//! Transition and sticky probabilities come from Beta posteriors over
//! the path counts. The noise covariances are shared across chains, as
//! in the generative model: the process noise `Q` is drawn from the
//! inverse-Wishart posterior pooled over every chain's active
//! transition pairs (the coefficient-marginalized MNIW form), then each
//! `G^m` from its matrix-normal conditional; the observation noise is
//! drawn from the residual inverse-Wishart over all time steps, then
//! each `C^m` from the residual regression conditional. Only steps
//! where a chain actually evolved under its transition matrix
//! (`s_t = 1`) enter its regression; a chain with no such steps falls
//! back to its conditional prior.

use nalgebra::{Matrix2, Vector2};

use crate::dist::{
    sample_beta, sample_inverse_wishart2, sample_matrix_normal2, MniwPrior,
};
use crate::model::{LdsParams, ObservationSeries};
use crate::rng::RngHandle;
use crate::{Error, Result};

use super::IfldsState;

/// Guard for Beta shapes that the literal count posterior drives to zero.
const SHAPE_EPS: f64 = 1e-6;

fn spectral_radius2(g: &Matrix2<f64>) -> f64 {
    let tr = g.trace();
    let det = g.determinant();
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        ((tr + s) * 0.5).abs().max(((tr - s) * 0.5).abs())
    } else {
        det.abs().sqrt()
    }
}

/// Path statistics for one chain: activity transitions restricted to
/// sticky-active steps, plus the sticky-state counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionCounts {
    pub n00: usize,
    pub n01: usize,
    pub n10: usize,
    pub n11: usize,
    pub n_z0: usize,
    pub n_z1: usize,
}

/// Counts transitions `s_{t-1} -> s_t` over steps with `z_t = 1`
/// (`s_0 = 0` by convention) and tallies the sticky states.
pub fn transition_counts(s: &[bool], z: &[bool]) -> TransitionCounts {
    let mut c = TransitionCounts { n00: 0, n01: 0, n10: 0, n11: 0, n_z0: 0, n_z1: 0 };
    let mut prev = false;
    for (&s_t, &z_t) in s.iter().zip(z) {
        if z_t {
            c.n_z1 += 1;
            match (prev, s_t) {
                (false, false) => c.n00 += 1,
                (false, true) => c.n01 += 1,
                (true, false) => c.n10 += 1,
                (true, true) => c.n11 += 1,
            }
        } else {
            c.n_z0 += 1;
        }
        prev = s_t;
    }
    c
}

/// Regression sufficient statistics for a matrix-normal update over
/// pairs `(psi_t, psibar_t)` with prior column precision `K0`.
#[derive(Debug, Clone)]
pub struct SuffStats {
    /// `psi psi^T + M0 K0 M0^T`
    pub s_pp: Matrix2<f64>,
    /// `psi psibar^T + M0 K0`
    pub s_pb: Matrix2<f64>,
    /// `psibar psibar^T + K0`
    pub s_bb: Matrix2<f64>,
    pub n_pairs: usize,
}

impl SuffStats {
    pub fn from_pairs<'a>(
        pairs: impl Iterator<Item = (&'a Vector2<f64>, &'a Vector2<f64>)>,
        prior: &MniwPrior,
    ) -> Self {
        let mut s_pp = prior.m0 * prior.k0 * prior.m0.transpose();
        let mut s_pb = prior.m0 * prior.k0;
        let mut s_bb = prior.k0;
        let mut n_pairs = 0;
        for (psi, psibar) in pairs {
            s_pp += psi * psi.transpose();
            s_pb += psi * psibar.transpose();
            s_bb += psibar * psibar.transpose();
            n_pairs += 1;
        }
        SuffStats { s_pp, s_pb, s_bb, n_pairs }
    }

    /// Posterior mean of the coefficient matrix, `S_pb S_bb^{-1}`.
    pub fn posterior_mean(&self) -> Result<Matrix2<f64>> {
        let inv = self.s_bb.try_inverse().ok_or_else(|| {
            Error::numerical(
                "S_psibar_psibar is singular; sufficient statistics are inconsistent",
            )
        })?;
        Ok(self.s_pb * inv)
    }

    /// Coefficient-marginalized scale contribution
    /// `S_pp - S_pb S_bb^{-1} S_pb^T` (symmetrized).
    pub fn schur(&self) -> Result<Matrix2<f64>> {
        let mean = self.posterior_mean()?;
        let schur = self.s_pp - mean * self.s_pb.transpose();
        Ok((schur + schur.transpose()) * 0.5)
    }

    /// Draws the coefficient from `MN(S_pb S_bb^{-1}, row_cov, S_bb)`.
    pub fn sample_coefficient(
        &self,
        row_cov: &Matrix2<f64>,
        rng: &mut RngHandle,
    ) -> Result<Matrix2<f64>> {
        let mean = self.posterior_mean()?;
        let col_prec = (self.s_bb + self.s_bb.transpose()) * 0.5;
        sample_matrix_normal2(&mean, row_cov, &col_prec, rng)
    }
}

/// Resamples every chain's global variables from their conditionals and
/// restores the sorted-stick order by relabeling. Chains are scanned in
/// order, so later residual regressions see earlier chains' fresh draws.
pub fn gibbs_globals(
    state: &mut IfldsState,
    observations: &ObservationSeries,
    rng: &mut RngHandle,
) -> Result<()> {
    let m_rep = state.chains.len();
    if m_rep == 0 {
        return Ok(());
    }
    if observations.len() != state.t_len {
        return Err(Error::invalid(format!(
            "observations ({}) do not match state length ({})",
            observations.len(),
            state.t_len
        )));
    }
    let hyper = state.hyper.clone();

    // Beta updates for the transition and sticky probabilities.
    for chain in &mut state.chains {
        let counts = transition_counts(&chain.s, &chain.z);
        let shape_a1 = if counts.n01 == 0 { SHAPE_EPS } else { counts.n01 as f64 };
        chain.a =
            sample_beta(shape_a1, 1.0 + counts.n00 as f64, rng)?.clamp(1e-12, 1.0 - 1e-12);
        chain.b = sample_beta(
            hyper.beta0 + counts.n11 as f64,
            hyper.beta1 + counts.n10 as f64,
            rng,
        )?
        .clamp(1e-12, 1.0 - 1e-12);
        chain.gamma = if hyper.sticky {
            sample_beta(
                hyper.gamma0 + counts.n_z1 as f64,
                hyper.gamma1 + counts.n_z0 as f64,
                rng,
            )?
            .clamp(1e-12, 1.0 - 1e-12)
        } else {
            1.0
        };
    }

    // Shared process noise: IW posterior pooled over the per-chain
    // coefficient-marginalized statistics, then G^m conditionals.
    let mut g_stats: Vec<Option<SuffStats>> = Vec::with_capacity(m_rep);
    let mut scale_q = hyper.mniw.s0;
    let mut pooled_dof = hyper.mniw.n0;
    for chain in &state.chains {
        let pairs: Vec<(&Vector2<f64>, &Vector2<f64>)> = (1..state.t_len)
            .filter(|&t| chain.s[t])
            .map(|t| (&chain.x[t], &chain.x[t - 1]))
            .collect();
        if pairs.is_empty() {
            g_stats.push(None);
        } else {
            let stats = SuffStats::from_pairs(pairs.into_iter(), &hyper.mniw);
            scale_q += stats.schur()?;
            pooled_dof += stats.n_pairs as f64;
            g_stats.push(Some(stats));
        }
    }
    let q_shared = sample_inverse_wishart2(pooled_dof, &scale_q, rng)?;
    let mut new_g = Vec::with_capacity(m_rep);
    for stats in &g_stats {
        let mut g = match stats {
            Some(st) => st.sample_coefficient(&q_shared, rng)?,
            None => sample_matrix_normal2(&hyper.mniw.m0, &q_shared, &hyper.mniw.k0, rng)?,
        };
        // redraw strongly unstable transition draws: they arise only from
        // loosely-constrained chains and compound into latent overflow
        // through the idle random walk within a few sweeps
        for _ in 0..20 {
            if spectral_radius2(&g) < 1.05 {
                break;
            }
            g = match stats {
                Some(st) => st.sample_coefficient(&q_shared, rng)?,
                None => sample_matrix_normal2(&hyper.mniw.m0, &q_shared, &hyper.mniw.k0, rng)?,
            };
        }
        let rho = spectral_radius2(&g);
        if rho >= 1.05 {
            g *= 1.04 / rho;
        }
        new_g.push(g);
    }

    // Shared observation noise from the current residuals, then the
    // output matrices from sequential residual regressions.
    let mut scale_obs = hyper.mniw.s0;
    for (t, p) in observations.samples.iter().enumerate() {
        let mut r = *p;
        for chain in &state.chains {
            if chain.s[t] {
                r -= chain.params.c * chain.x[t];
            }
        }
        scale_obs += r * r.transpose();
    }
    let sigma_obs =
        sample_inverse_wishart2(hyper.mniw.n0 + state.t_len as f64, &scale_obs, rng)?;

    let mut new_c: Vec<Matrix2<f64>> = state.chains.iter().map(|c| c.params.c).collect();
    for m in 0..m_rep {
        let chain = &state.chains[m];
        let mut residuals: Vec<Vector2<f64>> = Vec::new();
        let mut regressors: Vec<Vector2<f64>> = Vec::new();
        for t in 0..state.t_len {
            if !chain.s[t] {
                continue;
            }
            let mut r = observations.samples[t];
            for (n, other) in state.chains.iter().enumerate() {
                if n != m && other.s[t] {
                    r -= new_c[n] * other.x[t];
                }
            }
            residuals.push(r);
            regressors.push(chain.x[t]);
        }
        new_c[m] = if residuals.is_empty() {
            sample_matrix_normal2(&hyper.mniw.m0, &sigma_obs, &hyper.mniw.k0, rng)?
        } else {
            let stats = SuffStats::from_pairs(residuals.iter().zip(regressors.iter()), &hyper.mniw);
            stats.sample_coefficient(&sigma_obs, rng)?
        };
    }

    let r_per_source = sigma_obs / m_rep as f64;
    for (m, chain) in state.chains.iter_mut().enumerate() {
        chain.params = LdsParams::new(new_g[m], new_c[m], q_shared, r_per_source)?;
    }
    state.relabel_sorted();
    Ok(())
}

/// Targeted refit of one chain's `(a, b, gamma, G, C)` from their
/// conditionals with the shared noise covariances held fixed. Used
/// while nucleating fresh chains: it does not relabel, so chain indices
/// stay stable.
pub fn gibbs_refit_chain(
    state: &mut IfldsState,
    idx: usize,
    observations: &ObservationSeries,
    rng: &mut RngHandle,
) -> Result<()> {
    if idx >= state.chains.len() {
        return Err(Error::invalid(format!("chain index {idx} out of range")));
    }
    if observations.len() != state.t_len {
        return Err(Error::invalid("observations do not match state length"));
    }
    let hyper = state.hyper.clone();
    let counts = transition_counts(&state.chains[idx].s, &state.chains[idx].z);
    let shape_a1 = if counts.n01 == 0 { SHAPE_EPS } else { counts.n01 as f64 };
    let a = sample_beta(shape_a1, 1.0 + counts.n00 as f64, rng)?.clamp(1e-12, 1.0 - 1e-12);
    let b = sample_beta(
        hyper.beta0 + counts.n11 as f64,
        hyper.beta1 + counts.n10 as f64,
        rng,
    )?
    .clamp(1e-12, 1.0 - 1e-12);
    let gamma = if hyper.sticky {
        sample_beta(
            hyper.gamma0 + counts.n_z1 as f64,
            hyper.gamma1 + counts.n_z0 as f64,
            rng,
        )?
        .clamp(1e-12, 1.0 - 1e-12)
    } else {
        1.0
    };

    let q_shared = state.chains[idx].params.q;
    let sigma_obs = state.obs_covariance();
    let chain = &state.chains[idx];
    let gq_pairs: Vec<(&Vector2<f64>, &Vector2<f64>)> = (1..state.t_len)
        .filter(|&t| chain.s[t])
        .map(|t| (&chain.x[t], &chain.x[t - 1]))
        .collect();
    let mut g = if gq_pairs.is_empty() {
        sample_matrix_normal2(&hyper.mniw.m0, &q_shared, &hyper.mniw.k0, rng)?
    } else {
        SuffStats::from_pairs(gq_pairs.into_iter(), &hyper.mniw)
            .sample_coefficient(&q_shared, rng)?
    };
    let rho = spectral_radius2(&g);
    if rho >= 1.05 {
        g *= 1.04 / rho;
    }

    let mut residuals: Vec<Vector2<f64>> = Vec::new();
    let mut regressors: Vec<Vector2<f64>> = Vec::new();
    for t in 0..state.t_len {
        if !state.chains[idx].s[t] {
            continue;
        }
        let mut r = observations.samples[t];
        for (n, other) in state.chains.iter().enumerate() {
            if n != idx && other.s[t] {
                r -= other.params.c * other.x[t];
            }
        }
        residuals.push(r);
        regressors.push(state.chains[idx].x[t]);
    }
    let c = if residuals.is_empty() {
        sample_matrix_normal2(&hyper.mniw.m0, &sigma_obs, &hyper.mniw.k0, rng)?
    } else {
        SuffStats::from_pairs(residuals.iter().zip(regressors.iter()), &hyper.mniw)
            .sample_coefficient(&sigma_obs, rng)?
    };

    let chain = &mut state.chains[idx];
    chain.a = a;
    chain.b = b;
    chain.gamma = gamma;
    chain.params = LdsParams::new(g, c, q_shared, chain.params.r)?;
    Ok(())
}
