//! Chain-count resampling via the stick-breaking slice construction.
//!
//! A slice variable truncates the infinite chain collection: new all-idle
//! chains are appended, each with a stick weight drawn from
//!
//! ```text
//! P(a | a_prev) ∝ exp(alpha * sum_{t=1}^{T} (1-a)^t / t)
//!                 * a^{alpha-1} * (1-a)^T,   0 < a < a_prev
//! ```
//!
//! until a draw falls below the slice. The density is not log-concave
//! near zero (the series term is convex), so rejection sampling uses the
//! exact truncated-Beta proposal where available (`alpha = 1`) and
//! otherwise a 10^4-point grid inverse CDF in log space.

use rand::Rng;

use crate::dist::sample_mniw;
use crate::model::LdsParams;
use crate::rng::RngHandle;
use crate::{Error, Result};

use super::{Chain, IfldsState};

const REJECTION_CAP: usize = 10_000;
const GRID_POINTS: usize = 10_000;

/// `sum_{t=1}^{T} x^t / t` with geometric early termination.
fn truncated_log_series(x: f64, t_len: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut term = 1.0;
    let mut sum = 0.0;
    for t in 1..=t_len {
        term *= x;
        let add = term / t as f64;
        sum += add;
        if add < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Harmonic number `H_T = sum_{t=1}^T 1/t`, the supremum of the series.
fn harmonic(t_len: usize) -> f64 {
    truncated_log_series(1.0, t_len)
}

/// Unnormalized log density of a new stick weight.
pub(crate) fn stick_log_density(a: f64, alpha: f64, t_len: usize) -> f64 {
    if a <= 0.0 || a >= 1.0 {
        return f64::NEG_INFINITY;
    }
    alpha * truncated_log_series(1.0 - a, t_len)
        + (alpha - 1.0) * a.ln()
        + t_len as f64 * (1.0 - a).ln()
}

/// Draws a stick weight from the truncated density on `(0, hi)`.
pub(crate) fn sample_stick_posterior(
    alpha: f64,
    t_len: usize,
    hi: f64,
    rng: &mut RngHandle,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if !(hi > 0.0 && hi <= 1.0) {
        return Err(Error::invalid(format!("stick bound must lie in (0, 1], got {hi}")));
    }
    if alpha == 1.0 {
        // Exact proposal: truncated Beta(1, T+1) by inverse transform,
        // accepted against exp(series - H_T) which is bounded by one.
        let h_t = harmonic(t_len);
        let tp1 = (t_len + 1) as f64;
        let f_hi = 1.0 - (1.0 - hi).powf(tp1);
        for _ in 0..REJECTION_CAP {
            let u: f64 = rng.gen();
            let a = 1.0 - (1.0 - u * f_hi).powf(1.0 / tp1);
            if a <= 0.0 || a >= hi {
                continue;
            }
            let log_accept = truncated_log_series(1.0 - a, t_len) - h_t;
            if rng.gen::<f64>().ln() < log_accept {
                return Ok(a);
            }
        }
    }
    grid_inverse_cdf(alpha, t_len, hi, rng)
}

/// Grid inverse-CDF fallback in `u = ln a` coordinates.
fn grid_inverse_cdf(alpha: f64, t_len: usize, hi: f64, rng: &mut RngHandle) -> Result<f64> {
    let u_hi = hi.ln();
    let u_lo = u_hi - 45.0; // covers ~20 decades below the bound
    let n = GRID_POINTS;
    let step = (u_hi - u_lo) / (n - 1) as f64;
    // density of u = ln a is f(a) * a
    let mut logf = Vec::with_capacity(n);
    let mut max_logf = f64::NEG_INFINITY;
    for k in 0..n {
        let u = u_lo + step * k as f64;
        let a = u.exp();
        let lf = stick_log_density(a.min(hi), alpha, t_len) + u;
        logf.push(lf);
        if lf > max_logf {
            max_logf = lf;
        }
    }
    if !max_logf.is_finite() {
        return Err(Error::numerical(format!(
            "stick density vanished on (0, {hi:.3e}) after {REJECTION_CAP} rejection attempts"
        )));
    }
    let mut cum = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut prev = (logf[0] - max_logf).exp();
    cum.push(0.0);
    for k in 1..n {
        let cur = (logf[k] - max_logf).exp();
        total += 0.5 * (prev + cur) * step;
        cum.push(total);
        prev = cur;
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::numerical(
            "stick density mass is degenerate; cannot sample".to_string(),
        ));
    }
    let target = rng.gen::<f64>() * total;
    let idx = cum.partition_point(|&c| c < target).min(n - 1).max(1);
    let (c0, c1) = (cum[idx - 1], cum[idx]);
    let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.5 };
    let u = u_lo + step * ((idx - 1) as f64 + frac);
    Ok(u.exp().min(hi))
}

/// Appends new all-idle chains until a drawn stick falls below the slice
/// variable. Returns the number of chains added.
///
/// With no represented chains at all, the first draw is kept regardless
/// of the slice so the model never goes empty.
pub fn slice_extend_chains(state: &mut IfldsState, rng: &mut RngHandle) -> Result<usize> {
    slice_extend_chains_with(state, None, rng)
}

/// As [`slice_extend_chains`], optionally seeding new chains' output
/// matrices from the current observation residuals so a data-demanded
/// chain can couple within its first sweeps. The seeded value is only an
/// initialization; the Gibbs stage resamples it from its conditional.
pub fn slice_extend_chains_with(
    state: &mut IfldsState,
    observations: Option<&crate::model::ObservationSeries>,
    rng: &mut RngHandle,
) -> Result<usize> {
    let t_len = state.t_len;
    let alpha = state.hyper.alpha;

    let min_active = state
        .chains
        .iter()
        .filter(|c| c.any_active())
        .map(|c| c.a)
        .fold(f64::INFINITY, f64::min);
    let mut boundary = state.chains.last().map_or(1.0, |c| c.a);
    let slice_hi = if min_active.is_finite() { min_active } else { boundary };
    let theta = rng.gen::<f64>() * slice_hi;

    let bootstrap = state.chains.is_empty();
    let mut added = 0;
    loop {
        let a_new = sample_stick_posterior(alpha, t_len, boundary, rng)?;
        let keep = a_new >= theta || (bootstrap && added == 0);
        if !keep {
            break;
        }
        let mut chain = new_idle_chain(state, a_new, rng)?;
        if let Some(obs) = observations {
            chain.params = LdsParams::new(
                chain.params.g,
                residual_seed_output(state, obs),
                chain.params.q,
                chain.params.r,
            )?;
        }
        state.chains.push(chain);
        added += 1;
        boundary = a_new;
        if a_new < theta {
            break; // bootstrap chain accepted below the slice: stop
        }
        if added > 1000 {
            return Err(Error::numerical(
                "slice extension added over 1000 chains; slice variable degenerate".to_string(),
            ));
        }
    }
    if added > 0 {
        rebalance_shared_noise(state)?;
    }
    Ok(added)
}

/// Builds an all-idle chain (`s = 0`, `z = 1`) with coefficients drawn
/// from their conditional priors given the shared noise covariances and
/// a latent path simulated from the idle random walk.
fn new_idle_chain(state: &IfldsState, a: f64, rng: &mut RngHandle) -> Result<Chain> {
    let hyper = &state.hyper;
    let t_len = state.t_len;
    let b = crate::dist::sample_beta(hyper.beta0, hyper.beta1, rng)?.clamp(1e-12, 1.0 - 1e-12);
    let gamma = if hyper.sticky {
        crate::dist::sample_beta(hyper.gamma0, hyper.gamma1, rng)?.clamp(1e-12, 1.0 - 1e-12)
    } else {
        1.0
    };
    let (q, sigma_obs) = match state.chains.first() {
        Some(c) => (c.params.q, state.obs_covariance()),
        None => {
            let (_, q) = sample_mniw(&hyper.mniw, rng)?;
            let (_, s) = sample_mniw(&hyper.mniw, rng)?;
            (q, s)
        }
    };
    let g = crate::dist::sample_matrix_normal2(&hyper.mniw.m0, &q, &hyper.mniw.k0, rng)?;
    let c = crate::dist::sample_matrix_normal2(&hyper.mniw.m0, &sigma_obs, &hyper.mniw.k0, rng)?;
    let m_after = (state.chains.len() + 1) as f64;
    let params = LdsParams::new(g, c, q, sigma_obs / m_after)?;

    let mut x = Vec::with_capacity(t_len);
    let mut cur = crate::dist::sample_gaussian2(&nalgebra::Vector2::zeros(), params.q_sqrt(), rng);
    for _ in 0..t_len {
        x.push(cur);
        cur += crate::dist::sample_gaussian2(&nalgebra::Vector2::zeros(), params.q_sqrt(), rng);
    }
    Ok(Chain {
        a,
        b,
        gamma,
        params,
        s: vec![false; t_len],
        z: vec![true; t_len],
        x,
    })
}

/// Output-matrix seed for a fresh chain: the residual covariance square
/// root scaled to the latent stationary deviation, so an activated unit
/// latent moves the observation along the unexplained directions.
fn residual_seed_output(
    state: &IfldsState,
    observations: &crate::model::ObservationSeries,
) -> nalgebra::Matrix2<f64> {
    let mut cov = nalgebra::Matrix2::zeros();
    for (t, p) in observations.samples.iter().enumerate() {
        let mut r = *p;
        for chain in &state.chains {
            if chain.s[t] {
                r -= chain.params.c * chain.x[t];
            }
        }
        cov += r * r.transpose();
    }
    cov /= observations.len().max(1) as f64;
    let sqrt = crate::dist::psd_project2(&cov).cholesky().map(|c| c.l()).unwrap_or_default();
    // scale by the rough stationary latent deviation under the shared Q
    let q_scale = state
        .chains
        .first()
        .map(|c| c.params.q.trace() / 2.0)
        .unwrap_or(0.01)
        .max(1e-12);
    sqrt / (q_scale * 10.0).sqrt().max(1e-6)
}

/// Re-divides the total observation covariance across the represented
/// chains so the per-source views stay consistent after the chain count
/// changes.
fn rebalance_shared_noise(state: &mut IfldsState) -> Result<()> {
    let m = state.chains.len();
    if m == 0 {
        return Ok(());
    }
    // the freshly appended chains already carry sigma/m_at_append; take
    // the total from the first (pre-existing when any) chain's view
    let total: nalgebra::Matrix2<f64> = state
        .chains
        .iter()
        .map(|c| c.params.r)
        .fold(nalgebra::Matrix2::zeros(), |acc, r| acc + r);
    let share = total / m as f64;
    for chain in &mut state.chains {
        chain.params = LdsParams::new(chain.params.g, chain.params.c, chain.params.q, share)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::Hyper;

    fn hyper() -> Hyper {
        Hyper::study_default_scale(nalgebra::Matrix2::identity(), 1)
    }

    // Brute-force oracle: rejection sampling straight off the density
    // with a uniform proposal over (0, hi) and an empirical envelope.
    fn oracle_sample(alpha: f64, t_len: usize, hi: f64, rng: &mut RngHandle) -> f64 {
        let n = 4000;
        let mut max_logf = f64::NEG_INFINITY;
        for k in 1..n {
            let a = hi * k as f64 / n as f64;
            max_logf = max_logf.max(stick_log_density(a, alpha, t_len));
        }
        loop {
            let a = rng.gen::<f64>() * hi;
            if rng.gen::<f64>().ln() < stick_log_density(a, alpha, t_len) - max_logf {
                return a;
            }
        }
    }

    #[test]
    fn sampler_matches_oracle_distribution() {
        // Two-sample KS between the implementation and the brute-force
        // oracle at alpha = 1, T = 200, hi = 0.4.
        let mut rng = RngHandle::new(31, 0);
        let n = 4000;
        let mut ours: Vec<f64> = (0..n)
            .map(|_| sample_stick_posterior(1.0, 200, 0.4, &mut rng).unwrap())
            .collect();
        let mut oracle: Vec<f64> = (0..n).map(|_| oracle_sample(1.0, 200, 0.4, &mut rng)).collect();
        ours.sort_by(|a, b| a.partial_cmp(b).unwrap());
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // two-sample KS statistic
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        while i < n && j < n {
            if ours[i] <= oracle[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / n as f64 - j as f64 / n as f64).abs());
        }
        // critical value at alpha = 0.001 for two samples of size n
        let crit = (((2.0f64 / 0.001).ln() / 2.0) * (2.0 / n as f64)).sqrt();
        assert!(ks < crit, "two-sample KS {ks} >= {crit}");
    }

    #[test]
    fn grid_fallback_matches_rejection_path() {
        // alpha != 1 forces the grid path; compare its distribution with
        // the oracle on a moderate configuration.
        let mut rng = RngHandle::new(37, 0);
        let n = 3000;
        let mut ours: Vec<f64> = (0..n)
            .map(|_| sample_stick_posterior(1.5, 100, 0.6, &mut rng).unwrap())
            .collect();
        let mut oracle: Vec<f64> =
            (0..n).map(|_| oracle_sample(1.5, 100, 0.6, &mut rng)).collect();
        ours.sort_by(|a, b| a.partial_cmp(b).unwrap());
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        while i < n && j < n {
            if ours[i] <= oracle[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / n as f64 - j as f64 / n as f64).abs());
        }
        let crit = (((2.0f64 / 0.001).ln() / 2.0) * (2.0 / n as f64)).sqrt();
        assert!(ks < crit, "two-sample KS {ks} >= {crit}");
    }

    #[test]
    fn tiny_min_active_adds_few_chains() {
        // With the smallest active stick at 1e-9 the slice sits below it
        // and the truncated density is nearly uniform, so the number of
        // added chains is small. The frequency of "at most one added" is
        // frozen from the brute-force oracle run of the same loop
        // (~0.75; see the oracle_extension_frequency test below).
        let mut rng = RngHandle::new(41, 0);
        let mut at_most_one = 0;
        let runs = 1000;
        for _ in 0..runs {
            let mut state = IfldsState::empty(2000, hyper());
            let mut c = idle_chain_with_a(&state, 1e-9, &mut rng);
            c.s[0] = true; // active chain pinning the slice bound
            state.chains.push(c);
            let added = slice_extend_chains(&mut state, &mut rng).unwrap();
            if added <= 1 {
                at_most_one += 1;
            }
        }
        let freq = at_most_one as f64 / runs as f64;
        assert!((freq - 0.75).abs() < 0.06, "P(<=1 added) = {freq}");
    }

    #[test]
    fn oracle_extension_frequency() {
        // Independent oracle for the test above: simulate the extension
        // loop with the brute-force sampler on the same configuration.
        let mut rng = RngHandle::new(43, 0);
        let runs = 1000;
        let mut at_most_one = 0;
        for _ in 0..runs {
            let theta = rng.gen::<f64>() * 1e-9;
            let mut boundary = 1e-9f64;
            let mut added = 0;
            loop {
                // uniform is exact here: the density is flat at this scale
                let a = rng.gen::<f64>() * boundary;
                if a < theta {
                    break;
                }
                added += 1;
                boundary = a;
                if added > 50 {
                    break;
                }
            }
            if added <= 1 {
                at_most_one += 1;
            }
        }
        let freq = at_most_one as f64 / runs as f64;
        assert!((freq - 0.75).abs() < 0.05, "oracle P(<=1 added) = {freq}");
    }

    #[test]
    fn paper_scale_extension_runs_and_new_chains_idle() {
        let mut rng = RngHandle::new(47, 0);
        let mut state = IfldsState::empty(2000, hyper());
        let mut c = idle_chain_with_a(&state, 0.3, &mut rng);
        c.s.iter_mut().for_each(|s| *s = true);
        state.chains.push(c);
        let added = slice_extend_chains(&mut state, &mut rng).unwrap();
        for chain in &state.chains[1..] {
            assert!(chain.s.iter().all(|&s| !s), "new chains must start idle");
            assert!(chain.z.iter().all(|&z| z));
        }
        // sticks stay sorted descending
        for w in state.chains.windows(2) {
            assert!(w[0].a >= w[1].a);
        }
        assert!(added < 50);
    }

    #[test]
    fn empty_state_bootstraps_one_chain() {
        let mut rng = RngHandle::new(53, 0);
        for _ in 0..50 {
            let mut state = IfldsState::empty(500, hyper());
            let added = slice_extend_chains(&mut state, &mut rng).unwrap();
            assert!(added >= 1);
        }
    }

    fn idle_chain_with_a(state: &IfldsState, a: f64, rng: &mut RngHandle) -> Chain {
        new_idle_chain(state, a, rng).unwrap()
    }
}
