//! The factorial linear dynamical system data model and synthetic data
//! generation.
//!
//! A background made of `M` sources, each a 2-D linear-Gaussian
//! state-space model:
//!
//! ```text
//! x_{t+1}^m = G^m x_t^m + w,   w ~ N(0, Q^m)
//! n_t       = sum_m (C^m x_t^m + v_m),   v_m ~ N(0, R^m)
//! ```
//!
//! with each source drawing its own observation noise, so the total
//! observation noise covariance is `M * R` when `R` is shared. A
//! transient signal of interest is a deterministic waveform added to a
//! window `[arrival, arrival + duration)`.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dist::{psd_sqrt2, sample_gaussian2, SYM_TOL};
use crate::rng::RngHandle;
use crate::{Error, Result};

/// Simulation aborts if any latent coordinate exceeds this magnitude;
/// unstable transition matrices are allowed but not unbounded blow-up.
const SIM_CAP: f64 = 1e12;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One background source's matrix set `(G, C, Q, R)`.
///
/// All matrices are 2x2. `Q` and `R` must be symmetric PSD. A spectral
/// radius of `G` at or above one is permitted (sampler intermediates can
/// be unstable) but flagged by [`LdsParams::is_unstable`].
#[derive(Debug, Clone, PartialEq)]
pub struct LdsParams {
    pub g: Matrix2<f64>,
    pub c: Matrix2<f64>,
    pub q: Matrix2<f64>,
    pub r: Matrix2<f64>,
    q_sqrt: Matrix2<f64>,
    r_sqrt: Matrix2<f64>,
}

impl LdsParams {
    pub fn new(
        g: Matrix2<f64>,
        c: Matrix2<f64>,
        q: Matrix2<f64>,
        r: Matrix2<f64>,
    ) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if (m - m.transpose()).abs().max() > SYM_TOL {
                return Err(Error::invalid(format!("{name} is not symmetric")));
            }
        }
        let q_sqrt = psd_sqrt2(&q).map_err(|e| Error::invalid(format!("Q: {e}")))?;
        let r_sqrt = psd_sqrt2(&r).map_err(|e| Error::invalid(format!("R: {e}")))?;
        Ok(LdsParams { g, c, q, r, q_sqrt, r_sqrt })
    }

    /// The rotation-matrix form `G = eps * Rot(theta)` with the shared
    /// output matrix used throughout the simulation studies.
    pub fn rotation(eps: f64, theta: f64, q: Matrix2<f64>, r: Matrix2<f64>) -> Result<Self> {
        let g = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos()) * eps;
        LdsParams::new(g, default_output_matrix(), q, r)
    }

    /// Spectral radius of `G` (2x2 closed form via eigenvalues).
    pub fn spectral_radius(&self) -> f64 {
        let tr = self.g.trace();
        let det = self.g.determinant();
        let disc = tr * tr - 4.0 * det;
        if disc >= 0.0 {
            let s = disc.sqrt();
            ((tr + s) * 0.5).abs().max(((tr - s) * 0.5).abs())
        } else {
            // complex pair: |lambda| = sqrt(det)
            det.abs().sqrt()
        }
    }

    pub fn is_unstable(&self) -> bool {
        self.spectral_radius() >= 1.0
    }

    pub(crate) fn q_sqrt(&self) -> &Matrix2<f64> {
        &self.q_sqrt
    }

    pub(crate) fn r_sqrt(&self) -> &Matrix2<f64> {
        &self.r_sqrt
    }
}

/// Output matrix shared by all sources in the simulation studies.
pub fn default_output_matrix() -> Matrix2<f64> {
    Matrix2::new(0.25, -1.25, -1.0, -0.50)
}

/// A factorial LDS: one [`LdsParams`] per background source.
#[derive(Debug, Clone)]
pub struct FldsModel {
    sources: Vec<LdsParams>,
    shared_noise: bool,
}

impl FldsModel {
    /// Builds a model from per-source parameters. `shared_noise` asserts
    /// that all sources carry identical `Q` and `R` (validated).
    pub fn new(sources: Vec<LdsParams>, shared_noise: bool) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("a model needs at least one source"));
        }
        if shared_noise {
            let q0 = sources[0].q;
            let r0 = sources[0].r;
            for s in &sources[1..] {
                if s.q != q0 || s.r != r0 {
                    return Err(Error::invalid(
                        "shared_noise set but sources carry different Q or R",
                    ));
                }
            }
        }
        Ok(FldsModel { sources, shared_noise })
    }

    /// The 4-source configuration used by the simulation studies,
    /// truncated to the first `m` sources: `(eps, theta)` pairs
    /// `{(0.95, 0), (0.9, pi/2), (0.85, pi/3), (0.75, pi/6)}` with
    /// `Q = R = 0.01 I`.
    pub fn study_config(m: usize) -> Result<Self> {
        use std::f64::consts::PI;
        if m == 0 || m > 4 {
            return Err(Error::invalid("study config supports 1..=4 sources"));
        }
        let q = Matrix2::identity() * 0.01;
        let r = Matrix2::identity() * 0.01;
        let spec = [(0.95, 0.0), (0.9, PI / 2.0), (0.85, PI / 3.0), (0.75, PI / 6.0)];
        let sources = spec[..m]
            .iter()
            .map(|&(eps, theta)| LdsParams::rotation(eps, theta, q, r))
            .collect::<Result<Vec<_>>>()?;
        FldsModel::new(sources, true)
    }

    pub fn sources(&self) -> &[LdsParams] {
        &self.sources
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn shared_noise(&self) -> bool {
        self.shared_noise
    }
}

// ---------------------------------------------------------------------------
// Observations and the signal of interest
// ---------------------------------------------------------------------------

/// A sequence of 2-vector observations `p_t = [p_I, p_Q]^T`, 1-indexed in
/// all time-domain APIs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub samples: Vec<Vector2<f64>>,
    pub sample_period: Option<f64>,
}

impl ObservationSeries {
    pub fn new(samples: Vec<Vector2<f64>>) -> Self {
        ObservationSeries { samples, sample_period: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared magnitude `1/T sum |p_t|^2`.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|p| p.norm_squared()).sum::<f64>() / self.samples.len() as f64
    }
}

/// Deterministic transient waveform description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Waveform {
    /// Constant 2-vector amplitude over the whole window.
    Constant([f64; 2]),
    /// Explicit per-sample values; length must equal the SOI duration.
    Samples(Vec<[f64; 2]>),
}

impl Waveform {
    /// Value at 0-based offset into the SOI window.
    pub fn value_at(&self, offset: usize) -> Vector2<f64> {
        match self {
            Waveform::Constant(a) => Vector2::new(a[0], a[1]),
            Waveform::Samples(v) => {
                let s = v[offset.min(v.len().saturating_sub(1))];
                Vector2::new(s[0], s[1])
            }
        }
    }
}

/// Signal of interest: arrival index (1-based), duration in samples and
/// the waveform added while present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoiProfile {
    pub arrival: usize,
    pub duration: usize,
    pub waveform: Waveform,
}

impl SoiProfile {
    pub fn new(arrival: usize, duration: usize, waveform: Waveform) -> Result<Self> {
        if arrival < 1 {
            return Err(Error::invalid("SOI arrival index is 1-based and must be >= 1"));
        }
        if duration < 1 {
            return Err(Error::invalid("SOI duration must be >= 1"));
        }
        if let Waveform::Samples(v) = &waveform {
            if v.len() != duration {
                return Err(Error::invalid(format!(
                    "waveform has {} samples but duration is {duration}",
                    v.len()
                )));
            }
            if v.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::invalid("waveform contains non-finite values"));
            }
        }
        Ok(SoiProfile { arrival, duration, waveform })
    }

    pub fn constant(arrival: usize, duration: usize, amplitude: [f64; 2]) -> Result<Self> {
        SoiProfile::new(arrival, duration, Waveform::Constant(amplitude))
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// How the latent states are initialized at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `x_1^m ~ N(0, Q)` (the generative model's own rule; default).
    Random,
    /// All sources start at a fixed point (the simulation studies use
    /// the origin).
    Fixed([f64; 2]),
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Random
    }
}

/// Simulates one source's latent path and observation contribution.
///
/// Consumes: the initial draw (when random), then per step one `v` draw
/// followed by one `w` draw, all from `rng`. [`simulate_flds`] feeds each
/// source `rng.child(m)`, so an M-source simulation is the elementwise
/// sum of M single-source runs over the same child streams.
pub fn simulate_single_source(
    params: &LdsParams,
    length: usize,
    init: InitialState,
    rng: &mut RngHandle,
) -> Result<(Vec<Vector2<f64>>, Vec<Vector2<f64>>)> {
    if length == 0 {
        return Err(Error::invalid("simulation length must be positive"));
    }
    let mut x = match init {
        InitialState::Random => sample_gaussian2(&Vector2::zeros(), params.q_sqrt(), rng),
        InitialState::Fixed(v) => Vector2::new(v[0], v[1]),
    };
    let mut contrib = Vec::with_capacity(length);
    let mut latents = Vec::with_capacity(length);
    for t in 0..length {
        latents.push(x);
        let v = sample_gaussian2(&Vector2::zeros(), params.r_sqrt(), rng);
        contrib.push(params.c * x + v);
        if t + 1 < length {
            let w = sample_gaussian2(&Vector2::zeros(), params.q_sqrt(), rng);
            x = params.g * x + w;
            if x.amax() > SIM_CAP {
                return Err(Error::numerical(format!(
                    "latent state exceeded {SIM_CAP:e} at step {} (spectral radius {:.3})",
                    t + 2,
                    params.spectral_radius()
                )));
            }
        }
    }
    Ok((contrib, latents))
}

/// Simulates the complicated background signal: per-source latent paths
/// plus the summed observation with one `v` draw per source per step.
pub fn simulate_flds(
    model: &FldsModel,
    length: usize,
    init: InitialState,
    rng: &mut RngHandle,
) -> Result<(ObservationSeries, Vec<Vec<Vector2<f64>>>)> {
    if length == 0 {
        return Err(Error::invalid("simulation length must be positive"));
    }
    let mut sum = vec![Vector2::zeros(); length];
    let mut latents = Vec::with_capacity(model.num_sources());
    for (m, params) in model.sources().iter().enumerate() {
        let mut source_rng = rng.child(m as u64);
        let (contrib, x) = simulate_single_source(params, length, init, &mut source_rng)?;
        for (acc, c) in sum.iter_mut().zip(&contrib) {
            *acc += c;
        }
        latents.push(x);
    }
    Ok((ObservationSeries::new(sum), latents))
}

/// Adds the SOI waveform to `[arrival, arrival + duration)`; the input
/// series is not mutated.
pub fn inject_soi(series: &ObservationSeries, soi: &SoiProfile) -> Result<ObservationSeries> {
    if soi.arrival + soi.duration > series.len() + 1 {
        return Err(Error::invalid(format!(
            "SOI window [{}, {}) exceeds series length {}",
            soi.arrival,
            soi.arrival + soi.duration,
            series.len()
        )));
    }
    let mut out = series.clone();
    for offset in 0..soi.duration {
        out.samples[soi.arrival - 1 + offset] += soi.waveform.value_at(offset);
    }
    Ok(out)
}

/// Sticky-controlled transition probability for the binary activity
/// chain: the transition-matrix entry when the sticky variable is one,
/// the identity-matrix entry (forced persistence) when it is zero.
///
/// `a = P(s_t = 1 | s_{t-1} = 0)`, `b = P(s_t = 1 | s_{t-1} = 1)`.
pub fn sticky_transition_prob(a: f64, b: f64, z: bool, from: bool, to: bool) -> f64 {
    if !z {
        return if from == to { 1.0 } else { 0.0 };
    }
    match (from, to) {
        (false, true) => a,
        (false, false) => 1.0 - a,
        (true, true) => b,
        (true, false) => 1.0 - b,
    }
}

/// Transition probability with the sticky variable marginalized out:
/// `gamma * A[from, to] + (1 - gamma) * I[from, to]`.
pub fn marginal_transition_prob(a: f64, b: f64, gamma: f64, from: bool, to: bool) -> f64 {
    gamma * sticky_transition_prob(a, b, true, from, to)
        + (1.0 - gamma) * sticky_transition_prob(a, b, false, from, to)
}
