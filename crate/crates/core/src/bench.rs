//! Desk-scale reproduction of the simulation studies.
//!
//! Three experiment families:
//!
//! - representation/parameter learning ([`run_rpl_experiment`]): chain
//!   count recovery and reconstruction error, sticky prior on vs off;
//! - transient detection ([`run_tsd_experiment`]): Monte Carlo missed
//!   detection and false alarm probabilities over an SOI amplitude grid
//!   with theoretical bounds attached for the factorial detector;
//! - window study ([`run_window_study`]): the same detection pipeline
//!   across window lengths plus empirical/theoretical statistic
//!   densities; and the communications-interference scenario
//!   ([`run_comm_experiment`]).
//!
//! Trials are parallelized with one RNG stream per trial, so reruns with
//! the same spec and seed are byte-identical.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{
    fma_threshold, perf_bounds, GaussianBackground, PerfModel,
};
use crate::fkff::{fkff_converge, fkff_init, fkff_step};
use crate::learn::{em::em_fit_lds, learn, reconstruction_error, Hyper};
use crate::model::{
    inject_soi, simulate_flds, FldsModel, InitialState, LdsParams, ObservationSeries, SoiProfile,
};
use crate::rng::RngHandle;
use crate::scenario::{simulate_comm_scenario, CommScenarioConfig};
use crate::stats::binomial_se;
use crate::{Error, Result};

pub const SPEC_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Spec file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    FldsSynthetic,
    CommInterference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    FldsFma,
    LdsFma,
    GaussianFma,
    FldsCusum,
    FldsShewhart,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::FldsFma => "flds-fma",
            DetectorKind::LdsFma => "lds-fma",
            DetectorKind::GaussianFma => "gaussian-fma",
            DetectorKind::FldsCusum => "flds-cusum",
            DetectorKind::FldsShewhart => "flds-shewhart",
        }
    }

    fn effective_window(&self, w: usize) -> usize {
        match self {
            DetectorKind::FldsShewhart => 1,
            _ => w,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelConfig {
    /// Truncation of the built-in 4-source study configuration.
    Study { study_sources: usize },
    Explicit {
        sources: Vec<SourceConfig>,
        #[serde(default = "default_noise_scale")]
        q_scale: f64,
        #[serde(default = "default_noise_scale")]
        r_scale: f64,
    },
}

fn default_noise_scale() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceConfig {
    pub eps: f64,
    pub theta: f64,
}

impl ModelConfig {
    pub fn to_model(&self) -> Result<FldsModel> {
        match self {
            ModelConfig::Study { study_sources } => FldsModel::study_config(*study_sources),
            ModelConfig::Explicit { sources, q_scale, r_scale } => {
                let q = nalgebra::Matrix2::identity() * *q_scale;
                let r = nalgebra::Matrix2::identity() * *r_scale;
                let params = sources
                    .iter()
                    .map(|s| LdsParams::rotation(s.eps, s.theta, q, r))
                    .collect::<Result<Vec<_>>>()?;
                FldsModel::new(params, true)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoiGridConfig {
    #[serde(default = "default_amplitudes")]
    pub amplitudes: Vec<f64>,
    /// Unit direction of the constant waveform; amplitude multiplies it.
    #[serde(default = "default_direction")]
    pub direction: [f64; 2],
}

fn default_amplitudes() -> Vec<f64> {
    vec![0.48]
}

fn default_direction() -> [f64; 2] {
    [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2]
}

impl Default for SoiGridConfig {
    fn default() -> Self {
        SoiGridConfig { amplitudes: default_amplitudes(), direction: default_direction() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcConfig {
    #[serde(default = "default_mcmc_iterations")]
    pub iterations: usize,
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// True source counts exercised by the RPL experiment.
    #[serde(default = "default_m_values")]
    pub m_values: Vec<usize>,
    /// Also run with the sticky control disabled on paired data.
    #[serde(default = "default_true")]
    pub sticky_compare: bool,
    #[serde(default = "default_m_hint")]
    pub m_hint: usize,
}

fn default_mcmc_iterations() -> usize {
    300
}
fn default_particles() -> usize {
    30
}
fn default_m_values() -> Vec<usize> {
    vec![2]
}
fn default_true() -> bool {
    true
}
fn default_m_hint() -> usize {
    1
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: default_mcmc_iterations(),
            particles: default_particles(),
            m_values: default_m_values(),
            sticky_compare: default_true(),
            m_hint: default_m_hint(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub spec_version: u32,
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub soi: SoiGridConfig,
    #[serde(default = "default_w")]
    pub w: usize,
    #[serde(default = "default_w_alpha")]
    pub w_alpha: usize,
    #[serde(default = "default_alpha_tilde")]
    pub alpha_tilde: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<DetectorKind>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Training series length for the learners.
    #[serde(default = "default_t_bar")]
    pub t_bar: usize,
    /// SOI arrival index for missed-detection trials.
    #[serde(default = "default_nu")]
    pub nu: usize,
    /// Window lengths for the window study.
    #[serde(default)]
    pub ws: Option<Vec<usize>>,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default = "default_em_iterations")]
    pub em_iterations: usize,
    /// When set, every detector (including flds-fma) is swept to this
    /// empirical false-alarm target; otherwise flds-fma uses the
    /// closed-form threshold and the baselines sweep to `alpha_tilde`.
    #[serde(default)]
    pub target_pfa: Option<f64>,
    #[serde(default)]
    pub comm: Option<CommScenarioConfig>,
}

fn default_w() -> usize {
    200
}
fn default_w_alpha() -> usize {
    100
}
fn default_alpha_tilde() -> f64 {
    0.05
}
fn default_trials() -> usize {
    1000
}
fn default_t_bar() -> usize {
    2000
}
fn default_nu() -> usize {
    1000
}
fn default_em_iterations() -> usize {
    50
}
fn default_detectors() -> Vec<DetectorKind> {
    vec![DetectorKind::FldsFma]
}

impl ExperimentSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::invalid(format!("cannot read spec file {}: {e}", path.display()))
        })?;
        let spec: ExperimentSpec = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("spec file {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::invalid(format!(
                "unsupported spec_version {} (expected {SPEC_VERSION})",
                self.spec_version
            )));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trial count must be at least 1"));
        }
        if self.detectors.is_empty() {
            return Err(Error::invalid("at least one detector must be listed"));
        }
        if self.w == 0 || self.w_alpha == 0 {
            return Err(Error::invalid("w and w_alpha must be positive"));
        }
        if !(self.alpha_tilde > 0.0 && self.alpha_tilde < 1.0) {
            return Err(Error::invalid("alpha_tilde must lie strictly inside (0,1)"));
        }
        if self.soi.amplitudes.is_empty() || self.soi.amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("SOI amplitude grid must be finite and non-empty"));
        }
        if let Some(p) = self.target_pfa {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid("target_pfa must lie strictly inside (0,1)"));
            }
        }
        if self.nu <= self.w {
            return Err(Error::invalid("nu must exceed the window length"));
        }
        match self.scenario {
            ScenarioKind::FldsSynthetic => {
                if self.model.is_none() {
                    return Err(Error::invalid("flds-synthetic scenario needs a model"));
                }
                self.model.as_ref().unwrap().to_model()?;
            }
            ScenarioKind::CommInterference => {
                if let Some(c) = &self.comm {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn direction(&self) -> Vector2<f64> {
        Vector2::new(self.soi.direction[0], self.soi.direction[1])
    }
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub detector: String,
    pub sinr_db: f64,
    pub amplitude: f64,
    pub w: usize,
    pub p_md: f64,
    pub p_fa: f64,
    pub se_md: f64,
    pub se_fa: f64,
    pub h: f64,
    pub bound_alpha: Option<f64>,
    pub bound_beta: Option<f64>,
    pub trials_md: usize,
    pub trials_fa: usize,
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "detector,sinr_db,amplitude,w,p_md,p_fa,se_md,se_fa,h,bound_alpha,bound_beta,trials_md,trials_fa"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.detector,
            r.sinr_db,
            r.amplitude,
            r.w,
            r.p_md,
            r.p_fa,
            r.se_md,
            r.se_fa,
            r.h,
            r.bound_alpha.map_or(String::new(), |v| v.to_string()),
            r.bound_beta.map_or(String::new(), |v| v.to_string()),
            r.trials_md,
            r.trials_fa
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RplRow {
    pub m_true: usize,
    pub trial: usize,
    pub sticky: bool,
    pub m_hat: usize,
    pub reconstruction_error: f64,
}

pub fn write_rpl_csv<W: Write>(rows: &[RplRow], mut out: W) -> Result<()> {
    writeln!(out, "m_true,trial,sticky,m_hat,reconstruction_error")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.m_true, r.trial, r.sticky, r.m_hat, r.reconstruction_error
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Background models and statistic traces
// ---------------------------------------------------------------------------

/// A trained background representation that can turn an observation
/// series into a per-sample LLR stream for a hypothesised waveform.
pub enum BackgroundModel {
    Flds(FldsModel),
    Gaussian(GaussianBackground),
}

impl BackgroundModel {
    pub fn llr_stream(&self, obs: &ObservationSeries, y: &Vector2<f64>) -> Result<Vec<f64>> {
        match self {
            BackgroundModel::Flds(model) => {
                let mut state = fkff_init(model)?;
                let mut out = Vec::with_capacity(obs.len());
                for p in &obs.samples {
                    let lik = fkff_step(&mut state, model, p)?;
                    out.push(crate::detect::llr_from_predictive(&lik, y, p)?);
                }
                Ok(out)
            }
            BackgroundModel::Gaussian(bg) => {
                obs.samples.iter().map(|p| bg.llr(y, p)).collect()
            }
        }
    }
}

/// Statistic kind driving a stopping rule on an LLR stream.
#[derive(Debug, Clone, Copy)]
enum StatKind {
    Fma(usize),
    Cusum,
    Shewhart,
}

impl StatKind {
    fn for_detector(kind: DetectorKind, w: usize) -> StatKind {
        match kind {
            DetectorKind::FldsFma | DetectorKind::LdsFma | DetectorKind::GaussianFma => {
                StatKind::Fma(w)
            }
            DetectorKind::FldsCusum => StatKind::Cusum,
            DetectorKind::FldsShewhart => StatKind::Shewhart,
        }
    }

    /// First 1-based time index at which the rule may fire.
    fn operational_from(&self) -> usize {
        match self {
            StatKind::Fma(w) => *w,
            _ => 1,
        }
    }

    /// Statistic value at every time step (1-based index t at slot t-1).
    fn trace(&self, llrs: &[f64]) -> Vec<f64> {
        match self {
            StatKind::Fma(w) => {
                let mut out = Vec::with_capacity(llrs.len());
                let mut sum = 0.0;
                for (i, &l) in llrs.iter().enumerate() {
                    sum += l;
                    if i >= *w {
                        sum -= llrs[i - *w];
                    }
                    out.push(sum);
                }
                out
            }
            StatKind::Cusum => {
                let mut out = Vec::with_capacity(llrs.len());
                let mut stat = 0.0f64;
                for &l in llrs {
                    stat = stat.max(0.0) + l;
                    out.push(stat);
                }
                out
            }
            StatKind::Shewhart => llrs.to_vec(),
        }
    }

    /// Maximum statistic over 1-based window `[from, to]`, respecting
    /// the operational start.
    fn window_max(&self, trace: &[f64], from: usize, to: usize) -> f64 {
        let lo = from.max(self.operational_from());
        if lo > to {
            return f64::NEG_INFINITY;
        }
        trace[lo - 1..to.min(trace.len())]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Empirical threshold hitting a false-alarm target by bisection over
/// the per-trial window maxima (40 iterations, matching the target
/// within a 10% relative band when attainable).
fn calibrate_threshold(maxima: &[f64], target: f64) -> Result<f64> {
    if maxima.is_empty() {
        return Err(Error::invalid("cannot calibrate on zero trials"));
    }
    let p_fa = |h: f64| maxima.iter().filter(|&&m| m >= h).count() as f64 / maxima.len() as f64;
    let finite: Vec<f64> = maxima.iter().cloned().filter(|m| m.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::numerical("all calibration maxima are degenerate"));
    }
    let mut lo = finite.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    // p_fa(lo) = 1, p_fa(hi) = 0; bisect towards the target
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if p_fa(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let h = hi;
    let achieved = p_fa(h);
    let se = binomial_se(target, maxima.len());
    if (achieved - target).abs() > (0.1 * target).max(3.0 * se) {
        return Err(Error::numerical(format!(
            "calibration missed the false-alarm target: wanted {target}, achieved {achieved}"
        )));
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// TSD experiment
// ---------------------------------------------------------------------------

/// Per-trial simulation products reused across detectors and amplitudes.
struct TrialStreams {
    /// H0-only series for false-alarm estimation.
    fa_series: ObservationSeries,
    /// H0 series for missed-detection trials (SOI injected per amplitude).
    md_series: ObservationSeries,
}

fn simulate_trial_streams(
    model: &FldsModel,
    fa_len: usize,
    md_len: usize,
    trial: usize,
    seed: u64,
) -> Result<TrialStreams> {
    let base = RngHandle::new(seed, trial as u64);
    let (fa_series, _) =
        simulate_flds(model, fa_len, InitialState::Random, &mut base.child(1))?;
    let (md_series, _) =
        simulate_flds(model, md_len, InitialState::Random, &mut base.child(2))?;
    Ok(TrialStreams { fa_series, md_series })
}

/// Trained per-detector background models for one experiment.
pub struct TrainedModels {
    pub flds: FldsModel,
    pub lds: Option<FldsModel>,
    pub gaussian: Option<GaussianBackground>,
}

fn train_baselines(
    spec: &ExperimentSpec,
    model: &FldsModel,
    seed: u64,
) -> Result<TrainedModels> {
    let needs_lds = spec.detectors.contains(&DetectorKind::LdsFma);
    let needs_gauss = spec.detectors.contains(&DetectorKind::GaussianFma);
    let mut lds = None;
    let mut gaussian = None;
    if needs_lds || needs_gauss {
        let mut rng = RngHandle::new(seed, u64::MAX).child(17);
        let (train, _) = simulate_flds(model, spec.t_bar, InitialState::Random, &mut rng)?;
        if needs_lds {
            let em = em_fit_lds(&train, spec.em_iterations)?;
            lds = Some(FldsModel::new(vec![em.params], true)?);
        }
        if needs_gauss {
            gaussian = Some(GaussianBackground::fit(&train)?);
        }
    }
    Ok(TrainedModels { flds: model.clone(), lds, gaussian })
}

impl TrainedModels {
    fn background_for(&self, kind: DetectorKind) -> Result<BackgroundModel> {
        match kind {
            DetectorKind::FldsFma | DetectorKind::FldsCusum | DetectorKind::FldsShewhart => {
                Ok(BackgroundModel::Flds(self.flds.clone()))
            }
            DetectorKind::LdsFma => self
                .lds
                .clone()
                .map(BackgroundModel::Flds)
                .ok_or_else(|| Error::invalid("lds-fma requested but no LDS was trained")),
            DetectorKind::GaussianFma => self
                .gaussian
                .clone()
                .map(BackgroundModel::Gaussian)
                .ok_or_else(|| Error::invalid("gaussian-fma requested but no fit available")),
        }
    }
}

/// Full TSD output: result rows plus the per-configuration statistic
/// samples needed by the window study's density export.
pub struct TsdOutput {
    pub rows: Vec<ResultRow>,
    /// `(detector, amplitude) -> (h0 window-sum samples, h1 samples)`
    pub statistic_samples: Vec<StatisticSamples>,
}

pub struct StatisticSamples {
    pub detector: DetectorKind,
    pub amplitude: f64,
    pub w: usize,
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
    pub perf: Option<PerfModel>,
}

/// Runs the transient-detection experiment over the SOI grid.
pub fn run_tsd_experiment(spec: &ExperimentSpec, seed: u64) -> Result<TsdOutput> {
    spec.validate()?;
    if spec.scenario != ScenarioKind::FldsSynthetic {
        return Err(Error::invalid("TSD experiment requires the flds-synthetic scenario"));
    }
    let model = spec.model.as_ref().unwrap().to_model()?;
    run_tsd_with_window(spec, &model, spec.w, seed)
}

const FA_WARM: usize = 300;

fn run_tsd_with_window(
    spec: &ExperimentSpec,
    model: &FldsModel,
    w: usize,
    seed: u64,
) -> Result<TsdOutput> {
    let trained = train_baselines(spec, model, seed)?;
    let direction = spec.direction();
    let nu = spec.nu.max(w + 1);
    let fa_len = w + FA_WARM + spec.w_alpha;
    let md_len = nu + w - 1;

    // one simulation set shared by every detector and amplitude
    let streams: Vec<TrialStreams> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| simulate_trial_streams(model, fa_len, md_len, trial, seed))
        .collect::<Result<Vec<_>>>()?;

    let mean_bg_power = streams.iter().map(|s| s.fa_series.mean_power()).sum::<f64>()
        / streams.len() as f64;

    // theoretical performance model per amplitude (factorial detector)
    let converged = fkff_converge(model, 50_000, 1e-12)?;

    let mut rows = Vec::new();
    let mut samples_out = Vec::new();
    for kind in &spec.detectors {
        let stat_kind = StatKind::for_detector(*kind, w);
        let eff_w = kind.effective_window(w);
        let background = trained.background_for(*kind)?;

        for (amp_idx, &amp) in spec.soi.amplitudes.iter().enumerate() {
            let y = direction * amp;
            let perf = if matches!(kind, DetectorKind::FldsFma) {
                Some(PerfModel::from_converged(
                    &converged,
                    model,
                    &y,
                    w,
                    spec.w_alpha,
                    spec.alpha_tilde,
                )?)
            } else {
                None
            };

            // per-trial FA window maxima and H0/H1 statistic samples
            let fa_window = (w + FA_WARM + 1, fa_len);
            let trial_results: Vec<TrialOutcome> = streams
                .par_iter()
                .map(|tr| -> Result<TrialOutcome> {
                    let llr_fa = background.llr_stream(&tr.fa_series, &y)?;
                    let trace_fa = stat_kind.trace(&llr_fa);
                    let fa_max = stat_kind.window_max(&trace_fa, fa_window.0, fa_window.1);
                    let h0_sample = trace_fa[fa_len - 1];

                    let soi = SoiProfile::constant(nu, w, [y[0], y[1]])?;
                    let with_soi = inject_soi(&tr.md_series, &soi)?;
                    let llr_md = background.llr_stream(&with_soi, &y)?;
                    let trace_md = stat_kind.trace(&llr_md);
                    // alarms before nu disqualify the trial's MD window
                    let pre_max = stat_kind.window_max(&trace_md, 1, nu - 1);
                    let md_max = stat_kind.window_max(&trace_md, nu, nu + w - 1);
                    let h1_sample = trace_md[md_len - 1];
                    Ok(TrialOutcome { fa_max, h0_sample, pre_max, md_max, h1_sample })
                })
                .collect::<Result<Vec<_>>>()?;

            let fa_maxima: Vec<f64> = trial_results.iter().map(|t| t.fa_max).collect();
            let pre_maxima: Vec<f64> = trial_results.iter().map(|t| t.pre_max).collect();
            let md_maxima: Vec<f64> = trial_results.iter().map(|t| t.md_max).collect();
            let h0_samples: Vec<f64> = trial_results.iter().map(|t| t.h0_sample).collect();
            let h1_samples: Vec<f64> = trial_results.iter().map(|t| t.h1_sample).collect();

            // threshold selection
            let (h, bound_alpha, bound_beta) = match (spec.target_pfa, &perf) {
                (Some(target), _) => (calibrate_threshold(&fa_maxima, target)?, None, None),
                (None, Some(p)) => {
                    let h = fma_threshold(p)?;
                    let (alpha, beta) = perf_bounds(p, h);
                    (h, Some(alpha), Some(beta))
                }
                (None, None) => (calibrate_threshold(&fa_maxima, spec.alpha_tilde)?, None, None),
            };

            let n_fa = fa_maxima.len();
            let fa_hits = fa_maxima.iter().filter(|&&m| m >= h).count();
            let p_fa = fa_hits as f64 / n_fa as f64;

            let mut md_trials = 0usize;
            let mut missed = 0usize;
            for (pre, md) in pre_maxima.iter().zip(&md_maxima) {
                if *pre >= h {
                    continue; // alarm before arrival: conditioned away
                }
                md_trials += 1;
                if *md < h {
                    missed += 1;
                }
            }
            let p_md = if md_trials > 0 { missed as f64 / md_trials as f64 } else { f64::NAN };

            rows.push(ResultRow {
                detector: kind.name().to_string(),
                sinr_db: crate::scenario::empirical_sinr_db(amp, mean_bg_power),
                amplitude: amp,
                w: eff_w,
                p_md,
                p_fa,
                se_md: binomial_se(p_md, md_trials.max(1)),
                se_fa: binomial_se(p_fa, n_fa),
                h,
                bound_alpha,
                bound_beta,
                trials_md: md_trials,
                trials_fa: n_fa,
            });
            samples_out.push(StatisticSamples {
                detector: *kind,
                amplitude: amp,
                w,
                h0: h0_samples,
                h1: h1_samples,
                perf,
            });
            let _ = amp_idx;
        }
    }
    rows.sort_by(|a, b| {
        (a.detector.clone(), a.w)
            .partial_cmp(&(b.detector.clone(), b.w))
            .unwrap()
            .then(a.amplitude.partial_cmp(&b.amplitude).unwrap())
    });
    Ok(TsdOutput { rows, statistic_samples: samples_out })
}

/// Per-trial detection outcomes for one (detector, amplitude) cell.
struct TrialOutcome {
    fa_max: f64,
    h0_sample: f64,
    pre_max: f64,
    md_max: f64,
    h1_sample: f64,
}

// ---------------------------------------------------------------------------
// Window study
// ---------------------------------------------------------------------------

pub struct WindowStudyOutput {
    pub rows: Vec<ResultRow>,
    pub densities: Vec<DensityRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityRow {
    pub bin: f64,
    pub h0_density: f64,
    pub h1_density: f64,
    pub h0_theory: f64,
    pub h1_theory: f64,
    pub w: usize,
}

/// Runs the TSD pipeline for each window length and exports empirical
/// statistic densities alongside the Gaussian theory curves.
pub fn run_window_study(spec: &ExperimentSpec, seed: u64) -> Result<WindowStudyOutput> {
    spec.validate()?;
    let model = spec
        .model
        .as_ref()
        .ok_or_else(|| Error::invalid("window study needs a model"))?
        .to_model()?;
    let ws = spec.ws.clone().unwrap_or_else(|| vec![10, 100, 200]);
    if ws.is_empty() {
        return Err(Error::invalid("window study needs at least one window length"));
    }
    let mut rows = Vec::new();
    let mut densities = Vec::new();
    for &w in &ws {
        let out = run_tsd_with_window(spec, &model, w, seed)?;
        rows.extend(out.rows);
        for s in &out.statistic_samples {
            if let Some(perf) = &s.perf {
                densities.extend(density_rows(s, perf));
            }
        }
    }
    Ok(WindowStudyOutput { rows, densities })
}

fn density_rows(s: &StatisticSamples, perf: &PerfModel) -> Vec<DensityRow> {
    const BINS: usize = 60;
    let all: Vec<f64> = s.h0.iter().chain(&s.h1).cloned().filter(|v| v.is_finite()).collect();
    if all.is_empty() {
        return Vec::new();
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / BINS as f64).max(1e-12);
    let mut h0_counts = vec![0usize; BINS];
    let mut h1_counts = vec![0usize; BINS];
    for &v in &s.h0 {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        h0_counts[b] += 1;
    }
    for &v in &s.h1 {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        h1_counts[b] += 1;
    }
    let wf = s.w as f64;
    let gauss = |x: f64, mu: f64, var: f64| {
        (-0.5 * (x - mu) * (x - mu) / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    };
    (0..BINS)
        .map(|b| {
            let center = lo + (b as f64 + 0.5) * width;
            DensityRow {
                bin: center,
                h0_density: h0_counts[b] as f64 / (s.h0.len() as f64 * width),
                h1_density: h1_counts[b] as f64 / (s.h1.len() as f64 * width),
                h0_theory: gauss(center, wf * perf.mu_h0, wf * perf.var_h0),
                h1_theory: gauss(center, wf * perf.mu_h1, wf * perf.var_h1),
                w: s.w,
            }
        })
        .collect()
}

pub fn write_densities_csv<W: Write>(rows: &[DensityRow], mut out: W) -> Result<()> {
    writeln!(out, "bin,h0_density,h1_density,h0_theory,h1_theory,w")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.bin, r.h0_density, r.h1_density, r.h0_theory, r.h1_theory, r.w
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// RPL experiment
// ---------------------------------------------------------------------------

/// Chain-count recovery and reconstruction error, sticky on and (when
/// `sticky_compare`) off, over paired per-trial data.
pub fn run_rpl_experiment(spec: &ExperimentSpec, seed: u64) -> Result<Vec<RplRow>> {
    spec.validate()?;
    if spec.scenario != ScenarioKind::FldsSynthetic {
        return Err(Error::invalid("RPL experiment requires the flds-synthetic scenario"));
    }
    let mut jobs = Vec::new();
    for &m_true in &spec.mcmc.m_values {
        for trial in 0..spec.trials {
            jobs.push((m_true, trial));
        }
    }
    let rows: Vec<Vec<RplRow>> = jobs
        .par_iter()
        .map(|&(m_true, trial)| -> Result<Vec<RplRow>> {
            let model = FldsModel::study_config(m_true)?;
            let base = RngHandle::new(seed, trial as u64).child(m_true as u64);
            let (obs, _) =
                simulate_flds(&model, spec.t_bar, InitialState::Random, &mut base.child(0))?;
            let mut out = Vec::new();
            let mut hyper = Hyper::study_default(&obs, spec.mcmc.m_hint);
            hyper.sticky = true;
            let outcome = learn(
                &obs,
                &hyper,
                spec.mcmc.iterations,
                spec.mcmc.particles,
                &mut base.child(1),
            )?;
            let re = reconstruction_error(&obs, &outcome.point_estimate)?;
            out.push(RplRow {
                m_true,
                trial,
                sticky: true,
                m_hat: outcome.m_hat,
                reconstruction_error: re,
            });
            if spec.mcmc.sticky_compare {
                let mut hyper_off = Hyper::study_default(&obs, spec.mcmc.m_hint);
                hyper_off.sticky = false;
                let outcome = learn(
                    &obs,
                    &hyper_off,
                    spec.mcmc.iterations,
                    spec.mcmc.particles,
                    &mut base.child(2),
                )?;
                let re = reconstruction_error(&obs, &outcome.point_estimate)?;
                out.push(RplRow {
                    m_true,
                    trial,
                    sticky: false,
                    m_hat: outcome.m_hat,
                    reconstruction_error: re,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Communications scenario experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommResultRow {
    pub detector: String,
    pub p_d: f64,
    pub p_fa: f64,
    pub target_pfa: f64,
    pub h: f64,
    pub pulses: usize,
    pub sinr_db: f64,
}

pub fn write_comm_csv<W: Write>(rows: &[CommResultRow], mut out: W) -> Result<()> {
    writeln!(out, "detector,p_d,p_fa,target_pfa,h,pulses,sinr_db")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.detector, r.p_d, r.p_fa, r.target_pfa, r.h, r.pulses, r.sinr_db
        )?;
    }
    Ok(())
}

/// Pulse detection under communications interference: learn each
/// background representation on a clean training segment, then sweep
/// detector thresholds to the matched false-alarm rate on the evaluation
/// stream and report per-pulse detection rates.
pub fn run_comm_experiment(spec: &ExperimentSpec, seed: u64) -> Result<Vec<CommResultRow>> {
    spec.validate()?;
    let cfg = spec
        .comm
        .clone()
        .unwrap_or_else(|| CommScenarioConfig::paper_default(20_000));
    let target_pfa = spec.target_pfa.unwrap_or(0.15);

    let mut train_cfg = cfg.clone();
    train_cfg.length = spec.t_bar;
    let training = simulate_comm_scenario(&train_cfg, &mut RngHandle::new(seed, u64::MAX))?;
    let eval = simulate_comm_scenario(&cfg, &mut RngHandle::new(seed, 0))?;
    let w = eval.pulse_width;
    let y = eval.soi_direction * eval.soi_amplitude;

    let mut rows = Vec::new();
    for kind in &spec.detectors {
        let background = match kind {
            DetectorKind::FldsFma | DetectorKind::FldsCusum | DetectorKind::FldsShewhart => {
                let hyper = Hyper::study_default(&training.background, spec.mcmc.m_hint);
                let outcome = learn(
                    &training.background,
                    &hyper,
                    spec.mcmc.iterations,
                    spec.mcmc.particles,
                    &mut RngHandle::new(seed, 1).child(7),
                )?;
                BackgroundModel::Flds(outcome.point_estimate.to_flds_model()?)
            }
            DetectorKind::LdsFma => {
                let em = em_fit_lds(&training.background, spec.em_iterations)?;
                BackgroundModel::Flds(FldsModel::new(vec![em.params], true)?)
            }
            DetectorKind::GaussianFma => {
                BackgroundModel::Gaussian(GaussianBackground::fit(&training.background)?)
            }
        };

        let stat_kind = StatKind::for_detector(*kind, w);
        let llrs = background.llr_stream(&eval.observations, &y)?;
        let trace = stat_kind.trace(&llrs);
        let op_from = stat_kind.operational_from();

        // H0 decision instants: the trailing window holds no SOI samples
        let mut soi_in_window = vec![false; trace.len()];
        let mut run = 0usize;
        for t in 0..trace.len() {
            run = if eval.soi_mask[t] { w.max(1) } else { run.saturating_sub(1) };
            soi_in_window[t] = run > 0;
        }
        let h0_values: Vec<f64> = (op_from..=trace.len())
            .filter(|&t| !soi_in_window[t - 1])
            .map(|t| trace[t - 1])
            .collect();
        if h0_values.is_empty() {
            return Err(Error::invalid("no signal-free instants to calibrate on"));
        }
        let h = calibrate_threshold(&h0_values, target_pfa)?;
        let p_fa =
            h0_values.iter().filter(|&&v| v >= h).count() as f64 / h0_values.len() as f64;

        // per-pulse detection within [start, start + w)
        let mut pulses = Vec::new();
        let mut t = 0usize;
        while t < eval.soi_mask.len() {
            if eval.soi_mask[t] && (t == 0 || !eval.soi_mask[t - 1]) {
                pulses.push(t + 1); // 1-based start
            }
            t += 1;
        }
        let detected = pulses
            .iter()
            .filter(|&&start| {
                stat_kind.window_max(&trace, start, (start + w - 1).min(trace.len())) >= h
            })
            .count();
        let p_d = if pulses.is_empty() { f64::NAN } else { detected as f64 / pulses.len() as f64 };

        rows.push(CommResultRow {
            detector: kind.name().to_string(),
            p_d,
            p_fa,
            target_pfa,
            h,
            pulses: pulses.len(),
            sinr_db: eval.measured_sinr_db,
        });
    }
    rows.sort_by(|a, b| a.detector.cmp(&b.detector));
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_version: u32,
    pub spec_sha256: String,
    pub seed: u64,
    pub tool_version: String,
    pub git_describe: Option<String>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn new(spec_path: &Path, seed: u64, wall_time_s: f64) -> Result<Self> {
        use sha2::{Digest, Sha256};
        let bytes = std::fs::read(spec_path)?;
        let digest = Sha256::digest(&bytes);
        Ok(Manifest {
            spec_version: SPEC_VERSION,
            spec_sha256: hex_string(&digest),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: git_describe(),
            wall_time_s,
        })
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    Some(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ExperimentSpec {
        serde_json::from_str(
            r#"{
                "spec_version": 1,
                "scenario": "flds-synthetic",
                "model": {"study_sources": 1},
                "soi": {"amplitudes": [0.8]},
                "w": 20,
                "w_alpha": 30,
                "alpha_tilde": 0.1,
                "trials": 40,
                "nu": 120,
                "t_bar": 200,
                "detectors": ["flds-fma", "flds-shewhart"]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn spec_round_trips_and_validates() {
        let spec = tiny_spec();
        spec.validate().unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: ExperimentSpec = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
    }

    #[test]
    fn spec_rejects_zero_trials() {
        let mut spec = tiny_spec();
        spec.trials = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_rejects_unknown_detector_names() {
        let err = serde_json::from_str::<ExperimentSpec>(
            r#"{"spec_version":1,"scenario":"flds-synthetic","detectors":["sprt"]}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn calibration_hits_target_on_uniform_maxima() {
        let maxima: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let h = calibrate_threshold(&maxima, 0.25).unwrap();
        let hit = maxima.iter().filter(|&&m| m >= h).count() as f64 / 1000.0;
        assert!((hit - 0.25).abs() <= 0.025);
    }

    #[test]
    fn stat_traces_match_detectors() {
        use crate::detect::{CusumDetector, FmaDetector, ShewhartDetector, StoppingRule};
        let mut rng = RngHandle::new(13, 0);
        use rand::Rng;
        let llrs: Vec<f64> = (0..500).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let fma_trace = StatKind::Fma(7).trace(&llrs);
        let mut fma = FmaDetector::new(7, f64::MAX / 2.0).unwrap();
        for (i, &l) in llrs.iter().enumerate() {
            fma.step(l);
            assert!((fma.statistic() - fma_trace[i]).abs() < 1e-9);
        }
        let cusum_trace = StatKind::Cusum.trace(&llrs);
        let mut cusum = CusumDetector::new(f64::MAX / 2.0).unwrap();
        for (i, &l) in llrs.iter().enumerate() {
            cusum.step(l);
            assert_eq!(cusum.statistic(), cusum_trace[i]);
        }
        let shew_trace = StatKind::Shewhart.trace(&llrs);
        let mut shew = ShewhartDetector::new(f64::MAX / 2.0).unwrap();
        for (i, &l) in llrs.iter().enumerate() {
            shew.step(l);
            assert_eq!(shew.statistic(), shew_trace[i]);
        }
    }

    #[test]
    fn tsd_runs_and_is_deterministic() {
        let spec = tiny_spec();
        let a = run_tsd_experiment(&spec, 7).unwrap();
        let b = run_tsd_experiment(&spec, 7).unwrap();
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_results_csv(&a.rows, &mut csv_a).unwrap();
        write_results_csv(&b.rows, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        for row in &a.rows {
            assert!(row.p_fa >= 0.0 && row.p_fa <= 1.0);
            assert!(row.p_md.is_nan() || (0.0..=1.0).contains(&row.p_md));
            let expect_se = binomial_se(row.p_fa, row.trials_fa);
            assert!((row.se_fa - expect_se).abs() < 1e-12);
        }
    }

    #[test]
    fn strong_soi_is_always_detected() {
        let mut spec = tiny_spec();
        spec.soi.amplitudes = vec![50.0];
        spec.detectors = vec![DetectorKind::FldsFma];
        let out = run_tsd_experiment(&spec, 3).unwrap();
        let row = &out.rows[0];
        assert_eq!(row.p_md, 0.0, "saturated SOI must never be missed: {row:?}");
    }
}
