//! Pulsed-signal detection scenario under communications interference.
//!
//! The background is the sum of a BPSK and a QPSK baseband stream
//! (rectangular symbol shaping, independent random symbols) plus white
//! Gaussian noise. The signal of interest is a rectangular pulse train
//! with a given repetition frequency; its amplitude is scaled so the
//! empirical signal-to-interference-plus-noise ratio hits a target.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::ObservationSeries;
use crate::rng::RngHandle;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommScenarioConfig {
    pub sample_rate_hz: f64,
    /// Total evaluation samples to generate.
    pub length: usize,
    pub bpsk_symbol_rate_hz: f64,
    pub qpsk_symbol_rate_hz: f64,
    pub bpsk_amplitude: f64,
    pub qpsk_amplitude: f64,
    pub noise_sigma: f64,
    /// Pulse repetition frequency of the signal of interest.
    pub prf_hz: f64,
    /// Duty cycle in (0, 1].
    pub duty_cycle: f64,
    /// Explicit pulse width; when absent it is derived from the duty
    /// cycle as `round(duty * fs / prf)`.
    #[serde(default)]
    pub pulse_width_samples: Option<usize>,
    /// Target empirical SINR in dB.
    pub sinr_db: f64,
    /// SOI phase in degrees; the pulse direction is `[cos, sin]`.
    #[serde(default)]
    pub soi_phase_deg: f64,
    /// First pulse start (0-based sample); defaults to one full period.
    #[serde(default)]
    pub first_pulse_offset: Option<usize>,
}

impl CommScenarioConfig {
    /// The pulsed-radar-under-communications configuration: 10 MHz
    /// sampling, 3 kHz PRF, 8% duty with a 200-sample (20 us) pulse,
    /// -10.02 dB SINR.
    pub fn paper_default(length: usize) -> Self {
        CommScenarioConfig {
            sample_rate_hz: 10e6,
            length,
            bpsk_symbol_rate_hz: 0.5e6,
            qpsk_symbol_rate_hz: 1.25e6,
            bpsk_amplitude: 1.0,
            qpsk_amplitude: 1.0,
            noise_sigma: 0.3,
            prf_hz: 3e3,
            duty_cycle: 0.08,
            pulse_width_samples: Some(200),
            sinr_db: -10.02,
            soi_phase_deg: 0.0,
            first_pulse_offset: None,
        }
    }

    pub fn pulse_period_samples(&self) -> usize {
        (self.sample_rate_hz / self.prf_hz).floor() as usize
    }

    pub fn pulse_width(&self) -> usize {
        self.pulse_width_samples
            .unwrap_or_else(|| (self.duty_cycle * self.sample_rate_hz / self.prf_hz).round()
                as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(Error::invalid(format!(
                "duty cycle must lie in (0, 1], got {}",
                self.duty_cycle
            )));
        }
        if self.length == 0 {
            return Err(Error::invalid("scenario length must be positive"));
        }
        if !(self.sample_rate_hz > 0.0 && self.prf_hz > 0.0) {
            return Err(Error::invalid("sample rate and PRF must be positive"));
        }
        if self.prf_hz >= self.sample_rate_hz {
            return Err(Error::invalid("PRF must be below the sample rate"));
        }
        if self.bpsk_symbol_rate_hz <= 0.0 || self.qpsk_symbol_rate_hz <= 0.0 {
            return Err(Error::invalid("symbol rates must be positive"));
        }
        if self.pulse_width() == 0 || self.pulse_width() > self.pulse_period_samples() {
            return Err(Error::invalid(format!(
                "pulse width {} incompatible with period {}",
                self.pulse_width(),
                self.pulse_period_samples()
            )));
        }
        Ok(())
    }
}

/// Generated scenario: observations with the pulse train injected, the
/// clean background, the per-sample SOI mask and bookkeeping values.
#[derive(Debug, Clone)]
pub struct CommScenario {
    pub observations: ObservationSeries,
    pub background: ObservationSeries,
    pub soi_mask: Vec<bool>,
    pub soi_amplitude: f64,
    pub soi_direction: Vector2<f64>,
    pub measured_sinr_db: f64,
    pub pulse_width: usize,
    pub pulse_period: usize,
}

/// Rectangularly-shaped PSK baseband stream added onto `acc`.
fn add_psk_stream(
    acc: &mut [Vector2<f64>],
    amplitude: f64,
    samples_per_symbol: usize,
    qpsk: bool,
    rng: &mut RngHandle,
) {
    if amplitude == 0.0 {
        return;
    }
    let mut symbol = Vector2::zeros();
    for (t, slot) in acc.iter_mut().enumerate() {
        if t % samples_per_symbol == 0 {
            symbol = if qpsk {
                let re: bool = rng.gen();
                let im: bool = rng.gen();
                let s = std::f64::consts::FRAC_1_SQRT_2;
                Vector2::new(if re { s } else { -s }, if im { s } else { -s })
            } else {
                let bit: bool = rng.gen();
                Vector2::new(if bit { 1.0 } else { -1.0 }, 0.0)
            } * amplitude;
        }
        *slot += symbol;
    }
}

/// Simulates the full scenario. Draw order: BPSK symbols, QPSK symbols,
/// then noise, each from a child stream of `rng`.
pub fn simulate_comm_scenario(
    config: &CommScenarioConfig,
    rng: &mut RngHandle,
) -> Result<CommScenario> {
    config.validate()?;
    let n = config.length;
    let mut background = vec![Vector2::zeros(); n];

    let sps_bpsk = (config.sample_rate_hz / config.bpsk_symbol_rate_hz).round().max(1.0) as usize;
    let sps_qpsk = (config.sample_rate_hz / config.qpsk_symbol_rate_hz).round().max(1.0) as usize;
    add_psk_stream(&mut background, config.bpsk_amplitude, sps_bpsk, false, &mut rng.child(0));
    add_psk_stream(&mut background, config.qpsk_amplitude, sps_qpsk, true, &mut rng.child(1));
    if config.noise_sigma > 0.0 {
        let mut noise_rng = rng.child(2);
        for slot in background.iter_mut() {
            slot.x += config.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
            slot.y += config.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
        }
    }

    let period = config.pulse_period_samples();
    let width = config.pulse_width();
    let first = config.first_pulse_offset.unwrap_or(period).min(n);
    let mut mask = vec![false; n];
    let mut t = first;
    while t < n {
        for k in t..(t + width).min(n) {
            mask[k] = true;
        }
        t += period;
    }

    // scale the SOI to the target SINR against the measured background
    let p_bg = background.iter().map(|p| p.norm_squared()).sum::<f64>() / n as f64;
    let amplitude = (p_bg * 10f64.powf(config.sinr_db / 10.0)).sqrt();
    let phase = config.soi_phase_deg.to_radians();
    let direction = Vector2::new(phase.cos(), phase.sin());
    let soi = direction * amplitude;

    let mut observations = background.clone();
    for (slot, &on) in observations.iter_mut().zip(&mask) {
        if on {
            *slot += soi;
        }
    }

    let measured = empirical_sinr_db(amplitude, p_bg);
    Ok(CommScenario {
        observations: ObservationSeries {
            samples: observations,
            sample_period: Some(1.0 / config.sample_rate_hz),
        },
        background: ObservationSeries {
            samples: background,
            sample_period: Some(1.0 / config.sample_rate_hz),
        },
        soi_mask: mask,
        soi_amplitude: amplitude,
        soi_direction: direction,
        measured_sinr_db: measured,
        pulse_width: width,
        pulse_period: period,
    })
}

/// `10 log10(P_soi / P_background)`, `+inf` when the background power
/// vanishes.
pub fn empirical_sinr_db(soi_amplitude: f64, background_power: f64) -> f64 {
    if background_power <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (soi_amplitude * soi_amplitude / background_power).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_config_pulse_geometry() {
        let cfg = CommScenarioConfig::paper_default(20_000);
        assert_eq!(cfg.pulse_period_samples(), 3333);
        assert_eq!(cfg.pulse_width(), 200);
        let mut rng = RngHandle::new(5, 0);
        let scenario = simulate_comm_scenario(&cfg, &mut rng).unwrap();
        // pulses are width-200 runs repeating every 3333 samples
        let first_on = scenario.soi_mask.iter().position(|&m| m).unwrap();
        assert_eq!(first_on, 3333);
        assert!(scenario.soi_mask[first_on..first_on + 200].iter().all(|&m| m));
        assert!(!scenario.soi_mask[first_on + 200]);
        assert!(scenario.soi_mask[first_on + 3333]);
    }

    #[test]
    fn duty_derived_width_when_not_pinned() {
        let mut cfg = CommScenarioConfig::paper_default(10_000);
        cfg.pulse_width_samples = None;
        // 0.08 * 10e6 / 3e3 = 266.67 -> 267
        assert_eq!(cfg.pulse_width(), 267);
    }

    #[test]
    fn sinr_hits_target_within_tolerance() {
        let cfg = CommScenarioConfig::paper_default(50_000);
        let mut rng = RngHandle::new(7, 0);
        let scenario = simulate_comm_scenario(&cfg, &mut rng).unwrap();
        assert!(
            (scenario.measured_sinr_db - -10.02).abs() < 0.3,
            "measured {}",
            scenario.measured_sinr_db
        );
        // on-samples really carry the pulse
        let on = scenario.soi_mask.iter().filter(|&&m| m).count();
        assert!(on > 0);
        for (i, &m) in scenario.soi_mask.iter().enumerate() {
            let diff = scenario.observations.samples[i] - scenario.background.samples[i];
            if m {
                assert!((diff.norm() - scenario.soi_amplitude).abs() < 1e-12);
            } else {
                assert_eq!(diff, Vector2::zeros());
            }
        }
    }

    #[test]
    fn zero_background_gives_infinite_sinr() {
        assert_eq!(empirical_sinr_db(1.0, 0.0), f64::INFINITY);
        let mut cfg = CommScenarioConfig::paper_default(1000);
        cfg.bpsk_amplitude = 0.0;
        cfg.qpsk_amplitude = 0.0;
        cfg.noise_sigma = 0.0;
        let mut rng = RngHandle::new(9, 0);
        let scenario = simulate_comm_scenario(&cfg, &mut rng).unwrap();
        assert_eq!(scenario.measured_sinr_db, f64::INFINITY);
    }

    #[test]
    fn bad_duty_cycle_rejected() {
        let mut cfg = CommScenarioConfig::paper_default(1000);
        cfg.duty_cycle = 0.0;
        assert!(cfg.validate().is_err());
        cfg.duty_cycle = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn background_is_reproducible() {
        let cfg = CommScenarioConfig::paper_default(5000);
        let a = simulate_comm_scenario(&cfg, &mut RngHandle::new(3, 4)).unwrap();
        let b = simulate_comm_scenario(&cfg, &mut RngHandle::new(3, 4)).unwrap();
        assert_eq!(a.background.samples, b.background.samples);
        assert_eq!(a.soi_amplitude, b.soi_amplitude);
    }
}
