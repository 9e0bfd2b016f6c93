//! Faraday-rotation cross-check: free precession traces and their frequency.
//!
//! The polarimeter signal is modelled as a decaying sinusoid at ω_L. There is
//! no optical pumping or probe physics behind it.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{self, linear_fit, minimize, CurveFit, CurveModel};
use crate::model::{larmor_frequency, AtomSpecies, FieldVector};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaradayConfig {
    pub amplitude: f64,
    /// Decay time τ, s.
    pub decay: f64,
    /// rad
    pub phase: f64,
    pub offset: f64,
    /// Samples per second.
    pub sample_rate: f64,
    /// s
    pub duration: f64,
    /// Per-sample Gaussian noise σ, in signal units.
    pub noise_sigma: f64,
}

impl Default for FaradayConfig {
    fn default() -> Self {
        FaradayConfig {
            amplitude: 1.0,
            decay: 2e-3,
            phase: 0.0,
            offset: 0.0,
            sample_rate: 2e6,
            duration: 5e-3,
            noise_sigma: 0.0,
        }
    }
}

impl FaradayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::invalid("faraday.decay", "must be positive"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid("faraday.sample_rate_hz", "must be positive"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("faraday.duration", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("faraday.noise_sigma", "must be non-negative"));
        }
        if ![self.amplitude, self.phase, self.offset].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("faraday.amplitude", "amplitude, phase and offset must be finite"));
        }
        Ok(())
    }

    /// Rejects precession frequencies the sampling cannot represent.
    pub fn check_nyquist(&self, larmor: f64) -> Result<()> {
        let f = larmor / TAU;
        if self.sample_rate <= 2.0 * f {
            return Err(Error::invalid(
                "faraday.sample_rate_hz",
                format!("{} Hz does not exceed twice the precession frequency {f:.1} Hz", self.sample_rate),
            ));
        }
        Ok(())
    }
}

/// Parameters a synthetic trace was generated with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceModel {
    pub amplitude: f64,
    pub decay: f64,
    pub phase: f64,
    pub offset: f64,
    /// rad/s
    pub larmor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaradayTrace {
    /// s, strictly increasing.
    pub t: Vec<f64>,
    pub signal: Vec<f64>,
    /// Samples per second.
    pub sample_rate: f64,
    pub noise_sigma: f64,
    /// `None` for traces read from disk.
    pub model: Option<TraceModel>,
}

impl FaradayTrace {
    /// Builds a trace from samples, checking the time axis.
    pub fn from_samples(t: Vec<f64>, signal: Vec<f64>) -> Result<Self> {
        if t.len() != signal.len() {
            return Err(Error::Input("time and signal columns differ in length".into()));
        }
        if t.len() < 4 {
            return Err(Error::Input("a trace needs at least 4 samples".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("sample times must be strictly increasing".into()));
        }
        let sample_rate = (t.len() - 1) as f64 / (t[t.len() - 1] - t[0]);
        Ok(FaradayTrace {
            t,
            signal,
            sample_rate,
            noise_sigma: 0.0,
            model: None,
        })
    }

    pub fn duration(&self) -> f64 {
        self.t.last().copied().unwrap_or(0.0) - self.t.first().copied().unwrap_or(0.0)
    }
}

/// signal(t) = A·exp(−t/τ)·sin(ω_L·t + φ) + offset + noise.
pub fn synthesize_trace(field: &FieldVector, species: &AtomSpecies, cfg: &FaradayConfig, seed: u64) -> Result<FaradayTrace> {
    cfg.validate()?;
    let larmor = larmor_frequency(field, species);
    cfg.check_nyquist(larmor)?;
    let n = (cfg.duration * cfg.sample_rate).round() as usize + 1;
    let mut rng = substream(seed, Purpose::TraceNoise, 0);
    let mut t = Vec::with_capacity(n);
    let mut signal = Vec::with_capacity(n);
    for i in 0..n {
        let ti = i as f64 / cfg.sample_rate;
        let clean = cfg.amplitude * (-ti / cfg.decay).exp() * (larmor * ti + cfg.phase).sin() + cfg.offset;
        let noise = if cfg.noise_sigma > 0.0 {
            cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        t.push(ti);
        signal.push(clean + noise);
    }
    Ok(FaradayTrace {
        t,
        signal,
        sample_rate: cfg.sample_rate,
        noise_sigma: cfg.noise_sigma,
        model: Some(TraceModel {
            amplitude: cfg.amplitude,
            decay: cfg.decay,
            phase: cfg.phase,
            offset: cfg.offset,
            larmor,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecessionStatus {
    Precessing,
    /// No spectral peak stands out of the noise.
    NoPrecession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    pub status: PrecessionStatus,
    /// rad/s
    pub larmor: f64,
    pub larmor_sigma: f64,
    pub amplitude: f64,
    /// 1/τ, s⁻¹
    pub decay_rate: f64,
    pub phase: f64,
    pub offset: f64,
    /// Spectral peak power over the median power.
    pub peak_ratio: f64,
    pub residual_norm: f64,
    pub initial_residual_norm: f64,
}

/// Peak-to-median periodogram power a precession signal must exceed.
pub const PEAK_RATIO_THRESHOLD: f64 = 20.0;

struct DecayingSine;

impl CurveModel for DecayingSine {
    fn n_params(&self) -> usize {
        5
    }

    // p = [A, Γ, ω, φ, offset]
    fn eval(&self, t: f64, p: &[f64]) -> f64 {
        p[0] * (-p[1] * t).exp() * (p[2] * t + p[3]).sin() + p[4]
    }

    fn grad(&self, t: f64, p: &[f64], out: &mut [f64]) {
        let e = (-p[1] * t).exp();
        let (s, c) = (p[2] * t + p[3]).sin_cos();
        out[0] = e * s;
        out[1] = -t * p[0] * e * s;
        out[2] = t * p[0] * e * c;
        out[3] = p[0] * e * c;
        out[4] = 1.0;
    }
}

/// Dominant angular frequency of the mean-removed trace and its
/// peak-to-median power ratio. The spectrum is zero-padded four times and the
/// peak refined by a parabola through the log power.
fn spectral_peak(trace: &FaradayTrace) -> (f64, f64) {
    let n = trace.signal.len();
    let mean = trace.signal.iter().sum::<f64>() / n as f64;
    let len = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = trace
        .signal
        .iter()
        .map(|&y| Complex::new(y - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let power: Vec<f64> = buf[..len / 2].iter().map(|c| c.norm_sqr()).collect();
    let Some((k, &peak)) = power.iter().enumerate().skip(1).max_by(|a, b| a.1.total_cmp(b.1)) else {
        return (0.0, 0.0);
    };
    let mut sorted = power[1..].to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2].max(f64::MIN_POSITIVE);
    let shift = if k + 1 < power.len() {
        let (a, b, c) = (power[k - 1].max(1e-300).ln(), peak.max(1e-300).ln(), power[k + 1].max(1e-300).ln());
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            (0.5 * (a - c) / den).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    let f = (k as f64 + shift) * trace.sample_rate / len as f64;
    (TAU * f, peak / median)
}

/// Least-squares decaying-sinusoid fit started from the spectral peak.
pub fn extract_frequency(trace: &FaradayTrace) -> Result<FrequencyEstimate> {
    let n = trace.signal.len();
    if n < 16 {
        return Err(Error::Input(format!("trace has {n} samples, at least 16 needed")));
    }
    let t0 = trace.t[0];
    let t: Vec<f64> = trace.t.iter().map(|t| t - t0).collect();
    let (omega0, ratio) = spectral_peak(trace);
    let mean = trace.signal.iter().sum::<f64>() / n as f64;
    let spread = (trace.signal.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let flat = spread <= 1e-12 * mean.abs().max(1.0);
    if flat || ratio < PEAK_RATIO_THRESHOLD || omega0 <= 0.0 {
        return Ok(FrequencyEstimate {
            status: PrecessionStatus::NoPrecession,
            larmor: 0.0,
            larmor_sigma: 0.0,
            amplitude: 0.0,
            decay_rate: 0.0,
            phase: 0.0,
            offset: mean,
            peak_ratio: ratio,
            residual_norm: 0.0,
            initial_residual_norm: 0.0,
        });
    }
    let periods = omega0 * trace.duration() / TAU;
    if periods < 10.0 {
        return Err(Error::Input(format!(
            "trace spans {periods:.1} precession periods, at least 10 needed"
        )));
    }

    // amplitude, phase and offset are linear once ω and Γ are fixed
    let gamma0 = 1.0 / trace.duration();
    let design = DMatrix::from_fn(n, 3, |i, j| {
        let e = (-gamma0 * t[i]).exp();
        match j {
            0 => e * (omega0 * t[i]).sin(),
            1 => e * (omega0 * t[i]).cos(),
            _ => 1.0,
        }
    });
    let (beta, _) = linear_fit(&design, &trace.signal).ok_or(Error::FitFailed {
        model: "decaying sinusoid",
        iterations: 0,
        residual: f64::NAN,
    })?;
    let amp0 = beta[0].hypot(beta[1]).max(f64::MIN_POSITIVE);
    let phase0 = beta[1].atan2(beta[0]);
    let p0 = [amp0, gamma0, omega0, phase0, beta[2]];
    let scales = [amp0, gamma0, omega0, 1.0, amp0];
    let problem = CurveFit {
        model: &DecayingSine,
        x: &t,
        y: &trace.signal,
        weights: None,
    };
    let out = minimize(&problem, &p0, &scales, &fit::Options::default(), "decaying sinusoid")?;
    let p = &out.params;
    // fold a negative amplitude into the phase
    let (amplitude, phase) = if p[0] < 0.0 { (-p[0], p[3] + std::f64::consts::PI) } else { (p[0], p[3]) };
    Ok(FrequencyEstimate {
        status: PrecessionStatus::Precessing,
        larmor: p[2].abs(),
        larmor_sigma: out.sigma(2),
        amplitude,
        decay_rate: p[1],
        phase: phase.rem_euclid(TAU),
        offset: p[4],
        peak_ratio: ratio,
        residual_norm: out.residual_norm,
        initial_residual_norm: out.initial_residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn field_for(f_hz: f64, rb: &AtomSpecies) -> FieldVector {
        FieldVector::new(0.0, 0.0, TAU * f_hz / rb.gyromag)
    }

    #[test]
    fn zero_field_is_a_constant_offset() {
        let rb = AtomSpecies::rubidium85();
        let cfg = FaradayConfig {
            offset: 0.3,
            ..FaradayConfig::default()
        };
        let tr = synthesize_trace(&FieldVector::ZERO, &rb, &cfg, 1).unwrap();
        assert!(tr.signal.iter().all(|&s| s == 0.3));
        let est = extract_frequency(&tr).unwrap();
        assert_eq!(est.status, PrecessionStatus::NoPrecession);
    }

    #[test]
    fn field_of_214_milligauss_precesses_at_100_khz() {
        let rb = AtomSpecies::rubidium85();
        // 100 kHz / 466.74 kHz/G
        let b = FieldVector::new(0.0, 0.0, 0.214_252);
        let tr = synthesize_trace(&b, &rb, &FaradayConfig::default(), 1).unwrap();
        assert_relative_eq!(tr.model.unwrap().larmor / TAU, 100.0e3, max_relative = 1e-5);
        // zero crossings upward over the first 1 ms: 100 of them
        let ups = tr
            .t
            .windows(2)
            .zip(tr.signal.windows(2))
            .filter(|(t, s)| t[1] <= 1e-3 && s[0] < 0.0 && s[1] >= 0.0)
            .count();
        assert!((99..=101).contains(&ups), "{ups}");
    }

    #[test]
    fn doubling_amplitude_doubles_the_signal() {
        let rb = AtomSpecies::rubidium85();
        let b = field_for(50e3, &rb);
        let cfg = FaradayConfig {
            offset: 0.25,
            ..FaradayConfig::default()
        };
        let a = synthesize_trace(&b, &rb, &cfg, 1).unwrap();
        let cfg2 = FaradayConfig { amplitude: 2.0, ..cfg };
        let b2 = synthesize_trace(&b, &rb, &cfg2, 1).unwrap();
        for (x, y) in a.signal.iter().zip(&b2.signal) {
            assert_relative_eq!(y - 0.25, 2.0 * (x - 0.25), epsilon = 1e-12);
        }
    }

    #[test]
    fn nyquist_violation_rejected() {
        let rb = AtomSpecies::rubidium85();
        let cfg = FaradayConfig {
            sample_rate: 150e3,
            ..FaradayConfig::default()
        };
        let err = synthesize_trace(&field_for(100e3, &rb), &rb, &cfg, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref field, .. } if field == "faraday.sample_rate_hz"));
    }

    #[test]
    fn noiseless_trace_recovered_to_a_part_per_million() {
        let rb = AtomSpecies::rubidium85();
        let cfg = FaradayConfig {
            phase: 0.7,
            offset: -0.2,
            ..FaradayConfig::default()
        };
        let tr = synthesize_trace(&field_for(100e3, &rb), &rb, &cfg, 1).unwrap();
        let est = extract_frequency(&tr).unwrap();
        assert_eq!(est.status, PrecessionStatus::Precessing);
        assert_relative_eq!(est.larmor, TAU * 100e3, max_relative = 1e-6);
        assert_relative_eq!(est.decay_rate, 500.0, max_relative = 1e-6);
        assert_relative_eq!(est.phase, 0.7, epsilon = 1e-6);
        assert_relative_eq!(est.offset, -0.2, epsilon = 1e-9);
        assert!(est.residual_norm <= est.initial_residual_norm);
    }

    #[test]
    fn too_few_periods_rejected() {
        let rb = AtomSpecies::rubidium85();
        let cfg = FaradayConfig {
            duration: 1e-3,
            decay: 1.0,
            ..FaradayConfig::default()
        };
        // 5 periods in 1 ms
        let tr = synthesize_trace(&field_for(5e3, &rb), &rb, &cfg, 1).unwrap();
        assert!(matches!(extract_frequency(&tr), Err(Error::Input(_))));
    }

    #[test]
    fn pure_noise_reports_no_precession() {
        let rb = AtomSpecies::rubidium85();
        let cfg = FaradayConfig {
            amplitude: 0.0,
            noise_sigma: 0.1,
            ..FaradayConfig::default()
        };
        let tr = synthesize_trace(&field_for(100e3, &rb), &rb, &cfg, 3).unwrap();
        assert_eq!(extract_frequency(&tr).unwrap().status, PrecessionStatus::NoPrecession);
    }

    #[test]
    fn snr_ten_over_fifty_periods_within_a_tenth_of_a_percent() {
        let rb = AtomSpecies::rubidium85();
        let f = 100e3;
        let cfg = FaradayConfig {
            duration: 50.0 / f,
            noise_sigma: 0.1,
            ..FaradayConfig::default()
        };
        for seed in 0..20 {
            let tr = synthesize_trace(&field_for(f, &rb), &rb, &cfg, seed).unwrap();
            let est = extract_frequency(&tr).unwrap();
            let err = (est.larmor / (TAU * f) - 1.0).abs();
            assert!(err < 1e-3, "seed {seed}: {err}");
            // the reported uncertainty is honest to within a factor of a few
            assert!(err < 5.0 * est.larmor_sigma / (TAU * f), "seed {seed}");
        }
    }

    #[test]
    fn trace_from_samples_rejects_unordered_times() {
        assert!(FaradayTrace::from_samples(vec![0.0, 1.0, 1.0, 2.0], vec![0.0; 4]).is_err());
        assert!(FaradayTrace::from_samples(vec![0.0, 1.0], vec![0.0; 3]).is_err());
        let tr = FaradayTrace::from_samples(vec![0.0, 0.5, 1.0, 1.5], vec![0.0; 4]).unwrap();
        assert_relative_eq!(tr.sample_rate, 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frequency_invariant_under_phase_and_offset(
            f in 4.7e3f64..466.0e3,
            phase in 0.0f64..TAU,
            offset in -1.0f64..1.0,
        ) {
            let rb = AtomSpecies::rubidium85();
            let cfg = FaradayConfig { phase, offset, ..FaradayConfig::default() };
            let tr = synthesize_trace(&field_for(f, &rb), &rb, &cfg, 1).unwrap();
            let est = extract_frequency(&tr).unwrap();
            prop_assert!((est.larmor / (TAU * f) - 1.0).abs() < 1e-6, "{} vs {}", est.larmor / TAU, f);
        }
    }
}
