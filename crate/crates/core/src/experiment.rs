//! Simulation and analysis runs assembled from an [`ExperimentConfig`].
//!
//! An [`Experiment`] samples its ensemble once; every run (field
//! measurements, current scans, timing sweeps, calibration) flies that same
//! ensemble, so pulse-on and pulse-off frames share their seed lineage.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    calibrate_with_sidebands, contrast, fit_hyperbola, fit_timing_profile, fit_stripes_zero_area, CalibrationResult, TimingProfileFit, FitStatus,
    Mapping, ScanFitResult, StripeFitResult, StripeOptions, StripeTemplate,
};
use crate::config::{CalibrationMode, ExperimentConfig, LineshapeMode};
use crate::ensemble::{sample_ensemble, AtomState};
use crate::error::{Error, Result};
use crate::faraday::{extract_frequency, synthesize_trace, FaradayTrace, FrequencyEstimate, PrecessionStatus};
use crate::imaging::{cross_section, difference_frame, run_sequence, Frame, Profile, Sequence};
use crate::model::{field_at, CoilModel, FieldVector};
use crate::raman::PulseConfig;

pub const AXES: [&str; 3] = ["x", "y", "z"];

/// Axis index from its name.
pub fn axis_index(name: &str) -> Result<usize> {
    AXES.iter()
        .position(|a| *a == name)
        .ok_or_else(|| Error::Input(format!("unknown coil axis `{name}`, expected x, y or z")))
}

/// Coils with every current set so that the field vanishes.
pub fn zero_field_coils(coils: &CoilModel) -> CoilModel {
    let mut c = *coils;
    for axis in c.axes_mut() {
        if axis.slope != 0.0 {
            axis.current = axis.compensation - axis.background / axis.slope;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub with_pulse: Frame,
    pub without_pulse: Frame,
    pub difference: Frame,
    /// Cross-section of the difference frame.
    pub profile: Profile,
    /// Cross-section of the pulse-off frame.
    pub background: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// A
    pub currents: [f64; 3],
    /// Field the simulation was run with, G.
    pub configured_field: FieldVector,
    pub fit: StripeFitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    /// A
    pub current: f64,
    pub status: FitStatus,
    /// rad/s
    pub larmor: f64,
    pub larmor_sigma: f64,
    /// G
    pub field: f64,
    /// G
    pub configured_field: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub axis: String,
    pub points: Vec<ScanPoint>,
    /// Hyperbola through the resolved points.
    pub fit: Option<ScanFitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    /// T_r / T_i
    pub ratio: f64,
    /// s
    pub start_time: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSweep {
    /// s
    pub duration: f64,
    /// rad/s, set for a π pulse.
    pub rabi_freq: f64,
    pub points: Vec<TimingPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingFit {
    pub ratio: f64,
    pub fit: TimingProfileFit,
    /// 4·v_r·|T_i/2 − T_r|, m.
    pub expected_splitting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaradayPoint {
    pub current: f64,
    pub configured_larmor: f64,
    pub estimate: FrequencyEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaradayScan {
    pub axis: String,
    pub points: Vec<FaradayPoint>,
    pub fit: Option<ScanFitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
}

pub struct Experiment {
    config: ExperimentConfig,
    ensemble: Vec<AtomState>,
    options: StripeOptions,
    /// The pulse-off frame does not depend on the coils.
    background: OnceLock<Frame>,
    calibration: OnceLock<CalibrationResult>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let ensemble = sample_ensemble(&config.ensemble(), &config.species)?;
        let mut options = config.analysis.stripe_options();
        // without a pulse there are no stripes to shape the template on
        if config.analysis.lineshape == LineshapeMode::Template && config.pulse.rabi_freq > 0.0 {
            options.template = Some(StripeTemplate::physical(
                &config.pulse,
                config.imaging.image_time,
                kernel_sigma(&config),
                &config.species,
            )?);
        }
        Ok(Experiment {
            config,
            ensemble,
            options,
            background: OnceLock::new(),
            calibration: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn stripe_options(&self) -> &StripeOptions {
        &self.options
    }

    pub fn template(&self) -> Option<&StripeTemplate> {
        self.options.template.as_ref()
    }

    fn sequence<'a>(&'a self, coils: &'a CoilModel, pulse: &'a PulseConfig) -> Sequence<'a> {
        Sequence {
            species: &self.config.species,
            coils,
            pulse,
            imaging: &self.config.imaging,
            cloud_sigma: self.config.ensemble.position_sigma,
            seed: self.config.seed,
        }
    }

    pub fn cross_section(&self, frame: &Frame) -> Result<Profile> {
        let (start, end) = self.config.analysis.band.unwrap_or((0, frame.geometry.height));
        cross_section(frame, start..end)
    }

    /// Pulse-on, pulse-off and difference frames at the given coils.
    pub fn simulate_with(&self, coils: &CoilModel, pulse: &PulseConfig) -> Result<Simulation> {
        let with_pulse = run_sequence(&self.ensemble, &self.sequence(coils, pulse), true)?;
        let same_timing = pulse.start_time == self.config.pulse.start_time && pulse.duration == self.config.pulse.duration;
        let mut without_pulse = if same_timing {
            match self.background.get() {
                Some(f) => f.clone(),
                None => {
                    let f = run_sequence(&self.ensemble, &self.sequence(coils, pulse), false)?;
                    self.background.get_or_init(|| f).clone()
                }
            }
        } else {
            run_sequence(&self.ensemble, &self.sequence(coils, pulse), false)?
        };
        without_pulse.meta.currents = coils.currents();
        let difference = difference_frame(&with_pulse, &without_pulse)?;
        Ok(Simulation {
            profile: self.cross_section(&difference)?,
            background: self.cross_section(&without_pulse)?,
            with_pulse,
            without_pulse,
            difference,
        })
    }

    pub fn simulate(&self, coils: &CoilModel) -> Result<Simulation> {
        self.simulate_with(coils, &self.config.pulse)
    }

    /// Coils of the configuration with new currents.
    pub fn coils_at(&self, currents: [f64; 3]) -> CoilModel {
        self.config.coils.with_currents(currents)
    }

    /// Sideband comb at zero field, fitted for the position ↔ frequency scale.
    pub fn calibrate(&self) -> Result<(CalibrationResult, Profile)> {
        let pulse = self.config.pulse.clone().with_comb(self.config.analysis.comb_orders);
        let coils = zero_field_coils(&self.config.coils);
        let sim = self.simulate_with(&coils, &pulse)?;
        let cal = calibrate_with_sidebands(&sim.profile, pulse.modulation_freq, self.config.t_map(), &self.config.species)?;
        Ok((cal, sim.profile))
    }

    /// The calibration, computed on first use.
    pub fn calibration(&self) -> Result<&CalibrationResult> {
        if let Some(c) = self.calibration.get() {
            return Ok(c);
        }
        let (cal, _) = self.calibrate()?;
        Ok(self.calibration.get_or_init(|| cal))
    }

    /// Position ↔ frequency mapping selected by the config.
    pub fn mapping(&self) -> Result<Mapping> {
        match self.config.analysis.calibration {
            CalibrationMode::TimeOfFlight => Ok(Mapping::TimeOfFlight { t_map: self.config.t_map() }),
            CalibrationMode::Sidebands => Ok(self.calibration()?.mapping()),
        }
    }

    pub fn analyze(&self, profile: &Profile, mapping: &Mapping) -> StripeFitResult {
        fit_stripes_zero_area(profile, &self.options, mapping, &self.config.species)
    }

    pub fn measure(&self, coils: &CoilModel, mapping: &Mapping) -> Result<(Simulation, Measurement)> {
        let sim = self.simulate(coils)?;
        let fit = self.analyze(&sim.profile, mapping);
        let m = Measurement {
            currents: coils.currents(),
            configured_field: field_at(coils),
            fit,
        };
        Ok((sim, m))
    }

    fn axis_coils(&self, axis: usize, current: f64) -> CoilModel {
        let mut currents = self.config.coils.currents();
        currents[axis] = current;
        self.coils_at(currents)
    }

    /// Stripe measurements over one coil's currents and a hyperbola fit of
    /// ω_L against current.
    pub fn scan(&self, axis: usize, currents: &[f64], mapping: &Mapping) -> Result<ScanReport> {
        self.scan_with(axis, currents, mapping, &mut |_, _, _| Ok(()))
    }

    /// [`Experiment::scan`], handing each point's frames to `on_point`.
    pub fn scan_with(
        &self,
        axis: usize,
        currents: &[f64],
        mapping: &Mapping,
        on_point: &mut dyn FnMut(usize, &Simulation, &Measurement) -> Result<()>,
    ) -> Result<ScanReport> {
        let mut points = Vec::with_capacity(currents.len());
        for (i, &current) in currents.iter().enumerate() {
            let coils = self.axis_coils(axis, current);
            let (sim, m) = self.measure(&coils, mapping)?;
            on_point(i, &sim, &m)?;
            points.push(ScanPoint {
                current,
                status: m.fit.status,
                larmor: m.fit.larmor,
                larmor_sigma: m.fit.larmor_sigma,
                field: m.fit.field,
                configured_field: m.configured_field.magnitude(),
            });
        }
        let resolved: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.status == FitStatus::Resolved)
            .map(|p| (p.current, p.larmor))
            .collect();
        let (fit, fit_error) = match fit_hyperbola(&resolved, &self.config.species) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(ScanReport {
            axis: AXES[axis].into(),
            points,
            fit,
            fit_error,
        })
    }

    /// The timing pulse: `duration` long, π area, starting at `ratio`·T_i.
    pub fn timing_pulse(&self, ratio: f64, duration: f64) -> PulseConfig {
        PulseConfig {
            duration,
            rabi_freq: PI / duration,
            start_time: ratio * self.config.imaging.image_time,
            sidebands: Vec::new(),
            ..self.config.pulse.clone()
        }
    }

    fn timing_run(&self, ratio: f64, duration: f64) -> Result<Simulation> {
        let pulse = self.timing_pulse(ratio, duration);
        self.simulate_with(&zero_field_coils(&self.config.coils), &pulse)
    }

    /// Zero-field stripe contrast as the pulse moves through the flight.
    pub fn timing_sweep(&self, ratios: &[f64], duration: f64) -> Result<TimingSweep> {
        self.timing_sweep_with(ratios, duration, &mut |_, _| Ok(()))
    }

    pub fn timing_sweep_with(
        &self,
        ratios: &[f64],
        duration: f64,
        on_point: &mut dyn FnMut(usize, &Simulation) -> Result<()>,
    ) -> Result<TimingSweep> {
        let mut points = Vec::with_capacity(ratios.len());
        for (i, &ratio) in ratios.iter().enumerate() {
            let sim = self.timing_run(ratio, duration)?;
            on_point(i, &sim)?;
            points.push(TimingPoint {
                ratio,
                start_time: ratio * self.config.imaging.image_time,
                contrast: contrast(&sim.profile, &sim.background),
            });
        }
        Ok(TimingSweep {
            duration,
            rabi_freq: PI / duration,
            points,
        })
    }

    /// Four-Gaussian timing fit of the zero-field profile at one pulse time.
    pub fn timing_fit(&self, ratio: f64, duration: f64) -> Result<TimingFit> {
        let sim = self.timing_run(ratio, duration)?;
        let t_i = self.config.imaging.image_time;
        let start = ratio * t_i + 0.5 * duration;
        let delta_t = 0.5 * t_i - start;
        let fit = fit_timing_profile(&sim.profile, t_i, delta_t, &self.config.species)?;
        Ok(TimingFit {
            ratio,
            fit,
            expected_splitting: 4.0 * self.config.species.recoil_velocity() * delta_t.abs(),
        })
    }

    /// Faraday traces over one coil's currents and a hyperbola fit of the
    /// extracted precession frequencies.
    pub fn faraday_scan(&self, axis: usize, currents: &[f64]) -> Result<FaradayScan> {
        self.faraday_scan_with(axis, currents, &mut |_, _| Ok(()))
    }

    pub fn faraday_scan_with(
        &self,
        axis: usize,
        currents: &[f64],
        on_trace: &mut dyn FnMut(usize, &FaradayTrace) -> Result<()>,
    ) -> Result<FaradayScan> {
        let mut points = Vec::with_capacity(currents.len());
        for (i, &current) in currents.iter().enumerate() {
            let field = field_at(&self.axis_coils(axis, current));
            let trace = synthesize_trace(&field, &self.config.species, &self.config.faraday, self.config.seed.wrapping_add(i as u64))?;
            on_trace(i, &trace)?;
            points.push(FaradayPoint {
                current,
                configured_larmor: trace.model.map_or(0.0, |m| m.larmor),
                estimate: extract_frequency(&trace)?,
            });
        }
        let usable: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.estimate.status == PrecessionStatus::Precessing)
            .map(|p| (p.current, p.estimate.larmor))
            .collect();
        let (fit, fit_error) = match fit_hyperbola(&usable, &self.config.species) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(FaradayScan {
            axis: AXES[axis].into(),
            points,
            fit,
            fit_error,
        })
    }
}

/// Effective kernel of the cloud deposit: initial cloud plus pixel box.
pub fn kernel_sigma(config: &ExperimentConfig) -> f64 {
    let s = config.ensemble.position_sigma;
    let p = config.imaging.pixel_size;
    (s * s + p * p / 12.0).sqrt()
}

/// `steps` currents evenly spanning `from..=to`.
pub fn current_range(from: f64, to: f64, steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Input("a scan needs at least 2 steps".into()));
    }
    Ok((0..steps).map(|i| from + (to - from) * i as f64 / (steps - 1) as f64).collect())
}
