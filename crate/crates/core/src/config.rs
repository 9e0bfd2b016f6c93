//! Experiment configuration and its plain-text `key = value` form.
//!
//! Keys carry a dotted section prefix (`pulse.duration = 0.005`). Values are
//! SI except frequencies, whose keys end in `_hz` and are converted to rad/s
//! on load. `#` starts a comment.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{CentralStripe, StripeOptions};
use crate::ensemble::{EnsembleConfig, Sampling};
use crate::error::{Error, Result};
use crate::faraday::FaradayConfig;
use crate::imaging::{Deposit, ImagingConfig, Noise};
use crate::model::{field_at, larmor_frequency, AtomSpecies, CoilAxis, CoilModel};
use crate::raman::{PulseConfig, PulseMode, Sideband, Transfer};

/// Largest accepted frame side, pixels.
pub const MAX_EXTENT: usize = 8192;

/// Where the position ↔ frequency scale of the stripe analysis comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// x = v·T_map.
    #[default]
    TimeOfFlight,
    /// A sideband comb run at the compensation currents fixes the scale.
    Sidebands,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineshapeMode {
    /// Stripe shape predicted from the pulse and imaging settings.
    #[default]
    Template,
    /// Free zero-area lobes.
    Lobes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Mapping time, s; the image time when unset.
    pub t_map: Option<f64>,
    pub calibration: CalibrationMode,
    /// The calibration comb spans orders −n..=n.
    pub comb_orders: i32,
    pub lineshape: LineshapeMode,
    /// Rows summed into the cross-section; the whole frame when unset.
    pub band: Option<(usize, usize)>,
    pub smoothing: usize,
    pub relative_threshold: f64,
    pub noise_threshold: f64,
    pub central: CentralStripe,
    pub pair_delta_m: i32,
    pub min_significance: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let s = StripeOptions::default();
        AnalysisConfig {
            t_map: None,
            calibration: CalibrationMode::TimeOfFlight,
            comb_orders: 3,
            lineshape: LineshapeMode::Template,
            band: None,
            smoothing: s.smoothing,
            relative_threshold: s.relative_threshold,
            noise_threshold: s.noise_threshold,
            central: s.central,
            pair_delta_m: s.pair_delta_m,
            min_significance: s.min_significance,
        }
    }
}

impl AnalysisConfig {
    /// Detection and labelling options, without a template.
    pub fn stripe_options(&self) -> StripeOptions {
        StripeOptions {
            smoothing: self.smoothing,
            relative_threshold: self.relative_threshold,
            noise_threshold: self.noise_threshold,
            central: self.central,
            pair_delta_m: self.pair_delta_m,
            min_significance: self.min_significance,
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub species: AtomSpecies,
    pub coils: CoilModel,
    /// The ensemble seed is taken from `seed`.
    pub ensemble: EnsembleConfig,
    pub pulse: PulseConfig,
    pub imaging: ImagingConfig,
    pub analysis: AnalysisConfig,
    pub faraday: FaradayConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            species: AtomSpecies::default(),
            coils: CoilModel::default(),
            ensemble: EnsembleConfig::default(),
            pulse: PulseConfig::default(),
            imaging: ImagingConfig::default(),
            analysis: AnalysisConfig::default(),
            faraday: FaradayConfig::default(),
        }
    }
}

fn number(key: &str, value: &str) -> Result<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| Error::invalid(key, format!("`{value}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::invalid(key, "must be finite"));
    }
    Ok(v)
}

fn integer<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(key, format!("`{value}` is not a valid integer")))
}

fn word<T: DeserializeOwned>(key: &str, value: &str, allowed: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::invalid(key, format!("`{value}` is not one of {allowed}")))
}

fn optional(value: &str) -> Option<&str> {
    (!value.is_empty() && value != "none").then_some(value)
}

fn vector3(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::invalid(key, "expected three comma-separated numbers"));
    }
    Ok([number(key, parts[0])?, number(key, parts[1])?, number(key, parts[2])?])
}

fn sidebands(key: &str, value: &str) -> Result<Vec<Sideband>> {
    let Some(value) = optional(value) else {
        return Ok(Vec::new());
    };
    value
        .split(',')
        .map(|item| {
            let (order, amplitude) = item
                .split_once(':')
                .ok_or_else(|| Error::invalid(key, format!("`{}` is not order:amplitude", item.trim())))?;
            Ok(Sideband {
                order: integer(key, order.trim())?,
                amplitude: number(key, amplitude.trim())?,
            })
        })
        .collect()
}

fn band(key: &str, value: &str) -> Result<Option<(usize, usize)>> {
    let Some(value) = optional(value) else {
        return Ok(None);
    };
    let (a, b) = value
        .split_once("..")
        .ok_or_else(|| Error::invalid(key, "expected start..end rows"))?;
    Ok(Some((integer(key, a.trim())?, integer(key, b.trim())?)))
}

fn coil_key<'a>(coils: &'a mut CoilModel, axis: &str) -> Option<&'a mut CoilAxis> {
    match axis {
        "x" => Some(&mut coils.x),
        "y" => Some(&mut coils.y),
        "z" => Some(&mut coils.z),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Parses `key = value` lines over the defaults. Syntax problems carry the
    /// line number; bad values name the offending key.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(parse_err(format!("`{key}` given twice")));
            }
            seen.push(key.to_string());
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hz = |v: &str| number(key, v).map(|f| TAU * f);
        match key {
            "seed" => self.seed = integer(key, value)?,
            "species.mass" => self.species.mass = number(key, value)?,
            "species.wavelength" => self.species.wavelength = number(key, value)?,
            "species.gyromag_hz_per_gauss" => self.species.gyromag = hz(value)?,

            "ensemble.atom_count" => self.ensemble.atom_count = integer(key, value)?,
            "ensemble.position_sigma" => self.ensemble.position_sigma = number(key, value)?,
            "ensemble.temperature" => self.ensemble.temperature = number(key, value)?,
            "ensemble.sampling" => self.ensemble.sampling = word::<Sampling>(key, value, "independent, stratified")?,

            "pulse.rabi_freq_hz" => self.pulse.rabi_freq = hz(value)?,
            "pulse.duration" => self.pulse.duration = number(key, value)?,
            "pulse.start_time" => self.pulse.start_time = number(key, value)?,
            "pulse.delta12_hz" => self.pulse.delta12 = hz(value)?,
            "pulse.modulation_freq_hz" => self.pulse.modulation_freq = hz(value)?,
            "pulse.light_shift_hz" => self.pulse.light_shift = hz(value)?,
            "pulse.sidebands" => self.pulse.sidebands = sidebands(key, value)?,
            "pulse.mode" => self.pulse.mode = word::<PulseMode>(key, value, "instantaneous_pi, rabi_cycling")?,
            "pulse.channel_weight_scale" => self.pulse.channel_weight_scale = number(key, value)?,
            "pulse.transfer" => self.pulse.transfer = word::<Transfer>(key, value, "sampled, mixture")?,

            "imaging.image_time" => self.imaging.image_time = number(key, value)?,
            "imaging.gravity" => self.imaging.gravity = vector3(key, value)?,
            "imaging.pixel_size" => self.imaging.pixel_size = number(key, value)?,
            "imaging.width" => self.imaging.width = integer(key, value)?,
            "imaging.height" => self.imaging.height = integer(key, value)?,
            "imaging.photon_scale" => self.imaging.photon_scale = number(key, value)?,
            "imaging.noise" => self.imaging.noise = word::<Noise>(key, value, "none, poisson")?,
            "imaging.deposit" => self.imaging.deposit = word::<Deposit>(key, value, "point, cloud")?,

            "analysis.t_map" => self.analysis.t_map = optional(value).map(|v| number(key, v)).transpose()?,
            "analysis.calibration" => {
                self.analysis.calibration = word::<CalibrationMode>(key, value, "time_of_flight, sidebands")?
            }
            "analysis.comb_orders" => self.analysis.comb_orders = integer(key, value)?,
            "analysis.lineshape" => self.analysis.lineshape = word::<LineshapeMode>(key, value, "template, lobes")?,
            "analysis.band" => self.analysis.band = band(key, value)?,
            "analysis.smoothing" => self.analysis.smoothing = integer(key, value)?,
            "analysis.relative_threshold" => self.analysis.relative_threshold = number(key, value)?,
            "analysis.noise_threshold" => self.analysis.noise_threshold = number(key, value)?,
            "analysis.central" => self.analysis.central = word::<CentralStripe>(key, value, "auto, always, never")?,
            "analysis.pair_delta_m" => self.analysis.pair_delta_m = integer(key, value)?,
            "analysis.min_significance" => self.analysis.min_significance = number(key, value)?,

            "faraday.amplitude" => self.faraday.amplitude = number(key, value)?,
            "faraday.decay" => self.faraday.decay = number(key, value)?,
            "faraday.phase" => self.faraday.phase = number(key, value)?,
            "faraday.offset" => self.faraday.offset = number(key, value)?,
            "faraday.sample_rate_hz" => self.faraday.sample_rate = number(key, value)?,
            "faraday.duration" => self.faraday.duration = number(key, value)?,
            "faraday.noise_sigma" => self.faraday.noise_sigma = number(key, value)?,

            _ => {
                let mut parts = key.splitn(3, '.');
                let (Some("coils"), Some(axis), Some(field)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::invalid(key, "unknown key"));
                };
                let v = number(key, value)?;
                let coil = coil_key(&mut self.coils, axis).ok_or_else(|| Error::invalid(key, "unknown coil axis"))?;
                match field {
                    "slope" => coil.slope = v,
                    "compensation" => coil.compensation = v,
                    "current" => coil.current = v,
                    "background" => coil.background = v,
                    _ => return Err(Error::invalid(key, "unknown key")),
                }
            }
        }
        Ok(())
    }

    /// Per-section checks plus the cross-field ones.
    pub fn validate(&self) -> Result<()> {
        self.species.validate()?;
        self.coils.validate()?;
        self.ensemble.validate()?;
        self.pulse.validate()?;
        self.imaging.validate()?;
        self.faraday.validate()?;
        if self.pulse.end_time() >= self.imaging.image_time {
            return Err(Error::invalid(
                "imaging.image_time",
                format!(
                    "{} s must exceed pulse.start_time + pulse.duration = {} s",
                    self.imaging.image_time,
                    self.pulse.end_time()
                ),
            ));
        }
        if self.imaging.width > MAX_EXTENT || self.imaging.height > MAX_EXTENT {
            return Err(Error::invalid("imaging.width", format!("extent is limited to {MAX_EXTENT} pixels per side")));
        }
        self.faraday
            .check_nyquist(larmor_frequency(&field_at(&self.coils), &self.species))?;
        let a = &self.analysis;
        if let Some(t) = a.t_map {
            if !(t > 0.0) {
                return Err(Error::invalid("analysis.t_map", "must be positive"));
            }
        }
        if let Some((start, end)) = a.band {
            if start >= end || end > self.imaging.height {
                return Err(Error::invalid(
                    "analysis.band",
                    format!("rows {start}..{end} are empty or outside 0..{}", self.imaging.height),
                ));
            }
        }
        if a.comb_orders < 1 {
            return Err(Error::invalid("analysis.comb_orders", "must be at least 1"));
        }
        if a.smoothing == 0 {
            return Err(Error::invalid("analysis.smoothing", "must be at least 1"));
        }
        if a.pair_delta_m <= 0 {
            return Err(Error::invalid("analysis.pair_delta_m", "must be positive"));
        }
        for (key, v) in [
            ("analysis.relative_threshold", a.relative_threshold),
            ("analysis.noise_threshold", a.noise_threshold),
            ("analysis.min_significance", a.min_significance),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(key, "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Mapping time actually used, s.
    pub fn t_map(&self) -> f64 {
        self.analysis.t_map.unwrap_or(self.imaging.image_time)
    }

    /// Ensemble settings with the run seed applied.
    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            rng_seed: self.seed,
            ..self.ensemble
        }
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let hz = |w: f64| w / TAU;
        let word = |v: &dyn erased::Word| v.word();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("species.mass", self.species.mass.to_string());
        line("species.wavelength", self.species.wavelength.to_string());
        line("species.gyromag_hz_per_gauss", hz(self.species.gyromag).to_string());
        for (name, c) in ["x", "y", "z"].iter().zip(self.coils.axes()) {
            line(&format!("coils.{name}.slope"), c.slope.to_string());
            line(&format!("coils.{name}.compensation"), c.compensation.to_string());
            line(&format!("coils.{name}.current"), c.current.to_string());
            line(&format!("coils.{name}.background"), c.background.to_string());
        }
        let e = &self.ensemble;
        line("ensemble.atom_count", e.atom_count.to_string());
        line("ensemble.position_sigma", e.position_sigma.to_string());
        line("ensemble.temperature", e.temperature.to_string());
        line("ensemble.sampling", word(&e.sampling));
        let p = &self.pulse;
        line("pulse.rabi_freq_hz", hz(p.rabi_freq).to_string());
        line("pulse.duration", p.duration.to_string());
        line("pulse.start_time", p.start_time.to_string());
        line("pulse.delta12_hz", hz(p.delta12).to_string());
        line("pulse.modulation_freq_hz", hz(p.modulation_freq).to_string());
        line("pulse.light_shift_hz", hz(p.light_shift).to_string());
        let sb: Vec<String> = p.sidebands.iter().map(|b| format!("{}:{}", b.order, b.amplitude)).collect();
        line("pulse.sidebands", if sb.is_empty() { "none".into() } else { sb.join(", ") });
        line("pulse.mode", word(&p.mode));
        line("pulse.channel_weight_scale", p.channel_weight_scale.to_string());
        line("pulse.transfer", word(&p.transfer));
        let i = &self.imaging;
        line("imaging.image_time", i.image_time.to_string());
        line("imaging.gravity", format!("{}, {}, {}", i.gravity[0], i.gravity[1], i.gravity[2]));
        line("imaging.pixel_size", i.pixel_size.to_string());
        line("imaging.width", i.width.to_string());
        line("imaging.height", i.height.to_string());
        line("imaging.photon_scale", i.photon_scale.to_string());
        line("imaging.noise", word(&i.noise));
        line("imaging.deposit", word(&i.deposit));
        let a = &self.analysis;
        line("analysis.t_map", a.t_map.map_or("none".into(), |t| t.to_string()));
        line("analysis.calibration", word(&a.calibration));
        line("analysis.comb_orders", a.comb_orders.to_string());
        line("analysis.lineshape", word(&a.lineshape));
        line("analysis.band", a.band.map_or("none".into(), |(s, e)| format!("{s}..{e}")));
        line("analysis.smoothing", a.smoothing.to_string());
        line("analysis.relative_threshold", a.relative_threshold.to_string());
        line("analysis.noise_threshold", a.noise_threshold.to_string());
        line("analysis.central", word(&a.central));
        line("analysis.pair_delta_m", a.pair_delta_m.to_string());
        line("analysis.min_significance", a.min_significance.to_string());
        let f = &self.faraday;
        line("faraday.amplitude", f.amplitude.to_string());
        line("faraday.decay", f.decay.to_string());
        line("faraday.phase", f.phase.to_string());
        line("faraday.offset", f.offset.to_string());
        line("faraday.sample_rate_hz", f.sample_rate.to_string());
        line("faraday.duration", f.duration.to_string());
        line("faraday.noise_sigma", f.noise_sigma.to_string());
        s
    }
}

mod erased {
    use serde::Serialize;

    /// Snake-case name of a unit enum variant, as serde writes it.
    pub trait Word {
        fn word(&self) -> String;
    }

    impl<T: Serialize> Word for T {
        fn word(&self) -> String {
            match serde_json::to_value(self) {
                Ok(serde_json::Value::String(s)) => s,
                other => panic!("not a unit variant: {other:?}"),
            }
        }
    }
}
