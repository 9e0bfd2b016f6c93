//! The velocity-selective Raman pulse.
//!
//! Each atom couples its initial momentum state to a single partner 2ħk away.
//! The kick direction is whichever of the two counter-propagating absorption
//! orders sits closer to resonance; the effective detuning is held fixed at its
//! pre-pulse value for the whole pulse.

use std::f64::consts::TAU;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{AtomState, Vec3};
use crate::error::{Error, Result};
use crate::model::{larmor_frequency, AtomSpecies, FieldVector, DEFAULT_AXIS_EPSILON};
use crate::rng::{substream, Purpose};

pub const CHANNELS: [i8; 5] = [-2, -1, 0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PulseMode {
    /// Atoms within |δ_eff| < Ω are reversed at the pulse midpoint.
    InstantaneousPi,
    #[default]
    RabiCycling,
}

/// How the end-of-pulse two-level state is turned into classical records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    /// One channel drawn per atom, final momentum state drawn with probability P.
    Sampled,
    /// Channel weights and transfer probabilities carried as record weights:
    /// an unkicked and a kicked record per coupled channel.
    #[default]
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sideband {
    pub order: i32,
    /// Relative field amplitude; the line's Rabi frequency is amplitude·Ω.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseConfig {
    /// Resonant two-photon Rabi frequency, rad/s.
    pub rabi_freq: f64,
    /// s
    pub duration: f64,
    /// Pulse start after release, s.
    pub start_time: f64,
    /// Two-beam frequency offset ω₁ − ω₂, rad/s.
    pub delta12: f64,
    /// Empty means a single carrier line at δ₁₂.
    pub sidebands: Vec<Sideband>,
    /// rad/s
    pub modulation_freq: f64,
    /// rad/s
    pub light_shift: f64,
    pub mode: PulseMode,
    /// Relative strength of |Δm| = 2 couplings.
    pub channel_weight_scale: f64,
    pub transfer: Transfer,
}

impl Default for PulseConfig {
    fn default() -> Self {
        PulseConfig {
            rabi_freq: TAU * 10e3,
            duration: 5e-3,
            start_time: 15e-3,
            delta12: 0.0,
            sidebands: Vec::new(),
            modulation_freq: TAU * 100e3,
            light_shift: 0.0,
            mode: PulseMode::RabiCycling,
            channel_weight_scale: 0.0,
            transfer: Transfer::Mixture,
        }
    }
}

impl PulseConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("pulse.{name}"), "must be finite and non-negative"))
            }
        };
        nonneg("rabi_freq", self.rabi_freq)?;
        nonneg("duration", self.duration)?;
        nonneg("start_time", self.start_time)?;
        nonneg("channel_weight_scale", self.channel_weight_scale)?;
        nonneg("modulation_freq", self.modulation_freq)?;
        if !self.delta12.is_finite() || !self.light_shift.is_finite() {
            return Err(Error::invalid("pulse.delta12", "must be finite"));
        }
        for (i, a) in self.sidebands.iter().enumerate() {
            if self.sidebands[..i].iter().any(|b| b.order == a.order) {
                return Err(Error::invalid("pulse.sidebands", format!("order {} listed twice", a.order)));
            }
            if !a.amplitude.is_finite() {
                return Err(Error::invalid("pulse.sidebands", "amplitudes must be finite"));
            }
        }
        Ok(())
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }

    /// (frequency offset, Rabi frequency) of every spectral line.
    pub fn lines(&self) -> Vec<(f64, f64)> {
        if self.sidebands.is_empty() {
            vec![(self.delta12, self.rabi_freq)]
        } else {
            self.sidebands
                .iter()
                .map(|s| (self.delta12 + f64::from(s.order) * self.modulation_freq, s.amplitude.abs() * self.rabi_freq))
                .collect()
        }
    }

    /// Equal-amplitude comb of orders `-n..=n`.
    pub fn with_comb(mut self, n: i32) -> Self {
        self.sidebands = (-n..=n).map(|order| Sideband { order, amplitude: 1.0 }).collect();
        self
    }
}

/// Net detuning from resonance for the +2ħk absorption order.
///
/// δ_eff = 2k·v_x + 4δ_r + δ_LS − Δm·ω_L − δ₁₂
pub fn two_photon_detuning(v_x: f64, delta_m: i8, larmor: f64, cfg: &PulseConfig, species: &AtomSpecies) -> f64 {
    detuning(v_x, delta_m, larmor, cfg.delta12, 1, cfg.light_shift, species)
}

/// Net detuning for kick direction `kick` (±1) and a line at offset `line`.
/// The −2ħk order is the mirror image of the +2ħk one under v → −v, δ₁₂ → −δ₁₂.
pub fn detuning(v_x: f64, delta_m: i8, larmor: f64, line: f64, kick: i8, light_shift: f64, species: &AtomSpecies) -> f64 {
    let s = f64::from(kick);
    let k = species.wavenumber();
    s * (2.0 * k * v_x - f64::from(delta_m) * larmor - line) + 4.0 * species.recoil_frequency() + light_shift
}

/// Rabi formula for a two-level system with constant coupling and detuning.
pub fn transfer_probability(detuning: f64, rabi: f64, t: f64) -> f64 {
    let w2 = rabi * rabi + detuning * detuning;
    if rabi == 0.0 || !w2.is_finite() {
        return 0.0;
    }
    let s = (w2.sqrt() * t / 2.0).sin();
    (rabi * rabi / w2 * s * s).clamp(0.0, 1.0)
}

/// Transferred population averaged over the pulse.
pub fn mean_transfer(detuning: f64, rabi: f64, t: f64) -> f64 {
    let w2 = rabi * rabi + detuning * detuning;
    if rabi == 0.0 || t == 0.0 || !w2.is_finite() {
        return 0.0;
    }
    let w = w2.sqrt();
    rabi * rabi / w2 * (0.5 - (w * t).sin() / (2.0 * w * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub kick: i8,
    pub detuning: f64,
    pub rabi: f64,
}

/// Strongest line/kick combination for one atom in one channel, ranked by the
/// Rabi envelope Ω²/(Ω² + δ²).
pub fn best_coupling(v_x: f64, delta_m: i8, larmor: f64, cfg: &PulseConfig, species: &AtomSpecies) -> Coupling {
    let mut best = Coupling {
        kick: 1,
        detuning: f64::INFINITY,
        rabi: 0.0,
    };
    let mut best_score = -1.0;
    for (line, rabi) in cfg.lines() {
        for kick in [1i8, -1] {
            let d = detuning(v_x, delta_m, larmor, line, kick, cfg.light_shift, species);
            let w2 = rabi * rabi + d * d;
            let score = if w2 > 0.0 { rabi * rabi / w2 } else { 0.0 };
            if score > best_score {
                best_score = score;
                best = Coupling { kick, detuning: d, rabi };
            }
        }
    }
    best
}

/// Normalized Δm weights: cos²θ for Δm=0, sin²θ/2 for ±1, scale·sin²θ/2 for ±2,
/// θ measured from the beam axis. A degenerate field weights every allowed
/// channel equally.
pub fn channel_weights(field: &FieldVector, scale: f64) -> [f64; 5] {
    let raw = match field.longitudinal_fraction(DEFAULT_AXIS_EPSILON) {
        Some(c2) => {
            let s2 = 1.0 - c2;
            [scale * s2 / 2.0, s2 / 2.0, c2, s2 / 2.0, scale * s2 / 2.0]
        }
        None => {
            let w2 = if scale > 0.0 { 1.0 } else { 0.0 };
            [w2, 1.0, 1.0, 1.0, w2]
        }
    };
    let total: f64 = raw.iter().sum();
    raw.map(|w| w / total)
}

pub fn assign_channels(atoms: &mut [AtomState], field: &FieldVector, cfg: &PulseConfig, seed: u64) {
    let weights = channel_weights(field, cfg.channel_weight_scale);
    atoms.par_iter_mut().enumerate().for_each(|(i, atom)| {
        let u: f64 = substream(seed, Purpose::Channel, i as u64).random();
        let mut acc = 0.0;
        let mut chosen = 0;
        for (c, w) in CHANNELS.iter().zip(weights) {
            if w > 0.0 {
                chosen = *c;
                acc += w;
                if u < acc {
                    break;
                }
            }
        }
        atom.channel = Some(chosen);
    });
}

struct ChannelResponse {
    channel: i8,
    weight: f64,
    kick: i8,
    transfer: f64,
    mean: f64,
}

fn response(v_x: f64, channel: i8, weight: f64, larmor: f64, cfg: &PulseConfig, species: &AtomSpecies) -> ChannelResponse {
    let c = best_coupling(v_x, channel, larmor, cfg, species);
    let (transfer, mean) = match cfg.mode {
        PulseMode::RabiCycling => (
            transfer_probability(c.detuning, c.rabi, cfg.duration),
            mean_transfer(c.detuning, c.rabi, cfg.duration),
        ),
        PulseMode::InstantaneousPi => {
            if c.detuning.abs() < c.rabi {
                (1.0, 0.5)
            } else {
                (0.0, 0.0)
            }
        }
    };
    ChannelResponse {
        channel,
        weight,
        kick: c.kick,
        transfer,
        mean,
    }
}

/// Applies the pulse to atoms already propagated to its start time. Returns the
/// atoms at the end of the pulse.
pub fn apply_pulse(
    atoms: Vec<AtomState>,
    field: &FieldVector,
    cfg: &PulseConfig,
    species: &AtomSpecies,
    gravity: Vec3,
    image_time: f64,
    seed: u64,
) -> Result<Vec<AtomState>> {
    cfg.validate()?;
    if cfg.end_time() >= image_time {
        return Err(Error::invalid(
            "pulse.duration",
            format!("pulse ends at {:.6} s, not before the image at {:.6} s", cfg.end_time(), image_time),
        ));
    }
    let larmor = larmor_frequency(field, species);
    let kick_dv = 2.0 * species.recoil_velocity();
    let d = cfg.duration;
    let drift = |a: &AtomState| a.position + a.velocity * d + gravity * (0.5 * d * d);
    let vel = |a: &AtomState| a.velocity + gravity * d;
    let x_hat = Vec3::x();

    match cfg.transfer {
        Transfer::Sampled => {
            if atoms.iter().any(|a| a.channel.is_none()) {
                return Err(Error::Input("channels must be assigned before a sampled pulse".into()));
            }
            Ok(atoms
                .into_par_iter()
                .enumerate()
                .map(|(i, a)| {
                    let r = response(a.velocity.x, a.channel.unwrap_or(0), 1.0, larmor, cfg, species);
                    let flipped = r.transfer > 0.0 && substream(seed, Purpose::Transfer, i as u64).random::<f64>() < r.transfer;
                    let s = f64::from(r.kick);
                    let mut out = a;
                    out.flipped_population = r.transfer;
                    out.position = drift(&a);
                    out.velocity = vel(&a);
                    match cfg.mode {
                        PulseMode::RabiCycling => out.position += x_hat * (s * kick_dv * r.mean * d),
                        PulseMode::InstantaneousPi if flipped => out.position += x_hat * (s * kick_dv * d / 2.0),
                        PulseMode::InstantaneousPi => {}
                    }
                    if flipped {
                        out.velocity += x_hat * (s * kick_dv);
                    }
                    out
                })
                .collect())
        }
        Transfer::Mixture => {
            let weights = channel_weights(field, cfg.channel_weight_scale);
            Ok(atoms
                .into_par_iter()
                .flat_map_iter(|a| {
                    let responses: Vec<ChannelResponse> = CHANNELS
                        .iter()
                        .zip(weights)
                        .filter(|(_, w)| *w > 0.0)
                        .map(|(&c, w)| response(a.velocity.x, c, w, larmor, cfg, species))
                        .collect();
                    mixture_records(a, &responses, cfg.mode, drift(&a), vel(&a), kick_dv, d)
                })
                .collect())
        }
    }
}

fn mixture_records(
    a: AtomState,
    responses: &[ChannelResponse],
    mode: PulseMode,
    position: Vec3,
    velocity: Vec3,
    kick_dv: f64,
    d: f64,
) -> Vec<AtomState> {
    let x_hat = Vec3::x();
    let total: f64 = responses.iter().map(|r| r.weight * r.transfer).sum();
    if total == 0.0 {
        // untouched atoms keep their weight bit-for-bit
        let stay = responses.iter().max_by(|p, q| p.weight.total_cmp(&q.weight)).map(|r| r.channel);
        return vec![AtomState {
            position,
            velocity,
            channel: stay,
            flipped_population: 0.0,
            ..a
        }];
    }

    // each channel is a separate internal state with its own drift during the pulse
    let mut out = Vec::with_capacity(2 * responses.len());
    for r in responses {
        let s = f64::from(r.kick);
        let (stay, kicked) = match mode {
            PulseMode::RabiCycling => {
                let drift = s * kick_dv * r.mean * d;
                (drift, drift)
            }
            PulseMode::InstantaneousPi => (0.0, s * kick_dv * d / 2.0),
        };
        let record = |offset: f64, dv: f64, weight: f64| AtomState {
            position: position + x_hat * offset,
            velocity: velocity + x_hat * dv,
            channel: Some(r.channel),
            flipped_population: total,
            weight: a.weight * weight,
            ..a
        };
        if r.transfer < 1.0 {
            out.push(record(stay, 0.0, r.weight * (1.0 - r.transfer)));
        }
        if r.transfer > 0.0 {
            out.push(record(kicked, s * kick_dv, r.weight * r.transfer));
        }
    }
    out
}
