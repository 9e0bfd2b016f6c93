//! Initial atom cloud released from the point trap.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::AtomSpecies;
use crate::rng::{substream, Purpose};

pub type Vec3 = Vector3<f64>;

/// How the initial phase-space coordinates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every coordinate independent.
    Independent,
    /// Atoms come in pairs sharing a velocity and mirrored about the trap
    /// centre; each velocity component is Latin-hypercube stratified over the
    /// pairs. Marginals are unchanged, Monte-Carlo scatter of narrow velocity
    /// classes is much smaller.
    #[default]
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub atom_count: usize,
    /// Per-axis Gaussian σ of the initial cloud, m.
    pub position_sigma: f64,
    /// K
    pub temperature: f64,
    pub rng_seed: u64,
    pub sampling: Sampling,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            atom_count: 100_000,
            // 500 µm MOT diameter taken as the ±2σ extent
            position_sigma: 125e-6,
            temperature: 200e-6,
            rng_seed: 1,
            sampling: Sampling::Stratified,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atom_count == 0 {
            return Err(Error::invalid("ensemble.atom_count", "must be at least 1"));
        }
        if !(self.position_sigma > 0.0 && self.position_sigma.is_finite()) {
            return Err(Error::invalid("ensemble.position_sigma", "must be positive"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("ensemble.temperature", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomState {
    pub position: Vec3,
    /// Position at release.
    pub origin: Vec3,
    pub velocity: Vec3,
    /// Δm channel; `None` until the pulse assigns one.
    pub channel: Option<i8>,
    /// Transfer probability into the kicked momentum state.
    pub flipped_population: f64,
    /// Statistical weight; an atom split into two momentum branches carries
    /// its population in the weights of the two records.
    pub weight: f64,
}

impl AtomState {
    pub fn new(position: Vec3, velocity: Vec3) -> Self {
        AtomState {
            position,
            origin: position,
            velocity,
            channel: None,
            flipped_population: 0.0,
            weight: 1.0,
        }
    }
}

fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    let mut draw = || {
        let n: f64 = rng.sample(StandardNormal);
        n * sigma
    };
    Vec3::new(draw(), draw(), draw())
}

pub fn sample_ensemble(cfg: &EnsembleConfig, species: &AtomSpecies) -> Result<Vec<AtomState>> {
    cfg.validate()?;
    let sigma_v = species.thermal_velocity(cfg.temperature);
    let atoms = match cfg.sampling {
        Sampling::Independent => (0..cfg.atom_count as u64)
            .into_par_iter()
            .map(|i| {
                let r = gaussian3(&mut substream(cfg.rng_seed, Purpose::Position, i), cfg.position_sigma);
                let v = gaussian3(&mut substream(cfg.rng_seed, Purpose::Velocity, i), sigma_v);
                AtomState::new(r, v)
            })
            .collect(),
        Sampling::Stratified => stratified(cfg, sigma_v),
    };
    Ok(atoms)
}

fn stratified(cfg: &EnsembleConfig, sigma_v: f64) -> Vec<AtomState> {
    let pairs = cfg.atom_count / 2;
    // v_x and v_z strata are paired on a Fibonacci lattice: every narrow v_x
    // class then spans v_z evenly, so the fraction of it inside a cropped
    // frame does not fluctuate. v_y is projected out and stays shuffled.
    let mut perm: Vec<u32> = (0..pairs as u32).collect();
    perm.shuffle(&mut substream(cfg.rng_seed, Purpose::Permutation, 0));
    let g = lattice_generator(pairs as u64);
    let offset = substream(cfg.rng_seed, Purpose::Permutation, 1).random_range(0..pairs.max(1) as u64);
    let vz: Vec<u32> = perm
        .iter()
        .map(|&s| ((u64::from(s) * g + offset) % pairs.max(1) as u64) as u32)
        .collect();
    let mut vy: Vec<u32> = (0..pairs as u32).collect();
    vy.shuffle(&mut substream(cfg.rng_seed, Purpose::Permutation, 2));
    let strata = [perm, vy, vz];
    let unit = Normal::standard();
    let n = pairs as f64;
    let open = |p: f64| p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);

    let mut atoms: Vec<AtomState> = (0..pairs)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut vrng = substream(cfg.rng_seed, Purpose::Velocity, j as u64);
            let mut comp = |axis: usize| {
                if sigma_v == 0.0 {
                    return 0.0;
                }
                let u: f64 = vrng.random();
                sigma_v * unit.inverse_cdf(open((f64::from(strata[axis][j]) + u) / n))
            };
            let v = Vec3::new(comp(0), comp(1), comp(2));
            let r = gaussian3(&mut substream(cfg.rng_seed, Purpose::Position, j as u64), cfg.position_sigma);
            [AtomState::new(r, v), AtomState::new(-r, v)]
        })
        .collect();

    if cfg.atom_count % 2 == 1 {
        let i = pairs as u64;
        let r = gaussian3(&mut substream(cfg.rng_seed, Purpose::Position, i), cfg.position_sigma);
        let v = gaussian3(&mut substream(cfg.rng_seed, Purpose::Velocity, i), sigma_v);
        atoms.push(AtomState::new(r, v));
    }
    atoms
}

/// Multiplier closest to n/φ that is coprime with n.
fn lattice_generator(n: u64) -> u64 {
    if n < 3 {
        return 1;
    }
    let phi = 0.5 * (1.0 + 5f64.sqrt());
    let g0 = (n as f64 / phi).round() as u64;
    let gcd = |mut a: u64, mut b: u64| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    (0..n)
        .flat_map(|d| [g0 + d, g0.saturating_sub(d)])
        .find(|&g| g > 0 && g < n && gcd(g, n) == 1)
        .unwrap_or(1)
}
