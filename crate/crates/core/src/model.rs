//! Physical constants, atom species and the coil-to-field model.
//!
//! Fields are in Gauss, currents in Amperes, angular frequencies in rad/s.
//! Hz only appears at I/O boundaries (config files, JSON reports).

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Below this magnitude (G) the field has no usable quantization axis.
pub const DEFAULT_AXIS_EPSILON: f64 = 1e-9;

/// Atom plus Raman-beam properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomSpecies {
    /// kg
    pub mass: f64,
    /// Raman beam wavelength, m
    pub wavelength: f64,
    /// g_F μ_B / ħ in rad·s⁻¹·G⁻¹
    pub gyromag: f64,
}

impl AtomSpecies {
    /// ⁸⁵Rb on the D2 line, F=3 ground state.
    pub fn rubidium85() -> Self {
        AtomSpecies {
            mass: 1.40999e-25,
            wavelength: 780.24e-9,
            gyromag: TAU * 466.74e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::invalid("species.mass", "must be positive"));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::invalid("species.wavelength", "must be positive"));
        }
        if !(self.gyromag > 0.0 && self.gyromag.is_finite()) {
            return Err(Error::invalid("species.gyromag", "must be positive"));
        }
        Ok(())
    }

    /// Single-beam wavenumber k = 2π/λ.
    pub fn wavenumber(&self) -> f64 {
        TAU / self.wavelength
    }

    /// Single-photon recoil velocity ħk/M.
    pub fn recoil_velocity(&self) -> f64 {
        HBAR * self.wavenumber() / self.mass
    }

    /// Recoil frequency ħk²/2M (rad/s).
    pub fn recoil_frequency(&self) -> f64 {
        let k = self.wavenumber();
        HBAR * k * k / (2.0 * self.mass)
    }

    /// Per-axis thermal velocity spread sqrt(k_B T / M).
    pub fn thermal_velocity(&self, temperature: f64) -> f64 {
        (BOLTZMANN * temperature / self.mass).sqrt()
    }
}

impl Default for AtomSpecies {
    fn default() -> Self {
        Self::rubidium85()
    }
}

/// One Helmholtz pair: B = slope·(current − compensation) + background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoilAxis {
    /// G/A
    pub slope: f64,
    /// A
    pub compensation: f64,
    /// A
    pub current: f64,
    /// G
    pub background: f64,
}

impl CoilAxis {
    pub fn field(&self) -> f64 {
        self.slope * (self.current - self.compensation) + self.background
    }
}

impl CoilAxis {
    /// Axis sitting at its compensation point.
    pub fn nulled(slope: f64, compensation: f64) -> Self {
        CoilAxis {
            slope,
            compensation,
            current: compensation,
            background: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoilModel {
    pub x: CoilAxis,
    pub y: CoilAxis,
    pub z: CoilAxis,
}

impl Default for CoilModel {
    /// All three pairs at 1.524 G/A; z uses the measured 243.1 mA compensation,
    /// x and y use arbitrary distinct offsets.
    fn default() -> Self {
        CoilModel {
            x: CoilAxis::nulled(1.524, 0.1180),
            y: CoilAxis::nulled(1.524, 0.1650),
            z: CoilAxis::nulled(1.524, 0.2431),
        }
    }
}

impl CoilModel {
    pub fn axes(&self) -> [&CoilAxis; 3] {
        [&self.x, &self.y, &self.z]
    }

    pub fn axes_mut(&mut self) -> [&mut CoilAxis; 3] {
        [&mut self.x, &mut self.y, &mut self.z]
    }

    pub fn currents(&self) -> [f64; 3] {
        [self.x.current, self.y.current, self.z.current]
    }

    pub fn compensation_currents(&self) -> [f64; 3] {
        [self.x.compensation, self.y.compensation, self.z.compensation]
    }

    pub fn with_currents(mut self, currents: [f64; 3]) -> Self {
        for (axis, i) in self.axes_mut().into_iter().zip(currents) {
            axis.current = i;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in ["x", "y", "z"].iter().zip(self.axes()) {
            let finite = [axis.slope, axis.compensation, axis.current, axis.background]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::invalid(format!("coils.{name}"), "values must be finite"));
            }
        }
        Ok(())
    }
}

/// Field at the cloud, Gauss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FieldVector {
    pub bx: f64,
    pub by: f64,
    pub bz: f64,
}

impl FieldVector {
    pub const ZERO: FieldVector = FieldVector {
        bx: 0.0,
        by: 0.0,
        bz: 0.0,
    };

    pub fn new(bx: f64, by: f64, bz: f64) -> Self {
        FieldVector { bx, by, bz }
    }

    pub fn magnitude(&self) -> f64 {
        (self.bx * self.bx + self.by * self.by + self.bz * self.bz).sqrt()
    }

    /// Unit quantization axis, `None` when |B| < `epsilon`.
    pub fn axis(&self, epsilon: f64) -> Option<[f64; 3]> {
        let m = self.magnitude();
        (m >= epsilon).then(|| [self.bx / m, self.by / m, self.bz / m])
    }

    /// cos²θ between the field and the beam axis x; `None` for a degenerate field.
    pub fn longitudinal_fraction(&self, epsilon: f64) -> Option<f64> {
        self.axis(epsilon).map(|a| a[0] * a[0])
    }

    pub fn scaled(&self, c: f64) -> Self {
        FieldVector::new(self.bx * c, self.by * c, self.bz * c)
    }
}

pub fn field_at(coils: &CoilModel) -> FieldVector {
    FieldVector::new(coils.x.field(), coils.y.field(), coils.z.field())
}

/// ω_L = (g_F μ_B/ħ)·|B|.
pub fn larmor_frequency(field: &FieldVector, species: &AtomSpecies) -> f64 {
    species.gyromag * field.magnitude()
}

/// x-velocity of the class with 2k·v₀ = Δm·ω_L + δ₁₂.
pub fn resonant_velocity(delta_m: i8, larmor: f64, delta12: f64, species: &AtomSpecies) -> f64 {
    (f64::from(delta_m) * larmor + delta12) / (2.0 * species.wavenumber())
}
