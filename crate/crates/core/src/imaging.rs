//! Ballistic flight, camera projection and frame arithmetic.
//!
//! The camera looks along y, so a frame is the x (beam) by z (vertical)
//! column density. Row 0 is the top of the image.

use rand::Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{AtomState, Vec3};
use crate::error::{Error, Result};
use crate::model::{field_at, AtomSpecies, CoilModel};
use crate::raman::{apply_pulse, assign_channels, PulseConfig, Transfer};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    #[default]
    None,
    Poisson,
}

/// How atom records are turned into pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Deposit {
    /// Each record lands in the pixel containing its position.
    Point,
    /// Each record is spread over the initial cloud profile around its
    /// ballistic displacement from release. The sampled start position is
    /// replaced by its exact distribution, which removes most of the
    /// Monte-Carlo scatter of the image.
    #[default]
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagingConfig {
    /// Imaging time after release, s.
    pub image_time: f64,
    /// m/s²
    pub gravity: [f64; 3],
    /// Object-plane pixel pitch, m.
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    /// Counts per atom.
    pub photon_scale: f64,
    pub noise: Noise,
    pub deposit: Deposit,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        ImagingConfig {
            image_time: 40e-3,
            gravity: [0.0, 0.0, -9.81],
            pixel_size: 24e-6,
            width: 512,
            height: 512,
            photon_scale: 10.0,
            noise: Noise::None,
            deposit: Deposit::Cloud,
        }
    }
}

impl ImagingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.image_time > 0.0 && self.image_time.is_finite()) {
            return Err(Error::invalid("imaging.image_time", "must be positive"));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::invalid("imaging.pixel_size", "must be positive"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid("imaging.width", "extent must be at least 16x16 pixels"));
        }
        if !(self.photon_scale > 0.0 && self.photon_scale.is_finite()) {
            return Err(Error::invalid("imaging.photon_scale", "must be positive"));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("imaging.gravity", "must be finite"));
        }
        Ok(())
    }

    pub fn gravity(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    /// Frame geometry centred on a particle released at rest from the origin.
    pub fn geometry(&self) -> Geometry {
        let t = self.image_time;
        let cx = 0.5 * self.gravity[0] * t * t;
        let cz = 0.5 * self.gravity[2] * t * t;
        Geometry {
            width: self.width,
            height: self.height,
            pixel_size: self.pixel_size,
            left: cx - 0.5 * self.width as f64 * self.pixel_size,
            top: cz + 0.5 * self.height as f64 * self.pixel_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    /// x of the left edge of column 0, m.
    pub left: f64,
    /// z of the top edge of row 0, m.
    pub top: f64,
}

impl Geometry {
    pub fn column_x(&self, col: usize) -> f64 {
        self.left + (col as f64 + 0.5) * self.pixel_size
    }

    pub fn row_z(&self, row: usize) -> f64 {
        self.top - (row as f64 + 0.5) * self.pixel_size
    }

    pub fn pixel_of(&self, x: f64, z: f64) -> Option<usize> {
        let c = ((x - self.left) / self.pixel_size).floor();
        let r = ((self.top - z) / self.pixel_size).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height {
            Some(r as usize * self.width + c as usize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Raw,
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub kind: FrameKind,
    pub image_time: f64,
    pub pulse_on: bool,
    /// A
    pub currents: [f64; 3],
    pub seed: u64,
    /// Weighted atoms that landed outside the extent.
    pub outside_fraction: f64,
    /// Set when no atom landed inside the frame.
    pub cloud_outside: bool,
    /// Labels of the two parents of a difference frame.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub geometry: Geometry,
    /// Row-major counts, `height` rows of `width`.
    pub counts: Vec<f64>,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.geometry.width;
        &self.counts[r * w..(r + 1) * w]
    }

    pub fn label(&self) -> String {
        format!(
            "{:?}/pulse={}/seed={}/I=({:.6},{:.6},{:.6})",
            self.meta.kind, self.meta.pulse_on, self.meta.seed, self.meta.currents[0], self.meta.currents[1], self.meta.currents[2]
        )
    }
}

/// Free flight over `dt` under constant acceleration.
pub fn propagate(atoms: &mut [AtomState], dt: f64, gravity: Vec3) {
    debug_assert!(dt >= 0.0);
    atoms.par_iter_mut().for_each(|a| {
        a.position = a.position + a.velocity * dt + gravity * (0.5 * dt * dt);
        a.velocity += gravity * dt;
    });
}

pub fn propagate_between(atoms: &mut [AtomState], from_t: f64, to_t: f64, gravity: Vec3) -> Result<()> {
    if to_t < from_t {
        return Err(Error::Input(format!("cannot propagate backwards from {from_t} s to {to_t} s")));
    }
    propagate(atoms, to_t - from_t, gravity);
    Ok(())
}

/// Everything needed to turn an ensemble into a camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub species: &'a AtomSpecies,
    pub coils: &'a CoilModel,
    pub pulse: &'a PulseConfig,
    pub imaging: &'a ImagingConfig,
    /// Per-axis σ of the cloud at release, m; the kernel of the cloud deposit.
    pub cloud_sigma: f64,
    pub seed: u64,
}

/// Release → pulse → image. With `pulse_on = false` the atoms fly through the
/// same timing steps untouched, so pulse-on and pulse-off frames of the same
/// ensemble differ only where atoms were actually transferred.
pub fn run_sequence(ensemble: &[AtomState], seq: &Sequence<'_>, pulse_on: bool) -> Result<Frame> {
    seq.imaging.validate()?;
    seq.pulse.validate()?;
    let t_i = seq.imaging.image_time;
    let pulse = seq.pulse;
    if pulse.end_time() >= t_i {
        return Err(Error::invalid(
            "imaging.image_time",
            format!("must exceed pulse end {:.6} s", pulse.end_time()),
        ));
    }
    let g = seq.imaging.gravity();
    let mut atoms = ensemble.to_vec();
    propagate(&mut atoms, pulse.start_time, g);
    let mut atoms = if pulse_on {
        let field = field_at(seq.coils);
        if pulse.transfer == Transfer::Sampled {
            assign_channels(&mut atoms, &field, pulse, seq.seed);
        }
        apply_pulse(atoms, &field, pulse, seq.species, g, t_i, seq.seed)?
    } else {
        propagate(&mut atoms, pulse.duration, g);
        atoms
    };
    propagate(&mut atoms, t_i - pulse.end_time(), g);

    let geometry = seq.imaging.geometry();
    let (counts, outside) = match seq.imaging.deposit {
        Deposit::Point => histogram(&atoms, &geometry, seq.imaging.photon_scale),
        Deposit::Cloud => cloud_histogram(&atoms, &geometry, seq.imaging.photon_scale, seq.cloud_sigma)?,
    };
    let total_weight: f64 = atoms.iter().map(|a| a.weight).sum();
    let mut frame = Frame {
        geometry,
        counts,
        meta: FrameMeta {
            kind: FrameKind::Raw,
            image_time: t_i,
            pulse_on,
            currents: seq.coils.currents(),
            seed: seq.seed,
            outside_fraction: if total_weight > 0.0 { outside / total_weight } else { 0.0 },
            cloud_outside: total_weight > 0.0 && outside >= total_weight,
            parents: Vec::new(),
        },
    };
    if frame.meta.cloud_outside {
        tracing::warn!("propagated cloud lies entirely outside the image extent");
    }
    if seq.imaging.noise == Noise::Poisson {
        add_poisson_noise(&mut frame, seq.seed, u64::from(pulse_on));
    }
    Ok(frame)
}

/// Weighted 2-D histogram in the x–z plane. Pixel lookup runs in parallel,
/// accumulation is sequential in atom order so sums are reproducible.
pub fn histogram(atoms: &[AtomState], geometry: &Geometry, photon_scale: f64) -> (Vec<f64>, f64) {
    let idx: Vec<Option<usize>> = atoms
        .par_iter()
        .map(|a| geometry.pixel_of(a.position.x, a.position.z))
        .collect();
    let mut counts = vec![0.0; geometry.width * geometry.height];
    let mut outside = 0.0;
    for (a, i) in atoms.iter().zip(idx) {
        match i {
            Some(i) => counts[i] += a.weight * photon_scale,
            None => outside += a.weight,
        }
    }
    (counts, outside)
}

/// Pixel-integrated, normalized Gaussian kernel, taps −h..=h.
fn pixel_kernel(sigma: f64, pixel: f64) -> Vec<f64> {
    // linear deposit already blurs by a triangle of variance pixel²/6
    let s2 = sigma * sigma - pixel * pixel / 6.0;
    if s2 <= (0.05 * pixel).powi(2) {
        return vec![1.0];
    }
    let s = s2.sqrt();
    let h = (6.0 * s / pixel).ceil() as i64;
    let cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / (s * std::f64::consts::SQRT_2)));
    let k: Vec<f64> = (-h..=h)
        .map(|i| cdf((i as f64 + 0.5) * pixel) - cdf((i as f64 - 0.5) * pixel))
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Linear (cloud-in-cell) deposit of ballistic displacements on a padded
/// grid, then a separable convolution with the release-cloud profile.
/// Accumulation runs in atom order so sums are reproducible.
pub fn cloud_histogram(atoms: &[AtomState], geometry: &Geometry, photon_scale: f64, sigma: f64) -> Result<(Vec<f64>, f64)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("ensemble.position_sigma", "must be finite and non-negative"));
    }
    let dx = geometry.pixel_size;
    let kernel = pixel_kernel(sigma, dx);
    let h = kernel.len() / 2;
    let (w, ht) = (geometry.width, geometry.height);
    let (pw, ph) = (w + 2 * h + 1, ht + 2 * h + 1);
    let mut grid = vec![0.0; pw * ph];
    let mut total = 0.0;
    let mut lost = 0.0;

    let cells: Vec<Option<(usize, usize, f64, f64)>> = atoms
        .par_iter()
        .map(|a| {
            let d = a.position - a.origin;
            let fx = (d.x - geometry.left) / dx - 0.5 + h as f64;
            let fz = (geometry.top - d.z) / dx - 0.5 + h as f64;
            let (cx, cz) = (fx.floor(), fz.floor());
            if cx < 0.0 || cz < 0.0 || cx + 1.0 >= pw as f64 || cz + 1.0 >= ph as f64 {
                return None;
            }
            Some((cx as usize, cz as usize, fx - cx, fz - cz))
        })
        .collect();
    for (a, cell) in atoms.iter().zip(cells) {
        total += a.weight;
        let Some((cx, cz, tx, tz)) = cell else {
            lost += a.weight;
            continue;
        };
        let m = a.weight * photon_scale;
        let i = cz * pw + cx;
        grid[i] += m * (1.0 - tx) * (1.0 - tz);
        grid[i + 1] += m * tx * (1.0 - tz);
        grid[i + pw] += m * (1.0 - tx) * tz;
        grid[i + pw + 1] += m * tx * tz;
    }

    // rows: padded grid → width-cropped rows
    let rows: Vec<f64> = grid
        .par_chunks(pw)
        .flat_map_iter(|row| {
            let kernel = &kernel;
            (0..w).map(move |c| kernel.iter().enumerate().map(|(k, kv)| kv * row[c + 2 * h - k]).sum::<f64>())
        })
        .collect();
    // columns
    let mut counts = vec![0.0; w * ht];
    counts.par_chunks_mut(w).enumerate().for_each(|(r, out)| {
        for (k, kv) in kernel.iter().enumerate() {
            let src = &rows[(r + 2 * h - k) * w..(r + 2 * h - k + 1) * w];
            for (o, s) in out.iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    });
    let inside: f64 = counts.iter().sum::<f64>() / photon_scale;
    let outside = lost + ((total - lost) - inside).max(0.0);
    Ok((counts, outside))
}

fn add_poisson_noise(frame: &mut Frame, seed: u64, stream: u64) {
    let w = frame.geometry.width;
    frame.counts.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let mut rng = substream(seed, Purpose::PixelNoise, (stream << 32) | r as u64);
        for c in row.iter_mut() {
            *c = if *c > 0.0 {
                Poisson::new(*c).map(|p| rng.sample(p)).unwrap_or(*c)
            } else {
                0.0
            };
        }
    });
}

pub fn difference_frame(with_pulse: &Frame, without_pulse: &Frame) -> Result<Frame> {
    if with_pulse.geometry != without_pulse.geometry {
        return Err(Error::GeometryMismatch(format!(
            "{:?} vs {:?}",
            with_pulse.geometry, without_pulse.geometry
        )));
    }
    if with_pulse.meta.seed != without_pulse.meta.seed {
        return Err(Error::GeometryMismatch(format!(
            "frames come from different ensembles (seed {} vs {})",
            with_pulse.meta.seed, without_pulse.meta.seed
        )));
    }
    let counts = with_pulse
        .counts
        .iter()
        .zip(&without_pulse.counts)
        .map(|(a, b)| a - b)
        .collect();
    let mut meta = with_pulse.meta.clone();
    meta.kind = FrameKind::Difference;
    meta.parents = vec![with_pulse.label(), without_pulse.label()];
    Ok(Frame {
        geometry: with_pulse.geometry,
        counts,
        meta,
    })
}

/// Column sums over a band of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    /// Column centres, m.
    pub x: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Profile {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        if self.x.len() < 2 {
            return 0.0;
        }
        (self.x[self.x.len() - 1] - self.x[0]) / (self.x.len() - 1) as f64
    }

    /// Same counts on an abscissa stretched by `factor`, mimicking a wrong pixel calibration.
    pub fn rescaled(&self, factor: f64) -> Profile {
        Profile {
            x: self.x.iter().map(|x| x * factor).collect(),
            counts: self.counts.clone(),
        }
    }
}

pub fn cross_section(frame: &Frame, band: std::ops::Range<usize>) -> Result<Profile> {
    let g = &frame.geometry;
    if band.is_empty() || band.end > g.height {
        return Err(Error::BadBand {
            start: band.start,
            end: band.end,
            height: g.height,
        });
    }
    let mut counts = vec![0.0; g.width];
    for r in band {
        for (acc, v) in counts.iter_mut().zip(frame.row(r)) {
            *acc += v;
        }
    }
    Ok(Profile {
        x: (0..g.width).map(|c| g.column_x(c)).collect(),
        counts,
    })
}

/// Cross-section over every row.
pub fn full_cross_section(frame: &Frame) -> Profile {
    cross_section(frame, 0..frame.geometry.height).expect("full band is never empty")
}
