//! Field recovery from stripe profiles.
//!
//! A stripe in a difference image is a resonant velocity class that has been
//! kicked away: enhancement where the kicked atoms land, depletion where they
//! came from, so each stripe integrates to zero. Stripes are fitted either
//! with free heavy-tailed lobes or with a template predicted from the pulse
//! timing; the template is what separates the ±1 stripes once they overlap.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{self, minimize, CurveFit, CurveModel, FitOutcome, LeastSquares};
use crate::imaging::Profile;
use crate::model::AtomSpecies;
use crate::raman::{detuning, mean_transfer, transfer_probability, PulseConfig, PulseMode};

/// Centred boxcar average; the window shrinks at the edges.
pub fn smooth(y: &[f64], width: usize) -> Vec<f64> {
    let h = width / 2;
    let n = y.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(n);
            y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Robust σ of a noise sequence from the median absolute deviation.
pub fn robust_sigma(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let mut v = y.to_vec();
    v.sort_by(f64::total_cmp);
    let med = v[v.len() / 2];
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    1.4826 * dev[dev.len() / 2]
}

/// Pixel-to-pixel noise estimate that ignores smooth structure.
fn difference_noise(y: &[f64]) -> f64 {
    let d: Vec<f64> = y.windows(3).map(|w| (w[1] - 0.5 * (w[0] + w[2])) / 1.5f64.sqrt()).collect();
    robust_sigma(&d)
}

/// Indices of local maxima of `y` above `threshold`, strongest first within
/// a plateau, left to right overall.
pub fn local_maxima(y: &[f64], threshold: f64) -> Vec<usize> {
    let n = y.len();
    (1..n.saturating_sub(1))
        .filter(|&i| y[i] > threshold && y[i] > y[i - 1] && y[i] >= y[i + 1])
        .collect()
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    let u = (x - mu) / sigma;
    (-0.5 * u * u).exp()
}

/// How stripe centres are tied together.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// One free centre per stripe.
    Free(usize),
    /// ±1 stripes at m ± s/2, optional Δm = 0 stripe at m, further stripes free.
    Pair { central: bool, extra: usize },
    /// Stripe n at c₀ + n·Δx.
    Comb(Vec<i32>),
}

impl Layout {
    /// Rows: stripes; columns: centre parameters.
    fn matrix(&self) -> DMatrix<f64> {
        match self {
            Layout::Free(n) => DMatrix::identity(*n, *n),
            Layout::Pair { central, extra } => {
                let rows = 2 + usize::from(*central) + extra;
                let cols = 2 + extra;
                let mut l = DMatrix::zeros(rows, cols);
                l[(0, 0)] = 1.0;
                l[(0, 1)] = -0.5;
                l[(1, 0)] = 1.0;
                l[(1, 1)] = 0.5;
                let mut r = 2;
                if *central {
                    l[(2, 0)] = 1.0;
                    r = 3;
                }
                for e in 0..*extra {
                    l[(r + e, 2 + e)] = 1.0;
                }
                l
            }
            Layout::Comb(orders) => {
                DMatrix::from_fn(orders.len(), 2, |i, j| if j == 0 { 1.0 } else { f64::from(orders[i]) })
            }
        }
    }
}

/// Heavy-tailed lobe (1 + u²/(m·w²))^(−m) with u = x − μ, and its
/// derivatives in μ, w and m. Tends to a Gaussian of σ = w as m → ∞; the
/// Lorentzian wings of a power-broadened velocity class are m = 1.
fn lobe(x: f64, mu: f64, w: f64, m: f64) -> [f64; 4] {
    let u = x - mu;
    let q = 1.0 + u * u / (m * w * w);
    let p = q.powf(-m);
    [
        p,
        p * 2.0 * u / (w * w * q),
        p * 2.0 * u * u / (w * w * w * q),
        p * (-q.ln() + (q - 1.0) / q),
    ]
}

/// Exponent of the lobe from its unconstrained parameter; above ½ every lobe
/// has finite area.
fn exponent(p: f64) -> f64 {
    0.5 + p.abs()
}

/// One stripe tabulated on a uniform grid about its symmetry point, unit peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeTemplate {
    /// Position of the first sample, m.
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
    /// Enhancement-lobe half width at half maximum over √(2 ln 2), m.
    pub width: f64,
}

impl StripeTemplate {
    /// Single-channel stripe predicted from the pulse and imaging timing.
    ///
    /// Atoms at velocity w from the stripe centre follow the same transfer,
    /// kick and drift rules as the simulated pulse; the displaced mass is
    /// smoothed with the cloud kernel `kernel_sigma`. The velocity density is
    /// taken as flat across the stripe.
    pub fn physical(pulse: &PulseConfig, image_time: f64, kernel_sigma: f64, species: &AtomSpecies) -> Result<Self> {
        pulse.validate()?;
        if !(kernel_sigma > 0.0 && kernel_sigma.is_finite()) {
            return Err(Error::invalid("ensemble.position_sigma", "must be positive"));
        }
        if pulse.end_time() >= image_time {
            return Err(Error::invalid("pulse.duration", "pulse must end before the image"));
        }
        let rabi = pulse.lines().iter().map(|l| l.1).fold(0.0, f64::max);
        if rabi <= 0.0 {
            return Err(Error::invalid("pulse.rabi_freq", "must be positive for a stripe template"));
        }
        let k = species.wavenumber();
        let kick_dv = 2.0 * species.recoil_velocity();
        let d = pulse.duration;
        let flight = image_time - pulse.end_time();
        let reach = 6e-3;
        let half_v = reach / image_time;
        // resolve the Rabi fringes in velocity, the class and the kernel
        let mut dw = rabi / (2.0 * k) / 50.0;
        if d > 0.0 {
            dw = dw.min(TAU / (2.0 * k * d) / 8.0);
        }
        dw = dw.min(kernel_sigma / image_time / 10.0);
        let nw = ((2.0 * half_v / dw).ceil() as usize).min(4_000_000);
        let dw = 2.0 * half_v / nw as f64;

        let step = (kernel_sigma / 20.0).min(2e-6);
        let span = reach + kick_dv * (flight + d) + 7.0 * kernel_sigma;
        let n = (2.0 * span / step).ceil() as usize + 1;
        let start = -span;
        let mut mass = vec![0.0; n];
        let mut deposit = |u: f64, m: f64| {
            let f = (u - start) / step;
            let i = f.floor();
            if i >= 0.0 && (i as usize) + 1 < n {
                let t = f - i;
                mass[i as usize] += m * (1.0 - t);
                mass[i as usize + 1] += m * t;
            }
        };
        for j in 0..nw {
            let w = -half_v + (j as f64 + 0.5) * dw;
            let det = |kick: i8| detuning(w, 0, 0.0, 0.0, kick, pulse.light_shift, species);
            let (kick, delta) = if det(1).abs() <= det(-1).abs() { (1.0, det(1)) } else { (-1.0, det(-1)) };
            let (p, mean) = match pulse.mode {
                PulseMode::RabiCycling => (transfer_probability(delta, rabi, d), mean_transfer(delta, rabi, d)),
                PulseMode::InstantaneousPi if delta.abs() < rabi => (1.0, 0.5),
                PulseMode::InstantaneousPi => (0.0, 0.0),
            };
            let u = w * image_time;
            let (stay, kicked) = match pulse.mode {
                PulseMode::RabiCycling => {
                    let drift = kick * kick_dv * mean * d;
                    (u + drift, u + drift + kick * kick_dv * flight)
                }
                PulseMode::InstantaneousPi => (u, u + kick * kick_dv * (d / 2.0 + flight)),
            };
            deposit(u, -dw);
            deposit(stay, (1.0 - p) * dw);
            deposit(kicked, p * dw);
        }

        let h = (6.0 * kernel_sigma / step).ceil() as isize;
        let kernel: Vec<f64> = (-h..=h).map(|i| gauss(i as f64 * step, 0.0, kernel_sigma)).collect();
        let norm: f64 = kernel.iter().sum();
        let values: Vec<f64> = (0..n as isize)
            .map(|i| {
                (-h..=h)
                    .filter_map(|o| usize::try_from(i - o).ok().filter(|&s| s < n).map(|s| kernel[(o + h) as usize] * mass[s]))
                    .sum::<f64>()
                    / norm
            })
            .collect();
        let peak = values.iter().copied().fold(0.0, f64::max);
        if !(peak > 0.0) {
            return Err(Error::invalid("pulse.rabi_freq", "pulse transfers no atoms"));
        }
        let values: Vec<f64> = values.iter().map(|v| v / peak).collect();
        let top = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
        let width = half_width(&values, top) * step / (2.0 * 2f64.ln()).sqrt();
        Ok(StripeTemplate { start, step, values, width })
    }

    /// Catmull–Rom interpolant and its derivative; zero outside the table.
    fn eval(&self, u: f64) -> (f64, f64) {
        let f = (u - self.start) / self.step;
        let i = f.floor();
        let n = self.values.len() as isize;
        if i < 0.0 || i as isize >= n - 1 {
            return (0.0, 0.0);
        }
        let i = i as isize;
        let t = f - i as f64;
        let at = |j: isize| self.values[j.clamp(0, n - 1) as usize];
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        let a = -0.5 * p0 + 1.5 * p1 - 1.5 * p2 + 0.5 * p3;
        let b = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
        let c = 0.5 * (p2 - p0);
        let v = ((a * t + b) * t + c) * t + p1;
        let dv = ((3.0 * a * t + 2.0 * b) * t + c) / self.step;
        (v, dv)
    }
}

/// Joint model for a set of stripes sharing one lineshape.
///
/// Parameters: `[shape…, q…, A…]`; stripe j sits at c_j = Σ L_jk q_k with
/// amplitude A_j. Two lineshapes:
///
/// - lobes, shape `[w₊, w₋, m, a]`:
///   2P(c_j; w₊) − (w₊/w₋)·(P(c_j − a; w₋) + P(c_j + a; w₋)) with the lobe P
///   of exponent m shared by all lobes, so each stripe has zero area. The two
///   enhancement lobes are merged into one: their offset is a small fraction
///   of the lobe width at any usable pulse timing, and a free offset sits on
///   a saddle at zero;
/// - a tabulated template, shape `[λ]`: S((x − c_j)/λ).
struct StripeModel<'t> {
    layout: DMatrix<f64>,
    template: Option<&'t StripeTemplate>,
}

const LOBE_SHAPE: usize = 4;

impl<'t> StripeModel<'t> {
    fn new(layout: &Layout, template: Option<&'t StripeTemplate>) -> Self {
        StripeModel {
            layout: layout.matrix(),
            template,
        }
    }

    fn shape_len(&self) -> usize {
        if self.template.is_some() {
            1
        } else {
            LOBE_SHAPE
        }
    }

    fn stripes(&self) -> usize {
        self.layout.nrows()
    }

    fn centre_params(&self) -> usize {
        self.layout.ncols()
    }

    fn centres(&self, p: &[f64]) -> Vec<f64> {
        let k = self.shape_len();
        let q = &p[k..k + self.centre_params()];
        (0..self.stripes())
            .map(|j| (0..q.len()).map(|i| self.layout[(j, i)] * q[i]).sum())
            .collect()
    }

    fn amplitudes<'p>(&self, p: &'p [f64]) -> &'p [f64] {
        &p[self.shape_len() + self.centre_params()..]
    }

    /// Enhancement-lobe RMS width, m.
    fn width(&self, p: &[f64]) -> f64 {
        match self.template {
            Some(t) => p[0].abs() * t.width,
            None => p[0].abs(),
        }
    }

    /// Unit-amplitude stripe at `c` with derivatives in c and the shape.
    fn unit(&self, x: f64, c: f64, p: &[f64], d_shape: &mut [f64]) -> (f64, f64) {
        if let Some(t) = self.template {
            let l = p[0].abs();
            let (v, dv) = t.eval((x - c) / l);
            d_shape[0] = -dv * (x - c) / (l * l) * p[0].signum();
            return (v, -dv / l);
        }
        let (wp, wn, m, a) = (p[0].abs(), p[1].abs(), exponent(p[2]), p[3]);
        let r = wp / wn;
        let [g, g_mu, g_w, g_m] = lobe(x, c, wp, m);
        let mut d_c = 2.0 * g_mu;
        let mut d_wp = 2.0 * g_w;
        let mut d_wn = 0.0;
        let mut d_m = 2.0 * g_m;
        let mut d_a = 0.0;
        let mut neg = 0.0;
        for s in [-1.0, 1.0] {
            let [g, g_mu, g_w, g_m] = lobe(x, c + s * a, wn, m);
            neg += g;
            d_c -= r * g_mu;
            d_a -= r * s * g_mu;
            d_wn -= r * g_w;
            d_m -= r * g_m;
        }
        d_wp -= neg / wn;
        d_wn += wp / (wn * wn) * neg;
        d_shape[0] = d_wp * p[0].signum();
        d_shape[1] = d_wn * p[1].signum();
        d_shape[2] = d_m * p[2].signum();
        d_shape[3] = d_a;
        (2.0 * g - r * neg, d_c)
    }
}

impl CurveModel for StripeModel<'_> {
    fn n_params(&self) -> usize {
        self.shape_len() + self.centre_params() + self.stripes()
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let mut scratch = [0.0; LOBE_SHAPE];
        self.centres(p)
            .iter()
            .zip(self.amplitudes(p))
            .map(|(&c, &amp)| amp * self.unit(x, c, p, &mut scratch).0)
            .sum()
    }

    fn grad(&self, x: f64, p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let k = self.shape_len();
        let nq = self.centre_params();
        let mut d_shape = [0.0; LOBE_SHAPE];
        for (j, (&c, &amp)) in self.centres(p).iter().zip(self.amplitudes(p)).enumerate() {
            let (v, d_c) = self.unit(x, c, p, &mut d_shape);
            for i in 0..k {
                out[i] += amp * d_shape[i];
            }
            for i in 0..nq {
                out[k + i] += amp * d_c * self.layout[(j, i)];
            }
            out[k + nq + j] = v;
        }
    }
}

/// Shared lineshape of a stripe fit, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripeShape {
    /// Width of the enhancement lobe; its RMS width in the Gaussian limit.
    pub sigma_pos: f64,
    /// Width of each depletion lobe.
    pub sigma_neg: f64,
    /// Tail exponent shared by all lobes: 1 is Lorentzian, large is Gaussian.
    pub exponent: f64,
    /// Half-distance between the two depletion lobes.
    pub split_neg: f64,
}

impl StripeShape {
    fn from_params(p: &[f64]) -> Self {
        StripeShape {
            sigma_pos: p[0].abs(),
            sigma_neg: p[1].abs(),
            exponent: exponent(p[2]),
            split_neg: p[3].abs(),
        }
    }

    fn params(&self) -> [f64; LOBE_SHAPE] {
        [self.sigma_pos, self.sigma_neg, self.exponent - 0.5, self.split_neg]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    /// Δm (or sideband order) assigned by position.
    pub label: i32,
    /// m
    pub center: f64,
    pub center_sigma: f64,
    pub amplitude: f64,
    pub amplitude_sigma: f64,
    /// RMS width of the enhancement lobe, m.
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Resolved,
    /// The ±1 stripes could not be separated; only a bound on |B| is reported.
    Unresolved,
    Failed,
}

/// Position ↔ two-photon-detuning scale used to turn distances into frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mapping {
    /// Ballistic mapping x = v·T_map.
    TimeOfFlight { t_map: f64 },
    /// Scale measured with a sideband comb.
    Calibrated {
        meters_per_radian_per_second: f64,
        uncertainty: f64,
    },
}

impl Mapping {
    /// Metres of stripe displacement per rad/s of two-photon detuning.
    pub fn scale(&self, species: &AtomSpecies) -> (f64, f64) {
        match *self {
            Mapping::TimeOfFlight { t_map } => (t_map / (2.0 * species.wavenumber()), 0.0),
            Mapping::Calibrated {
                meters_per_radian_per_second,
                uncertainty,
            } => (meters_per_radian_per_second, uncertainty),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeFitResult {
    pub status: FitStatus,
    pub stripes: Vec<Stripe>,
    /// Fitted lobe lineshape; `None` when a template was used.
    pub shape: Option<StripeShape>,
    /// Horizontal stretch of the template, when one was used.
    pub template_scale: Option<f64>,
    /// x₀(+1) − x₀(−1), m.
    pub separation: f64,
    pub separation_sigma: f64,
    /// rad/s
    pub larmor: f64,
    pub larmor_sigma: f64,
    /// G
    pub field: f64,
    pub field_sigma: f64,
    /// Upper bound on |B| from the single-feature width, G; set when unresolved.
    pub field_upper_bound: Option<f64>,
    /// Enhancement-lobe σ of the single feature, m; set when unresolved.
    pub width: Option<f64>,
    /// Separation of the best pair fit when it was too small to count, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_separation: Option<f64>,
    /// Robust σ of the fit residuals.
    pub noise_floor: f64,
    pub residual_norm: f64,
    pub initial_residual_norm: f64,
    pub iterations: usize,
    pub param_names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    pub mapping: Mapping,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl StripeFitResult {
    pub fn central(&self) -> Option<&Stripe> {
        self.stripes.iter().find(|s| s.label == 0)
    }

    fn failed(mapping: Mapping, message: String) -> Self {
        StripeFitResult {
            status: FitStatus::Failed,
            stripes: Vec::new(),
            shape: None,
            template_scale: None,
            separation: 0.0,
            separation_sigma: 0.0,
            larmor: 0.0,
            larmor_sigma: 0.0,
            field: 0.0,
            field_sigma: 0.0,
            field_upper_bound: None,
            width: None,
            pair_separation: None,
            noise_floor: 0.0,
            residual_norm: 0.0,
            initial_residual_norm: 0.0,
            iterations: 0,
            param_names: Vec::new(),
            covariance: Vec::new(),
            mapping,
            message: Some(message),
        }
    }
}

/// Central-stripe handling for [`fit_stripes_zero_area`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CentralStripe {
    /// Included when a feature is detected within 3σ of x = 0.
    #[default]
    Auto,
    /// Always fitted, at the pair midpoint.
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeOptions {
    /// Boxcar width used for detection, pixels.
    pub smoothing: usize,
    /// Detection threshold as a fraction of the strongest smoothed peak.
    pub relative_threshold: f64,
    /// Detection threshold in units of the pixel noise.
    pub noise_threshold: f64,
    pub central: CentralStripe,
    /// Δm difference spanned by the measured pair.
    pub pair_delta_m: i32,
    /// A pair that overlaps into one feature still counts as resolved when
    /// its fitted separation exceeds this many standard errors, 1.5 stripe
    /// widths, and the pair halves the single-stripe residual.
    pub min_significance: f64,
    /// Stripe lineshape; free zero-area lobes when `None`.
    #[serde(skip)]
    pub template: Option<StripeTemplate>,
}

impl Default for StripeOptions {
    fn default() -> Self {
        StripeOptions {
            smoothing: 5,
            relative_threshold: 0.15,
            noise_threshold: 5.0,
            central: CentralStripe::Auto,
            pair_delta_m: 2,
            min_significance: 5.0,
            template: None,
        }
    }
}

/// ω_L and |B| from a stripe separation.
pub fn separation_to_field(separation: f64, t_map: f64, delta_m_pair: i32, species: &AtomSpecies) -> (f64, f64) {
    separation_to_field_mapped(separation, &Mapping::TimeOfFlight { t_map }, delta_m_pair, species)
}

pub fn separation_to_field_mapped(separation: f64, mapping: &Mapping, delta_m_pair: i32, species: &AtomSpecies) -> (f64, f64) {
    let (scale, _) = mapping.scale(species);
    let larmor = separation / (f64::from(delta_m_pair) * scale);
    (larmor, larmor / species.gyromag)
}

struct Detection {
    smoothed: Vec<f64>,
    peaks: Vec<usize>,
    /// Enhancement-lobe σ of the strongest peak, m.
    width: f64,
}

fn detect(profile: &Profile, opts: &StripeOptions) -> Detection {
    let smoothed = smooth(&profile.counts, opts.smoothing.max(1));
    let noise = difference_noise(&profile.counts);
    let top = smoothed.iter().copied().fold(0.0, f64::max);
    let threshold = (opts.relative_threshold * top).max(opts.noise_threshold * noise / (opts.smoothing.max(1) as f64).sqrt());
    let peaks = if top > 0.0 { local_maxima(&smoothed, threshold) } else { Vec::new() };
    let width = peaks
        .iter()
        .max_by(|&&i, &&j| smoothed[i].total_cmp(&smoothed[j]))
        .map_or(0.0, |&i| half_width(&smoothed, i) * profile.spacing() / (2.0 * 2f64.ln()).sqrt());
    Detection { smoothed, peaks, width }
}

/// Half width at half maximum around peak `i`, pixels.
fn half_width(y: &[f64], i: usize) -> f64 {
    let half = y[i] / 2.0;
    let walk = |step: isize| {
        let mut j = i as isize;
        while j + step >= 0 && ((j + step) as usize) < y.len() && y[(j + step) as usize] > half {
            j += step;
        }
        let inner = y[j as usize];
        let k = j + step;
        if k < 0 || k as usize >= y.len() {
            return (j - i as isize).unsigned_abs() as f64;
        }
        let outer = y[k as usize];
        let frac = if inner > outer { (inner - half) / (inner - outer) } else { 0.0 };
        (j - i as isize).unsigned_abs() as f64 + frac
    };
    (0.5 * (walk(-1) + walk(1))).max(1.0)
}

/// Half-distance from the strongest peak to the deepest nearby minimum, m.
fn depletion_split(det: &Detection, profile: &Profile, peak: usize) -> f64 {
    let y = &det.smoothed;
    let dx = profile.spacing();
    let reach = ((6.0 * det.width / dx) as usize).max(3);
    let lo = peak.saturating_sub(reach);
    let hi = (peak + reach + 1).min(y.len());
    let left = (lo..peak).min_by(|&i, &j| y[i].total_cmp(&y[j]));
    let right = (peak + 1..hi).min_by(|&i, &j| y[i].total_cmp(&y[j]));
    let d: Vec<f64> = [left, right]
        .iter()
        .flatten()
        .filter(|&&i| y[i] < 0.0)
        .map(|&i| (i as f64 - peak as f64).abs() * dx)
        .collect();
    if d.is_empty() {
        1.5 * det.width
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

fn shape_start(det: &Detection, profile: &Profile, peak: usize) -> [f64; LOBE_SHAPE] {
    let sigma = det.width.max(profile.spacing());
    let a = depletion_split(det, profile, peak).max(0.5 * sigma);
    [sigma, 1.2 * sigma, 1.5, a]
}

fn covariance_rows(c: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..c.nrows()).map(|i| (0..c.ncols()).map(|j| c[(i, j)]).collect()).collect()
}

struct JointFit<'t> {
    outcome: FitOutcome,
    model: StripeModel<'t>,
    noise_floor: f64,
}

impl JointFit<'_> {
    /// i-th parameter after the lineshape.
    fn param(&self, i: usize) -> f64 {
        self.outcome.params[self.model.shape_len() + i]
    }

    fn sigma(&self, i: usize) -> f64 {
        self.outcome.sigma(self.model.shape_len() + i)
    }
}

fn fit_joint<'t>(profile: &Profile, model: StripeModel<'t>, shape: &[f64], q: &[f64], amps: &[f64]) -> Result<JointFit<'t>> {
    let mut p0 = shape.to_vec();
    p0.extend_from_slice(q);
    p0.extend_from_slice(amps);
    assert_eq!(p0.len(), model.n_params());
    let dx = profile.spacing();
    let amp_scale = profile.counts.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut scales = match model.template {
        Some(_) => vec![1.0],
        None => vec![dx, dx, 1.0, dx],
    };
    scales.extend(std::iter::repeat_n(dx, model.centre_params()));
    scales.extend(std::iter::repeat_n(amp_scale, model.stripes()));
    let opts = fit::Options {
        max_iterations: 1000,
        ..fit::Options::default()
    };
    let problem = CurveFit {
        model: &model,
        x: &profile.x,
        y: &profile.counts,
        weights: None,
    };
    let outcome = minimize(&problem, &p0, &scales, &opts, "zero-area stripes")?;
    let mut r = vec![0.0; profile.len()];
    problem.residuals(&outcome.params, &mut r);
    Ok(JointFit {
        noise_floor: robust_sigma(&smooth(&r, 5)),
        outcome,
        model,
    })
}

/// Detects and fits the stripes of a background-subtracted profile.
pub fn fit_stripes_zero_area(profile: &Profile, opts: &StripeOptions, mapping: &Mapping, species: &AtomSpecies) -> StripeFitResult {
    match fit_stripes_inner(profile, opts, mapping, species) {
        Ok(r) => r,
        Err(e) => StripeFitResult::failed(*mapping, e.to_string()),
    }
}

fn fit_stripes_inner(profile: &Profile, opts: &StripeOptions, mapping: &Mapping, species: &AtomSpecies) -> Result<StripeFitResult> {
    if profile.len() < 8 {
        return Err(Error::Input("profile too short for stripe detection".into()));
    }
    let det = detect(profile, opts);
    if det.peaks.is_empty() {
        return Ok(StripeFitResult::failed(*mapping, "no stripe above the detection threshold".into()));
    }
    let xs: Vec<f64> = det.peaks.iter().map(|&i| profile.x[i]).collect();
    let strongest = *det
        .peaks
        .iter()
        .max_by(|&&i, &&j| det.smoothed[i].total_cmp(&det.smoothed[j]))
        .expect("peaks not empty");
    let template = opts.template.as_ref();
    let shape = match template {
        Some(_) => vec![1.0],
        None => shape_start(&det, profile, strongest).to_vec(),
    };

    let near_zero = xs
        .iter()
        .enumerate()
        .filter(|(_, x)| x.abs() < 3.0 * det.width.max(profile.spacing()))
        // a central stripe sits between the pair
        .filter(|&(i, _)| i > 0 && i + 1 < xs.len())
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i);
    let central_idx = match opts.central {
        CentralStripe::Never => None,
        _ => near_zero,
    };
    let sides: Vec<usize> = (0..xs.len()).filter(|&i| Some(i) != central_idx).collect();
    let left: Vec<usize> = sides.iter().copied().filter(|&i| xs[i] < 0.0).collect();
    let right: Vec<usize> = sides.iter().copied().filter(|&i| xs[i] >= 0.0).collect();

    let amp_of = |i: usize| det.smoothed[det.peaks[i]].max(0.0) / 2.0;

    // innermost stripe on each side forms the pair; anything further out is fitted freely
    let resolved_pair = match (left.last(), right.first()) {
        (Some(&l), Some(&r)) => Some((l, r)),
        _ => None,
    };
    let Some((l, r)) = resolved_pair else {
        return fit_single_feature(profile, opts, mapping, species, &det, strongest, &shape);
    };
    let extras: Vec<usize> = sides.iter().copied().filter(|&i| i != l && i != r).collect();
    let central = match opts.central {
        CentralStripe::Always => true,
        CentralStripe::Never => false,
        CentralStripe::Auto => central_idx.is_some(),
    };
    let mut q = vec![0.5 * (xs[l] + xs[r]), xs[r] - xs[l]];
    let mut amps = vec![amp_of(l), amp_of(r)];
    if central {
        amps.push(central_idx.map_or(0.0, amp_of));
    }
    for &e in &extras {
        q.push(xs[e]);
        amps.push(amp_of(e));
    }
    let layout = Layout::Pair {
        central,
        extra: extras.len(),
    };
    let joint = fit_joint(profile, StripeModel::new(&layout, template), &shape, &q, &amps)?;
    Ok(assemble(&joint, FitStatus::Resolved, None, opts, mapping, species))
}

/// A pair found only by the fit must be this many stripe widths apart.
/// Ensemble noise and lineshape mismatch let a pair fit split a lone stripe by
/// up to about 1.4 widths.
const FIT_RESOLUTION_WIDTHS: f64 = 1.5;

/// ...and must bring the residual norm below this fraction of the single-stripe fit.
const FIT_RESOLUTION_RESIDUAL: f64 = 0.5;

/// One detected feature. A pair fit may still split it; otherwise only the
/// width of a single stripe is reported.
fn fit_single_feature(
    profile: &Profile,
    opts: &StripeOptions,
    mapping: &Mapping,
    species: &AtomSpecies,
    det: &Detection,
    peak: usize,
    shape: &[f64],
) -> Result<StripeFitResult> {
    let template = opts.template.as_ref();
    let x0 = profile.x[peak];
    let a = det.smoothed[peak].max(f64::MIN_POSITIVE) / 2.0;
    let one = fit_joint(profile, StripeModel::new(&Layout::Free(1), template), shape, &[x0], &[a])?;
    let p1 = &one.outcome.params;
    let width = one.model.width(p1);

    let central = opts.central == CentralStripe::Always;
    let mut amps = vec![0.5 * one.param(1); 2];
    if central {
        amps.push(0.1 * one.param(1));
    }
    // a template already has the right width; free lobes have absorbed both stripes
    let pair_shape = match template {
        Some(_) => shape.to_vec(),
        None => vec![0.8 * width, p1[1].abs(), p1[2], p1[3].abs()],
    };
    let layout = Layout::Pair { central, extra: 0 };
    // overlapping pairs have several local minima in the separation
    let starts: Vec<f64> = match template {
        Some(t) => [0.5, 1.0, 2.0, 3.0, 4.5].iter().map(|f| f * t.width).collect(),
        None => vec![width],
    };
    let pair = starts
        .iter()
        .filter_map(|&s0| fit_joint(profile, StripeModel::new(&layout, template), &pair_shape, &[one.param(0), s0], &amps).ok())
        .min_by(|a, b| a.outcome.residual_norm.total_cmp(&b.outcome.residual_norm));
    let mut pair_separation = None;
    if let Some(pair) = pair {
        let s = pair.param(1).abs();
        let resolved = s > opts.min_significance * pair.sigma(1)
            && s > FIT_RESOLUTION_WIDTHS * pair.model.width(&pair.outcome.params)
            && pair.outcome.residual_norm < FIT_RESOLUTION_RESIDUAL * one.outcome.residual_norm;
        if resolved {
            let mut r = assemble(&pair, FitStatus::Resolved, None, opts, mapping, species);
            r.message = Some("pair separated by the fit, not by detection".into());
            return Ok(r);
        }
        pair_separation = Some(s);
    }
    let mut r = assemble(&one, FitStatus::Unresolved, Some(width), opts, mapping, species);
    r.pair_separation = pair_separation;
    Ok(r)
}

fn assemble(
    joint: &JointFit,
    status: FitStatus,
    single_width: Option<f64>,
    opts: &StripeOptions,
    mapping: &Mapping,
    species: &AtomSpecies,
) -> StripeFitResult {
    let p = &joint.outcome.params;
    let nq = joint.model.centre_params();
    let centres = joint.model.centres(p);
    let cov = &joint.outcome.covariance;
    let k = joint.model.shape_len();
    let width = joint.model.width(p);
    let is_pair = single_width.is_none();

    // centre variance through the layout
    let centre_sigma = |j: usize| {
        let l = &joint.model.layout;
        let mut v = 0.0;
        for a in 0..nq {
            for b in 0..nq {
                v += l[(j, a)] * l[(j, b)] * cov[(k + a, k + b)];
            }
        }
        v.max(0.0).sqrt()
    };

    let (separation, separation_sigma) = if is_pair {
        (joint.param(1).abs(), joint.sigma(1))
    } else {
        (0.0, 0.0)
    };
    let mut order: Vec<usize> = (0..centres.len()).collect();
    order.sort_by(|&a, &b| centres[a].total_cmp(&centres[b]));
    let mut stripes: Vec<Stripe> = order
        .iter()
        .map(|&j| Stripe {
            label: 0,
            center: centres[j],
            center_sigma: centre_sigma(j),
            amplitude: joint.param(nq + j),
            amplitude_sigma: joint.sigma(nq + j),
            width,
        })
        .collect();
    if is_pair {
        let has_central = joint.model.layout.nrows() > 2 && joint.model.layout[(2, 0)] == 1.0;
        label_stripes(&mut stripes, joint.param(0), has_central);
    }

    let (scale, scale_sigma) = mapping.scale(species);
    let (larmor, field) = separation_to_field_mapped(separation, mapping, opts.pair_delta_m, species);
    let larmor_sigma = if separation > 0.0 {
        larmor * ((separation_sigma / separation).powi(2) + (scale_sigma / scale).powi(2)).sqrt()
    } else {
        0.0
    };
    // any wider pair would have been resolved by the fit
    let field_upper_bound = single_width.map(|w| separation_to_field_mapped(FIT_RESOLUTION_WIDTHS * w, mapping, opts.pair_delta_m, species).1);

    let mut names: Vec<String> = match joint.model.template {
        Some(_) => vec!["scale".into()],
        None => vec!["sigma_pos".into(), "sigma_neg".into(), "exponent".into(), "split_neg".into()],
    };
    if is_pair {
        names.push("midpoint".into());
        names.push("separation".into());
        for k in 2..nq {
            names.push(format!("center_{k}"));
        }
    } else {
        names.push("center".into());
    }
    for j in 0..joint.model.stripes() {
        names.push(format!("amplitude_{j}"));
    }

    StripeFitResult {
        status,
        stripes,
        shape: joint.model.template.is_none().then(|| StripeShape::from_params(p)),
        template_scale: joint.model.template.map(|_| p[0].abs()),
        separation,
        separation_sigma,
        larmor,
        larmor_sigma,
        field,
        field_sigma: larmor_sigma / species.gyromag,
        field_upper_bound,
        width: single_width,
        pair_separation: None,
        noise_floor: joint.noise_floor,
        residual_norm: joint.outcome.residual_norm,
        initial_residual_norm: joint.outcome.initial_residual_norm,
        iterations: joint.outcome.iterations,
        param_names: names,
        covariance: covariance_rows(cov),
        mapping: *mapping,
        message: None,
    }
}

/// Δm labels by position relative to the pair midpoint: 0 for the central
/// stripe, ±1, ±2, … moving outward.
fn label_stripes(stripes: &mut [Stripe], mid: f64, has_central: bool) {
    let tol = 1e-9 * stripes.iter().map(|s| s.center.abs()).fold(1e-12, f64::max);
    let mut left: Vec<usize> = Vec::new();
    let mut right: Vec<usize> = Vec::new();
    let mut central_taken = !has_central;
    for (i, s) in stripes.iter().enumerate() {
        if !central_taken && (s.center - mid).abs() <= tol {
            central_taken = true;
            continue;
        }
        if s.center < mid {
            left.push(i);
        } else {
            right.push(i);
        }
    }
    for (n, &i) in left.iter().rev().enumerate() {
        stripes[i].label = -(n as i32 + 1);
    }
    for (n, &i) in right.iter().enumerate() {
        stripes[i].label = n as i32 + 1;
    }
}

/// A lineshape for evaluating stripes outside a fit.
#[derive(Debug, Clone, Copy)]
pub enum Lineshape<'t> {
    Lobes(StripeShape),
    /// Template and its horizontal stretch.
    Template(&'t StripeTemplate, f64),
}

impl Lineshape<'_> {
    /// Unit-amplitude stripe centred at `center`.
    pub fn unit(&self, x: f64, center: f64) -> f64 {
        let mut scratch = [0.0; LOBE_SHAPE];
        match *self {
            Lineshape::Lobes(shape) => StripeModel::new(&Layout::Free(1), None).unit(x, center, &shape.params(), &mut scratch).0,
            Lineshape::Template(t, scale) => StripeModel::new(&Layout::Free(1), Some(t)).unit(x, center, &[scale], &mut scratch).0,
        }
    }
}

/// Amplitude of a stripe of given shape centred at `center`, estimated by
/// linear least squares with everything else held fixed.
pub fn template_amplitude(profile: &Profile, shape: Lineshape<'_>, center: f64) -> (f64, f64) {
    let t: Vec<f64> = profile.x.iter().map(|&x| shape.unit(x, center)).collect();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    if tt == 0.0 {
        return (0.0, 0.0);
    }
    let amp = t.iter().zip(&profile.counts).map(|(a, b)| a * b).sum::<f64>() / tt;
    let resid: Vec<f64> = t.iter().zip(&profile.counts).map(|(a, b)| b - amp * a).collect();
    let s2 = resid.iter().map(|r| r * r).sum::<f64>() / (resid.len().saturating_sub(1).max(1)) as f64;
    (amp, (s2 / tt).sqrt())
}

/// The four-Gaussian timing profile: enhancement lobes at x₀ ± 2v_rΔT,
/// depletion at x₀ ± v_rT_i, one shared width and amplitude.
struct TimingProfileModel {
    outer: f64,
    v_r: f64,
}

impl CurveModel for TimingProfileModel {
    fn n_params(&self) -> usize {
        4
    }

    // p = [x0, σ, A, ΔT]
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let (x0, s, a, dt) = (p[0], p[1].abs(), p[2], p[3]);
        let b = 2.0 * self.v_r * dt;
        a * (gauss(x, x0 - b, s) + gauss(x, x0 + b, s) - gauss(x, x0 - self.outer, s) - gauss(x, x0 + self.outer, s))
    }

    fn grad(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let (x0, s, a, dt) = (p[0], p[1].abs(), p[2], p[3]);
        let b = 2.0 * self.v_r * dt;
        let mut sum = 0.0;
        let mut d_x0 = 0.0;
        let mut d_s = 0.0;
        let mut d_b = 0.0;
        for (off, sign, db) in [(-b, 1.0, -1.0), (b, 1.0, 1.0), (-self.outer, -1.0, 0.0), (self.outer, -1.0, 0.0)] {
            let mu = x0 + off;
            let g = gauss(x, mu, s);
            let u = x - mu;
            sum += sign * g;
            d_x0 += sign * g * u / (s * s);
            d_s += sign * g * u * u / (s * s * s);
            d_b += sign * db * g * u / (s * s);
        }
        out[0] = a * d_x0;
        out[1] = a * d_s * p[1].signum();
        out[2] = sum;
        out[3] = a * d_b * 2.0 * self.v_r;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingProfileFit {
    /// m
    pub center: f64,
    /// m
    pub sigma: f64,
    pub amplitude: f64,
    /// Pulse offset from T_i/2, s. Only |ΔT| is observable.
    pub delta_t: f64,
    pub delta_t_sigma: f64,
    /// Distance between the enhancement lobes, 4·v_r·|ΔT|, m.
    pub positive_splitting: f64,
    pub residual_norm: f64,
    pub initial_residual_norm: f64,
    pub residuals: Vec<f64>,
}

/// Fits the four-Gaussian timing profile. `delta_t` seeds the lobe
/// offset, which is then fitted freely.
pub fn fit_timing_profile(profile: &Profile, image_time: f64, delta_t: f64, species: &AtomSpecies) -> Result<TimingProfileFit> {
    let v_r = species.recoil_velocity();
    let model = TimingProfileModel {
        outer: v_r * image_time,
        v_r,
    };
    let det = detect(profile, &StripeOptions::default());
    let i0 = det
        .smoothed
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Input("empty profile".into()))?;
    let sigma0 = det.width.max(profile.spacing());
    let peak = det.smoothed[i0];
    let dt0 = if delta_t.abs() > 0.0 { delta_t.abs() } else { 0.25 * sigma0 / (2.0 * v_r) };
    let p0 = [profile.x[i0], sigma0, peak.max(f64::MIN_POSITIVE) / 2.0, dt0];
    let problem = CurveFit {
        model: &model,
        x: &profile.x,
        y: &profile.counts,
        weights: None,
    };
    let amp_scale = peak.abs().max(f64::MIN_POSITIVE);
    let scales = [profile.spacing(), profile.spacing(), amp_scale, profile.spacing() / v_r];
    let out = minimize(&problem, &p0, &scales, &fit::Options::default(), "timing profile")?;
    let mut residuals = vec![0.0; profile.len()];
    problem.residuals(&out.params, &mut residuals);
    let dt = out.params[3].abs();
    Ok(TimingProfileFit {
        center: out.params[0],
        sigma: out.params[1].abs(),
        amplitude: out.params[2],
        delta_t: dt,
        delta_t_sigma: out.sigma(3),
        positive_splitting: 4.0 * v_r * dt,
        residual_norm: out.residual_norm,
        initial_residual_norm: out.initial_residual_norm,
        residuals,
    })
}

/// Evaluates the timing profile model, e.g. to synthesize test data.
pub fn timing_profile(x: &[f64], center: f64, sigma: f64, amplitude: f64, delta_t: f64, image_time: f64, species: &AtomSpecies) -> Vec<f64> {
    let v_r = species.recoil_velocity();
    let m = TimingProfileModel {
        outer: v_r * image_time,
        v_r,
    };
    let p = [center, sigma, amplitude, delta_t];
    x.iter().map(|&x| m.eval(x, &p)).collect()
}

/// Evaluates a fitted joint stripe model on `x`; `template` is the one the
/// fit used, if any.
pub fn stripe_model_curve(result: &StripeFitResult, template: Option<&StripeTemplate>, x: &[f64]) -> Vec<f64> {
    let shape = match (result.shape, template, result.template_scale) {
        (Some(shape), _, _) => Lineshape::Lobes(shape),
        (None, Some(t), Some(scale)) => Lineshape::Template(t, scale),
        _ => return vec![0.0; x.len()],
    };
    x.iter()
        .map(|&x| result.stripes.iter().map(|s| s.amplitude * shape.unit(x, s.center)).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanFitResult {
    /// G/A
    pub alpha: f64,
    pub alpha_sigma: f64,
    /// A
    pub i0: f64,
    pub i0_sigma: f64,
    /// G
    pub b_perp: f64,
    pub b_perp_sigma: f64,
    /// rad/s, data minus model.
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
    pub initial_residual_norm: f64,
    /// Set when every point lies on one side of the fitted minimum.
    pub ill_conditioned: bool,
}

impl ScanFitResult {
    pub fn larmor_at(&self, current: f64, species: &AtomSpecies) -> f64 {
        species.gyromag * (self.alpha.powi(2) * (current - self.i0).powi(2) + self.b_perp.powi(2)).sqrt()
    }
}

struct Hyperbola {
    gyromag: f64,
}

impl CurveModel for Hyperbola {
    fn n_params(&self) -> usize {
        3
    }

    // p = [α, I₀, B⊥]
    fn eval(&self, i: f64, p: &[f64]) -> f64 {
        let d = i - p[1];
        self.gyromag * (p[0] * p[0] * d * d + p[2] * p[2]).sqrt()
    }

    fn grad(&self, i: f64, p: &[f64], out: &mut [f64]) {
        let d = i - p[1];
        let root = (p[0] * p[0] * d * d + p[2] * p[2]).sqrt().max(1e-300);
        let g = self.gyromag / root;
        out[0] = g * p[0] * d * d;
        out[1] = -g * p[0] * p[0] * d;
        out[2] = g * p[2];
    }
}

/// Fits ω_L(I) = γ·√(α²(I − I₀)² + B⊥²) to (current, ω_L) points.
pub fn fit_hyperbola(points: &[(f64, f64)], species: &AtomSpecies) -> Result<ScanFitResult> {
    if points.len() < 4 {
        return Err(Error::Input(format!("hyperbola fit needs at least 4 points, got {}", points.len())));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let gamma = species.gyromag;
    let (imin, wmin) = pts.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
    let (il, wl) = pts[0];
    let (ir, wr) = pts[pts.len() - 1];
    let alpha0 = if ir > il { (wl + wr) / (gamma * (ir - il)) } else { 1.0 };
    let alpha0 = if alpha0 > 0.0 && alpha0.is_finite() { alpha0 } else { 1.0 };
    // the dip sits between the two lowest points; split it by the secant slope
    let b0 = (wmin / gamma).max(1e-6 * alpha0 * (ir - il).abs());
    let i0_init = imin;

    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let model = Hyperbola { gyromag: gamma };
    let problem = CurveFit {
        model: &model,
        x: &x,
        y: &y,
        weights: None,
    };
    let span = (ir - il).abs().max(1e-9);
    let out = minimize(
        &problem,
        &[alpha0, i0_init, b0],
        &[alpha0, span, alpha0 * span],
        &fit::Options::default(),
        "hyperbola",
    )?;
    let (alpha, i0, b) = (out.params[0].abs(), out.params[1], out.params[2].abs());
    if alpha == 0.0 {
        return Err(Error::FitFailed {
            model: "hyperbola",
            iterations: out.iterations,
            residual: out.residual_norm,
        });
    }
    let ill = !(x[0] < i0 && i0 < x[x.len() - 1]);
    if ill {
        tracing::warn!("all scan points lie on one side of the fitted minimum; I0 is an extrapolation");
    }
    let residuals = pts.iter().map(|&(i, w)| w - model.eval(i, &out.params)).collect();
    Ok(ScanFitResult {
        alpha,
        alpha_sigma: out.sigma(0),
        i0,
        i0_sigma: out.sigma(1),
        b_perp: b,
        b_perp_sigma: out.sigma(2),
        residuals,
        residual_norm: out.residual_norm,
        initial_residual_norm: out.initial_residual_norm,
        ill_conditioned: ill,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Stripe displacement per unit two-photon detuning, m·s.
    pub meters_per_radian_per_second: f64,
    pub uncertainty: f64,
    /// Fitted comb spacing, m.
    pub spacing: f64,
    pub spacing_sigma: f64,
    /// Comb origin, m.
    pub origin: f64,
    pub orders: Vec<i32>,
    /// rad/s
    pub modulation_freq: f64,
    /// Ballistic prediction ω_m·T_map/(2k), m, for comparison.
    pub expected_spacing: f64,
    /// Lineshape shared by the comb stripes.
    pub shape: StripeShape,
    pub residual_norm: f64,
    pub initial_residual_norm: f64,
}

impl CalibrationResult {
    pub fn mapping(&self) -> Mapping {
        Mapping::Calibrated {
            meters_per_radian_per_second: self.meters_per_radian_per_second,
            uncertainty: self.uncertainty,
        }
    }
}

/// Fits an equally spaced comb of zero-area stripes to a sideband run and
/// returns the position ↔ detuning scale.
pub fn calibrate_with_sidebands(profile: &Profile, modulation_freq: f64, t_map: f64, species: &AtomSpecies) -> Result<CalibrationResult> {
    if !(modulation_freq > 0.0) {
        return Err(Error::invalid("pulse.modulation_freq", "must be positive for a sideband calibration"));
    }
    let opts = StripeOptions::default();
    let det = detect(profile, &opts);
    if det.peaks.len() < 3 {
        return Err(Error::FitFailed {
            model: "sideband comb",
            iterations: 0,
            residual: f64::NAN,
        });
    }
    let xs: Vec<f64> = det.peaks.iter().map(|&i| profile.x[i]).collect();
    let mut gaps: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let spacing0 = gaps[0];
    let anchor = xs
        .iter()
        .copied()
        .min_by(|a, b| a.abs().total_cmp(&b.abs()))
        .expect("peaks not empty");
    let orders: Vec<i32> = xs.iter().map(|x| ((x - anchor) / spacing0).round() as i32).collect();
    let strongest = *det
        .peaks
        .iter()
        .max_by(|&&i, &&j| det.smoothed[i].total_cmp(&det.smoothed[j]))
        .expect("peaks not empty");
    let shape = shape_start(&det, profile, strongest);
    let amps: Vec<f64> = det.peaks.iter().map(|&i| det.smoothed[i] / 2.0).collect();
    let layout = Layout::Comb(orders.clone());
    let joint = fit_joint(profile, StripeModel::new(&layout, None), &shape, &[anchor, spacing0], &amps)?;
    let spacing = joint.param(1);
    let spacing_sigma = joint.sigma(1);
    if !(spacing > 0.0) {
        return Err(Error::FitFailed {
            model: "sideband comb",
            iterations: joint.outcome.iterations,
            residual: joint.outcome.residual_norm,
        });
    }
    Ok(CalibrationResult {
        meters_per_radian_per_second: spacing / modulation_freq,
        uncertainty: spacing_sigma / modulation_freq,
        spacing,
        spacing_sigma,
        origin: joint.param(0),
        orders,
        modulation_freq,
        expected_spacing: modulation_freq * t_map / (2.0 * species.wavenumber()),
        shape: StripeShape::from_params(&joint.outcome.params),
        residual_norm: joint.outcome.residual_norm,
        initial_residual_norm: joint.outcome.initial_residual_norm,
    })
}

/// Peak-to-trough of the smoothed difference profile over the no-pulse
/// profile at the peak.
pub fn contrast(difference: &Profile, no_pulse: &Profile) -> f64 {
    let d = smooth(&difference.counts, 5);
    let n = smooth(&no_pulse.counts, 5);
    let Some((imax, &max)) = d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return 0.0;
    };
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let span = max - min;
    if span <= 0.0 || n[imax] <= 0.0 {
        return 0.0;
    }
    span / n[imax]
}

/// Signal minimised by the automated nulling: the pair separation. Once the
/// pair has merged, the insignificant pair-fit separation keeps the objective
/// continuous; the single-feature width is the last resort.
pub fn nulling_objective(result: &StripeFitResult) -> Option<f64> {
    match result.status {
        FitStatus::Failed => None,
        FitStatus::Resolved => Some(result.separation),
        FitStatus::Unresolved => result.pair_separation.or(result.width),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn grid(n: usize, dx: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) * dx).collect()
    }

    fn synthetic(x: &[f64], centres: &[f64], amps: &[f64], shape: [f64; LOBE_SHAPE]) -> Profile {
        let shape = Lineshape::Lobes(StripeShape::from_params(&shape));
        let counts = x
            .iter()
            .map(|&x| centres.iter().zip(amps).map(|(&c, &a)| a * shape.unit(x, c)).sum())
            .collect();
        Profile { x: x.to_vec(), counts }
    }

    #[test]
    fn boxcar_preserves_constants() {
        let y = vec![3.0; 20];
        assert!(smooth(&y, 5).iter().all(|&v| (v - 3.0).abs() < 1e-15));
        let s = smooth(&[0.0, 0.0, 5.0, 0.0, 0.0], 5);
        assert_relative_eq!(s[2], 1.0);
    }

    #[test]
    fn stripe_model_gradient_matches_finite_differences() {
        let m = StripeModel::new(&Layout::Pair { central: true, extra: 1 }, None);
        let p = [1.1e-4, 1.6e-4, 0.9, 2.3e-4, 1e-5, 2e-3, 3e-3, 40.0, 35.0, 10.0, 5.0];
        let mut g = vec![0.0; p.len()];
        for &x in &[-2e-3, -1e-3, -3e-4, 0.0, 4e-4, 1.1e-3, 3e-3] {
            m.grad(x, &p, &mut g);
            for j in 0..p.len() {
                let h = 1e-6 * p[j].abs().max(1e-9);
                let mut hi = p;
                let mut lo = p;
                hi[j] += h;
                lo[j] -= h;
                let fd = (m.eval(x, &hi) - m.eval(x, &lo)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * (fd.abs() + 1.0), "param {j} at x={x}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn zero_area_stripe_integrates_to_zero() {
        let x = grid(400_001, 1e-6);
        let shape = [1.2e-4, 1.9e-4, 1.5, 2.4e-4];
        let prof = synthetic(&x, &[0.0], &[1.0], shape);
        let net: f64 = prof.counts.iter().sum();
        let pos: f64 = prof.counts.iter().filter(|v| **v > 0.0).sum();
        assert!(net.abs() < 1e-6 * pos, "net {net}, positive {pos}");
    }

    #[test]
    fn recovers_a_noiseless_pair() {
        let rb = AtomSpecies::rubidium85();
        let x = grid(512, 24e-6);
        let shape = [1.3e-4, 1.7e-4, 1.5, 2.4e-4];
        let prof = synthetic(&x, &[-1.5605e-3, 1.5605e-3], &[50.0, 50.0], shape);
        let r = fit_stripes_zero_area(
            &prof,
            &StripeOptions::default(),
            &Mapping::TimeOfFlight { t_map: 0.04 },
            &rb,
        );
        assert_eq!(r.status, FitStatus::Resolved);
        assert_relative_eq!(r.separation, 3.121e-3, max_relative = 1e-6);
        assert_eq!(r.stripes.iter().map(|s| s.label).collect::<Vec<_>>(), vec![-1, 1]);
        assert!(r.residual_norm <= r.initial_residual_norm);
        assert_relative_eq!(r.larmor, TAU * 100e3, max_relative = 1e-3);
    }

    #[test]
    fn central_stripe_is_labelled_zero() {
        let rb = AtomSpecies::rubidium85();
        let x = grid(512, 24e-6);
        let shape = [1.3e-4, 1.7e-4, 1.5, 2.4e-4];
        let prof = synthetic(&x, &[-2e-3, 0.0, 2e-3], &[30.0, 20.0, 30.0], shape);
        let r = fit_stripes_zero_area(&prof, &StripeOptions::default(), &Mapping::TimeOfFlight { t_map: 0.04 }, &rb);
        assert_eq!(r.stripes.iter().map(|s| s.label).collect::<Vec<_>>(), vec![-1, 0, 1]);
        assert_relative_eq!(r.central().unwrap().amplitude, 20.0, max_relative = 1e-6);
        assert_relative_eq!(r.separation, 4e-3, max_relative = 1e-8);
    }

    #[test]
    fn flat_profile_fails_cleanly() {
        let rb = AtomSpecies::rubidium85();
        let prof = Profile {
            x: grid(256, 24e-6),
            counts: vec![0.0; 256],
        };
        let r = fit_stripes_zero_area(&prof, &StripeOptions::default(), &Mapping::TimeOfFlight { t_map: 0.04 }, &rb);
        assert_eq!(r.status, FitStatus::Failed);
    }

    #[test]
    fn coincident_pair_is_unresolved_with_a_bound() {
        let rb = AtomSpecies::rubidium85();
        let x = grid(512, 24e-6);
        let shape = [1.3e-4, 1.7e-4, 1.5, 2.4e-4];
        let prof = synthetic(&x, &[0.0], &[60.0], shape);
        let r = fit_stripes_zero_area(&prof, &StripeOptions::default(), &Mapping::TimeOfFlight { t_map: 0.04 }, &rb);
        assert_eq!(r.status, FitStatus::Unresolved);
        let bound = r.field_upper_bound.unwrap();
        let expected = rb.wavenumber() * r.shape.unwrap().sigma_pos / (0.04 * rb.gyromag);
        assert!(bound >= expected * (1.0 - 1e-9));
        assert!(r.separation < 1e-6, "separation {}", r.separation);
    }

    #[test]
    fn separation_to_field_examples() {
        let rb = AtomSpecies::rubidium85();
        let (w, b) = separation_to_field(3.121e-3, 0.04, 2, &rb);
        assert_relative_eq!(w / TAU, 100e3, max_relative = 2e-4);
        assert_relative_eq!(b, 0.2143, max_relative = 3e-4);
        assert_eq!(separation_to_field(0.0, 0.04, 2, &rb).0, 0.0);
        let (_, db) = separation_to_field(4e-6, 0.035, 2, &rb);
        assert!((db - 3e-4).abs() < 0.3e-4, "{db}");
    }

    #[test]
    fn separation_round_trips_through_resonant_velocity() {
        let rb = AtomSpecies::rubidium85();
        let w = TAU * 61.8e3;
        let v = crate::model::resonant_velocity(1, w, 0.0, &rb);
        let s = 2.0 * v * 0.035;
        assert_relative_eq!(separation_to_field(s, 0.035, 2, &rb).0, w, max_relative = 1e-12);
    }

    #[test]
    fn timing_profile_self_consistency() {
        let rb = AtomSpecies::rubidium85();
        let x = grid(512, 6e-6);
        let y = timing_profile(&x, 2e-5, 9e-5, 40.0, 0.008, 0.04, &rb);
        let prof = Profile { x: x.clone(), counts: y };
        let f = fit_timing_profile(&prof, 0.04, 0.006, &rb).unwrap();
        assert_relative_eq!(f.center, 2e-5, max_relative = 1e-6);
        assert_relative_eq!(f.sigma, 9e-5, max_relative = 1e-6);
        assert_relative_eq!(f.amplitude, 40.0, max_relative = 1e-6);
        assert_relative_eq!(f.delta_t, 0.008, max_relative = 1e-6);
        assert!(f.residual_norm <= f.initial_residual_norm);
    }

    #[test]
    fn timing_profile_limit_at_zero_offset() {
        let rb = AtomSpecies::rubidium85();
        let x = grid(101, 1e-5);
        let y = timing_profile(&x, 0.0, 8e-5, 1.0, 0.0, 0.04, &rb);
        let vt = rb.recoil_velocity() * 0.04;
        for (xi, yi) in x.iter().zip(&y) {
            let expect = 2.0 * gauss(*xi, 0.0, 8e-5) - gauss(*xi, -vt, 8e-5) - gauss(*xi, vt, 8e-5);
            assert!((yi - expect).abs() < 1e-15);
        }
    }

    fn hyperbola_points(alpha: f64, i0: f64, b: f64, currents: &[f64], rb: &AtomSpecies) -> Vec<(f64, f64)> {
        currents
            .iter()
            .map(|&i| (i, rb.gyromag * (alpha * alpha * (i - i0).powi(2) + b * b).sqrt()))
            .collect()
    }

    #[test]
    fn hyperbola_recovers_scan_with_noise() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let rb = AtomSpecies::rubidium85();
        let currents: Vec<f64> = (0..10).map(|i| 0.1431 + 0.2 * f64::from(i) / 9.0).collect();
        let mut pts = hyperbola_points(1.524, 0.2431, 0.12, &currents, &rb);
        let noise = Normal::new(0.0, 0.3e-3 * rb.gyromag).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for p in &mut pts {
            p.1 += noise.sample(&mut rng);
        }
        let f = fit_hyperbola(&pts, &rb).unwrap();
        assert!((f.alpha - 1.524).abs() < 3.0 * f.alpha_sigma, "{f:?}");
        assert!((f.i0 - 0.2431).abs() < 3.0 * f.i0_sigma, "{f:?}");
        assert!((f.b_perp - 0.12).abs() < 3.0 * f.b_perp_sigma, "{f:?}");
        assert!(!f.ill_conditioned);
        assert!(f.residual_norm <= f.initial_residual_norm);
    }

    #[test]
    fn degenerate_hyperbola_is_a_vee() {
        let rb = AtomSpecies::rubidium85();
        let currents: Vec<f64> = (0..10).map(|i| 0.1431 + 0.2 * f64::from(i) / 9.0).collect();
        let pts = hyperbola_points(1.524, 0.2431, 0.0, &currents, &rb);
        let f = fit_hyperbola(&pts, &rb).unwrap();
        assert!(f.b_perp < 1e-4, "{f:?}");
        assert_relative_eq!(f.alpha, 1.524, max_relative = 1e-6);
        assert_relative_eq!(f.i0, 0.2431, max_relative = 1e-6);
    }

    #[test]
    fn one_sided_scan_is_flagged() {
        let rb = AtomSpecies::rubidium85();
        let currents: Vec<f64> = (0..6).map(|i| 0.30 + 0.02 * f64::from(i)).collect();
        let pts = hyperbola_points(1.524, 0.2431, 0.05, &currents, &rb);
        if let Ok(f) = fit_hyperbola(&pts, &rb) {
            assert!(f.ill_conditioned);
        }
    }

    proptest! {
        #[test]
        fn hyperbola_minimum_ignores_b_perp(b in 0.02f64..0.4, i0 in 0.2f64..0.3) {
            let rb = AtomSpecies::rubidium85();
            let currents: Vec<f64> = (0..10).map(|i| i0 - 0.1 + 0.2 * f64::from(i) / 9.0).collect();
            let f1 = fit_hyperbola(&hyperbola_points(1.524, i0, b, &currents, &rb), &rb).unwrap();
            let f2 = fit_hyperbola(&hyperbola_points(1.524, i0, 2.0 * b, &currents, &rb), &rb).unwrap();
            prop_assert!((f1.i0 - f2.i0).abs() < 1e-7);
            // argmin of the fitted curve is I₀ itself
            let at = |i: f64| f1.larmor_at(i, &rb);
            prop_assert!(at(f1.i0) <= at(f1.i0 + 1e-6) && at(f1.i0) <= at(f1.i0 - 1e-6));
        }
    }

    #[test]
    fn comb_calibration_on_synthetic_profile() {
        let rb = AtomSpecies::rubidium85();
        let x = grid(512, 24e-6);
        let dx = TAU * 100e3 * 0.04 / (2.0 * rb.wavenumber());
        let centres: Vec<f64> = (-3..=3).map(|n| f64::from(n) * dx).collect();
        let shape = [1.3e-4, 1.7e-4, 1.5, 2.4e-4];
        let prof = synthetic(&x, &centres, &[30.0; 7], shape);
        let c = calibrate_with_sidebands(&prof, TAU * 100e3, 0.04, &rb).unwrap();
        assert_relative_eq!(c.spacing, 1.5605e-3, max_relative = 1e-4);
        assert_relative_eq!(c.spacing, dx, max_relative = 1e-8);
        assert_eq!(c.orders, (-3..=3).collect::<Vec<_>>());
        assert!(c.meters_per_radian_per_second > 0.0);
    }

    #[test]
    fn no_pulse_contrast_is_zero() {
        let prof = Profile {
            x: grid(64, 1.0),
            counts: vec![0.0; 64],
        };
        let base = Profile {
            x: grid(64, 1.0),
            counts: vec![10.0; 64],
        };
        assert_eq!(contrast(&prof, &base), 0.0);
    }

    #[test]
    fn template_amplitude_is_linear() {
        let x = grid(512, 24e-6);
        let shape = StripeShape {
            sigma_pos: 1.3e-4,
            sigma_neg: 1.7e-4,
            exponent: 2.0,
            split_neg: 2.4e-4,
        };
        let p = shape.params();
        let prof = synthetic(&x, &[1e-4], &[7.5], p);
        let (a, _) = template_amplitude(&prof, Lineshape::Lobes(shape), 1e-4);
        assert_relative_eq!(a, 7.5, max_relative = 1e-12);
    }

    fn default_template() -> StripeTemplate {
        let rb = AtomSpecies::rubidium85();
        StripeTemplate::physical(&PulseConfig::default(), 0.04, 125e-6, &rb).unwrap()
    }

    #[test]
    fn template_is_symmetric_with_zero_area() {
        let t = default_template();
        let pos: f64 = t.values.iter().filter(|v| **v > 0.0).sum();
        let net: f64 = t.values.iter().sum();
        assert!(net.abs() < 1e-3 * pos, "net {net}, positive {pos}");
        for u in [3e-5, 1.2e-4, 2.5e-4, 4e-4, 9e-4] {
            assert!((t.eval(u).0 - t.eval(-u).0).abs() < 1e-6, "asymmetric at {u}");
        }
        assert_eq!(t.eval(1.0), (0.0, 0.0));
    }

    #[test]
    fn narrow_template_lobes_follow_the_kinematics() {
        let rb = AtomSpecies::rubidium85();
        // resonant π pulse with a narrow class and a tight kernel
        let pulse = PulseConfig {
            rabi_freq: TAU * 1e3,
            duration: 0.5e-3,
            ..PulseConfig::default()
        };
        let t = StripeTemplate::physical(&pulse, 0.04, 10e-6, &rb).unwrap();
        let extremum = |sign: f64| {
            let (i, _) = t
                .values
                .iter()
                .enumerate()
                .filter(|(i, _)| t.start + *i as f64 * t.step > 0.0)
                .max_by(|a, b| (sign * a.1).total_cmp(&(sign * b.1)))
                .unwrap();
            t.start + i as f64 * t.step
        };
        let vr = rb.recoil_velocity();
        // class −v_r kicked by 2v_r for the 24.5 ms after the pulse plus half the pulse
        let enhancement = vr * (-0.04 + 2.0 * 0.0245 + 0.5e-3);
        assert!((extremum(1.0) - enhancement).abs() < 5e-6, "{} vs {enhancement}", extremum(1.0));
        assert!((extremum(-1.0) - vr * 0.04).abs() < 5e-6, "{} vs {}", extremum(-1.0), vr * 0.04);
    }

    #[test]
    fn template_interpolant_derivative_matches_finite_differences() {
        let t = default_template();
        for u in [-6e-4, -1e-4, 1.7e-5, 3.3e-4] {
            let h = 1e-8;
            let fd = (t.eval(u + h).0 - t.eval(u - h).0) / (2.0 * h);
            assert!((fd - t.eval(u).1).abs() < 1e-4 * t.eval(u).1.abs().max(1.0), "{u}");
        }
    }

    #[test]
    fn template_model_gradient_matches_finite_differences() {
        let t = default_template();
        let m = StripeModel::new(&Layout::Pair { central: false, extra: 0 }, Some(&t));
        let p = [1.03, 1e-5, 7e-4, 40.0, 35.0];
        let mut g = vec![0.0; p.len()];
        for &x in &[-6e-4, -2e-4, 1e-4, 5e-4] {
            m.grad(x, &p, &mut g);
            for j in 0..p.len() {
                let h = 1e-7 * p[j].abs().max(1e-9);
                let mut hi = p;
                let mut lo = p;
                hi[j] += h;
                lo[j] -= h;
                let fd = (m.eval(x, &hi) - m.eval(x, &lo)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-4 * (fd.abs() + 1.0), "param {j} at x={x}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn template_fit_separates_an_overlapping_pair() {
        let rb = AtomSpecies::rubidium85();
        let t = default_template();
        let x = grid(768, 24e-6);
        let shape = Lineshape::Template(&t, 1.05);
        for half in [1.5e-4, 2.7e-4, 6e-4] {
            let counts = x.iter().map(|&x| 30.0 * (shape.unit(x, -half) + shape.unit(x, half))).collect();
            let prof = Profile { x: x.clone(), counts };
            let opts = StripeOptions {
                template: Some(t.clone()),
                ..StripeOptions::default()
            };
            let r = fit_stripes_zero_area(&prof, &opts, &Mapping::TimeOfFlight { t_map: 0.04 }, &rb);
            assert_eq!(r.status, FitStatus::Resolved, "half separation {half}");
            assert_relative_eq!(r.separation, 2.0 * half, max_relative = 1e-6);
            assert_relative_eq!(r.template_scale.unwrap(), 1.05, max_relative = 1e-6);
        }
    }

    #[test]
    fn template_rejects_a_pulse_after_the_image() {
        let rb = AtomSpecies::rubidium85();
        let pulse = PulseConfig {
            start_time: 0.039,
            ..PulseConfig::default()
        };
        assert!(StripeTemplate::physical(&pulse, 0.04, 125e-6, &rb).is_err());
    }
}
