//! Request and response bodies of the vstpr HTTP service.
//!
//! Session routes steer one live experiment (the nulling workflow):
//!
//! | route | body | reply |
//! |---|---|---|
//! | `GET /api/state` | | [`StateSummary`] |
//! | `PUT /api/currents` | [`CurrentsRequest`] | [`MutationResponse`], 200 or 202 |
//! | `PUT /api/pulse` | [`PulsePatch`] | [`MutationResponse`], 200 or 202 |
//! | `GET /api/frame?kind=raw\|diff&format=png\|pgm` | | image bytes, 404 before the first simulation |
//! | `GET /api/profile?format=json\|csv` | | [`ProfileResponse`] or CSV |
//! | `GET /api/analysis` | | [`AnalysisResponse`] |
//! | `GET /api/history` | | [`HistoryResponse`] |
//! | `POST /api/null` | [`NullRequest`] | [`MutationResponse`], 202 |
//!
//! `POST /api/run` takes a [`RunRequest`], executes one batch operation into a
//! run directory on the service host and replies with its [`Manifest`].
//!
//! Every failure is an [`ApiError`] body with a 4xx/5xx status.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use vstpr_core::analysis::{FitStatus, StripeFitResult};
use vstpr_core::config::ExperimentConfig;
use vstpr_core::imaging::Profile;
use vstpr_core::nulling::NullOptions;

/// Atom counts above this recompute in the background: mutations answer 202
/// and clients poll [`StateSummary::pending`].
pub const SYNC_ATOM_LIMIT: usize = 100_000;

/// Header carrying the state version on frame and CSV replies.
pub const VERSION_HEADER: &str = "x-state-version";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    /// Offending config key or body field, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// Coil currents, A.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentsRequest {
    pub ix: f64,
    pub iy: f64,
    pub iz: f64,
}

impl CurrentsRequest {
    pub fn to_array(self) -> [f64; 3] {
        [self.ix, self.iy, self.iz]
    }
}

impl From<[f64; 3]> for CurrentsRequest {
    fn from(c: [f64; 3]) -> Self {
        CurrentsRequest {
            ix: c[0],
            iy: c[1],
            iz: c[2],
        }
    }
}

/// Pulse settings the session may change; absent fields keep their value.
/// Units follow the config file: Hz for frequencies, seconds for times.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulsePatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rabi_freq_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta12_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light_shift_hz: Option<f64>,
    /// `instantaneous_pi` or `rabi_cycling`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

impl PulsePatch {
    /// Config keys and values in the `key = value` vocabulary.
    pub fn assignments(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut num = |k: &'static str, v: Option<f64>| {
            if let Some(v) = v {
                out.push((k, v.to_string()));
            }
        };
        num("pulse.rabi_freq_hz", self.rabi_freq_hz);
        num("pulse.duration", self.duration);
        num("pulse.start_time", self.start_time);
        num("pulse.delta12_hz", self.delta12_hz);
        num("pulse.light_shift_hz", self.light_shift_hz);
        if let Some(m) = &self.mode {
            out.push(("pulse.mode", m.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationStatus {
    /// Recomputed; the state now shows this version.
    Applied,
    /// Accepted; the recompute runs in the background.
    Pending,
    /// Recomputed, but a later mutation had already been applied.
    Superseded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationResponse {
    pub version: u64,
    pub status: MutationStatus,
}

/// Headline numbers of a stripe fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub status: FitStatus,
    /// m
    pub separation: f64,
    /// rad/s
    pub larmor: f64,
    /// G
    pub field: f64,
    pub field_sigma: f64,
    /// G, set when unresolved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_upper_bound: Option<f64>,
}

impl From<&StripeFitResult> for Readout {
    fn from(f: &StripeFitResult) -> Self {
        Readout {
            status: f.status,
            separation: f.separation,
            larmor: f.larmor,
            field: f.field,
            field_sigma: f.field_sigma,
            field_upper_bound: f.field_upper_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    /// Latest accepted mutation.
    pub version: u64,
    /// Version the frames and analysis belong to; `None` before the first simulation.
    pub applied_version: Option<u64>,
    /// A recompute or a nulling run is still in flight.
    pub pending: bool,
    pub nulling: bool,
    /// A, as last requested.
    pub currents: [f64; 3],
    /// A, of the displayed frames.
    pub applied_currents: Option<[f64; 3]>,
    pub readout: Option<Readout>,
    pub history_len: usize,
    /// Last background failure, cleared by the next success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResponse {
    pub version: u64,
    pub currents: [f64; 3],
    pub fit: StripeFitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResponse {
    pub version: u64,
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub version: u64,
    /// A
    pub currents: [f64; 3],
    pub status: FitStatus,
    /// ω_L estimate, rad/s; zero unless resolved.
    pub larmor: f64,
    /// Objective seen by the nulling loop, m; absent for manual steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub version: u64,
    pub entries: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NullRequest {
    /// A; the session currents when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<NullOptions>,
}

/// Experiment config for a run: `text` in the `key = value` format (defaults
/// when absent), then `overrides` applied in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Name shown in parse errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<(String, String)>,
}

/// Current sweep along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentSweep {
    /// `x`, `y` or `z`.
    pub axis: String,
    /// A
    pub from: f64,
    pub to: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Operation {
    /// Pulse-on, pulse-off and difference frames at the configured currents.
    Simulate,
    /// Fits every difference frame (PGM + sidecar) in a directory, or one file.
    Fit { input: PathBuf },
    Scan { sweep: CurrentSweep },
    /// T_r/T_i ratios; π pulses of `duration` seconds (200 μs when absent).
    /// `fit_ratio` adds a two-channel fit of the stripe at that timing.
    TimingSweep {
        ratios: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fit_ratio: Option<f64>,
    },
    Calibrate,
    /// One trace at the configured field, or a current scan when `sweep` is set.
    Faraday {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sweep: Option<CurrentSweep>,
    },
    Null {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        options: Option<NullOptions>,
    },
}

impl Operation {
    pub fn name(&self) -> &'static str {
        match self {
            Operation::Simulate => "simulate",
            Operation::Fit { .. } => "fit",
            Operation::Scan { .. } => "scan",
            Operation::TimingSweep { .. } => "timing-sweep",
            Operation::Calibrate => "calibrate",
            Operation::Faraday { .. } => "faraday",
            Operation::Null { .. } => "null",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    #[serde(default)]
    pub config: ConfigSource,
    /// Run directory on the service host; created if missing.
    pub out: PathBuf,
    pub operation: Operation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// `manifest.json` of a run directory. Holds no timestamps or absolute paths,
/// so equal config and seed give an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub operation: String,
    pub seed: u64,
    /// Fits that ended in `failed`.
    pub fit_failures: usize,
    /// Short human-readable outcome.
    pub summary: String,
    /// Main result file.
    pub result: String,
    pub files: Vec<ManifestFile>,
}
