//! Batch operations written to run directories.
//!
//! Layout, relative to the run directory:
//!
//! - `config.txt`: the effective config, re-loadable with `--config`;
//! - `frames/*.pgm` + `frames/*.json`: 16-bit frames and their sidecars;
//! - `profiles/*.csv`, `traces/*.csv`: two-column cross-sections and traces;
//! - `points/NN/…`: per-point files of scans and sweeps;
//! - `results/*.json`: fit results;
//! - `manifest.json`: [`Manifest`] listing every file with its SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use vstpr_core::analysis::{FitStatus, Mapping, StripeFitResult};
use vstpr_core::config::ExperimentConfig;
use vstpr_core::experiment::{axis_index, current_range, Experiment, Simulation};
use vstpr_core::export::{read_pgm, write_frame_csv, write_pgm, write_profile_csv, write_trace_csv};
use vstpr_core::faraday::{extract_frequency, synthesize_trace, FrequencyEstimate};
use vstpr_core::imaging::{Frame, FrameKind, Profile};
use vstpr_core::model::field_at;
use vstpr_core::nulling::{null, NullEvaluation};
use vstpr_core::{Error, Result};
use vstpr_protocol::{ConfigSource, CurrentSweep, Manifest, ManifestFile, Operation, RunRequest};

/// Default timing-sweep pulse length, s.
pub const TIMING_PULSE: f64 = 200e-6;

/// Parses the config text over the defaults, then applies the overrides.
pub fn build_config(src: &ConfigSource) -> Result<ExperimentConfig> {
    let mut cfg = match &src.text {
        Some(text) => ExperimentConfig::parse(text, Path::new(src.name.as_deref().unwrap_or("<config>")))?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in &src.overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(p, text)?;
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// `rel.pgm` and its `rel.json` sidecar.
    fn frame(&mut self, rel: &str, frame: &Frame) -> Result<()> {
        let p = self.path(&format!("{rel}.pgm"))?;
        self.files.push(format!("{rel}.json"));
        write_pgm(frame, &p)?;
        Ok(())
    }

    fn frame_csv(&mut self, rel: &str, frame: &Frame) -> Result<()> {
        let p = self.path(rel)?;
        write_frame_csv(frame, fs::File::create(p)?)
    }

    fn profile(&mut self, rel: &str, profile: &Profile) -> Result<()> {
        let p = self.path(rel)?;
        write_profile_csv(profile, fs::File::create(p)?)
    }

    fn simulation(&mut self, dir: &str, sim: &Simulation, all_frames: bool) -> Result<()> {
        if all_frames {
            self.frame(&format!("{dir}frames/with_pulse"), &sim.with_pulse)?;
            self.frame(&format!("{dir}frames/without_pulse"), &sim.without_pulse)?;
            self.frame_csv(&format!("{dir}frames/difference.csv"), &sim.difference)?;
        }
        self.frame(&format!("{dir}frames/difference"), &sim.difference)?;
        self.profile(&format!("{dir}profiles/difference.csv"), &sim.profile)?;
        self.profile(&format!("{dir}profiles/background.csv"), &sim.background)
    }

    fn finish(mut self, operation: &str, seed: u64, fit_failures: usize, summary: String, result: &str) -> Result<Manifest> {
        self.files.sort();
        self.files.dedup();
        let files = self
            .files
            .iter()
            .map(|rel| {
                let bytes = fs::read(self.root.join(rel))?;
                let digest = Sha256::digest(&bytes);
                Ok(ManifestFile {
                    path: rel.clone(),
                    bytes: bytes.len() as u64,
                    sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            operation: operation.into(),
            seed,
            fit_failures,
            summary,
            result: result.into(),
            files,
        };
        fs::write(self.root.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

fn failed(fit: &StripeFitResult) -> usize {
    usize::from(fit.status == FitStatus::Failed)
}

/// One-line description of a stripe fit.
pub fn describe(fit: &StripeFitResult) -> String {
    match fit.status {
        FitStatus::Resolved => format!("resolved, |B| = {:.4} ± {:.4} mG", fit.field * 1e3, fit.field_sigma * 1e3),
        FitStatus::Unresolved => match fit.field_upper_bound {
            Some(b) => format!("unresolved, |B| ≤ {:.4} mG", b * 1e3),
            None => "unresolved".into(),
        },
        FitStatus::Failed => format!("failed: {}", fit.message.as_deref().unwrap_or("no detail")),
    }
}

fn sweep_currents(sweep: &CurrentSweep) -> Result<(usize, Vec<f64>)> {
    if !(sweep.from.is_finite() && sweep.to.is_finite()) {
        return Err(Error::Input("scan limits must be finite".into()));
    }
    Ok((axis_index(&sweep.axis)?, current_range(sweep.from, sweep.to, sweep.steps)?))
}

/// Difference frames to fit: `input` itself, or every `*.pgm` in it whose
/// sidecar marks a difference frame, in name order.
fn fit_inputs(input: &Path) -> Result<Vec<(String, Frame)>> {
    let stem = |p: &Path| p.file_stem().map_or_else(|| "frame".into(), |s| s.to_string_lossy().into_owned());
    if input.is_file() {
        return Ok(vec![(stem(input), read_pgm(input)?)]);
    }
    if !input.is_dir() {
        return Err(Error::Input(format!("{} does not exist", input.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "pgm"));
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let frame = read_pgm(&p)?;
        if frame.meta.kind == FrameKind::Difference {
            out.push((stem(&p), frame));
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no difference frame (PGM + sidecar) in {}", input.display())));
    }
    Ok(out)
}

#[derive(Serialize)]
struct NamedFit<'a> {
    frame: &'a str,
    fit: &'a StripeFitResult,
}

#[derive(Serialize)]
struct SingleTrace {
    /// rad/s
    configured_larmor: f64,
    estimate: FrequencyEstimate,
}

/// Runs one operation into `req.out` and writes its manifest.
pub fn execute(req: &RunRequest) -> Result<Manifest> {
    let config = build_config(&req.config)?;
    let experiment = Experiment::new(config.clone())?;
    let mut dir = RunDir::create(&req.out)?;
    dir.text("config.txt", &config.to_text())?;
    let op = req.operation.name();
    let seed = config.seed;
    tracing::info!(op, out = %req.out.display(), "run");

    match &req.operation {
        Operation::Simulate => {
            // Ω = 0 leaves nothing to fit or calibrate; the frames are the result
            let pulsed = config.pulse.rabi_freq > 0.0;
            let mapping = match pulsed {
                true => experiment.mapping()?,
                false => Mapping::TimeOfFlight { t_map: config.t_map() },
            };
            let (sim, m) = experiment.measure(&config.coils, &mapping)?;
            dir.simulation("", &sim, true)?;
            dir.json("results/measurement.json", &m)?;
            let (failures, summary) = match pulsed {
                true => (failed(&m.fit), describe(&m.fit)),
                false => (0, "no pulse (zero Rabi frequency): frames only".to_string()),
            };
            dir.finish(op, seed, failures, summary, "results/measurement.json")
        }
        Operation::Fit { input } => {
            let frames = fit_inputs(input)?;
            let mapping = experiment.mapping()?;
            let mut fits = Vec::new();
            for (name, frame) in &frames {
                let profile = experiment.cross_section(frame)?;
                let fit = experiment.analyze(&profile, &mapping);
                dir.profile(&format!("profiles/{name}.csv"), &profile)?;
                dir.json(&format!("results/{name}.json"), &fit)?;
                fits.push((name.clone(), fit));
            }
            let named: Vec<NamedFit> = fits.iter().map(|(frame, fit)| NamedFit { frame, fit }).collect();
            dir.json("results/fits.json", &named)?;
            let failures = fits.iter().map(|(_, f)| failed(f)).sum();
            let summary = match fits.as_slice() {
                [(_, one)] => describe(one),
                _ => format!("{} frames fitted, {failures} failed", fits.len()),
            };
            dir.finish(op, seed, failures, summary, "results/fits.json")
        }
        Operation::Scan { sweep } => {
            let (axis, currents) = sweep_currents(sweep)?;
            let mapping = experiment.mapping()?;
            let mut failures = 0;
            let report = experiment.scan_with(axis, &currents, &mapping, &mut |i, sim, m| {
                failures += failed(&m.fit);
                let p = format!("points/{i:02}/");
                dir.simulation(&p, sim, false)?;
                dir.json(&format!("{p}fit.json"), &m.fit)
            })?;
            dir.json("results/scan.json", &report)?;
            let summary = match &report.fit {
                Some(f) => format!(
                    "alpha = {:.5} ± {:.5} G/A, I0 = {:.4} ± {:.4} mA, B_perp = {:.4} mG",
                    f.alpha,
                    f.alpha_sigma,
                    f.i0 * 1e3,
                    f.i0_sigma * 1e3,
                    f.b_perp * 1e3
                ),
                None => format!("no hyperbola: {}", report.fit_error.as_deref().unwrap_or("unknown")),
            };
            if report.fit.is_none() {
                failures += 1;
            }
            dir.finish(op, seed, failures, summary, "results/scan.json")
        }
        Operation::TimingSweep {
            ratios,
            duration,
            fit_ratio,
        } => {
            let duration = duration.unwrap_or(TIMING_PULSE);
            let sweep = experiment.timing_sweep_with(ratios, duration, &mut |i, sim| dir.simulation(&format!("points/{i:02}/"), sim, false))?;
            dir.json("results/timing_sweep.json", &sweep)?;
            let p = dir.path("results/contrast.csv")?;
            let mut w = csv::Writer::from_path(p).map_err(Error::from)?;
            w.write_record(["ratio", "contrast"]).map_err(Error::from)?;
            for pt in &sweep.points {
                w.write_record([pt.ratio.to_string(), pt.contrast.to_string()]).map_err(Error::from)?;
            }
            w.flush()?;
            let best = sweep.points.iter().max_by(|a, b| a.contrast.total_cmp(&b.contrast));
            let mut summary = best.map_or_else(|| "no points".into(), |b| format!("contrast peaks at T_r/T_i = {}", b.ratio));
            if let Some(r) = fit_ratio {
                let fit = experiment.timing_fit(*r, duration)?;
                summary += &format!(
                    "; splitting at {r}: {:.3} μm (expected {:.3} μm)",
                    fit.fit.positive_splitting * 1e6,
                    fit.expected_splitting * 1e6
                );
                dir.json("results/timing_fit.json", &fit)?;
            }
            dir.finish(op, seed, 0, summary, "results/timing_sweep.json")
        }
        Operation::Calibrate => {
            let (cal, profile) = experiment.calibrate()?;
            dir.profile("profiles/comb.csv", &profile)?;
            dir.json("results/calibration.json", &cal)?;
            let summary = format!(
                "{:.6e} m per rad/s ± {:.2e}",
                cal.meters_per_radian_per_second, cal.uncertainty
            );
            dir.finish(op, seed, 0, summary, "results/calibration.json")
        }
        Operation::Faraday { sweep: None } => {
            let field = field_at(&config.coils);
            let trace = synthesize_trace(&field, &config.species, &config.faraday, seed)?;
            let estimate = extract_frequency(&trace)?;
            let p = dir.path("traces/trace.csv")?;
            write_trace_csv(&trace, fs::File::create(p)?)?;
            let summary = format!("{:?}: f_L = {:.6} kHz", estimate.status, estimate.larmor / std::f64::consts::TAU * 1e-3);
            dir.json(
                "results/frequency.json",
                &SingleTrace {
                    configured_larmor: trace.model.map_or(0.0, |m| m.larmor),
                    estimate,
                },
            )?;
            dir.finish(op, seed, 0, summary, "results/frequency.json")
        }
        Operation::Faraday { sweep: Some(sweep) } => {
            let (axis, currents) = sweep_currents(sweep)?;
            let scan = experiment.faraday_scan_with(axis, &currents, &mut |i, trace| {
                let p = dir.path(&format!("traces/{i:02}.csv"))?;
                write_trace_csv(trace, fs::File::create(p)?)
            })?;
            dir.json("results/faraday_scan.json", &scan)?;
            let summary = match &scan.fit {
                Some(f) => format!("alpha = {:.5} ± {:.5} G/A, I0 = {:.4} mA", f.alpha, f.alpha_sigma, f.i0 * 1e3),
                None => format!("no hyperbola: {}", scan.fit_error.as_deref().unwrap_or("unknown")),
            };
            let failures = usize::from(scan.fit.is_none());
            dir.finish(op, seed, failures, summary, "results/faraday_scan.json")
        }
        Operation::Null { options } => {
            let opts = options.unwrap_or_default();
            let mapping = experiment.mapping()?;
            let mut evaluations: Vec<NullEvaluation> = Vec::new();
            let report = null(&experiment, config.coils.currents(), &mapping, &opts, &mut |ev, _| evaluations.push(ev.clone()))?;
            let (sim, _) = experiment.measure(&experiment.coils_at(report.currents), &mapping)?;
            dir.simulation("", &sim, false)?;
            dir.json("results/null.json", &report)?;
            dir.json("results/evaluations.json", &evaluations)?;
            let c = report.currents.map(|c| c * 1e3);
            let summary = format!(
                "currents ({:.4}, {:.4}, {:.4}) mA after {} sweeps, final fit {}",
                c[0],
                c[1],
                c[2],
                report.sweeps,
                describe(&report.final_fit)
            );
            dir.finish(op, seed, failed(&report.final_fit), summary, "results/null.json")
        }
    }
}
