//! Desk-scale acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line on stdout (visible without `--nocapture`) before asserting.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use vstpr_core::analysis::{calibrate_with_sidebands, CentralStripe, FitStatus};
use vstpr_core::config::{CalibrationMode, ExperimentConfig};
use vstpr_core::experiment::{current_range, zero_field_coils, Experiment, Measurement};
use vstpr_core::faraday::{extract_frequency, synthesize_trace, FaradayConfig};
use vstpr_core::imaging::{cross_section, Frame};
use vstpr_core::model::{AtomSpecies, FieldVector};
use vstpr_core::nulling::{null, NullOptions};
use vstpr_core::raman::transfer_probability;

fn verdict(n: u32, pass: bool, detail: String) {
    let line = format!("\ncriterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n}: {detail}");
}

/// Currents putting `b` (G) on top of the compensation point.
fn currents_for(config: &ExperimentConfig, b: [f64; 3]) -> [f64; 3] {
    let axes = config.coils.axes();
    [0, 1, 2].map(|k| axes[k].compensation + b[k] / axes[k].slope)
}

fn measure(e: &Experiment, b: [f64; 3]) -> Measurement {
    let mapping = e.mapping().unwrap();
    e.measure(&e.coils_at(currents_for(e.config(), b)), &mapping).unwrap().1
}

#[test]
fn criterion_1_field_round_trip() {
    let mut c = ExperimentConfig::default();
    c.imaging.width = 768;
    c.ensemble.atom_count = 200_000;
    c.analysis.calibration = CalibrationMode::Sidebands;
    let e = Experiment::new(c).unwrap();
    let t = Instant::now();
    let mapping = e.mapping().unwrap();
    let calibration_time = t.elapsed().as_secs_f64();

    let mut worst_abs: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut failures = Vec::new();
    for i in 0..20 {
        let b = 0.02 * 50f64.powf(i as f64 / 19.0);
        let phi = 0.37 * i as f64;
        let field = [0.0, b * phi.sin(), b * phi.cos()];
        let t = Instant::now();
        let m = e.measure(&e.coils_at(currents_for(e.config(), field)), &mapping).unwrap().1;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        let err = (m.fit.field - b).abs();
        let ok = m.fit.status == FitStatus::Resolved && if b <= 0.3 { err <= 0.5e-3 } else { err <= 0.01 * b };
        if b <= 0.3 {
            worst_abs = worst_abs.max(err);
        } else {
            worst_rel = worst_rel.max(err / b);
        }
        if !ok {
            failures.push(format!("{:.1} mG -> {:.2} mG {:?}", b * 1e3, m.fit.field * 1e3, m.fit.status));
        }
    }
    let pass = failures.is_empty() && slowest <= 10.0;
    verdict(
        1,
        pass,
        format!(
            "worst |dB| {:.3} mG below 300 mG, worst relative {:.3}% above; slowest field {slowest:.2} s, calibration {calibration_time:.2} s{}",
            worst_abs * 1e3,
            worst_rel * 100.0,
            if failures.is_empty() { String::new() } else { format!("; off: {}", failures.join(", ")) }
        ),
    );
}

fn z_scan(b_perp: f64) -> vstpr_core::analysis::ScanFitResult {
    let mut c = ExperimentConfig::default();
    let i0 = c.coils.z.compensation;
    c.coils.y.current = c.coils.y.compensation + b_perp / c.coils.y.slope;
    let e = Experiment::new(c).unwrap();
    let currents = current_range(i0 - 0.15, i0 + 0.15, 10).unwrap();
    let report = e.scan(2, &currents, &e.mapping().unwrap()).unwrap();
    report.fit.unwrap_or_else(|| panic!("no hyperbola: {:?}", report.fit_error))
}

#[test]
fn criterion_2_hyperbola_scan() {
    let truth = ExperimentConfig::default().coils.z;
    let fit = z_scan(0.12);
    let doubled = z_scan(0.24);
    let d_alpha = (fit.alpha - truth.slope).abs() / truth.slope;
    let d_i0 = (fit.i0 - truth.compensation).abs();
    let shift = (doubled.i0 - fit.i0).abs();
    let pass = d_alpha <= 0.005 && d_i0 <= 0.5e-3 && shift < 0.2e-3;
    verdict(
        2,
        pass,
        format!(
            "alpha {:.4} G/A ({:.3}%), I0 {:.3} mA (off {:.3} mA), B_perp {:.1} mG; doubled B_perp shifts I0 by {:.3} mA",
            fit.alpha,
            d_alpha * 100.0,
            fit.i0 * 1e3,
            d_i0 * 1e3,
            fit.b_perp * 1e3,
            shift * 1e3
        ),
    );
}

#[test]
fn criterion_3_timing_contrast() {
    let e = Experiment::new(ExperimentConfig::default()).unwrap();
    let ratios = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    let sweep = e.timing_sweep(&ratios, 200e-6).unwrap();
    let c: Vec<f64> = sweep.points.iter().map(|p| p.contrast).collect();
    let peak = c.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let rising = c[..=3].windows(2).all(|w| w[0] < w[1]);
    let falling = c[3..].windows(2).all(|w| w[0] > w[1]);
    let fit = e.timing_fit(0.25, 200e-6).unwrap();
    let rel = (fit.fit.positive_splitting - fit.expected_splitting).abs() / fit.expected_splitting;
    let pass = ratios[peak] == 0.5 && rising && falling && rel <= 0.05;
    verdict(
        3,
        pass,
        format!(
            "contrast {:?}, peak at {}; splitting at 0.25 is {:.1} um vs 4 v_r dT = {:.1} um ({:.2}%)",
            c.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            ratios[peak],
            fit.fit.positive_splitting * 1e6,
            fit.expected_splitting * 1e6,
            rel * 100.0
        ),
    );
}

/// Excited population of i·ċ = H·c, H = ½[[−δ, Ω], [Ω, δ]], by classical RK4.
fn integrate_two_level(delta: f64, rabi: f64, t: f64) -> f64 {
    // state (Re g, Im g, Re e, Im e)
    let deriv = |s: [f64; 4]| -> [f64; 4] {
        let (gr, gi, er, ei) = (s[0], s[1], s[2], s[3]);
        // ċ = −i·H·c
        let hg = (-0.5 * delta * gr + 0.5 * rabi * er, -0.5 * delta * gi + 0.5 * rabi * ei);
        let he = (0.5 * rabi * gr + 0.5 * delta * er, 0.5 * rabi * gi + 0.5 * delta * ei);
        [hg.1, -hg.0, he.1, -he.0]
    };
    let steps = 4000 + (20.0 * (delta.abs() + rabi) * t) as usize;
    let h = t / steps as f64;
    let mut s = [1.0, 0.0, 0.0, 0.0];
    for _ in 0..steps {
        let k1 = deriv(s);
        let k2 = deriv(std::array::from_fn(|i| s[i] + 0.5 * h * k1[i]));
        let k3 = deriv(std::array::from_fn(|i| s[i] + 0.5 * h * k2[i]));
        let k4 = deriv(std::array::from_fn(|i| s[i] + h * k3[i]));
        s = std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    s[2] * s[2] + s[3] * s[3]
}

#[test]
fn criterion_4_rabi_oracle() {
    let rabi = 2.0 * PI * 10e3;
    let mut worst: f64 = 0.0;
    for i in 0..=40 {
        let t = 4.0 * PI / rabi * i as f64 / 40.0;
        for j in 0..=40 {
            let delta = 20.0 * rabi * j as f64 / 40.0;
            worst = worst.max((transfer_probability(delta, rabi, t) - integrate_two_level(delta, rabi, t)).abs());
        }
    }
    verdict(4, worst <= 1e-6, format!("max |P - P_ode| = {worst:.2e} over 41x41 grid"));
}

#[test]
fn criterion_5_central_stripe_marker() {
    let mut c = ExperimentConfig::default();
    c.analysis.central = CentralStripe::Always;
    let e = Experiment::new(c).unwrap();
    let b = 0.3;
    let mut lines = Vec::new();
    let mut pass = true;
    for cos2 in [0.0f64, 0.2, 0.4, 0.7] {
        let (sin, cos) = ((1.0 - cos2).sqrt(), cos2.sqrt());
        let m = measure(&e, [b * cos, 0.0, b * sin]);
        let amp = m.fit.central().map_or(0.0, |s| s.amplitude.abs());
        let ratio = amp / m.fit.noise_floor;
        pass &= if cos2 == 0.0 { ratio < 2.0 } else { ratio > 5.0 };
        lines.push(format!("cos^2 {cos2}: {ratio:.2}x"));
    }
    verdict(5, pass, format!("central amplitude over noise floor at 300 mG: {}", lines.join(", ")));
}

/// The frame with its pixel size metadata scaled about the frame centre.
fn mislabelled(frame: &Frame, factor: f64) -> Frame {
    let mut f = frame.clone();
    let g = &mut f.geometry;
    let centre = g.left + 0.5 * g.width as f64 * g.pixel_size;
    g.pixel_size *= factor;
    g.left = centre - 0.5 * g.width as f64 * g.pixel_size;
    f
}

#[test]
fn criterion_6_sideband_calibration_closure() {
    let mut c = ExperimentConfig::default();
    c.analysis.calibration = CalibrationMode::Sidebands;
    let e = Experiment::new(c.clone()).unwrap();
    let pulse = c.pulse.clone().with_comb(c.analysis.comb_orders);
    let comb = e.simulate_with(&zero_field_coils(&c.coils), &pulse).unwrap();
    let rows = 0..comb.difference.geometry.height;

    let factors = [1.0, 1.05];
    let mappings = factors.map(|f| {
        let profile = cross_section(&mislabelled(&comb.difference, f), rows.clone()).unwrap();
        calibrate_with_sidebands(&profile, pulse.modulation_freq, c.t_map(), &c.species).unwrap().mapping()
    });
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for b in [0.05, 0.15, 0.4, 0.8] {
        let sim = e.simulate(&e.coils_at(currents_for(&c, [0.0, 0.6 * b, 0.8 * b]))).unwrap();
        let [good, bad] = [0, 1].map(|k| {
            let profile = cross_section(&mislabelled(&sim.difference, factors[k]), rows.clone()).unwrap();
            e.analyze(&profile, &mappings[k]).field
        });
        let rel = (bad - good).abs() / good;
        worst = worst.max(rel);
        lines.push(format!("{:.0} mG: {rel:.1e}", b * 1e3));
    }
    verdict(6, worst <= 0.002, format!("pixel size +5%, relative change of calibrated |B|: {}", lines.join(", ")));
}

#[test]
fn criterion_7_faraday_cross_check() {
    let mut c = ExperimentConfig::default();
    c.coils.y.current = c.coils.y.compensation + 0.12 / c.coils.y.slope;
    let i0 = c.coils.z.compensation;
    let e = Experiment::new(c).unwrap();
    let currents = current_range(i0 - 0.15, i0 + 0.15, 10).unwrap();
    let stripes = e.scan(2, &currents, &e.mapping().unwrap()).unwrap().fit.unwrap();
    let faraday = e.faraday_scan(2, &currents).unwrap().fit.unwrap();
    let agreement = (stripes.alpha - faraday.alpha).abs() / faraday.alpha;

    // SNR 10 over 50 periods of a 20 kHz precession
    let species = AtomSpecies::default();
    let field = FieldVector::new(0.0, 0.0, 20e3 / (species.gyromag / (2.0 * PI)));
    let cfg = FaradayConfig {
        amplitude: 1.0,
        noise_sigma: 0.1,
        decay: 1.0,
        duration: 50.0 / 20e3,
        ..FaradayConfig::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let trace = synthesize_trace(&field, &species, &cfg, seed).unwrap();
        let est = extract_frequency(&trace).unwrap();
        worst = worst.max((est.larmor / (2.0 * PI) - 20e3).abs() / 20e3);
    }
    let pass = agreement <= 0.02 && worst <= 1e-3;
    verdict(
        7,
        pass,
        format!(
            "alpha stripes {:.4} vs Faraday {:.4} G/A ({:.2}%); worst frequency error at SNR 10, 50 periods: {:.4}% over 20 seeds",
            stripes.alpha,
            faraday.alpha,
            agreement * 100.0,
            worst * 100.0
        ),
    );
}

#[test]
fn criterion_8_conservation_and_determinism() {
    let mut c = ExperimentConfig::default();
    c.imaging.pixel_size = 96e-6;
    c.ensemble.atom_count = 20_000;
    let e = Experiment::new(c.clone()).unwrap();
    let mut worst: f64 = 0.0;
    let mut check = |f: &Frame, reference: &Frame| {
        let total: f64 = reference.counts.iter().sum();
        worst = worst.max(f.counts.iter().sum::<f64>().abs() / total);
    };
    for b in [0.0, 0.05, 0.3, 1.0] {
        let sim = e.simulate(&e.coils_at(currents_for(&c, [0.0, 0.0, b]))).unwrap();
        check(&sim.difference, &sim.without_pulse);
    }
    let comb = e
        .simulate_with(&zero_field_coils(&c.coils), &c.pulse.clone().with_comb(3))
        .unwrap();
    check(&comb.difference, &comb.without_pulse);

    let json = || {
        let e = Experiment::new(c.clone()).unwrap();
        serde_json::to_string(&measure(&e, [0.0, 0.1, 0.2])).unwrap()
    };
    let identical = json() == json();
    verdict(
        8,
        worst <= 1e-9 && identical,
        format!("max |sum(diff)| / sum(background) = {worst:.1e}; repeated result JSON identical: {identical}"),
    );
}

#[test]
fn criterion_9_automated_nulling() {
    let e = Experiment::new(ExperimentConfig::default()).unwrap();
    let i0 = e.config().coils.compensation_currents();
    let start = [i0[0] + 0.1, i0[1] - 0.1, i0[2] + 0.1];
    let opts = NullOptions::default();
    let report = null(&e, start, &e.mapping().unwrap(), &opts, &mut |_, _| {}).unwrap();
    let err = [0, 1, 2].map(|k| (report.currents[k] - i0[k]).abs());
    let pass = err.iter().all(|&d| d <= 2e-3) && report.sweeps <= 3;
    verdict(
        9,
        pass,
        format!(
            "errors {:.3}/{:.3}/{:.3} mA after {} sweeps, {} evaluations; final {:?}, |B| bound {:.2} mG",
            err[0] * 1e3,
            err[1] * 1e3,
            err[2] * 1e3,
            report.sweeps,
            report.evaluations,
            report.final_fit.status,
            report.field_upper_bound.unwrap_or(f64::NAN) * 1e3
        ),
    );
}
