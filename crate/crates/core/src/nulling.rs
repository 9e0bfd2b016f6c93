//! Automated field nulling by cyclic coordinate descent over the coil currents.
//!
//! Each axis gets a golden-section line search on the stripe separation. The
//! beam axis x goes first: with the transverse field already nulled only the
//! Δm = 0 stripe survives and the separation says nothing about B_x.
//!
//! During a line search a transverse partner axis is held `bias` amps off its
//! current value. The separation then traces sqrt(α²(I − I₀)² + B_rest²) with
//! B_rest large enough that the ±1 stripes and the Δm = 0 stripe stay apart.
//! The minimum is flatter but the fit is smooth in the currents there, while
//! near zero field overlapping stripes make it too rough to steer by.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::analysis::{fit_hyperbola, nulling_objective, FitStatus, Mapping, StripeFitResult};
use crate::error::{Error, Result};
use crate::experiment::{Experiment, AXES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullOptions {
    pub sweeps: usize,
    /// Half-width of the first line search around the current value, A.
    pub bracket: f64,
    /// Bracket factor from one sweep to the next.
    pub shrink: f64,
    /// Line searches stop once the bracket is narrower than this, A.
    pub tolerance: f64,
    pub order: [usize; 3],
    /// Offset on the partner axis during a line search, A. Zero disables it.
    #[serde(default)]
    pub bias: f64,
}

impl Default for NullOptions {
    fn default() -> Self {
        NullOptions {
            sweeps: 3,
            bracket: 0.25,
            shrink: 0.2,
            tolerance: 2e-4,
            order: [0, 1, 2],
            bias: 0.1,
        }
    }
}

impl NullOptions {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 {
            return Err(Error::invalid("null.sweeps", "must be at least 1"));
        }
        if !(self.bracket > 0.0 && self.tolerance > 0.0 && self.shrink > 0.0 && self.shrink <= 1.0 && self.bias >= 0.0) {
            return Err(Error::invalid("null.bracket", "bracket, tolerance and shrink must be positive, shrink at most 1"));
        }
        let mut seen = [false; 3];
        for &a in &self.order {
            if a > 2 || seen[a] {
                return Err(Error::invalid("null.order", "must list each of the three axes once"));
            }
            seen[a] = true;
        }
        Ok(())
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullEvaluation {
    pub sweep: usize,
    pub axis: String,
    /// A
    pub currents: [f64; 3],
    /// m; infinite when the fit failed.
    pub objective: f64,
}

/// Result of one line search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullStep {
    pub sweep: usize,
    pub axis: String,
    pub from: f64,
    pub to: f64,
    pub objective: f64,
    pub evaluations: usize,
    /// `to` is the vertex of a hyperbola through the evaluations rather than
    /// the best single evaluation.
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullReport {
    pub start: [f64; 3],
    pub currents: [f64; 3],
    pub steps: Vec<NullStep>,
    pub sweeps: usize,
    pub evaluations: usize,
    pub final_fit: StripeFitResult,
    /// |B| bound at the final currents when the stripes have merged, G.
    pub field_upper_bound: Option<f64>,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Transverse axis biased while `axis` is searched.
fn partner(axis: usize) -> usize {
    if axis == 1 { 2 } else { 1 }
}

/// Runs the descent from `start`. `observe` sees every evaluation as it happens.
pub fn null(
    experiment: &Experiment,
    start: [f64; 3],
    mapping: &Mapping,
    opts: &NullOptions,
    observe: &mut dyn FnMut(&NullEvaluation, &StripeFitResult),
) -> Result<NullReport> {
    opts.validate()?;
    let mut currents = start;
    let mut steps = Vec::new();
    let mut evaluations = 0;
    let mut sweeps = 0;
    let mut half = opts.bracket;

    for sweep in 1..=opts.sweeps {
        sweeps = sweep;
        let mut largest_move: f64 = 0.0;
        for &axis in &opts.order {
            let mut count = 0;
            let samples: RefCell<Vec<(f64, f64, f64)>> = RefCell::new(Vec::new());
            let mut eval = |x: f64, bias: f64| -> Result<f64> {
                let mut c = currents;
                c[axis] = x;
                c[partner(axis)] += bias;
                let (_, m) = experiment.measure(&experiment.coils_at(c), mapping)?;
                let value = nulling_objective(&m.fit).unwrap_or(f64::INFINITY);
                count += 1;
                if m.fit.status == FitStatus::Resolved {
                    samples.borrow_mut().push((bias, x, m.fit.larmor));
                }
                observe(
                    &NullEvaluation {
                        sweep,
                        axis: AXES[axis].into(),
                        currents: c,
                        objective: value,
                    },
                    &m.fit,
                );
                Ok(value)
            };
            let from = currents[axis];
            // the bias sign that adds to the partner field; the other might cancel it
            let mut f_from = eval(from, opts.bias)?;
            let mut bias = opts.bias;
            if opts.bias > 0.0 {
                let down = eval(from, -opts.bias)?;
                let finite = |v: f64| if v.is_finite() { v } else { -1.0 };
                if finite(down) > finite(f_from) {
                    (bias, f_from) = (-opts.bias, down);
                }
            }
            let mut f = |x: f64| eval(x, bias);
            let (mut a, mut b) = (from - half, from + half);
            let mut x1 = b - INV_PHI * (b - a);
            let mut x2 = a + INV_PHI * (b - a);
            let mut f1 = f(x1)?;
            let mut f2 = f(x2)?;
            let (mut best, mut f_best) = (from, f_from);
            for (x, fx) in [(x1, f1), (x2, f2)] {
                if fx < f_best {
                    (best, f_best) = (x, fx);
                }
            }
            while b - a > opts.tolerance {
                if f1 <= f2 {
                    b = x2;
                    (x2, f2) = (x1, f1);
                    x1 = b - INV_PHI * (b - a);
                    f1 = f(x1)?;
                    if f1 < f_best {
                        (best, f_best) = (x1, f1);
                    }
                } else {
                    a = x1;
                    (x1, f1) = (x2, f2);
                    x2 = a + INV_PHI * (b - a);
                    f2 = f(x2)?;
                    if f2 < f_best {
                        (best, f_best) = (x2, f2);
                    }
                }
            }
            // the golden section stops on the noisiest part of the curve; the
            // hyperbola through all its points weighs in both arms
            let points: Vec<(f64, f64)> =
                samples.borrow().iter().filter(|p| p.0 == bias).map(|p| (p.1, p.2)).collect();
            let refined = fit_hyperbola(&points, &experiment.config().species)
                .ok()
                .filter(|h| !h.ill_conditioned && (h.i0 - from).abs() <= half)
                .map(|h| h.i0);
            if let Some(i0) = refined {
                best = i0;
                f_best = f(i0)?;
            }
            evaluations += count;
            currents[axis] = best;
            largest_move = largest_move.max((best - from).abs());
            steps.push(NullStep {
                sweep,
                axis: AXES[axis].into(),
                from,
                to: best,
                objective: f_best,
                evaluations: count,
                refined: refined.is_some(),
            });
        }
        if largest_move < opts.tolerance {
            break;
        }
        half *= opts.shrink;
    }

    let (_, m) = experiment.measure(&experiment.coils_at(currents), mapping)?;
    Ok(NullReport {
        start,
        currents,
        steps,
        sweeps,
        evaluations,
        field_upper_bound: m.fit.field_upper_bound,
        final_fit: m.fit,
    })
}
