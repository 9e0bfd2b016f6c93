//! Damped least squares (Levenberg–Marquardt with Marquardt diagonal scaling)
//! on analytic Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A residual vector r(p) with Jacobian ∂r_i/∂p_j.
pub trait LeastSquares {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, p: &[f64], out: &mut [f64]);
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>);
}

/// y(x; p) with analytic gradient in p.
pub trait CurveModel {
    fn n_params(&self) -> usize;
    fn eval(&self, x: f64, p: &[f64]) -> f64;
    fn grad(&self, x: f64, p: &[f64], out: &mut [f64]);
}

/// Adapts a [`CurveModel`] and data into residuals `w·(model − y)`.
pub struct CurveFit<'a, M> {
    pub model: &'a M,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

impl<M: CurveModel> LeastSquares for CurveFit<'_, M> {
    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    fn n_residuals(&self) -> usize {
        self.x.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let w = self.weights.map_or(1.0, |w| w[i]);
            *o = w * (self.model.eval(self.x[i], p) - self.y[i]);
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let mut g = vec![0.0; p.len()];
        for i in 0..self.x.len() {
            let w = self.weights.map_or(1.0, |w| w[i]);
            self.model.grad(self.x[i], p, &mut g);
            for (j, gj) in g.iter().enumerate() {
                jac[(i, j)] = w * gj;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub max_iterations: usize,
    /// Converged when every |Δp_j| < xtol·max(|p_j|, scale_j).
    pub xtol: f64,
    pub initial_lambda: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iterations: 200,
            xtol: 1e-8,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    /// Parameter covariance scaled by the reduced χ².
    pub covariance: DMatrix<f64>,
    pub residual_norm: f64,
    pub initial_residual_norm: f64,
    pub iterations: usize,
}

impl FitOutcome {
    pub fn sigma(&self, j: usize) -> f64 {
        self.covariance[(j, j)].max(0.0).sqrt()
    }
}

/// Minimizes ½‖r(p)‖². `scales` sets the absolute floor of the relative
/// step test for parameters that may sit near zero.
pub fn minimize<P: LeastSquares>(
    problem: &P,
    initial: &[f64],
    scales: &[f64],
    opts: &Options,
    name: &'static str,
) -> Result<FitOutcome> {
    let n = problem.n_params();
    let m = problem.n_residuals();
    assert_eq!(initial.len(), n);
    assert_eq!(scales.len(), n);

    let mut p = initial.to_vec();
    let mut r = vec![0.0; m];
    problem.residuals(&p, &mut r);
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let initial_norm = norm(&r);
    if !initial_norm.is_finite() {
        return Err(Error::FitFailed {
            model: name,
            iterations: 0,
            residual: initial_norm,
        });
    }
    let mut cost = initial_norm * initial_norm;
    let mut jac = DMatrix::zeros(m, n);
    let mut lambda = opts.initial_lambda;
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; m];

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        problem.jacobian(&p, &mut jac);
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);

        let mut improved = false;
        while lambda < 1e20 {
            let mut damped = a.clone();
            for j in 0..n {
                damped[(j, j)] += lambda * a[(j, j)].max(1e-300);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            for j in 0..n {
                trial[j] = p[j] + step[j];
            }
            problem.residuals(&trial, &mut r_trial);
            let c = r_trial.iter().map(|v| v * v).sum::<f64>();
            if c.is_finite() && c <= cost {
                // a tiny step under heavy damping says nothing about convergence
                let small = lambda < 1.0 && (0..n).all(|j| step[j].abs() < opts.xtol * p[j].abs().max(scales[j]));
                // exact data: a parameter creeping toward a symmetric point never
                // produces a small step, but the cost reaches round-off
                let stalled = cost - c <= 1e-15 * cost || c <= 1e-28 * initial_norm * initial_norm;
                p.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut r_trial);
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                converged = small || stalled;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // no downhill step at any damping: stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }

    if !converged {
        return Err(Error::FitFailed {
            model: name,
            iterations,
            residual: cost.sqrt(),
        });
    }

    problem.jacobian(&p, &mut jac);
    let a = jac.transpose() * &jac;
    let dof = m.saturating_sub(n).max(1) as f64;
    let covariance = pseudo_inverse(&a) * (cost / dof);
    Ok(FitOutcome {
        params: p,
        covariance,
        residual_norm: cost.sqrt(),
        initial_residual_norm: initial_norm,
        iterations,
    })
}

fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    // scale to unit diagonal so the rank cut is not fooled by parameter units
    let d: Vec<f64> = (0..n).map(|j| a[(j, j)].max(1e-300).sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]));
    let inv = scaled
        .clone()
        .pseudo_inverse(1e-12)
        .unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN));
    DMatrix::from_fn(n, n, |i, j| inv[(i, j)] / (d[i] * d[j]))
}

/// Linear least squares y ≈ X·β, returning β and its covariance.
pub fn linear_fit(design: &DMatrix<f64>, y: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let yv = DVector::from_column_slice(y);
    let xt = design.transpose();
    let a = &xt * design;
    let chol = a.clone().cholesky()?;
    let beta = chol.solve(&(&xt * &yv));
    let resid = design * &beta - yv;
    let dof = design.nrows().saturating_sub(design.ncols()).max(1) as f64;
    let s2 = resid.norm_squared() / dof;
    Some((beta.iter().copied().collect(), chol.inverse() * s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Exp;

    impl CurveModel for Exp {
        fn n_params(&self) -> usize {
            2
        }
        fn eval(&self, x: f64, p: &[f64]) -> f64 {
            p[0] * (-x / p[1]).exp()
        }
        fn grad(&self, x: f64, p: &[f64], out: &mut [f64]) {
            let e = (-x / p[1]).exp();
            out[0] = e;
            out[1] = p[0] * e * x / (p[1] * p[1]);
        }
    }

    #[test]
    fn recovers_exponential() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|x| 3.0 * (-x / 1.7).exp()).collect();
        let fit = minimize(
            &CurveFit {
                model: &Exp,
                x: &x,
                y: &y,
                weights: None,
            },
            &[1.0, 0.5],
            &[1.0, 1.0],
            &Options::default(),
            "exp",
        )
        .unwrap();
        assert_relative_eq!(fit.params[0], 3.0, max_relative = 1e-8);
        assert_relative_eq!(fit.params[1], 1.7, max_relative = 1e-8);
        assert!(fit.residual_norm <= fit.initial_residual_norm);
    }

    #[test]
    fn iteration_cap_reports_failure() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|x| 3.0 * (-x / 1.7).exp()).collect();
        let opts = Options {
            max_iterations: 1,
            ..Options::default()
        };
        let err = minimize(
            &CurveFit {
                model: &Exp,
                x: &x,
                y: &y,
                weights: None,
            },
            &[1.0, 0.5],
            &[1.0, 1.0],
            &opts,
            "exp",
        )
        .unwrap_err();
        assert!(matches!(err, Error::FitFailed { iterations: 1, .. }));
    }

    #[test]
    fn linear_fit_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|x| 2.0 + 0.5 * x).collect();
        let design = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let (beta, _) = linear_fit(&design, &y).unwrap();
        assert_relative_eq!(beta[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(beta[1], 0.5, epsilon = 1e-12);
    }
}
