//! Newton-type solvers shared by the estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, solve_general};

/// Damped Newton settings for estimating equations `F(beta) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Convergence when `|F|_inf <= tol`.
    pub tol: f64,
    /// Convergence when the accepted step has `|step|_inf <= step_tol`.
    pub step_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            step_tol: 1e-12,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

/// Per-solve diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RootStats {
    pub iterations: usize,
    /// `|F|_inf` at every iterate, including the final one.
    pub residual_norms: Vec<f64>,
    /// Number of step halvings taken at each iteration.
    pub halvings: Vec<usize>,
    /// Iterations where the analytic Jacobian could not be factorized.
    pub fd_fallbacks: usize,
}

impl RootStats {
    pub fn final_residual(&self) -> f64 {
        self.residual_norms.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn fd_jacobian<F>(f: &mut F, x: &DVector<f64>, fx: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(fx.len(), n);
    for c in 0..n {
        let h = 1e-7 * (1.0 + x[c].abs());
        let mut up = x.clone();
        up[c] += h;
        let mut dn = x.clone();
        dn[c] -= h;
        let d = (f(&up)? - f(&dn)?) / (2.0 * h);
        jac.set_column(c, &d);
    }
    Ok(jac)
}

/// Solves `F(x) = 0` by Newton's method with step halving on `|F|_2`.
///
/// The analytic Jacobian is used first; if it cannot be factorized a
/// central finite-difference Jacobian is tried for that iteration.
pub fn solve_root<F, J>(
    x0: DVector<f64>,
    mut f: F,
    mut jac: J,
    cfg: &SolverConfig,
    site: usize,
) -> Result<(DVector<f64>, RootStats)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let mut stats = RootStats::default();
    let mut x = x0;
    let mut fx = f(&x)?;
    loop {
        let res = inf_norm(&fx);
        stats.residual_norms.push(res);
        if !res.is_finite() {
            return Err(Error::NonFinite(format!("estimating equation at site {site}")));
        }
        if res <= cfg.tol {
            // a final full step when it helps; the root then sits at rounding level
            if let Some(step) = jac(&x).ok().and_then(|j| solve_general(&j, &-&fx)) {
                let cand = &x + step;
                if let Ok(fc) = f(&cand) {
                    let r = inf_norm(&fc);
                    if r < res {
                        stats.residual_norms.push(r);
                        return Ok((cand, stats));
                    }
                }
            }
            return Ok((x, stats));
        }
        if stats.iterations >= cfg.max_iter {
            return Err(Error::NonConvergence {
                site,
                iterations: stats.iterations,
                grad_norm: res,
            });
        }
        stats.iterations += 1;
        let neg = -&fx;
        let step = match jac(&x).ok().and_then(|j| solve_general(&j, &neg)) {
            Some(s) => s,
            None => {
                stats.fd_fallbacks += 1;
                let j = fd_jacobian(&mut f, &x, &fx)?;
                solve_general(&j, &neg)
                    .ok_or_else(|| Error::singular(site, "Jacobian of the estimating equation is singular"))?
            }
        };
        let base = fx.norm_squared();
        let mut lambda = 1.0;
        let mut accepted = None;
        for h in 0..=cfg.max_halvings {
            let cand = &x + &step * lambda;
            if let Ok(fc) = f(&cand) {
                let val = fc.norm_squared();
                if val.is_finite() && val <= (1.0 - 1e-4 * lambda) * base {
                    accepted = Some((cand, fc, h));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((cand, fc, h)) = accepted else {
            return Err(Error::NonConvergence {
                site,
                iterations: stats.iterations,
                grad_norm: res,
            });
        };
        stats.halvings.push(h);
        let moved = inf_norm(&(&cand - &x));
        x = cand;
        fx = fc;
        if moved <= cfg.step_tol {
            stats.residual_norms.push(inf_norm(&fx));
            return Ok((x, stats));
        }
    }
}

/// What to do when a likelihood keeps increasing along a ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparationPolicy {
    /// Report [`Error::Separation`].
    #[default]
    Error,
    /// Return the first iterate whose gradient met the tolerance, flagged
    /// as separated. This mirrors what iteratively reweighted GLM fitters
    /// hand back under separation.
    Truncate,
}

/// Settings for Newton maximization of concave log-likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximizeConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// `|theta|_inf` beyond which the fit is declared separated.
    pub divergence_norm: f64,
    pub separation: SeparationPolicy,
}

impl Default for MaximizeConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
            divergence_norm: 1e3,
            separation: SeparationPolicy::Error,
        }
    }
}

/// Value, gradient and Newton direction `(-H)^{-1} g` at a point. The
/// direction is `None` when the Hessian could not be factorized.
pub struct NewtonEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub direction: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Set only under [`SeparationPolicy::Truncate`].
    pub separated: bool,
}

/// Newton ascent with Armijo backtracking.
///
/// A point counts as converged when the gradient meets `grad_tol` and the
/// Newton direction has also collapsed. Under separation the gradient
/// vanishes while the direction stays order one, so iteration continues
/// until the divergence bound or the iteration cap classifies the fit.
pub fn maximize<E, V>(
    x0: DVector<f64>,
    mut eval: E,
    mut value: V,
    cfg: &MaximizeConfig,
    site: usize,
) -> Result<MaxOutcome>
where
    E: FnMut(&DVector<f64>) -> Result<NewtonEval>,
    V: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut x = x0;
    let mut first_small: Option<(DVector<f64>, usize, f64)> = None;
    let separated = |first: Option<(DVector<f64>, usize, f64)>, x: &DVector<f64>| match (cfg.separation, first) {
        (SeparationPolicy::Truncate, Some((xs, it, g))) => Ok(MaxOutcome {
            x: xs,
            iterations: it,
            grad_norm: g,
            separated: true,
        }),
        _ => Err(Error::Separation {
            site,
            theta_norm: inf_norm(x),
        }),
    };
    for it in 0..cfg.max_iter {
        let ev = eval(&x)?;
        let gnorm = inf_norm(&ev.gradient);
        if !gnorm.is_finite() || !ev.value.is_finite() {
            return Err(Error::NonFinite(format!("log-likelihood at site {site}")));
        }
        let dir = ev.direction.unwrap_or_else(|| ev.gradient.clone());
        let dnorm = inf_norm(&dir);
        if gnorm <= cfg.grad_tol {
            if dnorm <= cfg.grad_tol.sqrt() * (1.0 + inf_norm(&x)) {
                // one more full step squares the remaining error
                let cand = &x + &dir;
                let (x, grad_norm) = match eval(&cand) {
                    Ok(e) if e.value.is_finite() && inf_norm(&e.gradient) <= gnorm => (cand, inf_norm(&e.gradient)),
                    _ => (x, gnorm),
                };
                return Ok(MaxOutcome {
                    x,
                    iterations: it + 1,
                    grad_norm,
                    separated: false,
                });
            }
            if first_small.is_none() {
                first_small = Some((x.clone(), it, gnorm));
            }
        }
        let slope = ev.gradient.dot(&dir);
        let mut lambda = 1.0;
        let mut next = None;
        for _ in 0..=cfg.max_halvings {
            let cand = &x + &dir * lambda;
            if let Ok(v) = value(&cand) {
                // the second clause accepts steps whose change is lost in rounding
                if v.is_finite()
                    && (v >= ev.value + 1e-4 * lambda * slope || (v - ev.value).abs() <= 1e-13 * (1.0 + ev.value.abs()))
                {
                    next = Some(cand);
                    break;
                }
            }
            lambda *= 0.5;
        }
        match next {
            Some(cand) => x = cand,
            None if gnorm <= cfg.grad_tol => {
                return Ok(MaxOutcome {
                    x,
                    iterations: it,
                    grad_norm: gnorm,
                    separated: false,
                })
            }
            None => {
                return Err(Error::NonConvergence {
                    site,
                    iterations: it,
                    grad_norm: gnorm,
                })
            }
        }
        if inf_norm(&x) > cfg.divergence_norm {
            return separated(first_small, &x);
        }
    }
    if first_small.is_some() {
        return separated(first_small, &x);
    }
    let ev = eval(&x)?;
    Err(Error::NonConvergence {
        site,
        iterations: cfg.max_iter,
        grad_norm: inf_norm(&ev.gradient),
    })
}
