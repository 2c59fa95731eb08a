use nalgebra::{DMatrix, DVector};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::inference;
use crate::linalg;
use crate::model::{FamilyKind, ModelFamily};
use crate::score::{self, SurrogateContext, TiltedScoreContext};
use crate::solver::{self, MaximizeConfig, NewtonEval, RootStats, SeparationPolicy, SolverConfig};

/// Result of a site's local maximum-likelihood fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub theta: DVector<f64>,
    pub p: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    /// The likelihood had no finite maximizer; `theta` is a truncated iterate.
    pub separated: bool,
}

impl LocalFit {
    pub fn beta(&self) -> DVector<f64> {
        self.theta.rows(0, self.p).into_owned()
    }

    pub fn gamma(&self) -> DVector<f64> {
        let q = self.theta.len() - self.p;
        self.theta.rows(self.p, q).into_owned()
    }
}

/// A site holding private observations.
///
/// The dataset is owned by the node and there is no accessor for it: the
/// rest of the crate only sees the aggregates returned by these methods.
///
/// ```compile_fail
/// # use tiltfed::fednet::SiteNode;
/// fn peek(node: &SiteNode) -> usize {
///     node.data.len()
/// }
/// ```
#[derive(Debug, Clone)]
pub struct SiteNode {
    id: usize,
    data: SiteDataset,
    model: ModelFamily,
    cached_fit: Option<LocalFit>,
}

fn split(theta: &DVector<f64>, p: usize) -> (DVector<f64>, DVector<f64>) {
    (
        theta.rows(0, p).into_owned(),
        theta.rows(p, theta.len() - p).into_owned(),
    )
}

impl SiteNode {
    pub fn new(id: usize, data: SiteDataset, model: ModelFamily) -> Result<Self> {
        data.check_model(&model)?;
        Ok(Self {
            id,
            data: data.with_site(id),
            model,
            cached_fit: None,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn model(&self) -> &ModelFamily {
        &self.model
    }

    /// Fewer observations than parameters; local fits are then unreliable.
    pub fn underdetermined(&self) -> bool {
        self.n() < self.model.d()
    }

    pub fn cached_fit(&self) -> Option<&LocalFit> {
        self.cached_fit.as_ref()
    }

    /// Fits and caches the local MLE.
    pub fn fit_local(&mut self, init: Option<&DVector<f64>>, cfg: &MaximizeConfig) -> Result<&LocalFit> {
        let fit = self.local_mle(init, cfg)?;
        Ok(self.cached_fit.insert(fit))
    }

    /// Maximizer of the site log-likelihood over `(beta, gamma_j)`.
    pub fn local_mle(&self, init: Option<&DVector<f64>>, cfg: &MaximizeConfig) -> Result<LocalFit> {
        let m = self.model;
        let p = m.p();
        let x0 = match init {
            Some(t) if t.len() == m.d() => t.clone(),
            Some(t) => {
                return Err(Error::dim(format!(
                    "initial theta has length {}, expected {}",
                    t.len(),
                    m.d()
                )))
            }
            None => DVector::zeros(m.d()),
        };
        let data = &self.data;
        let eval = |theta: &DVector<f64>| -> Result<NewtonEval> {
            let (b, g) = split(theta, p);
            let value = score::site_log_likelihood(&m, data, &b, &g)?;
            let gradient = score::site_gradient(&m, data, &b, &g)?;
            let info = score::empirical_information(&m, data, &b, &g)?.assemble();
            let direction = info.cholesky().map(|c| c.solve(&gradient));
            Ok(NewtonEval {
                value,
                gradient,
                direction,
            })
        };
        let value = |theta: &DVector<f64>| {
            let (b, g) = split(theta, p);
            score::site_log_likelihood(&m, data, &b, &g)
        };
        let out = solver::maximize(x0, eval, value, cfg, self.id)?;
        let mut separated = out.separated;
        // complete separation can also end in a point where every fitted
        // probability has rounded onto its outcome and the gradient is exactly zero
        if !separated && m.kind == FamilyKind::Logistic {
            let (b, g) = split(&out.x, p);
            let ll = score::site_log_likelihood(&m, data, &b, &g)?;
            if ll >= -1e-10 {
                if cfg.separation == SeparationPolicy::Error {
                    return Err(Error::Separation {
                        site: self.id,
                        theta_norm: out.x.amax(),
                    });
                }
                separated = true;
            }
        }
        Ok(LocalFit {
            theta: out.x,
            p,
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            separated,
        })
    }

    /// `argmax_gamma L_j(beta_fixed, gamma)`.
    pub fn profile_nuisance(
        &self,
        beta_fixed: &DVector<f64>,
        init: Option<&DVector<f64>>,
        cfg: &MaximizeConfig,
    ) -> Result<DVector<f64>> {
        let m = self.model;
        let (p, q) = (m.p(), m.q());
        if beta_fixed.len() != p {
            return Err(Error::dim(format!(
                "beta has length {}, expected {p}",
                beta_fixed.len()
            )));
        }
        let x0 = init.cloned().unwrap_or_else(|| DVector::zeros(q));
        let data = &self.data;
        let eval = |g: &DVector<f64>| -> Result<NewtonEval> {
            let value = score::site_log_likelihood(&m, data, beta_fixed, g)?;
            let gradient = score::site_gradient(&m, data, beta_fixed, g)?.rows(p, q).into_owned();
            let info = score::empirical_information(&m, data, beta_fixed, g)?.gg;
            let direction = info.cholesky().map(|c| c.solve(&gradient));
            Ok(NewtonEval {
                value,
                gradient,
                direction,
            })
        };
        let value = |g: &DVector<f64>| score::site_log_likelihood(&m, data, beta_fixed, g);
        Ok(solver::maximize(x0, eval, value, cfg, self.id)?.x)
    }

    /// Site efficient score `S_j(beta, gamma)` with information blocks
    /// evaluated at the same point.
    pub fn efficient_score(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        let blocks = score::empirical_information(&self.model, &self.data, beta, gamma)?;
        score::site_efficient_score(&self.model, &self.data, beta, gamma, &blocks)
    }

    /// Mean score `grad L_j` (length `d`).
    pub fn gradient(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        score::site_gradient(&self.model, &self.data, beta, gamma)
    }

    pub fn beta_gradient(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.gradient(beta, gamma)?.rows(0, self.model.p()).into_owned())
    }

    pub fn partial_information(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DMatrix<f64>> {
        let blocks = score::empirical_information(&self.model, &self.data, beta, gamma)?;
        score::partial_information(&blocks, self.id)
    }

    /// Estimated covariance of this site's `beta_bar_j`,
    /// `(n_j * partial_information)^{-1}`.
    pub fn local_beta_covariance(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DMatrix<f64>> {
        let info = self.partial_information(beta, gamma)? * self.n() as f64;
        linalg::spd_inverse(&info, self.id)
    }

    // Local-site computations below use this node's observations together
    // with summaries received from the other sites.

    pub fn surrogate_context(
        &self,
        beta_bar: DVector<f64>,
        gamma_bar: Vec<DVector<f64>>,
        weights: Vec<f64>,
        site_scores: &[DVector<f64>],
    ) -> Result<SurrogateContext> {
        SurrogateContext::build(&self.model, &self.data, beta_bar, gamma_bar, weights, site_scores)
    }

    pub fn surrogate_equation(&self, ctx: &SurrogateContext, beta: &DVector<f64>) -> Result<DVector<f64>> {
        score::surrogate_equation(ctx, &self.model, &self.data, beta)
    }

    pub fn surrogate_jacobian(&self, ctx: &SurrogateContext, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        score::surrogate_local_jacobian(ctx, &self.model, &self.data, beta)
    }

    /// Root of the surrogate efficient score, started at `beta_bar`.
    pub fn solve_surrogate(&self, ctx: &SurrogateContext, cfg: &SolverConfig) -> Result<(DVector<f64>, RootStats)> {
        solver::solve_root(
            ctx.beta_bar.clone(),
            |b| self.surrogate_equation(ctx, b),
            |b| self.surrogate_jacobian(ctx, b),
            cfg,
            self.id,
        )
    }

    pub fn tilted_score_context(
        &self,
        beta_prev: DVector<f64>,
        gamma_prev: Vec<DVector<f64>>,
        weights: Vec<f64>,
        site_gradients: &[DVector<f64>],
    ) -> Result<TiltedScoreContext> {
        TiltedScoreContext::build(&self.model, &self.data, beta_prev, gamma_prev, weights, site_gradients)
    }

    pub fn tilted_score_equation(&self, ctx: &TiltedScoreContext, beta: &DVector<f64>) -> Result<DVector<f64>> {
        score::tilted_score_equation(ctx, &self.model, &self.data, beta)
    }

    pub fn solve_tilted_score(
        &self,
        ctx: &TiltedScoreContext,
        cfg: &SolverConfig,
    ) -> Result<(DVector<f64>, RootStats)> {
        solver::solve_root(
            ctx.beta_prev.clone(),
            |b| self.tilted_score_equation(ctx, b),
            |b| score::tilted_local_jacobian(ctx, &self.model, &self.data, b),
            cfg,
            self.id,
        )
    }

    pub fn homogeneous_surrogate_score(
        &self,
        theta: &DVector<f64>,
        theta_bar: &DVector<f64>,
        global_gradient: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        score::homogeneous_surrogate_score(&self.model, &self.data, theta, theta_bar, global_gradient)
    }

    /// Root of the shared-parameter surrogate score, started at `theta_bar`.
    pub fn solve_homogeneous(
        &self,
        theta_bar: &DVector<f64>,
        global_gradient: &DVector<f64>,
        cfg: &SolverConfig,
    ) -> Result<(DVector<f64>, RootStats)> {
        let p = self.model.p();
        solver::solve_root(
            theta_bar.clone(),
            |t| self.homogeneous_surrogate_score(t, theta_bar, global_gradient),
            |t| {
                let (b, g) = split(t, p);
                Ok(-score::empirical_information(&self.model, &self.data, &b, &g)?.assemble())
            },
            cfg,
            self.id,
        )
    }

    /// `[(n_1 * I_1(theta))^{-1}]_{beta beta}` scaled to the pooled sample size.
    pub fn homogeneous_covariance(&self, theta: &DVector<f64>, total_n: usize) -> Result<DMatrix<f64>> {
        let p = self.model.p();
        let (b, g) = split(theta, p);
        let info = score::empirical_information(&self.model, &self.data, &b, &g)?.assemble();
        let inv = linalg::spd_inverse(&(info * total_n as f64), self.id)?;
        Ok(inv.view((0, 0), (p, p)).into_owned())
    }

    /// Density-ratio tilted covariance of `beta_hat` from local data only.
    pub fn tilted_variance(
        &self,
        beta_hat: &DVector<f64>,
        gamma_bar: &[DVector<f64>],
        weights: &[f64],
        total_n: usize,
    ) -> Result<DMatrix<f64>> {
        inference::tilted_variance(&self.model, &self.data, beta_hat, gamma_bar, weights, total_n)
    }
}
