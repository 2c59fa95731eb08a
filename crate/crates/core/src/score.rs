//! Efficient-score machinery: information blocks, site efficient scores,
//! density-ratio tilted information, and the surrogate efficient score
//! evaluated at the local site.
//!
//! Sign convention: every "information" object is a negative mean Hessian.

use nalgebra::{DMatrix, DVector};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelFamily, Observation};

/// `(beta, beta)`, `(beta, gamma)` and `(gamma, gamma)` blocks of a
/// `d x d` information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoBlocks {
    pub bb: DMatrix<f64>,
    pub bg: DMatrix<f64>,
    pub gg: DMatrix<f64>,
}

impl InfoBlocks {
    pub fn from_full(full: &DMatrix<f64>, p: usize) -> Self {
        let d = full.nrows();
        let q = d - p;
        Self {
            bb: full.view((0, 0), (p, p)).into_owned(),
            bg: full.view((0, p), (p, q)).into_owned(),
            gg: full.view((p, p), (q, q)).into_owned(),
        }
    }

    pub fn p(&self) -> usize {
        self.bb.nrows()
    }

    pub fn q(&self) -> usize {
        self.gg.nrows()
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let (p, q) = (self.p(), self.q());
        let mut full = DMatrix::zeros(p + q, p + q);
        full.view_mut((0, 0), (p, p)).copy_from(&self.bb);
        full.view_mut((0, p), (p, q)).copy_from(&self.bg);
        full.view_mut((p, 0), (q, p)).copy_from(&self.bg.transpose());
        full.view_mut((p, p), (q, q)).copy_from(&self.gg);
        full
    }

    /// Projection coefficients `bg * gg^{-1}` (a `p x q` matrix), obtained
    /// by solving `gg * X' = bg'`.
    pub fn adjuster(&self, site: usize) -> Result<DMatrix<f64>> {
        let xt = linalg::solve_symmetric(&self.gg, &self.bg.transpose(), site)?;
        Ok(xt.transpose())
    }
}

/// Information blocks computed with density-ratio weights at the local site.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedBlocks(pub InfoBlocks);

impl std::ops::Deref for TiltedBlocks {
    type Target = InfoBlocks;

    fn deref(&self) -> &InfoBlocks {
        &self.0
    }
}

fn check_params(m: &ModelFamily, beta: &DVector<f64>, gammas: &[&DVector<f64>]) -> Result<()> {
    if beta.len() != m.p() || gammas.iter().any(|g| g.len() != m.q()) {
        return Err(Error::dim(format!(
            "parameters must have lengths p={} and q={}",
            m.p(),
            m.q()
        )));
    }
    if beta
        .iter()
        .chain(gammas.iter().flat_map(|g| g.iter()))
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("parameter vector".into()));
    }
    Ok(())
}

/// Shared accumulation for plain and tilted information:
/// `-(1/n) sum_i w_i * hess log f(y_i; beta, gamma)`.
fn weighted_information<W>(
    m: &ModelFamily,
    data: &SiteDataset,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    mut weight: W,
) -> Result<InfoBlocks>
where
    W: FnMut(&Observation<'_>) -> Result<f64>,
{
    data.check_model(m)?;
    check_params(m, beta, &[gamma])?;
    let d = m.d();
    let mut full = DMatrix::<f64>::zeros(d, d);
    let mut v = DVector::<f64>::zeros(d);
    for obs in data.iter() {
        let w = weight(&obs)?;
        let eta = m.linear_predictor(&obs, beta.as_slice(), gamma.as_slice());
        let c = -w * m.eta_terms(obs.outcome, eta).d2;
        for (k, x) in obs.common.iter().chain(obs.nuisance).enumerate() {
            v[k] = *x;
        }
        full.ger(c, &v, &v, 1.0);
    }
    full /= data.len() as f64;
    Ok(InfoBlocks::from_full(&linalg::symmetrize(&full), m.p()))
}

/// Empirical information `-(1/n) sum_i hess log f` at `(beta, gamma)`.
pub fn empirical_information(
    m: &ModelFamily,
    data: &SiteDataset,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<InfoBlocks> {
    weighted_information(m, data, beta, gamma, |_| Ok(1.0))
}

/// Mean score `grad L_j` (length `d`) at `(beta, gamma)`.
pub fn site_gradient(
    m: &ModelFamily,
    data: &SiteDataset,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<DVector<f64>> {
    data.check_model(m)?;
    check_params(m, beta, &[gamma])?;
    let (p, d) = (m.p(), m.d());
    let mut g = DVector::<f64>::zeros(d);
    for obs in data.iter() {
        let eta = m.linear_predictor(&obs, beta.as_slice(), gamma.as_slice());
        let r = m.eta_terms(obs.outcome, eta).d1;
        for (k, x) in obs.common.iter().enumerate() {
            g[k] += r * x;
        }
        for (k, z) in obs.nuisance.iter().enumerate() {
            g[p + k] += r * z;
        }
    }
    Ok(g / data.len() as f64)
}

/// Mean log-likelihood `L_j(beta, gamma)`.
pub fn site_log_likelihood(
    m: &ModelFamily,
    data: &SiteDataset,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<f64> {
    data.check_model(m)?;
    check_params(m, beta, &[gamma])?;
    let total: f64 = data
        .iter()
        .map(|obs| {
            let eta = m.linear_predictor(&obs, beta.as_slice(), gamma.as_slice());
            m.eta_terms(obs.outcome, eta).log_density
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Site efficient score
/// `grad_beta L_j - bg * gg^{-1} * grad_gamma L_j` using the given blocks.
pub fn site_efficient_score(
    m: &ModelFamily,
    data: &SiteDataset,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    blocks: &InfoBlocks,
) -> Result<DVector<f64>> {
    let g = site_gradient(m, data, beta, gamma)?;
    let p = m.p();
    let gb = g.rows(0, p).into_owned();
    let gg = g.rows(p, m.q()).into_owned();
    let proj = linalg::solve_symmetric_vec(&blocks.gg, &gg, data.site())?;
    Ok(gb - &blocks.bg * proj)
}

/// Efficient-score integrand `grad_beta log f - A grad_gamma log f` for one
/// observation, with `adjuster = A` a `p x q` projection matrix.
pub fn efficient_score_integrand(
    m: &ModelFamily,
    obs: &Observation<'_>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    adjuster: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let s = m.score(obs, beta, gamma)?;
    let p = m.p();
    Ok(s.rows(0, p) - adjuster * s.rows(p, m.q()))
}

/// Density-ratio tilted information at the local site:
/// `-(1/n) sum_i hess log f(y_i; beta_bar, gamma_j) * f(y_i; beta_bar, gamma_j) / f(y_i; beta_bar, gamma_local)`.
pub fn tilted_information(
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta_bar: &DVector<f64>,
    gamma_bar_j: &DVector<f64>,
    gamma_bar_local: &DVector<f64>,
) -> Result<TiltedBlocks> {
    check_params(m, beta_bar, &[gamma_bar_local])?;
    let blocks = weighted_information(m, local_data, beta_bar, gamma_bar_j, |obs| {
        let lr = m.log_ratio_unchecked(
            obs,
            beta_bar.as_slice(),
            gamma_bar_j.as_slice(),
            gamma_bar_local.as_slice(),
        );
        let w = lr.exp();
        if w.is_finite() {
            Ok(w)
        } else {
            Err(Error::NonFinite(format!(
                "density ratio weight at local site {}",
                local_data.site()
            )))
        }
    })?;
    Ok(TiltedBlocks(blocks))
}

/// Partial information `bb - bg * gg^{-1} * bg'`.
pub fn partial_information(blocks: &InfoBlocks, site: usize) -> Result<DMatrix<f64>> {
    let x = linalg::solve_symmetric(&blocks.gg, &blocks.bg.transpose(), site)?;
    Ok(linalg::symmetrize(&(&blocks.bb - &blocks.bg * x)))
}

/// Averaging weights `n_j / N`.
pub fn sample_size_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

fn tilt_weight(
    m: &ModelFamily,
    obs: &Observation<'_>,
    beta_bar: &DVector<f64>,
    gamma_j: &DVector<f64>,
    gamma_local: &DVector<f64>,
    site: usize,
) -> Result<f64> {
    let w = m
        .log_ratio_unchecked(obs, beta_bar.as_slice(), gamma_j.as_slice(), gamma_local.as_slice())
        .exp();
    if w.is_finite() {
        Ok(w)
    } else {
        Err(Error::NonFinite(format!(
            "density ratio weight for site {site} at the local site"
        )))
    }
}

/// State held at the local site to evaluate the surrogate efficient score.
///
/// Built once per refresh of `(beta_bar, gamma_bar)`; immutable afterwards.
#[derive(Debug, Clone)]
pub struct SurrogateContext {
    pub local_site: usize,
    pub beta_bar: DVector<f64>,
    pub gamma_bar: Vec<DVector<f64>>,
    /// Site weights in the cross-site averages (`n_j / N`).
    pub weights: Vec<f64>,
    pub tilted: Vec<TiltedBlocks>,
    /// `tilted_bg * tilted_gg^{-1}` per site.
    pub adjusters: Vec<DMatrix<f64>>,
    /// Weighted average of the site efficient scores at `(beta_bar, gamma_bar_j)`.
    pub global_efficient_score: DVector<f64>,
    /// `U_1(beta_bar)`.
    pub local_anchor: DVector<f64>,
}

impl SurrogateContext {
    /// Computes tilted blocks, their projections, and the anchor from the
    /// local data plus the `K` efficient scores received from the sites.
    pub fn build(
        m: &ModelFamily,
        local_data: &SiteDataset,
        beta_bar: DVector<f64>,
        gamma_bar: Vec<DVector<f64>>,
        weights: Vec<f64>,
        site_scores: &[DVector<f64>],
    ) -> Result<Self> {
        let k = gamma_bar.len();
        let local_site = local_data.site();
        if k == 0 || weights.len() != k || site_scores.len() != k {
            return Err(Error::dim(format!(
                "surrogate context needs K gammas, weights and scores; got {}, {}, {}",
                k,
                weights.len(),
                site_scores.len()
            )));
        }
        if local_site >= k {
            return Err(Error::Config(format!("local site {local_site} outside 0..{k}")));
        }
        if site_scores
            .iter()
            .any(|s| s.len() != m.p() || s.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("site efficient score".into()));
        }
        let mut tilted = Vec::with_capacity(k);
        let mut adjusters = Vec::with_capacity(k);
        for (j, gj) in gamma_bar.iter().enumerate() {
            let t = tilted_information(m, local_data, &beta_bar, gj, &gamma_bar[local_site])?;
            adjusters.push(t.adjuster(j)?);
            tilted.push(t);
        }
        let mut global = DVector::zeros(m.p());
        for (w, s) in weights.iter().zip(site_scores) {
            global += s * *w;
        }
        let mut ctx = Self {
            local_site,
            beta_bar,
            gamma_bar,
            weights,
            tilted,
            adjusters,
            global_efficient_score: global,
            local_anchor: DVector::zeros(m.p()),
        };
        ctx.local_anchor = surrogate_local_score(&ctx, m, local_data, &ctx.beta_bar)?;
        Ok(ctx)
    }

    pub fn num_sites(&self) -> usize {
        self.gamma_bar.len()
    }
}

fn check_ctx(ctx: &SurrogateContext, m: &ModelFamily, local: &SiteDataset, beta: &DVector<f64>) -> Result<()> {
    if local.site() != ctx.local_site {
        return Err(Error::Config(format!(
            "surrogate context belongs to site {}, evaluated with data of site {}",
            ctx.local_site,
            local.site()
        )));
    }
    check_params(m, beta, &[])
}

/// `U_1(beta)`: the ratio-tilted efficient-score integrand averaged over
/// local observations and sites, nuisances frozen at `gamma_bar_j`.
pub fn surrogate_local_score(
    ctx: &SurrogateContext,
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_ctx(ctx, m, local_data, beta)?;
    let p = m.p();
    let gl = &ctx.gamma_bar[ctx.local_site];
    let mut out = DVector::<f64>::zeros(p);
    let mut resid = DVector::<f64>::zeros(p);
    for obs in local_data.iter() {
        let z = DVector::from_column_slice(obs.nuisance);
        for (j, gj) in ctx.gamma_bar.iter().enumerate() {
            let r = tilt_weight(m, &obs, &ctx.beta_bar, gj, gl, j)?;
            let eta = m.linear_predictor(&obs, beta.as_slice(), gj.as_slice());
            let d1 = m.eta_terms(obs.outcome, eta).d1;
            resid.copy_from_slice(obs.common);
            resid.gemv(-1.0, &ctx.adjusters[j], &z, 1.0);
            out.axpy(ctx.weights[j] * r * d1, &resid, 1.0);
        }
    }
    Ok(out / local_data.len() as f64)
}

/// Jacobian of `U_1` in `beta` with the tilts and projections frozen.
pub fn surrogate_local_jacobian(
    ctx: &SurrogateContext,
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_ctx(ctx, m, local_data, beta)?;
    let p = m.p();
    let gl = &ctx.gamma_bar[ctx.local_site];
    let mut jac = DMatrix::<f64>::zeros(p, p);
    let mut resid = DVector::<f64>::zeros(p);
    for obs in local_data.iter() {
        let z = DVector::from_column_slice(obs.nuisance);
        let x = DVector::from_column_slice(obs.common);
        for (j, gj) in ctx.gamma_bar.iter().enumerate() {
            let r = tilt_weight(m, &obs, &ctx.beta_bar, gj, gl, j)?;
            let eta = m.linear_predictor(&obs, beta.as_slice(), gj.as_slice());
            let d2 = m.eta_terms(obs.outcome, eta).d2;
            resid.copy_from(&x);
            resid.gemv(-1.0, &ctx.adjusters[j], &z, 1.0);
            jac.ger(ctx.weights[j] * r * d2, &resid, &x, 1.0);
        }
    }
    Ok(jac / local_data.len() as f64)
}

/// Surrogate efficient score
/// `U_1(beta) - U_1(beta_bar) + sum_j w_j S_j(beta_bar, gamma_bar_j)`.
pub fn surrogate_equation(
    ctx: &SurrogateContext,
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let u = surrogate_local_score(ctx, m, local_data, beta)?;
    Ok((u - &ctx.local_anchor) + &ctx.global_efficient_score)
}

/// Local-site state for the score-only rounds that avoid nuisance-block
/// solves: plain beta-scores tilted by density ratios, anchored to the
/// averaged `grad_beta L_j` received from the sites.
#[derive(Debug, Clone)]
pub struct TiltedScoreContext {
    pub local_site: usize,
    pub beta_prev: DVector<f64>,
    pub gamma_prev: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// Weighted average of `grad_beta L_j(beta_prev, gamma_prev_j)`.
    pub global_gradient: DVector<f64>,
    pub local_anchor: DVector<f64>,
}

impl TiltedScoreContext {
    pub fn build(
        m: &ModelFamily,
        local_data: &SiteDataset,
        beta_prev: DVector<f64>,
        gamma_prev: Vec<DVector<f64>>,
        weights: Vec<f64>,
        site_gradients: &[DVector<f64>],
    ) -> Result<Self> {
        let k = gamma_prev.len();
        if k == 0 || weights.len() != k || site_gradients.len() != k {
            return Err(Error::dim("tilted score context needs K gammas, weights and gradients"));
        }
        if local_data.site() >= k {
            return Err(Error::Config(format!(
                "local site {} outside 0..{k}",
                local_data.site()
            )));
        }
        let mut global = DVector::zeros(m.p());
        for (w, g) in weights.iter().zip(site_gradients) {
            global += g * *w;
        }
        let mut ctx = Self {
            local_site: local_data.site(),
            beta_prev,
            gamma_prev,
            weights,
            global_gradient: global,
            local_anchor: DVector::zeros(m.p()),
        };
        ctx.local_anchor = tilted_local_score(&ctx, m, local_data, &ctx.beta_prev)?;
        Ok(ctx)
    }
}

/// `sum_j w_j (1/n) sum_i ratio_ij grad_beta log f(y_i; beta, gamma_j)`.
pub fn tilted_local_score(
    ctx: &TiltedScoreContext,
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_params(m, beta, &[])?;
    let gl = &ctx.gamma_prev[ctx.local_site];
    let mut out = DVector::<f64>::zeros(m.p());
    for obs in local_data.iter() {
        // sites are summed per observation so that with identical nuisances
        // this reproduces the untilted gradient bit for bit
        let mut c = 0.0;
        for (j, gj) in ctx.gamma_prev.iter().enumerate() {
            let r = tilt_weight(m, &obs, &ctx.beta_prev, gj, gl, j)?;
            let eta = m.linear_predictor(&obs, beta.as_slice(), gj.as_slice());
            c += ctx.weights[j] * r * m.eta_terms(obs.outcome, eta).d1;
        }
        for (k, x) in obs.common.iter().enumerate() {
            out[k] += c * x;
        }
    }
    Ok(out / local_data.len() as f64)
}

pub fn tilted_local_jacobian(
    ctx: &TiltedScoreContext,
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_params(m, beta, &[])?;
    let gl = &ctx.gamma_prev[ctx.local_site];
    let mut jac = DMatrix::<f64>::zeros(m.p(), m.p());
    for obs in local_data.iter() {
        let x = DVector::from_column_slice(obs.common);
        for (j, gj) in ctx.gamma_prev.iter().enumerate() {
            let r = tilt_weight(m, &obs, &ctx.beta_prev, gj, gl, j)?;
            let eta = m.linear_predictor(&obs, beta.as_slice(), gj.as_slice());
            jac.ger(ctx.weights[j] * r * m.eta_terms(obs.outcome, eta).d2, &x, &x, 1.0);
        }
    }
    Ok(jac / local_data.len() as f64)
}

/// Score-only surrogate `S(beta) = Sc(beta) + {global - Sc(beta_prev)}`.
pub fn tilted_score_equation(
    ctx: &TiltedScoreContext,
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let s = tilted_local_score(ctx, m, local_data, beta)?;
    Ok(s + (&ctx.global_gradient - &ctx.local_anchor))
}

/// Surrogate score for a single shared `theta = (beta, gamma)`:
/// `grad L_1(theta) + {grad L(theta_bar) - grad L_1(theta_bar)}`.
pub fn homogeneous_surrogate_score(
    m: &ModelFamily,
    local_data: &SiteDataset,
    theta: &DVector<f64>,
    theta_bar: &DVector<f64>,
    global_gradient: &DVector<f64>,
) -> Result<DVector<f64>> {
    let split = |t: &DVector<f64>| (t.rows(0, m.p()).into_owned(), t.rows(m.p(), m.q()).into_owned());
    if theta.len() != m.d() || theta_bar.len() != m.d() || global_gradient.len() != m.d() {
        return Err(Error::dim("homogeneous surrogate expects d-dimensional vectors"));
    }
    let (b, g) = split(theta);
    let (bb, gb) = split(theta_bar);
    let local = site_gradient(m, local_data, &b, &g)?;
    let local_bar = site_gradient(m, local_data, &bb, &gb)?;
    Ok(local + (global_gradient - local_bar))
}
