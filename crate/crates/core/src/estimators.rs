//! Estimation procedures over a [`Network`].
//!
//! Every federated method logs its transfers in a [`CommLedger`]. Site
//! `local_site` acts as the coordinator. Round 1 opens with each site
//! sending its local estimate and receiving the combined initial value.
//! Later rounds broadcast the current iterate and collect refreshed
//! nuisance estimates together with a `p`-vector summary from each site.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::fednet::{CommLedger, Endpoint, LocalFit, Message, MessageKind, Network, SiteNode};
use crate::inference;
use crate::linalg;
use crate::model::ModelFamily;
use crate::score;
use crate::solver::{self, MaximizeConfig, NewtonEval, RootStats, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Mean of local MLEs.
    Average,
    /// Shared-parameter surrogate likelihood, ignoring heterogeneity.
    Homo,
    /// Surrogate efficient score, one round.
    M1,
    /// Surrogate efficient score, two rounds.
    M2,
    /// Every site solves its own surrogate equation; results averaged.
    M3,
    /// Single Newton step from the initial value.
    OneStep,
    /// Plain tilted score rounds followed by one efficient-score round.
    Modified,
    /// Joint MLE over all sites. Oracle only: reads every site's data.
    Pooled,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Average,
        Method::Homo,
        Method::M1,
        Method::M2,
        Method::M3,
        Method::OneStep,
        Method::Modified,
        Method::Pooled,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Average => "average",
            Method::Homo => "homo",
            Method::M1 => "m1",
            Method::M2 => "m2",
            Method::M3 => "m3",
            Method::OneStep => "onestep",
            Method::Modified => "modified",
            Method::Pooled => "pooled",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}' (expected one of average, homo, m1, m2, m3, onestep, modified, pooled)"
                ))
            })
    }
}

/// Weights for combining local estimates into the initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightScheme {
    #[default]
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "n", alias = "sample_size")]
    SampleSize,
    /// Per coordinate, by the inverse of each site's estimated variance.
    #[serde(rename = "invvar", alias = "inverse_variance")]
    InverseVariance,
}

impl WeightScheme {
    pub fn label(self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::SampleSize => "n",
            WeightScheme::InverseVariance => "invvar",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(WeightScheme::Uniform),
            "n" | "sample_size" | "sample-size" => Ok(WeightScheme::SampleSize),
            "invvar" | "inverse_variance" | "inverse-variance" => Ok(WeightScheme::InverseVariance),
            _ => Err(Error::Config(format!(
                "unknown weight scheme '{s}' (expected uniform, n or invvar)"
            ))),
        }
    }
}

/// A site's contribution to the initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub beta: DVector<f64>,
    /// Diagonal of the estimated covariance of `beta`.
    pub variance: Option<DVector<f64>>,
    pub n: usize,
}

pub fn combine_initial(local: &[LocalEstimate], scheme: WeightScheme) -> Result<DVector<f64>> {
    let first = local
        .first()
        .ok_or_else(|| Error::Config("no local estimates to combine".into()))?;
    let p = first.beta.len();
    if local.iter().any(|e| e.beta.len() != p) {
        return Err(Error::dim("local estimates differ in length"));
    }
    let coord_weights: Vec<DVector<f64>> = match scheme {
        WeightScheme::Uniform => vec![DVector::from_element(p, 1.0); local.len()],
        WeightScheme::SampleSize => local.iter().map(|e| DVector::from_element(p, e.n as f64)).collect(),
        WeightScheme::InverseVariance => {
            let vars = local
                .iter()
                .enumerate()
                .map(|(j, e)| {
                    let v = e.variance.as_ref().ok_or_else(|| {
                        Error::Config(format!("site {j} has no variance for inverse-variance weighting"))
                    })?;
                    if v.len() != p || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                        return Err(Error::NonFinite(format!("site {j} variance for weighting")));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            // relative to the first site, so equal variances give unit weights
            vars.iter().map(|v| vars[0].component_div(v)).collect()
        }
    };
    let mut num = DVector::zeros(p);
    let mut den = DVector::zeros(p);
    for (e, w) in local.iter().zip(&coord_weights) {
        num += e.beta.component_mul(w);
        den += w;
    }
    Ok(num.component_div(&den))
}

/// Normalized per-coordinate weights matching [`combine_initial`].
fn normalized_weights(local: &[LocalEstimate], scheme: WeightScheme) -> Result<Vec<DVector<f64>>> {
    let p = local[0].beta.len();
    let raw: Vec<DVector<f64>> = local
        .iter()
        .map(|e| match scheme {
            WeightScheme::Uniform => Ok(DVector::from_element(p, 1.0)),
            WeightScheme::SampleSize => Ok(DVector::from_element(p, e.n as f64)),
            WeightScheme::InverseVariance => e
                .variance
                .as_ref()
                .map(|v| v.map(|x| 1.0 / x))
                .ok_or_else(|| Error::Config("missing variance".into())),
        })
        .collect::<Result<_>>()?;
    let mut den = DVector::zeros(p);
    for w in &raw {
        den += w;
    }
    Ok(raw.into_iter().map(|w| w.component_div(&den)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub local_site: usize,
    /// `T` for the iterative methods. `m1`/`m2` use 1 and 2 regardless.
    pub iterations: usize,
    pub weights: WeightScheme,
    pub solver: SolverConfig,
    pub local_fit: MaximizeConfig,
    /// Per-site initial `theta_bar_j` replacing the local MLEs.
    pub initial: Option<Vec<DVector<f64>>>,
    /// Average over the sites that succeeded when some sites fail to
    /// solve their surrogate equation (site-wise averaging only).
    pub allow_partial: bool,
    pub covariance: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            local_site: 0,
            iterations: 1,
            weights: WeightScheme::Uniform,
            solver: SolverConfig::default(),
            local_fit: MaximizeConfig::default(),
            initial: None,
            allow_partial: false,
            covariance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub method: Method,
    pub beta_hat: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub solver_stats: Vec<RootStats>,
    pub ledger: CommLedger,
    pub warnings: Vec<String>,
    pub initial_beta: Option<DVector<f64>>,
    /// Site nuisance estimates paired with `beta_hat` where applicable.
    pub nuisance: Vec<DVector<f64>>,
    pub local_site: Option<usize>,
    /// `|U(beta_hat)|_inf` of the final estimating equation.
    pub residual: Option<f64>,
}

impl EstimateReport {
    fn new(method: Method, beta_hat: DVector<f64>, ledger: CommLedger) -> Self {
        Self {
            method,
            beta_hat,
            covariance: None,
            iterations: 0,
            solver_stats: Vec::new(),
            ledger,
            warnings: Vec::new(),
            initial_beta: None,
            nuisance: Vec::new(),
            local_site: None,
            residual: None,
        }
    }

    fn set_covariance(&mut self, cov: Result<DMatrix<f64>>) {
        match cov {
            Ok(c) => self.covariance = Some(c),
            Err(e) => self.warnings.push(format!("covariance unavailable: {e}")),
        }
    }
}

/// Dispatches on `method`. `pooled_data` is required only for the pooled oracle.
pub fn estimate(
    method: Method,
    net: &Network,
    pooled_data: Option<&[SiteDataset]>,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    match method {
        Method::Average => average_estimator(net, cfg),
        Method::Homo => homogeneous_surrogate(net, cfg),
        Method::M1 => algorithm1(
            net,
            &EstimatorConfig {
                iterations: 1,
                ..cfg.clone()
            },
        ),
        Method::M2 => algorithm1(
            net,
            &EstimatorConfig {
                iterations: 2,
                ..cfg.clone()
            },
        ),
        Method::M3 => algorithm2(net, cfg),
        Method::OneStep => one_step(net, cfg),
        Method::Modified => modified_algorithm(net, cfg),
        Method::Pooled => {
            let data = pooled_data.ok_or_else(|| {
                Error::Config("the pooled oracle needs the individual-level data of every site".into())
            })?;
            pooled_mle(net.model(), data, cfg)
        }
    }
}

fn send(
    ledger: &mut CommLedger,
    kind: MessageKind,
    from: Endpoint,
    to: Endpoint,
    round: usize,
    payload: Vec<f64>,
) -> Result<()> {
    ledger.send(Message::new(kind, from, to, round, payload))
}

/// Round-one state shared by the federated methods.
struct Initial {
    fits: Vec<LocalFit>,
    beta_bar: DVector<f64>,
    warnings: Vec<String>,
}

impl Initial {
    fn gammas(&self) -> Vec<DVector<f64>> {
        self.fits.iter().map(LocalFit::gamma).collect()
    }
}

fn local_fits(net: &Network, cfg: &EstimatorConfig) -> Result<(Vec<LocalFit>, Vec<String>)> {
    let m = net.model();
    let fits = match &cfg.initial {
        Some(init) => {
            if init.len() != net.k() {
                return Err(Error::Config(format!(
                    "{} initial estimates supplied for {} sites",
                    init.len(),
                    net.k()
                )));
            }
            init.iter()
                .map(|t| {
                    if t.len() != m.d() || t.iter().any(|v| !v.is_finite()) {
                        return Err(Error::dim(format!("initial theta must be {} finite numbers", m.d())));
                    }
                    Ok(LocalFit {
                        theta: t.clone(),
                        p: m.p(),
                        iterations: 0,
                        grad_norm: f64::NAN,
                        separated: false,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => net.map_sites(|node| node.local_mle(None, &cfg.local_fit))?,
    };
    let mut warnings = Vec::new();
    for (node, fit) in net.nodes().iter().zip(&fits) {
        if node.underdetermined() {
            warnings.push(format!(
                "site {} has {} observations for {} parameters",
                node.id(),
                node.n(),
                m.d()
            ));
        }
        if fit.separated {
            warnings.push(format!(
                "site {} local fit is separated; using a truncated iterate",
                node.id()
            ));
        }
    }
    Ok((fits, warnings))
}

fn local_estimates(net: &Network, fits: &[LocalFit], with_variance: bool) -> Result<Vec<LocalEstimate>> {
    net.nodes()
        .iter()
        .zip(fits)
        .map(|(node, fit)| {
            let variance = if with_variance {
                Some(node.local_beta_covariance(&fit.beta(), &fit.gamma())?.diagonal())
            } else {
                None
            };
            Ok(LocalEstimate {
                beta: fit.beta(),
                variance,
                n: node.n(),
            })
        })
        .collect()
}

/// Round 1 opening: every site ships `theta_bar_j` to the coordinator and
/// receives `beta_bar`.
fn initialize(net: &Network, cfg: &EstimatorConfig, ledger: &mut CommLedger) -> Result<Initial> {
    net.node(cfg.local_site)?;
    let (fits, warnings) = local_fits(net, cfg)?;
    let invvar = cfg.weights == WeightScheme::InverseVariance;
    let local = local_estimates(net, &fits, invvar)?;
    for (j, (fit, est)) in fits.iter().zip(&local).enumerate() {
        let mut payload: Vec<f64> = fit.theta.iter().copied().collect();
        if let Some(v) = &est.variance {
            payload.extend(v.iter());
        }
        send(
            ledger,
            MessageKind::BroadcastTheta,
            Endpoint::Site(j),
            Endpoint::Coordinator,
            1,
            payload,
        )?;
    }
    let beta_bar = combine_initial(&local, cfg.weights)?;
    for j in 0..net.k() {
        send(
            ledger,
            MessageKind::ReturnBetaBar,
            Endpoint::Coordinator,
            Endpoint::Site(j),
            1,
            beta_bar.iter().copied().collect(),
        )?;
    }
    Ok(Initial {
        fits,
        beta_bar,
        warnings,
    })
}

fn collect_scores(
    net: &Network,
    beta: &DVector<f64>,
    gammas: &[DVector<f64>],
    round: usize,
    ledger: &mut CommLedger,
) -> Result<Vec<DVector<f64>>> {
    let scores = net.map_sites(|node| node.efficient_score(beta, &gammas[node.id()]))?;
    for (j, s) in scores.iter().enumerate() {
        send(
            ledger,
            MessageKind::EfficientScore,
            Endpoint::Site(j),
            Endpoint::Coordinator,
            round,
            s.iter().copied().collect(),
        )?;
    }
    Ok(scores)
}

/// Broadcasts `beta` and collects `argmax_gamma L_j(beta, gamma)` from every site.
fn refresh_nuisance(
    net: &Network,
    cfg: &EstimatorConfig,
    beta: &DVector<f64>,
    prev: &[DVector<f64>],
    round: usize,
    ledger: &mut CommLedger,
) -> Result<Vec<DVector<f64>>> {
    for j in 0..net.k() {
        send(
            ledger,
            MessageKind::BroadcastBetaT,
            Endpoint::Coordinator,
            Endpoint::Site(j),
            round,
            beta.iter().copied().collect(),
        )?;
    }
    let gammas = net.map_sites(|node| node.profile_nuisance(beta, Some(&prev[node.id()]), &cfg.local_fit))?;
    for (j, g) in gammas.iter().enumerate() {
        send(
            ledger,
            MessageKind::NuisanceUpdate,
            Endpoint::Site(j),
            Endpoint::Coordinator,
            round,
            g.iter().copied().collect(),
        )?;
    }
    Ok(gammas)
}

fn single_site_check<'a>(net: &'a Network, cfg: &EstimatorConfig) -> Result<&'a SiteNode> {
    if cfg.iterations == 0 {
        return Err(Error::Config("the number of iterations T must be at least 1".into()));
    }
    net.node(cfg.local_site)
}

/// Algorithm 1 with `cfg.iterations` rounds.
pub fn algorithm1(net: &Network, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let local = single_site_check(net, cfg)?;
    let mut ledger = net.new_ledger();
    let init = initialize(net, cfg, &mut ledger)?;
    let weights = net.weights();
    let mut beta_bar = init.beta_bar.clone();
    let mut gammas = init.gammas();
    let mut stats = Vec::with_capacity(cfg.iterations);
    let mut beta_hat = beta_bar.clone();
    for t in 1..=cfg.iterations {
        if t > 1 {
            beta_bar = beta_hat.clone();
            gammas = refresh_nuisance(net, cfg, &beta_bar, &gammas, t, &mut ledger)?;
        }
        let scores = collect_scores(net, &beta_bar, &gammas, t, &mut ledger)?;
        let ctx = local.surrogate_context(beta_bar.clone(), gammas.clone(), weights.clone(), &scores)?;
        let (b, st) = local.solve_surrogate(&ctx, &cfg.solver)?;
        beta_hat = b;
        stats.push(st);
    }
    let method = if cfg.iterations == 1 { Method::M1 } else { Method::M2 };
    let mut rep = EstimateReport::new(method, beta_hat, ledger);
    rep.iterations = cfg.iterations;
    rep.residual = stats.last().map(RootStats::final_residual);
    rep.solver_stats = stats;
    rep.warnings = init.warnings;
    rep.initial_beta = Some(init.beta_bar);
    rep.local_site = Some(cfg.local_site);
    if cfg.covariance {
        let cov = local.tilted_variance(&rep.beta_hat, &gammas, &weights, net.total_n());
        rep.set_covariance(cov);
    }
    rep.nuisance = gammas;
    Ok(rep)
}

/// `beta_bar - J(beta_bar)^{-1} S(beta_bar, Gamma_bar)` with the local
/// tilted Jacobian `J`.
pub fn one_step(net: &Network, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let local = net.node(cfg.local_site)?;
    let mut ledger = net.new_ledger();
    let init = initialize(net, cfg, &mut ledger)?;
    let weights = net.weights();
    let gammas = init.gammas();
    let scores = collect_scores(net, &init.beta_bar, &gammas, 1, &mut ledger)?;
    let ctx = local.surrogate_context(init.beta_bar.clone(), gammas.clone(), weights.clone(), &scores)?;
    let jac = local.surrogate_jacobian(&ctx, &init.beta_bar)?;
    let step = linalg::solve_general(&jac, &ctx.global_efficient_score)
        .ok_or_else(|| Error::singular(cfg.local_site, "tilted Jacobian at the initial value is singular"))?;
    let beta_hat = &init.beta_bar - step;
    let mut rep = EstimateReport::new(Method::OneStep, beta_hat, ledger);
    rep.iterations = 1;
    rep.warnings = init.warnings;
    rep.initial_beta = Some(init.beta_bar);
    rep.local_site = Some(cfg.local_site);
    if cfg.covariance {
        let cov = local.tilted_variance(&rep.beta_hat, &gammas, &weights, net.total_n());
        rep.set_covariance(cov);
    }
    rep.nuisance = gammas;
    Ok(rep)
}

/// Algorithm 2: all-to-all exchange, each site solves its own surrogate
/// equation, and the site solutions are averaged uniformly.
pub fn algorithm2(net: &Network, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    net.node(cfg.local_site)?;
    let k = net.k();
    let mut ledger = net.new_ledger();
    let (fits, mut warnings) = local_fits(net, cfg)?;
    let invvar = cfg.weights == WeightScheme::InverseVariance;
    let local = local_estimates(net, &fits, invvar)?;
    let all_to_all = |ledger: &mut CommLedger, kind: MessageKind, payloads: &[Vec<f64>]| -> Result<()> {
        for (j, pl) in payloads.iter().enumerate() {
            for r in (0..k).filter(|&r| r != j) {
                send(ledger, kind, Endpoint::Site(j), Endpoint::Site(r), 1, pl.clone())?;
            }
        }
        Ok(())
    };
    let thetas: Vec<Vec<f64>> = fits
        .iter()
        .zip(&local)
        .map(|(f, e)| {
            let mut v: Vec<f64> = f.theta.iter().copied().collect();
            if let Some(var) = &e.variance {
                v.extend(var.iter());
            }
            v
        })
        .collect();
    all_to_all(&mut ledger, MessageKind::BroadcastTheta, &thetas)?;
    let beta_bar = combine_initial(&local, cfg.weights)?;
    let gammas: Vec<DVector<f64>> = fits.iter().map(LocalFit::gamma).collect();
    let weights = net.weights();
    let scores = net.map_sites(|node| node.efficient_score(&beta_bar, &gammas[node.id()]))?;
    let score_payloads: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().copied().collect()).collect();
    all_to_all(&mut ledger, MessageKind::EfficientScore, &score_payloads)?;

    let solves: Vec<Result<(DVector<f64>, RootStats)>> = net.map_sites(|node| {
        Ok(node
            .surrogate_context(beta_bar.clone(), gammas.clone(), weights.clone(), &scores)
            .and_then(|ctx| node.solve_surrogate(&ctx, &cfg.solver)))
    })?;
    let mut betas = Vec::with_capacity(k);
    let mut stats = Vec::with_capacity(k);
    let mut failures = Vec::new();
    for (j, res) in solves.into_iter().enumerate() {
        match res {
            Ok((b, st)) => {
                betas.push((j, b));
                stats.push(st);
            }
            Err(e) if cfg.allow_partial => failures.push(format!("site {j} surrogate solve failed: {e}")),
            Err(e) => return Err(e),
        }
    }
    if betas.is_empty() {
        return Err(Error::Config(format!("every site failed: {}", failures.join("; "))));
    }
    let payloads: Vec<Vec<f64>> = betas.iter().map(|(_, b)| b.iter().copied().collect()).collect();
    for ((j, _), pl) in betas.iter().zip(&payloads) {
        for r in (0..k).filter(|r| r != j) {
            send(
                &mut ledger,
                MessageKind::EstimateShare,
                Endpoint::Site(*j),
                Endpoint::Site(r),
                1,
                pl.clone(),
            )?;
        }
    }
    let mut sum = DVector::zeros(net.model().p());
    for (_, b) in &betas {
        sum += b;
    }
    let mut rep = EstimateReport::new(Method::M3, sum / betas.len() as f64, ledger);
    warnings.extend(failures);
    rep.iterations = 1;
    rep.residual = stats
        .iter()
        .map(RootStats::final_residual)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    rep.solver_stats = stats;
    rep.warnings = warnings;
    rep.initial_beta = Some(beta_bar);
    rep.local_site = Some(cfg.local_site);
    if cfg.covariance {
        let node = net.node(cfg.local_site)?;
        let cov = node.tilted_variance(&rep.beta_hat, &gammas, &weights, net.total_n());
        rep.set_covariance(cov);
    }
    rep.nuisance = gammas;
    Ok(rep)
}

/// `T` rounds of the tilted plain-score surrogate, each shipping only
/// `grad_beta L_j`, then one efficient-score round from the result.
pub fn modified_algorithm(net: &Network, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let local = single_site_check(net, cfg)?;
    let mut ledger = net.new_ledger();
    let init = initialize(net, cfg, &mut ledger)?;
    let weights = net.weights();
    let mut beta = init.beta_bar.clone();
    let mut gammas = init.gammas();
    let mut stats = Vec::with_capacity(cfg.iterations + 1);
    for t in 1..=cfg.iterations {
        if t > 1 {
            gammas = refresh_nuisance(net, cfg, &beta, &gammas, t, &mut ledger)?;
        }
        let grads = net.map_sites(|node| node.beta_gradient(&beta, &gammas[node.id()]))?;
        for (j, g) in grads.iter().enumerate() {
            send(
                &mut ledger,
                MessageKind::ScoreGradient,
                Endpoint::Site(j),
                Endpoint::Coordinator,
                t,
                g.iter().copied().collect(),
            )?;
        }
        let ctx = local.tilted_score_context(beta.clone(), gammas.clone(), weights.clone(), &grads)?;
        let (b, st) = local.solve_tilted_score(&ctx, &cfg.solver)?;
        beta = b;
        stats.push(st);
    }
    let last = cfg.iterations + 1;
    gammas = refresh_nuisance(net, cfg, &beta, &gammas, last, &mut ledger)?;
    let scores = collect_scores(net, &beta, &gammas, last, &mut ledger)?;
    let ctx = local.surrogate_context(beta.clone(), gammas.clone(), weights.clone(), &scores)?;
    let (beta_hat, st) = local.solve_surrogate(&ctx, &cfg.solver)?;
    stats.push(st);

    let mut rep = EstimateReport::new(Method::Modified, beta_hat, ledger);
    rep.iterations = last;
    rep.residual = stats.last().map(RootStats::final_residual);
    rep.solver_stats = stats;
    rep.warnings = init.warnings;
    rep.initial_beta = Some(init.beta_bar);
    rep.local_site = Some(cfg.local_site);
    if cfg.covariance {
        let cov = local.tilted_variance(&rep.beta_hat, &gammas, &weights, net.total_n());
        rep.set_covariance(cov);
    }
    rep.nuisance = gammas;
    Ok(rep)
}

/// Packs the upper triangle of a symmetric matrix row by row.
pub fn pack_upper(m: &DMatrix<f64>) -> Vec<f64> {
    let p = m.nrows();
    (0..p)
        .flat_map(|r| (r..p).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .collect()
}

/// Combination of local MLEs under `cfg.weights`; uniform by default.
pub fn average_estimator(net: &Network, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let mut ledger = net.new_ledger();
    let (fits, warnings) = local_fits(net, cfg)?;
    let covs: Vec<Result<DMatrix<f64>>> = net
        .nodes()
        .iter()
        .zip(&fits)
        .map(|(node, f)| node.local_beta_covariance(&f.beta(), &f.gamma()))
        .collect();
    let invvar = cfg.weights == WeightScheme::InverseVariance;
    let mut local = Vec::with_capacity(fits.len());
    for (j, ((node, fit), cov)) in net.nodes().iter().zip(&fits).zip(&covs).enumerate() {
        send(
            &mut ledger,
            MessageKind::EstimateShare,
            Endpoint::Site(j),
            Endpoint::Coordinator,
            1,
            fit.beta().iter().copied().collect(),
        )?;
        let variance = match cov {
            Ok(c) => {
                for chunk in pack_upper(c).chunks(ledger.max_payload()) {
                    send(
                        &mut ledger,
                        MessageKind::VarianceShare,
                        Endpoint::Site(j),
                        Endpoint::Coordinator,
                        1,
                        chunk.to_vec(),
                    )?;
                }
                Some(c.diagonal())
            }
            Err(e) if invvar => return Err(Error::singular(j, format!("local variance unavailable: {e}"))),
            Err(_) => None,
        };
        local.push(LocalEstimate {
            beta: fit.beta(),
            variance,
            n: node.n(),
        });
    }
    let beta_hat = combine_initial(&local, cfg.weights)?;
    let mut rep = EstimateReport::new(Method::Average, beta_hat, ledger);
    rep.iterations = 1;
    rep.warnings = warnings;
    rep.nuisance = fits.iter().map(LocalFit::gamma).collect();
    if cfg.covariance {
        let cov = covs.into_iter().collect::<Result<Vec<_>>>().and_then(|covs| {
            Ok(inference::coordinate_weighted_covariance(
                &covs,
                &normalized_weights(&local, cfg.weights)?,
            ))
        });
        rep.set_covariance(cov);
    }
    Ok(rep)
}

/// Surrogate likelihood fit of one shared `theta = (beta, gamma)`.
pub fn homogeneous_surrogate(net: &Network, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let local = net.node(cfg.local_site)?;
    let m = net.model();
    let mut ledger = net.new_ledger();
    let (fits, warnings) = local_fits(net, cfg)?;
    let mut theta_bar = DVector::zeros(m.d());
    for (j, f) in fits.iter().enumerate() {
        send(
            &mut ledger,
            MessageKind::BroadcastTheta,
            Endpoint::Site(j),
            Endpoint::Coordinator,
            1,
            f.theta.iter().copied().collect(),
        )?;
        theta_bar += &f.theta;
    }
    theta_bar /= fits.len() as f64;
    for j in 0..net.k() {
        send(
            &mut ledger,
            MessageKind::SharedTheta,
            Endpoint::Coordinator,
            Endpoint::Site(j),
            1,
            theta_bar.iter().copied().collect(),
        )?;
    }
    let (b, g) = (
        theta_bar.rows(0, m.p()).into_owned(),
        theta_bar.rows(m.p(), m.q()).into_owned(),
    );
    let grads = net.map_sites(|node| node.gradient(&b, &g))?;
    let mut global = DVector::zeros(m.d());
    for ((j, gr), w) in grads.iter().enumerate().zip(net.weights()) {
        send(
            &mut ledger,
            MessageKind::ScoreGradient,
            Endpoint::Site(j),
            Endpoint::Coordinator,
            1,
            gr.iter().copied().collect(),
        )?;
        global += gr * w;
    }
    let (theta, st) = local.solve_homogeneous(&theta_bar, &global, &cfg.solver)?;
    let mut rep = EstimateReport::new(Method::Homo, theta.rows(0, m.p()).into_owned(), ledger);
    rep.iterations = 1;
    rep.residual = Some(st.final_residual());
    rep.solver_stats = vec![st];
    rep.warnings = warnings;
    rep.initial_beta = Some(b);
    rep.local_site = Some(cfg.local_site);
    rep.nuisance = vec![theta.rows(m.p(), m.q()).into_owned()];
    if cfg.covariance {
        let cov = local.homogeneous_covariance(&theta, net.total_n());
        rep.set_covariance(cov);
    }
    Ok(rep)
}

/// Joint MLE over `(beta, gamma_1, ..., gamma_K)`.
///
/// The Hessian is dense in `beta` and block diagonal in the nuisances, so
/// each Newton direction comes from a `p x p` Schur complement plus `K`
/// small `q x q` solves.
pub fn pooled_mle(m: &ModelFamily, data: &[SiteDataset], cfg: &EstimatorConfig) -> Result<EstimateReport> {
    if data.is_empty() {
        return Err(Error::Config("pooled fit needs at least one site".into()));
    }
    for d in data {
        d.check_model(m)?;
    }
    let (p, q, k) = (m.p(), m.q(), data.len());
    let sizes: Vec<usize> = data.iter().map(SiteDataset::len).collect();
    let w = score::sample_size_weights(&sizes);
    let unpack = |x: &DVector<f64>| -> (DVector<f64>, Vec<DVector<f64>>) {
        let beta = x.rows(0, p).into_owned();
        let gammas = (0..k).map(|j| x.rows(p + j * q, q).into_owned()).collect();
        (beta, gammas)
    };
    let value = |x: &DVector<f64>| -> Result<f64> {
        let (b, gs) = unpack(x);
        let mut v = 0.0;
        for ((d, g), wj) in data.iter().zip(&gs).zip(&w) {
            v += wj * score::site_log_likelihood(m, d, &b, g)?;
        }
        Ok(v)
    };
    let eval = |x: &DVector<f64>| -> Result<NewtonEval> {
        let (b, gs) = unpack(x);
        let mut grad = DVector::zeros(p + k * q);
        let mut schur = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let mut blocks = Vec::with_capacity(k);
        let mut v = 0.0;
        for (j, ((d, g), wj)) in data.iter().zip(&gs).zip(&w).enumerate() {
            v += wj * score::site_log_likelihood(m, d, &b, g)?;
            let gr = score::site_gradient(m, d, &b, g)? * *wj;
            let gb = gr.rows(0, p).into_owned();
            let gg = gr.rows(p, q).into_owned();
            let info = score::empirical_information(m, d, &b, g)?;
            let (hbb, hbg, hgg) = (&info.bb * *wj, &info.bg * *wj, &info.gg * *wj);
            let chol = hgg.clone().cholesky();
            let (a, c) = match &chol {
                Some(ch) => (ch.solve(&hbg.transpose()), ch.solve(&gg)),
                None => (DMatrix::zeros(q, p), DVector::zeros(q)),
            };
            schur += &hbb - &hbg * &a;
            rhs += &gb - &hbg * &c;
            let mut top = grad.rows_mut(0, p);
            top += &gb;
            grad.rows_mut(p + j * q, q).copy_from(&gg);
            blocks.push(chol.map(|ch| (ch, hbg, gg)));
        }
        let direction = (|| {
            let db = schur.clone().cholesky()?.solve(&rhs);
            let mut dir = DVector::zeros(p + k * q);
            dir.rows_mut(0, p).copy_from(&db);
            for (j, blk) in blocks.iter().enumerate() {
                let (ch, hbg, gg) = blk.as_ref()?;
                let dg = ch.solve(&(gg - hbg.transpose() * &db));
                dir.rows_mut(p + j * q, q).copy_from(&dg);
            }
            Some(dir)
        })();
        Ok(NewtonEval {
            value: v,
            gradient: grad,
            direction,
        })
    };
    let out = solver::maximize(DVector::zeros(p + k * q), eval, value, &cfg.local_fit, 0)?;
    let (beta_hat, gammas) = unpack(&out.x);
    let mut rep = EstimateReport::new(Method::Pooled, beta_hat, CommLedger::new(0));
    rep.iterations = out.iterations;
    rep.residual = Some(out.grad_norm);
    rep.warnings
        .push("oracle: pools individual-level data from every site".into());
    if out.separated {
        rep.warnings
            .push("pooled likelihood is separated; using a truncated iterate".into());
    }
    if cfg.covariance {
        let cov = data
            .iter()
            .zip(&gammas)
            .map(|(d, g)| {
                let blocks = score::empirical_information(m, d, &rep.beta_hat, g)?;
                score::partial_information(&blocks, d.site())
            })
            .collect::<Result<Vec<_>>>()
            .and_then(|parts| inference::efficient_variance(&parts, &sizes));
        rep.set_covariance(cov);
    }
    rep.nuisance = gammas;
    Ok(rep)
}
