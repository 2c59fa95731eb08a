//! Scenario generators and the Monte Carlo replication harness.
//!
//! Every site draws from
//! `logit P(Y = 1 | X, Z) = gamma_0k + beta X + gamma_1k' Z`
//! with a binary exposure `X ~ Bernoulli(b)` (the common covariate) and a
//! site-specific intercept and confounder effects (the nuisance). The
//! Gaussian-linear family swaps the logit link for `Y = eta + N(0, 1)`.
//!
//! | heterogeneity     | `gamma_0k`     | `gamma_1k`          | `Z`               |
//! |-------------------|----------------|---------------------|-------------------|
//! | `prevalence`      | `U(a-1, a+1)`  | `U(-2, 2)`          | `N(X - 0.3, 1)`   |
//! | `scale { v }`     | `U(-v, v)`     | `U(-2v, 2v)`        | `N(X - 0.3, 1)`   |
//! | `dimension { d }` | `U(a-1, a+1)`  | `U(-1, 1)^(d-1)`    | `N(0, I_(d-1))`   |
//!
//! Replicate `r`, site `k`, attempt `s` draws from its own ChaCha stream
//! keyed by `(seed, r, k, s)`, so results do not depend on thread count
//! or on which replicates are run.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorConfig, Method};
use crate::fednet::Network;
use crate::inference;
use crate::model::{expit, FamilyKind, ModelFamily, ParameterPartition};
use crate::solver::SeparationPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Heterogeneity {
    Prevalence,
    Scale { v: f64 },
    Dimension { d_gamma: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub k: usize,
    pub n: usize,
    /// Overrides `n` with per-site sizes when present.
    #[serde(default)]
    pub site_sizes: Option<Vec<usize>>,
    pub true_beta: f64,
    pub a: f64,
    pub b: f64,
    pub heterogeneity: Heterogeneity,
    pub family: FamilyKind,
    pub replicates: usize,
    pub seed: u64,
}

/// Attempts per replicate before a degenerate draw is reported as an error.
const MAX_ATTEMPTS: u64 = 1000;

impl ScenarioConfig {
    pub fn common_common(seed: u64) -> Self {
        Self {
            name: "outcome-common_exposure-common".into(),
            k: 10,
            n: 100,
            site_sizes: None,
            true_beta: -1.0,
            a: 0.0,
            b: 0.3,
            heterogeneity: Heterogeneity::Prevalence,
            family: FamilyKind::Logistic,
            replicates: 200,
            seed,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.site_sizes.clone().unwrap_or_else(|| vec![self.n; self.k])
    }

    /// Nuisance dimension including the intercept.
    pub fn q(&self) -> usize {
        match self.heterogeneity {
            Heterogeneity::Dimension { d_gamma } => d_gamma,
            _ => 2,
        }
    }

    pub fn model(&self) -> Result<ModelFamily> {
        Ok(ModelFamily::new(self.family, ParameterPartition::new(1, self.q())?))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scenario '{}': {m}", self.name)));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.b > 0.0 && self.b < 1.0) {
            return bad("exposure probability b must lie in (0, 1)");
        }
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        let sizes = self.sizes();
        if sizes.len() != self.k || sizes.contains(&0) {
            return bad("need K positive site sizes");
        }
        match self.heterogeneity {
            Heterogeneity::Dimension { d_gamma } if d_gamma < 2 => bad("d_gamma must be at least 2"),
            Heterogeneity::Scale { v } if !(v >= 0.0 && v.is_finite()) => bad("v must be finite and non-negative"),
            _ if !self.a.is_finite() || !self.true_beta.is_finite() => bad("a and beta must be finite"),
            _ => Ok(()),
        }
    }
}

/// Four prevalence settings from crossing `a in {0, -3}` with `b in {0.3, 0.1}`.
pub fn figure1(k: usize, replicates: usize, seed: u64) -> Vec<ScenarioConfig> {
    let base = ScenarioConfig::common_common(seed);
    let mut out = Vec::with_capacity(4);
    for (exposure, b) in [("common", 0.3), ("rare", 0.1)] {
        for (outcome, a) in [("common", 0.0), ("rare", -3.0)] {
            out.push(ScenarioConfig {
                name: format!("outcome-{outcome}_exposure-{exposure}"),
                k,
                a,
                b,
                replicates,
                ..base.clone()
            });
        }
    }
    out
}

/// Heterogeneity sweep `v in {0.1, 1, 2, 4}` at `a = 0, b = 0.3`.
pub fn figure2(k: usize, replicates: usize, seed: u64) -> Vec<ScenarioConfig> {
    [0.1, 1.0, 2.0, 4.0]
        .into_iter()
        .map(|v| ScenarioConfig {
            name: format!("v={v}"),
            k,
            heterogeneity: Heterogeneity::Scale { v },
            replicates,
            ..ScenarioConfig::common_common(seed)
        })
        .collect()
}

/// Nuisance-dimension sweep `d_gamma in {2, 6, 10, 14}` at `a = 0, b = 0.3`.
pub fn figure3(k: usize, replicates: usize, seed: u64) -> Vec<ScenarioConfig> {
    [2usize, 6, 10, 14]
        .into_iter()
        .map(|d_gamma| ScenarioConfig {
            name: format!("d_gamma={d_gamma}"),
            k,
            heterogeneity: Heterogeneity::Dimension { d_gamma },
            replicates,
            ..ScenarioConfig::common_common(seed)
        })
        .collect()
}

pub fn preset(name: &str, k: usize, replicates: usize, seed: u64) -> Result<Vec<ScenarioConfig>> {
    match name {
        "figure1" => Ok(figure1(k, replicates, seed)),
        "figure2" => Ok(figure2(k, replicates, seed)),
        "figure3" => Ok(figure3(k, replicates, seed)),
        "common" => Ok(vec![ScenarioConfig {
            k,
            replicates,
            ..ScenarioConfig::common_common(seed)
        }]),
        _ => Err(Error::Config(format!(
            "unknown preset '{name}' (expected figure1, figure2, figure3 or common)"
        ))),
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream(seed: u64, replicate: usize, site: usize, attempt: u64) -> ChaCha8Rng {
    let key = [replicate as u64, site as u64, attempt]
        .into_iter()
        .fold(splitmix(seed), |h, v| splitmix(h ^ v));
    ChaCha8Rng::seed_from_u64(key)
}

/// One generated replicate.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub datasets: Vec<SiteDataset>,
    /// True `gamma_k` per site.
    pub gammas: Vec<Vec<f64>>,
    /// Degenerate draws discarded before this one.
    pub regenerated: usize,
}

fn draw_site(
    cfg: &ScenarioConfig,
    m: &ModelFamily,
    site: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SiteDataset, Vec<f64>)> {
    let q = m.q();
    let unif = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| -> f64 {
        if lo == hi {
            lo
        } else {
            Uniform::new(lo, hi).expect("ordered bounds").sample(rng)
        }
    };
    let mut gamma = Vec::with_capacity(q);
    match cfg.heterogeneity {
        Heterogeneity::Prevalence => {
            gamma.push(unif(cfg.a - 1.0, cfg.a + 1.0, rng));
            gamma.push(unif(-2.0, 2.0, rng));
        }
        Heterogeneity::Scale { v } => {
            gamma.push(unif(-v, v, rng));
            gamma.push(unif(-2.0 * v, 2.0 * v, rng));
        }
        Heterogeneity::Dimension { .. } => {
            gamma.push(unif(cfg.a - 1.0, cfg.a + 1.0, rng));
            for _ in 1..q {
                gamma.push(unif(-1.0, 1.0, rng));
            }
        }
    }
    let exposure = Bernoulli::new(cfg.b).map_err(|e| Error::Config(e.to_string()))?;
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n * q);
    for _ in 0..n {
        let xi = if exposure.sample(rng) { 1.0 } else { 0.0 };
        let mut eta = gamma[0] + cfg.true_beta * xi;
        z.push(1.0);
        for g in &gamma[1..] {
            let noise: f64 = StandardNormal.sample(rng);
            let zi = match cfg.heterogeneity {
                Heterogeneity::Dimension { .. } => noise,
                _ => xi - 0.3 + noise,
            };
            eta += g * zi;
            z.push(zi);
        }
        let yi = match cfg.family {
            FamilyKind::Logistic => {
                if rng.random::<f64>() < expit(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            FamilyKind::GaussianLinear => {
                let e: f64 = StandardNormal.sample(rng);
                eta + e
            }
        };
        x.push(xi);
        y.push(yi);
    }
    Ok((SiteDataset::new(site, m, y, x, z)?, gamma))
}

/// A site is degenerate when its exposure is constant, or its binary
/// outcome is.
fn degenerate(d: &SiteDataset, family: FamilyKind) -> bool {
    let first = d.observation(0).common[0];
    (family == FamilyKind::Logistic && d.constant_outcome()) || d.iter().all(|o| o.common[0] == first)
}

/// Draws replicate `replicate`; degenerate draws are redrawn with the
/// next attempt key and counted.
pub fn generate_scenario(cfg: &ScenarioConfig, replicate: usize) -> Result<Replicate> {
    cfg.validate()?;
    let m = cfg.model()?;
    let sizes = cfg.sizes();
    for attempt in 0..MAX_ATTEMPTS {
        let mut datasets = Vec::with_capacity(cfg.k);
        let mut gammas = Vec::with_capacity(cfg.k);
        for (site, &n) in sizes.iter().enumerate() {
            let mut rng = stream(cfg.seed, replicate, site, attempt);
            let (d, g) = draw_site(cfg, &m, site, n, &mut rng)?;
            datasets.push(d);
            gammas.push(g);
        }
        if !datasets.iter().any(|d| degenerate(d, cfg.family)) {
            return Ok(Replicate {
                datasets,
                gammas,
                regenerated: attempt as usize,
            });
        }
    }
    Err(Error::Config(format!(
        "scenario '{}' replicate {replicate}: every draw had a degenerate site",
        cfg.name
    )))
}

/// Estimator settings used by the harness. Separated local fits are
/// truncated, as a GLM fitter would, rather than failing the replicate.
pub fn default_estimator_config() -> EstimatorConfig {
    let mut cfg = EstimatorConfig::default();
    cfg.local_fit.separation = SeparationPolicy::Truncate;
    cfg
}

/// One method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub setting: String,
    pub replicate: usize,
    pub method: String,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub communication: Option<usize>,
    pub regenerated: usize,
    pub error: Option<String>,
}

impl RawRow {
    pub fn covered(&self, truth: f64) -> Option<bool> {
        Some(self.ci_lower? <= truth && truth <= self.ci_upper?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_bias: f64,
    /// Sample standard deviation (denominator `R - 1`; 0 when `R = 1`).
    pub sd: f64,
    /// `sqrt(mean((est - truth)^2))`, so `rmse^2 = bias^2 + (R-1)/R sd^2`.
    pub rmse: f64,
}

impl Summary {
    pub fn of(estimates: &[f64], truth: f64) -> Result<Self> {
        if estimates.is_empty() {
            return Err(Error::Config("cannot summarize zero estimates".into()));
        }
        let r = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / r;
        let ss: f64 = estimates.iter().map(|e| (e - mean).powi(2)).sum();
        let sd = if estimates.len() > 1 {
            (ss / (r - 1.0)).sqrt()
        } else {
            0.0
        };
        let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r;
        Ok(Self {
            count: estimates.len(),
            mean_bias: mean - truth,
            sd,
            rmse: mse.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub setting: String,
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub mean_bias: Option<f64>,
    pub sd: Option<f64>,
    pub rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_communication: Option<f64>,
    pub regenerated: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub raw: Vec<RawRow>,
}

impl MetricsTable {
    pub fn row(&self, setting: &str, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.setting == setting && r.method == method)
    }

    /// Successful estimates of `method` in `setting`, in replicate order.
    pub fn estimates(&self, setting: &str, method: &str) -> Vec<(usize, f64)> {
        self.raw
            .iter()
            .filter(|r| r.setting == setting && r.method == method)
            .filter_map(|r| r.estimate.map(|e| (r.replicate, e)))
            .collect()
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
        self.raw.extend(other.raw);
    }
}

/// Aggregates raw rows per `(setting, method)` in first-seen order.
pub fn summarize(raw: &[RawRow], truth: f64) -> Result<MetricsTable> {
    if raw.is_empty() {
        return Err(Error::Config("no replicate rows to summarize".into()));
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in raw {
        let k = (r.setting.clone(), r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows = Vec::with_capacity(keys.len());
    for (setting, method) in keys {
        let group: Vec<&RawRow> = raw
            .iter()
            .filter(|r| r.setting == setting && r.method == method)
            .collect();
        let ests: Vec<f64> = group.iter().filter_map(|r| r.estimate).collect();
        let summary = if ests.is_empty() {
            None
        } else {
            Some(Summary::of(&ests, truth)?)
        };
        let cover: Vec<bool> = group.iter().filter_map(|r| r.covered(truth)).collect();
        let comm: Vec<usize> = group.iter().filter_map(|r| r.communication).collect();
        let mut seen = Vec::new();
        let mut regenerated = 0;
        for r in &group {
            if !seen.contains(&r.replicate) {
                seen.push(r.replicate);
                regenerated += r.regenerated;
            }
        }
        rows.push(MetricsRow {
            setting,
            method,
            replicates: group.len(),
            failures: group.iter().filter(|r| r.error.is_some()).count(),
            mean_bias: summary.map(|s| s.mean_bias),
            sd: summary.map(|s| s.sd),
            rmse: summary.map(|s| s.rmse),
            coverage: (!cover.is_empty()).then(|| cover.iter().filter(|c| **c).count() as f64 / cover.len() as f64),
            mean_communication: (!comm.is_empty()).then(|| comm.iter().sum::<usize>() as f64 / comm.len() as f64),
            regenerated,
        });
    }
    Ok(MetricsTable {
        rows,
        raw: raw.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub methods: Vec<Method>,
    pub estimator: EstimatorConfig,
    pub level: f64,
}

impl HarnessConfig {
    pub fn new(methods: Vec<Method>) -> Self {
        Self {
            methods,
            estimator: default_estimator_config(),
            level: 0.95,
        }
    }
}

fn run_replicate(cfg: &ScenarioConfig, h: &HarnessConfig, r: usize) -> Vec<RawRow> {
    let row = |method: &str, regenerated: usize| RawRow {
        setting: cfg.name.clone(),
        replicate: r,
        method: method.to_string(),
        estimate: None,
        std_error: None,
        ci_lower: None,
        ci_upper: None,
        communication: None,
        regenerated,
        error: None,
    };
    let rep = match generate_scenario(cfg, r) {
        Ok(rep) => rep,
        Err(e) => {
            return h
                .methods
                .iter()
                .map(|m| RawRow {
                    error: Some(format!("{}: {e}", e.category())),
                    ..row(m.label(), 0)
                })
                .collect()
        }
    };
    let m = cfg.model().expect("validated");
    let pooled = h.methods.contains(&Method::Pooled).then(|| rep.datasets.clone());
    let net = match Network::new(m, rep.datasets) {
        Ok(n) => n,
        Err(e) => {
            return h
                .methods
                .iter()
                .map(|m| RawRow {
                    error: Some(e.to_string()),
                    ..row(m.label(), rep.regenerated)
                })
                .collect()
        }
    };
    h.methods
        .iter()
        .map(|&method| {
            let mut out = row(method.label(), rep.regenerated);
            match estimators::estimate(method, &net, pooled.as_deref(), &h.estimator) {
                Ok(report) => {
                    let b = report.beta_hat[0];
                    out.estimate = Some(b);
                    out.communication = (method != Method::Pooled).then(|| report.ledger.total());
                    if let Some(cov) = &report.covariance {
                        if let Ok(iv) = inference::ci(&report.beta_hat, cov, h.level) {
                            out.std_error = Some(cov[(0, 0)].sqrt());
                            out.ci_lower = Some(iv[0].lower);
                            out.ci_upper = Some(iv[0].upper);
                        }
                    }
                }
                Err(e) => out.error = Some(format!("{}: {e}", e.category())),
            }
            out
        })
        .collect()
}

/// Runs every method on `cfg.replicates` generated replicates.
/// Failures are recorded per row and counted, never dropped.
pub fn run_replications(cfg: &ScenarioConfig, h: &HarnessConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    if h.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let raw: Vec<RawRow> = (0..cfg.replicates)
        .into_par_iter()
        .flat_map_iter(|r| run_replicate(cfg, h, r))
        .collect();
    summarize(&raw, cfg.true_beta)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(table: &MetricsTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Data(format!("writing metrics: {e}"));
    w.write_record([
        "setting",
        "method",
        "replicates",
        "failures",
        "mean_bias",
        "sd",
        "rmse",
        "coverage",
        "mean_communication",
        "regenerated",
    ])
    .map_err(io)?;
    for r in &table.rows {
        w.write_record([
            r.setting.clone(),
            r.method.clone(),
            r.replicates.to_string(),
            r.failures.to_string(),
            opt(&r.mean_bias),
            opt(&r.sd),
            opt(&r.rmse),
            opt(&r.coverage),
            opt(&r.mean_communication),
            r.regenerated.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing metrics: {e}")))
}

pub fn write_raw_csv<W: Write>(table: &MetricsTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Data(format!("writing raw estimates: {e}"));
    w.write_record([
        "setting",
        "replicate",
        "method",
        "estimate",
        "std_error",
        "ci_lower",
        "ci_upper",
        "communication",
        "regenerated",
        "error",
    ])
    .map_err(io)?;
    for r in &table.raw {
        w.write_record([
            r.setting.clone(),
            r.replicate.to_string(),
            r.method.clone(),
            opt(&r.estimate),
            opt(&r.std_error),
            opt(&r.ci_lower),
            opt(&r.ci_upper),
            opt(&r.communication),
            r.regenerated.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing raw estimates: {e}")))
}
