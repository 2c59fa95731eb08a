//! Variance estimation, Wald tests and confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelFamily;
use crate::score;

/// Covariance of `beta_hat` from the local site's data alone.
///
/// For each site `j` the local observations are reweighted by
/// `f(y; beta_hat, gamma_j) / f(y; beta_hat, gamma_local)` to form the
/// tilted information, whose partial information is averaged over sites
/// with `weights`. The result is `(N * avg)^{-1}`.
pub fn tilted_variance(
    m: &ModelFamily,
    local_data: &SiteDataset,
    beta_hat: &DVector<f64>,
    gamma_bar: &[DVector<f64>],
    weights: &[f64],
    total_n: usize,
) -> Result<DMatrix<f64>> {
    let local = local_data.site();
    if gamma_bar.len() != weights.len() || local >= gamma_bar.len() {
        return Err(Error::dim(format!(
            "tilted variance needs one gamma and weight per site (local site {local}, {} gammas, {} weights)",
            gamma_bar.len(),
            weights.len()
        )));
    }
    let p = m.p();
    let mut avg = DMatrix::<f64>::zeros(p, p);
    for (j, (gj, w)) in gamma_bar.iter().zip(weights).enumerate() {
        let t = score::tilted_information(m, local_data, beta_hat, gj, &gamma_bar[local])?;
        avg += score::partial_information(&t, j)? * *w;
    }
    linalg::spd_inverse(&(avg * total_n as f64), local)
}

/// Variance of the uniform mean of site estimates, `(1/K^2) sum_j (n_j P_j)^{-1}`.
/// With equal `n` this is `(Kn)^{-1} (1/K) sum_j P_j^{-1}`.
pub fn average_variance(partials: &[DMatrix<f64>], sizes: &[usize]) -> Result<DMatrix<f64>> {
    let k = partials.len();
    let w = vec![1.0 / k as f64; k];
    let covs = local_covariances(partials, sizes)?;
    Ok(weighted_mean_covariance(&covs, &w))
}

/// `(sum_j n_j P_j)^{-1}`, the variance attained by the pooled estimator.
pub fn efficient_variance(partials: &[DMatrix<f64>], sizes: &[usize]) -> Result<DMatrix<f64>> {
    check_sites(partials, sizes)?;
    let p = partials[0].nrows();
    let mut total = DMatrix::<f64>::zeros(p, p);
    for (pj, &n) in partials.iter().zip(sizes) {
        total += pj * n as f64;
    }
    linalg::spd_inverse(&total, 0)
}

/// `(n_j P_j)^{-1}` for each site.
pub fn local_covariances(partials: &[DMatrix<f64>], sizes: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    check_sites(partials, sizes)?;
    partials
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(j, (pj, &n))| linalg::spd_inverse(&(pj * n as f64), j))
        .collect()
}

/// Covariance of `sum_j w_j beta_j` for independent site estimates.
pub fn weighted_mean_covariance(covs: &[DMatrix<f64>], weights: &[f64]) -> DMatrix<f64> {
    let p = covs[0].nrows();
    let mut out = DMatrix::<f64>::zeros(p, p);
    for (c, w) in covs.iter().zip(weights) {
        out += c * (w * w);
    }
    linalg::symmetrize(&out)
}

/// Same with per-coordinate weights: `sum_j W_j C_j W_j`, `W_j = diag(w_j)`.
pub fn coordinate_weighted_covariance(covs: &[DMatrix<f64>], weights: &[DVector<f64>]) -> DMatrix<f64> {
    let p = covs[0].nrows();
    let mut out = DMatrix::<f64>::zeros(p, p);
    for (c, w) in covs.iter().zip(weights) {
        out += DMatrix::from_fn(p, p, |r, s| w[r] * c[(r, s)] * w[s]);
    }
    linalg::symmetrize(&out)
}

fn check_sites(partials: &[DMatrix<f64>], sizes: &[usize]) -> Result<()> {
    if partials.is_empty() || partials.len() != sizes.len() {
        return Err(Error::dim(format!(
            "{} partial informations for {} site sizes",
            partials.len(),
            sizes.len()
        )));
    }
    let p = partials[0].nrows();
    if partials.iter().any(|m| m.nrows() != p || m.ncols() != p) {
        return Err(Error::dim("partial informations differ in shape"));
    }
    Ok(())
}

/// Upper tail `P(chi2_dof > stat)`.
pub fn chi2_sf(stat: f64, dof: usize) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("dof >= 1");
    dist.sf(stat)
}

/// Standard normal quantile.
pub fn normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wald {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// `(b - b0)' cov^{-1} (b - b0)` referred to `chi2_p`.
pub fn wald(beta_hat: &DVector<f64>, beta_null: &DVector<f64>, covariance: &DMatrix<f64>) -> Result<Wald> {
    let p = beta_hat.len();
    if beta_null.len() != p || covariance.shape() != (p, p) {
        return Err(Error::dim("Wald test shapes disagree"));
    }
    let diff = beta_hat - beta_null;
    let sol = linalg::solve_symmetric_vec(covariance, &diff, 0)?;
    let statistic = diff.dot(&sol).max(0.0);
    Ok(Wald {
        statistic,
        dof: p,
        p_value: chi2_sf(statistic, p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Per-coordinate `beta_k -/+ z_{1-alpha/2} se_k` at confidence `level`.
pub fn ci(beta_hat: &DVector<f64>, covariance: &DMatrix<f64>, level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    std_errors(covariance)?
        .iter()
        .zip(beta_hat.iter())
        .map(|(se, b)| {
            Ok(Interval {
                lower: b - z * se,
                upper: b + z * se,
            })
        })
        .collect()
}

pub fn std_errors(covariance: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..covariance.nrows())
        .map(|k| {
            let v = covariance[(k, k)];
            if v >= 0.0 && v.is_finite() {
                Ok(v.sqrt())
            } else {
                Err(Error::NonFinite(format!("variance {v} for coordinate {k}")))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub level: f64,
    pub intervals: Vec<Interval>,
    pub wald: Wald,
}

pub fn infer(
    beta_hat: &DVector<f64>,
    covariance: &DMatrix<f64>,
    beta_null: &DVector<f64>,
    level: f64,
) -> Result<InferenceResult> {
    Ok(InferenceResult {
        covariance: covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
        std_errors: std_errors(covariance)?,
        level,
        intervals: ci(beta_hat, covariance, level)?,
        wald: wald(beta_hat, beta_null, covariance)?,
    })
}
