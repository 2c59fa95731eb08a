//! Parametric families `f(y; beta, gamma)` with a common/nuisance split of
//! the parameter vector.
//!
//! Both families shipped here are canonical-link GLMs, so every derivative
//! reduces to scalar derivatives in the linear predictor
//! `eta = beta' x + gamma' z` times the stacked design vector `(x, z)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split of a per-site parameter vector into `p` common and `q` nuisance
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    p: usize,
    q: usize,
}

impl ParameterPartition {
    pub fn new(p: usize, q: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::Config(format!(
                "partition needs p >= 1 and q >= 1, got p={p}, q={q}"
            )));
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn d(&self) -> usize {
        self.p + self.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Logistic,
    /// Normal outcome with identity link and unit noise variance.
    GaussianLinear,
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FamilyKind::Logistic => f.write_str("logistic"),
            FamilyKind::GaussianLinear => f.write_str("gaussian-linear"),
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(FamilyKind::Logistic),
            "gaussian-linear" | "gaussian" => Ok(FamilyKind::GaussianLinear),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }
}

/// One observation seen through borrowed covariate slices.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub outcome: f64,
    pub common: &'a [f64],
    pub nuisance: &'a [f64],
}

impl<'a> Observation<'a> {
    pub fn new(outcome: f64, common: &'a [f64], nuisance: &'a [f64]) -> Self {
        Self {
            outcome,
            common,
            nuisance,
        }
    }

    /// Stacked design vector `(x, z)`.
    pub fn design(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.common.len() + self.nuisance.len(),
            self.common.iter().chain(self.nuisance.iter()).copied(),
        )
    }
}

/// Log density and its first two derivatives with respect to `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaTerms {
    pub log_density: f64,
    pub d1: f64,
    pub d2: f64,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(1 + exp(eta))` without overflow.
pub fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFamily {
    pub partition: ParameterPartition,
    pub kind: FamilyKind,
}

impl ModelFamily {
    pub fn new(kind: FamilyKind, partition: ParameterPartition) -> Self {
        Self { partition, kind }
    }

    pub fn logistic(p: usize, q: usize) -> Result<Self> {
        Ok(Self::new(FamilyKind::Logistic, ParameterPartition::new(p, q)?))
    }

    pub fn gaussian_linear(p: usize, q: usize) -> Result<Self> {
        Ok(Self::new(FamilyKind::GaussianLinear, ParameterPartition::new(p, q)?))
    }

    pub fn p(&self) -> usize {
        self.partition.p()
    }

    pub fn q(&self) -> usize {
        self.partition.q()
    }

    pub fn d(&self) -> usize {
        self.partition.d()
    }

    /// Whether `y` lies in the support of the family.
    pub fn valid_outcome(&self, y: f64) -> bool {
        match self.kind {
            FamilyKind::Logistic => y == 0.0 || y == 1.0,
            FamilyKind::GaussianLinear => y.is_finite(),
        }
    }

    /// `eta = beta' x + gamma' z`; no validation.
    #[inline]
    pub fn linear_predictor(&self, obs: &Observation<'_>, beta: &[f64], gamma: &[f64]) -> f64 {
        let a: f64 = obs.common.iter().zip(beta).map(|(x, b)| x * b).sum();
        let b: f64 = obs.nuisance.iter().zip(gamma).map(|(z, g)| z * g).sum();
        a + b
    }

    #[inline]
    pub fn eta_terms(&self, y: f64, eta: f64) -> EtaTerms {
        match self.kind {
            FamilyKind::Logistic => {
                let mu = expit(eta);
                EtaTerms {
                    log_density: y * eta - log1p_exp(eta),
                    d1: y - mu,
                    d2: -mu * (1.0 - mu),
                }
            }
            FamilyKind::GaussianLinear => {
                let r = y - eta;
                EtaTerms {
                    log_density: -HALF_LN_2PI - 0.5 * r * r,
                    d1: r,
                    d2: -1.0,
                }
            }
        }
    }

    fn check(&self, obs: &Observation<'_>, beta: &[f64], gammas: &[&[f64]]) -> Result<()> {
        let (p, q) = (self.p(), self.q());
        if obs.common.len() != p || beta.len() != p {
            return Err(Error::dim(format!(
                "common block expects length {p}, got covariates {} / beta {}",
                obs.common.len(),
                beta.len()
            )));
        }
        if obs.nuisance.len() != q || gammas.iter().any(|g| g.len() != q) {
            return Err(Error::dim(format!(
                "nuisance block expects length {q}, got covariates {}",
                obs.nuisance.len()
            )));
        }
        let finite = obs.outcome.is_finite()
            && obs.common.iter().all(|v| v.is_finite())
            && obs.nuisance.iter().all(|v| v.is_finite())
            && beta.iter().all(|v| v.is_finite())
            && gammas.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("observation or parameter".into()));
        }
        if !self.valid_outcome(obs.outcome) {
            return Err(Error::Data(format!(
                "outcome {} outside the support of the {} family",
                obs.outcome, self.kind
            )));
        }
        Ok(())
    }

    pub fn log_density(&self, obs: &Observation<'_>, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<f64> {
        self.check(obs, beta.as_slice(), &[gamma.as_slice()])?;
        let eta = self.linear_predictor(obs, beta.as_slice(), gamma.as_slice());
        Ok(self.eta_terms(obs.outcome, eta).log_density)
    }

    /// Stacked `(d/dbeta, d/dgamma)` of the log density.
    pub fn score(&self, obs: &Observation<'_>, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(obs, beta.as_slice(), &[gamma.as_slice()])?;
        let eta = self.linear_predictor(obs, beta.as_slice(), gamma.as_slice());
        Ok(obs.design() * self.eta_terms(obs.outcome, eta).d1)
    }

    pub fn hessian(&self, obs: &Observation<'_>, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(obs, beta.as_slice(), &[gamma.as_slice()])?;
        let eta = self.linear_predictor(obs, beta.as_slice(), gamma.as_slice());
        let v = obs.design();
        Ok(&v * v.transpose() * self.eta_terms(obs.outcome, eta).d2)
    }

    /// `log f(y; beta, gamma_num) - log f(y; beta, gamma_den)`.
    pub fn log_density_ratio(
        &self,
        obs: &Observation<'_>,
        beta: &DVector<f64>,
        gamma_num: &DVector<f64>,
        gamma_den: &DVector<f64>,
    ) -> Result<f64> {
        self.check(obs, beta.as_slice(), &[gamma_num.as_slice(), gamma_den.as_slice()])?;
        let out = self.log_ratio_unchecked(obs, beta.as_slice(), gamma_num.as_slice(), gamma_den.as_slice());
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite("density ratio".into()))
        }
    }

    #[inline]
    pub(crate) fn log_ratio_unchecked(
        &self,
        obs: &Observation<'_>,
        beta: &[f64],
        gamma_num: &[f64],
        gamma_den: &[f64],
    ) -> f64 {
        let num = self.linear_predictor(obs, beta, gamma_num);
        let den = self.linear_predictor(obs, beta, gamma_den);
        self.eta_terms(obs.outcome, num).log_density - self.eta_terms(obs.outcome, den).log_density
    }
}
