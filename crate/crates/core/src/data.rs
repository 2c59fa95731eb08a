use crate::error::{Error, Result};
use crate::model::{ModelFamily, Observation, ParameterPartition};

/// Observations held by one site. Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    site: usize,
    partition: ParameterPartition,
    outcome: Vec<f64>,
    common: Vec<f64>,
    nuisance: Vec<f64>,
}

impl SiteDataset {
    /// Builds a dataset from flat row-major covariate buffers, validating
    /// shapes, finiteness, and the outcome support of `model`.
    pub fn new(
        site: usize,
        model: &ModelFamily,
        outcome: Vec<f64>,
        common: Vec<f64>,
        nuisance: Vec<f64>,
    ) -> Result<Self> {
        let n = outcome.len();
        let (p, q) = (model.p(), model.q());
        if n == 0 {
            return Err(Error::Data(format!("site {site} has no observations")));
        }
        if common.len() != n * p || nuisance.len() != n * q {
            return Err(Error::dim(format!(
                "site {site}: expected {n}x{p} common and {n}x{q} nuisance covariates, got {} and {} values",
                common.len(),
                nuisance.len()
            )));
        }
        if let Some(i) = common
            .chunks(p)
            .zip(nuisance.chunks(q))
            .position(|(x, z)| x.iter().chain(z).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("site {site}, row {i}: covariate")));
        }
        if let Some(i) = outcome.iter().position(|&y| !model.valid_outcome(y)) {
            return Err(Error::Data(format!(
                "site {site}, row {i}: outcome {} invalid for the {} family",
                outcome[i], model.kind
            )));
        }
        Ok(Self {
            site,
            partition: model.partition,
            outcome,
            common,
            nuisance,
        })
    }

    pub fn site(&self) -> usize {
        self.site
    }

    pub(crate) fn with_site(mut self, site: usize) -> Self {
        self.site = site;
        self
    }

    pub fn partition(&self) -> ParameterPartition {
        self.partition
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn observation(&self, i: usize) -> Observation<'_> {
        let (p, q) = (self.partition.p(), self.partition.q());
        Observation::new(
            self.outcome[i],
            &self.common[i * p..(i + 1) * p],
            &self.nuisance[i * q..(i + 1) * q],
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = Observation<'_>> + '_ {
        (0..self.len()).map(move |i| self.observation(i))
    }

    /// True when every outcome takes the same value.
    pub fn constant_outcome(&self) -> bool {
        self.outcome.windows(2).all(|w| w[0] == w[1])
    }

    pub fn outcome_mean(&self) -> f64 {
        self.outcome.iter().sum::<f64>() / self.len() as f64
    }

    pub(crate) fn check_model(&self, model: &ModelFamily) -> Result<()> {
        if self.partition != model.partition {
            return Err(Error::dim(format!(
                "site {} partition (p={}, q={}) does not match model (p={}, q={})",
                self.site,
                self.partition.p(),
                self.partition.q(),
                model.p(),
                model.q()
            )));
        }
        Ok(())
    }
}
