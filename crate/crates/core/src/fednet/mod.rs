//! Simulated multi-site network with exact communication accounting.

mod ledger;
pub mod manifest;
mod node;

pub use ledger::{CommLedger, Endpoint, Message, MessageKind};
pub use node::{LocalFit, SiteNode};

use rayon::prelude::*;

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::model::ModelFamily;
use crate::score::sample_size_weights;

/// The set of sites taking part in a fit. Site ids are positions `0..K`.
#[derive(Debug, Clone)]
pub struct Network {
    model: ModelFamily,
    nodes: Vec<SiteNode>,
}

impl Network {
    /// Takes ownership of the datasets; each becomes private to its node.
    pub fn new(model: ModelFamily, datasets: Vec<SiteDataset>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Config("a network needs at least one site".into()));
        }
        let nodes = datasets
            .into_iter()
            .enumerate()
            .map(|(j, d)| SiteNode::new(j, d, model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, nodes })
    }

    pub fn model(&self) -> &ModelFamily {
        &self.model
    }

    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[SiteNode] {
        &self.nodes
    }

    pub fn node(&self, j: usize) -> Result<&SiteNode> {
        self.nodes
            .get(j)
            .ok_or_else(|| Error::Config(format!("site {j} outside 0..{}", self.k())))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.nodes.iter().map(SiteNode::n).collect()
    }

    pub fn total_n(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// `n_j / N`.
    pub fn weights(&self) -> Vec<f64> {
        sample_size_weights(&self.sizes())
    }

    /// Runs `f` on every node, in parallel, keeping site order.
    pub fn map_sites<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&SiteNode) -> Result<T> + Sync + Send,
    {
        self.nodes.par_iter().map(f).collect()
    }

    /// Message cap: one parameter vector plus one `p`-vector.
    pub fn max_payload(&self) -> usize {
        self.model.d() + self.model.p()
    }

    pub fn new_ledger(&self) -> CommLedger {
        CommLedger::new(self.max_payload())
    }
}
