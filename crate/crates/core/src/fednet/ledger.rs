use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Site -> coordinator: local estimate `theta_bar_j`.
    BroadcastTheta,
    /// Coordinator -> site: combined initial `beta_bar`.
    ReturnBetaBar,
    /// Site -> coordinator: site efficient score `S_j`.
    EfficientScore,
    /// Coordinator -> site: refreshed `beta_bar^(t)`.
    BroadcastBetaT,
    /// Site -> coordinator: profiled nuisance `gamma_bar_j^(t)`.
    NuisanceUpdate,
    /// Site -> coordinator: plain score `grad L_j`.
    ScoreGradient,
    /// Site -> site: a site's own surrogate estimate.
    EstimateShare,
    /// Coordinator -> site: a shared full parameter vector.
    SharedTheta,
    /// Site -> coordinator: packed upper triangle of a local covariance.
    VarianceShare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Site(usize),
    Coordinator,
}

/// One transfer of aggregate numbers between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub from: Endpoint,
    pub to: Endpoint,
    pub round: usize,
    pub payload: Vec<f64>,
}

impl Message {
    pub fn new(kind: MessageKind, from: Endpoint, to: Endpoint, round: usize, payload: Vec<f64>) -> Self {
        Self {
            kind,
            from,
            to,
            round,
            payload,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }
}

/// Exact count of real numbers moved across site boundaries, per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    max_payload: usize,
    messages: Vec<Message>,
    per_round: Vec<usize>,
    total: usize,
}

impl CommLedger {
    /// `max_payload` bounds a single message; with `d + p` it admits one
    /// parameter vector plus one `p`-vector and nothing observation-sized.
    pub fn new(max_payload: usize) -> Self {
        Self {
            max_payload,
            messages: Vec::new(),
            per_round: Vec::new(),
            total: 0,
        }
    }

    pub fn send(&mut self, msg: Message) -> Result<()> {
        if msg.payload.is_empty() || msg.payload_len() > self.max_payload {
            return Err(Error::Protocol(format!(
                "{:?} payload of length {} outside 1..={}",
                msg.kind,
                msg.payload_len(),
                self.max_payload
            )));
        }
        if msg.payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol(format!("{:?} payload is not finite", msg.kind)));
        }
        if self.per_round.len() <= msg.round {
            self.per_round.resize(msg.round + 1, 0);
        }
        self.per_round[msg.round] += msg.payload_len();
        self.total += msg.payload_len();
        self.messages.push(msg);
        Ok(())
    }

    pub fn round_cost(&self, round: usize) -> usize {
        self.per_round.get(round).copied().unwrap_or(0)
    }

    /// Highest round index with any traffic (0 when empty).
    pub fn rounds(&self) -> usize {
        self.per_round.len().saturating_sub(1)
    }

    pub fn per_round(&self) -> &[usize] {
        &self.per_round
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn max_payload(&self) -> usize {
        self.max_payload
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn count_kind(&self, kind: MessageKind) -> usize {
        self.messages
            .iter()
            .filter(|m| m.kind == kind)
            .map(Message::payload_len)
            .sum()
    }
}
