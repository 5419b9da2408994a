//! Client side of a round: K local SGD steps, then the (optionally
//! error-compensated) compressed upload.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressors::{compress, CompressedUpdate, CompressorSpec};
use crate::error::{Error, Result};
use crate::param_space::{GroupLayout, ParamVector};
use crate::problems::Problem;
use std::sync::Arc;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

/// Learning rates, local step count and AMSGrad constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Global (server) learning rate.
    pub eta: f64,
    /// Local (client) learning rate.
    pub eta_l: f64,
    /// Local SGD steps per round.
    #[serde(rename = "K")]
    pub local_steps: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Mini-batch size; `None` uses the full local objective.
    #[serde(default, rename = "batch", skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            eta_l: 0.1,
            local_steps: 1,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch_size: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("fl.{name}"), format!("must be > 0, got {v}")))
            }
        };
        positive("eta", self.eta)?;
        positive("eta_l", self.eta_l)?;
        positive("epsilon", self.epsilon)?;
        if self.local_steps == 0 {
            return Err(Error::config("fl.K", "must be >= 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(
                    format!("fl.{name}"),
                    format!("must lie in [0, 1), got {b}"),
                ));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("fl.batch", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-client error-feedback memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    id: usize,
    error_acc: ParamVector,
    /// Round in which `error_acc` was last written; 0 before the first round.
    last_error_update_round: usize,
}

impl ClientState {
    pub fn new(id: usize, layout: Arc<GroupLayout>) -> Self {
        Self {
            id,
            error_acc: ParamVector::zeros(layout),
            last_error_update_round: 0,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn error_acc(&self) -> &ParamVector {
        &self.error_acc
    }

    pub fn last_error_update_round(&self) -> usize {
        self.last_error_update_round
    }

    /// Rounds since the accumulator was last written, as seen in round `t`.
    pub fn staleness(&self, t: usize) -> usize {
        t.saturating_sub(self.last_error_update_round)
    }

    /// Zeroes the accumulator and stamps it as fresh in round `t`.
    pub fn restart(&mut self, t: usize) {
        self.error_acc = ParamVector::zeros(self.error_acc.shared_layout().clone());
        self.last_error_update_round = t;
    }
}

/// `K` local SGD steps from `theta`; returns `Δ = θ^(K+1) − θ`.
pub fn run_local_round<R: Rng + ?Sized>(
    problem: &Problem,
    client: usize,
    theta: &ParamVector,
    hp: &Hyperparams,
    round: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    let diverged = |what| Error::Divergence {
        round,
        client: Some(client),
        what,
    };
    let mut local = theta.clone();
    for _ in 0..hp.local_steps {
        let g = problem.stochastic_gradient(client, &local, hp.batch_size, rng)?;
        if !g.is_finite() {
            return Err(diverged("non-finite local gradient"));
        }
        local.axpy(-hp.eta_l, &g)?;
    }
    let delta = local.sub(theta)?;
    if !delta.is_finite() {
        return Err(diverged("non-finite local update"));
    }
    Ok(delta)
}

/// Everything a client produces when uploading in one round.
#[derive(Debug, Clone)]
pub struct Upload {
    /// What goes on the wire.
    pub compressed: CompressedUpdate,
    /// The dense vector the server reconstructs.
    pub dense: ParamVector,
    /// The vector that was compressed: `Δ + e` with error feedback, `Δ` without.
    pub adjusted: ParamVector,
}

/// Compresses the client's update and refreshes its error accumulator.
///
/// With error feedback the client sends `C(Δ + e)` and keeps
/// `e' = (Δ + e) − C(Δ + e)`; without it, the client sends `C(Δ)` and the
/// accumulator is left alone.
pub fn ef_upload<R: Rng + ?Sized>(
    client: &mut ClientState,
    delta: &ParamVector,
    spec: &CompressorSpec,
    ef_enabled: bool,
    round: usize,
    rng: &mut R,
) -> Result<Upload> {
    if !delta.is_finite() {
        return Err(Error::NonFinite("local update"));
    }
    let adjusted = if ef_enabled {
        delta.add(&client.error_acc)?
    } else {
        delta.clone()
    };
    let compressed = compress(spec, &adjusted, rng)?;
    let dense = compressed.materialize()?;
    if ef_enabled {
        client.error_acc = adjusted.sub(&dense)?;
        client.last_error_update_round = round;
    }
    Ok(Upload {
        compressed,
        dense,
        adjusted,
    })
}
