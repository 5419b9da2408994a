//! Server-side optimizers and the download-channel error feedback.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressors::{compress, CompressedUpdate, CompressorSpec};
use crate::error::Result;
use crate::local_trainer::Hyperparams;
use crate::param_space::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GlobalOptimizer {
    #[default]
    Sgd,
    Ams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Moments {
    Sgd,
    Ams {
        m: ParamVector,
        v: ParamVector,
        v_hat: ParamVector,
    },
}

/// Global model plus optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptimizerState {
    theta: ParamVector,
    moments: Moments,
}

impl ServerOptimizerState {
    pub fn new(theta: ParamVector, optimizer: GlobalOptimizer) -> Self {
        let moments = match optimizer {
            GlobalOptimizer::Sgd => Moments::Sgd,
            GlobalOptimizer::Ams => {
                let zero = ParamVector::zeros(theta.shared_layout().clone());
                Moments::Ams {
                    m: zero.clone(),
                    v: zero.clone(),
                    v_hat: zero,
                }
            }
        };
        Self { theta, moments }
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn moments(&self) -> &Moments {
        &self.moments
    }

    pub fn optimizer(&self) -> GlobalOptimizer {
        match self.moments {
            Moments::Sgd => GlobalOptimizer::Sgd,
            Moments::Ams { .. } => GlobalOptimizer::Ams,
        }
    }

    /// `θ ← θ − η · direction`.
    pub fn apply(&mut self, direction: &ParamVector, eta: f64) -> Result<()> {
        self.theta.axpy(-eta, direction)
    }

    pub fn sgd_global_step(&mut self, avg_update: &ParamVector, eta: f64) -> Result<()> {
        self.apply(avg_update, eta)
    }

    /// Advances the AMSGrad moments with `avg_update` and returns the step
    /// direction `m / sqrt(v̂ + ε)`. For plain SGD the direction is the
    /// update itself.
    pub fn step_direction(&mut self, avg_update: &ParamVector, hp: &Hyperparams) -> Result<ParamVector> {
        self.theta.check_same_layout(avg_update)?;
        let Moments::Ams { m, v, v_hat } = &mut self.moments else {
            return Ok(avg_update.clone());
        };
        let (b1, b2) = (hp.beta1, hp.beta2);
        let mut dir = Vec::with_capacity(avg_update.dim());
        let layout = avg_update.shared_layout().clone();
        let (mut mv, mut vv, mut hv) = (m.values().to_vec(), v.values().to_vec(), v_hat.values().to_vec());
        for (j, &g) in avg_update.values().iter().enumerate() {
            mv[j] = b1 * mv[j] + (1.0 - b1) * g;
            vv[j] = b2 * vv[j] + (1.0 - b2) * g * g;
            hv[j] = vv[j].max(hv[j]);
            dir.push(mv[j] / (hv[j] + hp.epsilon).sqrt());
        }
        *m = ParamVector::from_raw(layout.clone(), mv);
        *v = ParamVector::from_raw(layout.clone(), vv);
        *v_hat = ParamVector::from_raw(layout.clone(), hv);
        Ok(ParamVector::from_raw(layout, dir))
    }

    pub fn ams_global_step(&mut self, avg_update: &ParamVector, hp: &Hyperparams) -> Result<()> {
        let dir = self.step_direction(avg_update, hp)?;
        self.apply(&dir, hp.eta)
    }
}

/// Server error accumulator for the compressed broadcast.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWayServerState {
    phi: ParamVector,
    download_spec: CompressorSpec,
}

/// One compressed broadcast.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub compressed: CompressedUpdate,
    pub dense: ParamVector,
    /// `direction + φ` before compression.
    pub adjusted: ParamVector,
}

impl TwoWayServerState {
    pub fn new(phi: ParamVector, download_spec: CompressorSpec) -> Self {
        Self { phi, download_spec }
    }

    pub fn zeros(layout: std::sync::Arc<crate::param_space::GroupLayout>, download_spec: CompressorSpec) -> Self {
        Self::new(ParamVector::zeros(layout), download_spec)
    }

    pub fn phi(&self) -> &ParamVector {
        &self.phi
    }

    pub fn download_spec(&self) -> &CompressorSpec {
        &self.download_spec
    }

    /// Sends `H̃ = C(direction + φ)` and keeps `φ' = direction + φ − H̃`.
    /// The caller applies `θ ← θ − η H̃` on the server and on every client copy.
    pub fn emit<R: Rng + ?Sized>(&mut self, direction: &ParamVector, rng: &mut R) -> Result<Broadcast> {
        let adjusted = direction.add(&self.phi)?;
        let compressed = compress(&self.download_spec, &adjusted, rng)?;
        let dense = compressed.materialize()?;
        self.phi = adjusted.sub(&dense)?;
        Ok(Broadcast {
            compressed,
            dense,
            adjusted,
        })
    }
}
