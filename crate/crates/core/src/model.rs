//! The SDE-BNN model bundle: prior, posterior drift network, hidden
//! dynamics, output likelihood, and the learnable parameter snapshot.

use crate::likelihood::Likelihood;
use crate::nets::{init_mlp_params, Activation, DriftNet, HiddenDynamics, MlpDrift};
use crate::rng::Stream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// OU prior on the weight process: drift f_p(w, t) = -w, diffusion
/// g = sigma * I. sigma = 0 selects the ODE ablation (no noise, KL
/// forced to zero, no Bayesian claims).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorSpec {
    pub sigma: f64,
}

impl PriorSpec {
    pub fn new(sigma: f64) -> Self {
        assert!(
            sigma >= 0.0 && sigma.is_finite(),
            "prior diffusion sigma must be non-negative, got {sigma}"
        );
        PriorSpec { sigma }
    }

    pub fn is_ode_ablation(&self) -> bool {
        self.sigma == 0.0
    }
}

/// Learnable parameter snapshot. Readout tensors are empty for
/// weight-space-only (latent) tasks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub phi: Tensor,
    pub w0: Tensor,
    pub readout_w: Tensor,
    pub readout_b: Tensor,
}

impl ModelParams {
    pub fn is_finite(&self) -> bool {
        self.phi.is_finite()
            && self.w0.is_finite()
            && self.readout_w.is_finite()
            && self.readout_b.is_finite()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdeBnnModel {
    pub prior: PriorSpec,
    pub drift: DriftNet,
    pub hidden: Option<HiddenDynamics>,
    pub likelihood: Likelihood,
    pub params: ModelParams,
}

impl SdeBnnModel {
    /// Flattened weight dimension D_w; the Brownian dimension m equals it
    /// (diagonal diffusion).
    pub fn weight_dim(&self) -> usize {
        self.drift.weight_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.hidden.as_ref().map(|h| h.state_dim).unwrap_or(0)
    }

    /// Supervised model: hidden dynamics over `state_dim` units (input
    /// plus augmented dims), an MLP drift over the flattened weights, and
    /// a linear readout from h_1.
    pub fn supervised(
        state_dim: usize,
        hidden_widths: &[usize],
        activation: Activation,
        drift_widths: &[usize],
        likelihood: Likelihood,
        sigma: f64,
        seed: u64,
    ) -> Self {
        likelihood.validate();
        let hidden = HiddenDynamics::mlp(state_dim, hidden_widths, activation);
        let weight_dim = hidden.weight_dim();
        let drift = DriftNet::Mlp(MlpDrift::new(weight_dim, drift_widths, Activation::Tanh));
        let phi = drift.init_params(seed);
        // w0 is the point-estimated initial weight value; init like an
        // ordinary MLP so h-dynamics start useful.
        let w0 = init_mlp_params(&hidden.layers, seed.wrapping_add(1), false);
        let out_dim = likelihood.output_dim();
        let mut rng = Stream::new(seed, 0x0EAD);
        let bound = (1.0 / state_dim as f64).sqrt();
        let readout_w = Tensor::matrix(
            state_dim,
            out_dim,
            (0..state_dim * out_dim)
                .map(|_| rng.uniform_in(-bound, bound))
                .collect(),
        );
        let readout_b = Tensor::zeros(vec![out_dim]);
        SdeBnnModel {
            prior: PriorSpec::new(sigma),
            drift,
            hidden: Some(hidden),
            likelihood,
            params: ModelParams {
                phi,
                w0,
                readout_w,
                readout_b,
            },
        }
    }

    /// Weight-space-only model: no hidden state, likelihood attaches to
    /// the weight path directly. Used by the latent toys.
    pub fn latent(drift: DriftNet, likelihood: Likelihood, sigma: f64, w0: Tensor) -> Self {
        likelihood.validate();
        assert!(
            w0.len() == drift.weight_dim(),
            "w0 has {} entries, drift expects {}",
            w0.len(),
            drift.weight_dim()
        );
        let phi = drift.init_params(0);
        SdeBnnModel {
            prior: PriorSpec::new(sigma),
            drift,
            hidden: None,
            likelihood,
            params: ModelParams {
                phi,
                w0,
                readout_w: Tensor::zeros(vec![0]),
                readout_b: Tensor::zeros(vec![0]),
            },
        }
    }
}
