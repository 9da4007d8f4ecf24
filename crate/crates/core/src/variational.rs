//! The variational objective over weight paths.
//!
//! The approximate posterior is the law of the weight SDE with drift
//! f_p + net_phi; Girsanov gives the path-space KL against the OU prior
//! as E_q[int_0^1 1/2 ||u||^2 dt] with u = net_phi / sigma. A single-path
//! estimate of the evidence lower bound is
//!
//!   elbo = log p(y | path) - beta * int 1/2 ||u||^2 dt - int <u, dB>,
//!
//! where the last (martingale) integral has expectation zero. The
//! `standard` estimator drops it from the value, `fullmc` keeps it with
//! gradients, and `stl` keeps it with the drift parameters blocked
//! inside u ("sticking the landing"), which makes the per-path gradient
//! collapse to zero when the approximate posterior is exact.

use crate::autodiff::{Tape, Var};
use crate::brownian::{BrownianPath, SeedKey};
use crate::error::{Error, Result};
use crate::likelihood::{softmax_rows, Likelihood, Targets};
use crate::model::SdeBnnModel;
use crate::nets::{ConjugateDrift, DriftNet};
use crate::sde::{
    grad_adjoint, grad_backprop, solve, solve_taped, Estimator, GradReport, Loss, ModelVars,
    SolveOutput, SolverConfig, SolverMode,
};
use crate::tensor::{matmul, Tensor};
use serde::{Deserialize, Serialize};

/// What the likelihood attaches to.
#[derive(Debug, Clone)]
pub enum ElboData<'a> {
    /// Inputs run through the hidden dynamics; the likelihood reads the
    /// linear readout of h_1. The batch log-likelihood is scaled by
    /// `dataset_size / batch` so the objective estimates the full-data
    /// ELBO.
    Supervised {
        inputs: &'a Tensor,
        targets: &'a Targets,
        dataset_size: usize,
    },
    /// Direct noisy observations (t_i, y_i) of the scalar weight path.
    PathObs { observations: &'a [(f64, f64)] },
}

impl ElboData<'_> {
    fn capture_times(&self) -> Vec<f64> {
        match self {
            ElboData::Supervised { .. } => Vec::new(),
            ElboData::PathObs { observations } => {
                let times: Vec<f64> = observations.iter().map(|(t, _)| *t).collect();
                assert!(
                    times.windows(2).all(|p| p[0] <= p[1]),
                    "observation times must be non-decreasing"
                );
                times
            }
        }
    }

    fn h0(&self, model: &SdeBnnModel) -> Option<Tensor> {
        match self {
            ElboData::Supervised { inputs, .. } => Some(pad_inputs(inputs, model.state_dim())),
            ElboData::PathObs { .. } => None,
        }
    }
}

/// Zero-pad input columns up to the augmented state width.
pub fn pad_inputs(inputs: &Tensor, state_dim: usize) -> Tensor {
    let shape = inputs.shape().to_vec();
    assert!(
        shape.len() == 2,
        "inputs must be a [batch x features] matrix"
    );
    let (batch, d_in) = (shape[0], shape[1]);
    assert!(
        d_in <= state_dim,
        "{d_in} input features do not fit a state of {state_dim} units"
    );
    let mut data = vec![0.0; batch * state_dim];
    for i in 0..batch {
        data[i * state_dim..i * state_dim + d_in]
            .copy_from_slice(&inputs.data()[i * d_in..(i + 1) * d_in]);
    }
    Tensor::matrix(batch, state_dim, data)
}

/// Taped ELBO terms for one weight path.
pub struct ElboVars<'t> {
    pub value: Var<'t>,
    pub loglik: Var<'t>,
    pub kl: Var<'t>,
    pub mart: Var<'t>,
}

/// Plain ELBO terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub value: f64,
    pub loglik: f64,
    pub kl: f64,
    pub mart: f64,
}

impl<'t> ElboVars<'t> {
    pub fn breakdown(&self) -> ElboBreakdown {
        ElboBreakdown {
            value: self.value.item(),
            loglik: self.loglik.item(),
            kl: self.kl.item(),
            mart: self.mart.item(),
        }
    }
}

/// Assemble the ELBO from a finished solve.
pub fn elbo_from_output<'t>(
    model: &SdeBnnModel,
    mv: &ModelVars<'t>,
    estimator: Estimator,
    out: &SolveOutput<'t>,
    data: &ElboData<'_>,
    beta: f64,
) -> ElboVars<'t> {
    let loglik = match data {
        ElboData::Supervised {
            targets,
            dataset_size,
            ..
        } => {
            let h1 = out
                .final_state
                .h
                .expect("supervised ELBO requires hidden dynamics");
            let readout = h1.matmul(mv.readout_w).add_row(mv.readout_b);
            let batch = targets.len();
            model
                .likelihood
                .log_prob_taped(readout, targets)
                .scale(*dataset_size as f64 / batch as f64)
        }
        ElboData::PathObs { observations } => {
            assert!(
                model.weight_dim() == 1,
                "path observations require a scalar weight process"
            );
            assert!(
                out.w_at.len() == observations.len(),
                "captured {} weight values for {} observations",
                out.w_at.len(),
                observations.len()
            );
            let mut stacked = out.w_at[0];
            for v in &out.w_at[1..] {
                stacked = stacked.concat(*v);
            }
            let ys: Vec<f64> = observations.iter().map(|(_, y)| *y).collect();
            model.likelihood.log_prob_taped(
                stacked.reshape(vec![observations.len(), 1]),
                &Targets::Real(ys),
            )
        }
    };

    let kl = out.final_state.kl;
    let mart = out.final_state.mart;
    let value = match estimator {
        Estimator::Standard => loglik.sub(kl.scale(beta)),
        Estimator::FullMc | Estimator::Stl => loglik.sub(kl.scale(beta)).sub(mart),
    };
    ElboVars {
        value,
        loglik,
        kl,
        mart,
    }
}

/// Taped single-path ELBO: solve, then attach the likelihood.
pub fn elbo_taped<'t>(
    tape: &'t Tape,
    model: &SdeBnnModel,
    mv: &ModelVars<'t>,
    estimator: Estimator,
    data: &ElboData<'_>,
    path: &BrownianPath,
    cfg: &SolverConfig,
    beta: f64,
) -> Result<ElboVars<'t>> {
    let h0 = data.h0(model);
    let captures = data.capture_times();
    let out = solve_taped(
        tape,
        model,
        mv,
        estimator,
        h0.as_ref(),
        path,
        cfg,
        &captures,
    )?;
    Ok(elbo_from_output(model, mv, estimator, &out, data, beta))
}

/// Value-only single-path ELBO (the martingale term uses the unblocked
/// u; values agree across estimators up to its inclusion).
pub fn elbo_value(
    model: &SdeBnnModel,
    estimator: Estimator,
    data: &ElboData<'_>,
    path: &BrownianPath,
    cfg: &SolverConfig,
    beta: f64,
) -> Result<ElboBreakdown> {
    let h0 = data.h0(model);
    let captures = data.capture_times();
    let retain = !captures.is_empty();
    let traj = solve(model, h0.as_ref(), path, cfg, retain)?;
    let loglik = match data {
        ElboData::Supervised {
            targets,
            dataset_size,
            ..
        } => {
            let h1 = traj
                .final_state
                .h
                .as_ref()
                .expect("supervised ELBO requires hidden dynamics");
            let readout = readout_values(model, h1);
            model.likelihood.log_prob_values(&readout, targets)
                * (*dataset_size as f64 / targets.len() as f64)
        }
        ElboData::PathObs { observations } => {
            if cfg.mode != SolverMode::Fixed {
                return Err(Error::Config(
                    "path observations require a fixed-step solver".into(),
                ));
            }
            let mut w_obs = Vec::with_capacity(observations.len());
            for &(t, _) in observations.iter() {
                let idx = traj
                    .times
                    .iter()
                    .position(|&g| (g - t).abs() < 1e-9)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "observation time {t} does not lie on the solver grid"
                        ))
                    })?;
                w_obs.push(traj.states[idx].w.data()[0]);
            }
            let ys: Vec<f64> = observations.iter().map(|(_, y)| *y).collect();
            model.likelihood.log_prob_values(
                &Tensor::matrix(observations.len(), 1, w_obs),
                &Targets::Real(ys),
            )
        }
    };
    let kl = traj.final_state.kl;
    let mart = traj.final_state.mart;
    let value = match estimator {
        Estimator::Standard => loglik - beta * kl,
        Estimator::FullMc | Estimator::Stl => loglik - beta * kl - mart,
    };
    Ok(ElboBreakdown {
        value,
        loglik,
        kl,
        mart,
    })
}

/// Linear readout h W + b, values only.
pub fn readout_values(model: &SdeBnnModel, h: &Tensor) -> Tensor {
    let mut out = matmul(h, &model.params.readout_w);
    let b = model.params.readout_b.data();
    let cols = b.len();
    for i in 0..out.shape()[0] {
        for j in 0..cols {
            out.data_mut()[i * cols + j] += b[j];
        }
    }
    out
}

/// Gradient of the negative single-path ELBO, via the taped solver
/// (`adjoint = false`) or the adjoint sweep (`adjoint = true`).
pub fn grad_neg_elbo(
    model: &SdeBnnModel,
    estimator: Estimator,
    data: &ElboData<'_>,
    path: &BrownianPath,
    cfg: &SolverConfig,
    beta: f64,
    adjoint: bool,
) -> Result<GradReport> {
    let h0 = data.h0(model);
    let captures = data.capture_times();
    let loss = NegElbo {
        model,
        estimator,
        data,
        beta,
    };
    if adjoint {
        grad_adjoint(model, estimator, h0.as_ref(), path, cfg, &captures, &loss)
    } else {
        grad_backprop(model, estimator, h0.as_ref(), path, cfg, &captures, &loss)
    }
}

/// Negative single-path ELBO as a solver loss.
struct NegElbo<'a> {
    model: &'a SdeBnnModel,
    estimator: Estimator,
    data: &'a ElboData<'a>,
    beta: f64,
}

impl Loss for NegElbo<'_> {
    fn eval<'t>(&self, _tape: &'t Tape, out: &SolveOutput<'t>, mv: &ModelVars<'t>) -> Var<'t> {
        elbo_from_output(self.model, mv, self.estimator, out, self.data, self.beta)
            .value
            .neg()
    }
}

/// Exact Girsanov KL for a constant drift residual c over horizon T:
/// KL = T ||c||^2 / (2 sigma^2).
pub fn constant_drift_kl(residual: &[f64], sigma: f64, horizon: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "closed-form KL needs a positive diffusion, got sigma = {sigma}"
        )));
    }
    if horizon < 0.0 {
        return Err(Error::Domain(format!(
            "horizon must be non-negative, got {horizon}"
        )));
    }
    let sq: f64 = residual.iter().map(|c| c * c).sum();
    Ok(horizon * sq / (2.0 * sigma * sigma))
}

/// Per-estimator gradient variance over independent weight paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimator: Estimator,
    pub n_samples: usize,
    /// Mean Euclidean norm of the per-path gradient.
    pub mean_grad_norm: f64,
    /// Variance of that norm across paths.
    pub grad_norm_variance: f64,
    /// Sum over parameter components of the per-component variance.
    pub total_variance: f64,
    /// `total_variance` divided by the parameter count.
    pub mean_component_variance: f64,
    pub mean_elbo: f64,
}

/// Estimate gradient variance of the negative ELBO across `n_samples`
/// independent Brownian paths (path ids `0..n_samples` under `seed`).
pub fn grad_variance_probe(
    model: &SdeBnnModel,
    estimator: Estimator,
    data: &ElboData<'_>,
    cfg: &SolverConfig,
    beta: f64,
    seed: u64,
    n_samples: usize,
) -> Result<VarianceReport> {
    assert!(n_samples >= 2, "variance needs at least two samples");
    let dim = model.weight_dim();
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    let mut norm_mean = 0.0;
    let mut norm_m2 = 0.0;
    let mut elbo_mean = 0.0;

    for k in 0..n_samples {
        let path = BrownianPath::new(
            SeedKey {
                seed,
                path_id: k as u64,
            },
            dim,
        );
        let report = grad_neg_elbo(model, estimator, data, &path, cfg, beta, false)?;
        let flat: Vec<f64> = report
            .grads
            .as_map()
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        if mean.is_empty() {
            mean = vec![0.0; flat.len()];
            m2 = vec![0.0; flat.len()];
        }
        let count = (k + 1) as f64;
        for (i, g) in flat.iter().enumerate() {
            let d = g - mean[i];
            mean[i] += d / count;
            m2[i] += d * (g - mean[i]);
        }
        let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        let dn = norm - norm_mean;
        norm_mean += dn / count;
        norm_m2 += dn * (norm - norm_mean);
        elbo_mean += (-report.loss - elbo_mean) / count;
    }

    let denom = (n_samples - 1) as f64;
    let total_variance: f64 = m2.iter().map(|v| v / denom).sum();
    Ok(VarianceReport {
        estimator,
        n_samples,
        mean_grad_norm: norm_mean,
        grad_norm_variance: norm_m2 / denom,
        total_variance,
        mean_component_variance: total_variance / mean.len() as f64,
        mean_elbo: elbo_mean,
    })
}

/// Average posterior-predictive class probabilities over weight paths.
/// Path ids start at `path_id_base` so evaluation noise never reuses
/// training paths.
pub fn predict_probs(
    model: &SdeBnnModel,
    inputs: &Tensor,
    cfg: &SolverConfig,
    seed: u64,
    path_id_base: u64,
    n_samples: usize,
) -> Result<Tensor> {
    assert!(n_samples > 0, "need at least one posterior sample");
    let n_classes = match model.likelihood {
        Likelihood::Categorical { n_classes } => n_classes,
        _ => panic!("predict_probs requires a categorical likelihood"),
    };
    let h0 = pad_inputs(inputs, model.state_dim());
    let n = inputs.shape()[0];
    let mut acc = Tensor::zeros(vec![n, n_classes]);
    for k in 0..n_samples {
        let path = BrownianPath::new(
            SeedKey {
                seed,
                path_id: path_id_base + k as u64,
            },
            model.weight_dim(),
        );
        let traj = solve(model, Some(&h0), &path, cfg, false)?;
        let logits = readout_values(model, traj.final_state.h.as_ref().unwrap());
        acc.add_assign(&softmax_rows(&logits));
    }
    Ok(acc
        .scale(1.0 / n_samples as f64)
        .reshape(vec![n, n_classes]))
}

/// Average posterior-predictive regression mean over weight paths.
pub fn predict_mean(
    model: &SdeBnnModel,
    inputs: &Tensor,
    cfg: &SolverConfig,
    seed: u64,
    path_id_base: u64,
    n_samples: usize,
) -> Result<Vec<f64>> {
    assert!(n_samples > 0, "need at least one posterior sample");
    let h0 = pad_inputs(inputs, model.state_dim());
    let n = inputs.shape()[0];
    let mut acc = vec![0.0; n];
    for k in 0..n_samples {
        let path = BrownianPath::new(
            SeedKey {
                seed,
                path_id: path_id_base + k as u64,
            },
            model.weight_dim(),
        );
        let traj = solve(model, Some(&h0), &path, cfg, false)?;
        let out = readout_values(model, traj.final_state.h.as_ref().unwrap());
        for i in 0..n {
            acc[i] += out.data()[i];
        }
    }
    for v in &mut acc {
        *v /= n_samples as f64;
    }
    Ok(acc)
}

/// Conjugate latent toy: OU prior, one Gaussian observation of w at
/// t = 1. The drift family contains the exact posterior (at phi equal to
/// the observed value), which makes it the reference fixture for the
/// sticking-the-landing variance collapse.
pub fn conjugate_toy(sigma: f64, obs_noise: f64, w0: f64) -> SdeBnnModel {
    SdeBnnModel::latent(
        DriftNet::Conjugate(ConjugateDrift { sigma, obs_noise }),
        Likelihood::Gaussian { scale: obs_noise },
        sigma,
        Tensor::vector(vec![w0]),
    )
}

/// Noise-free observations y_i = exp(B_{t_i}) of a geometric Brownian
/// path at n uniform times, for the latent-SDE reconstruction toy.
pub fn exp_brownian_observations(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let path = BrownianPath::new(SeedKey { seed, path_id: 0 }, 1);
    let mut b = 0.0;
    let mut obs = Vec::with_capacity(n);
    for i in 1..=n {
        let t0 = (i - 1) as f64 / n as f64;
        let t1 = i as f64 / n as f64;
        b += path.increment(t0, t1).unwrap()[0];
        obs.push((t1, b.exp()));
    }
    obs
}
