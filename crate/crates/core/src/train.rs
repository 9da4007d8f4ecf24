//! Adam optimization, the training loop, and JSON checkpoints.
//!
//! Reproducibility contract: every source of randomness is derived from
//! the run seed. Minibatch order comes from a dedicated stream per epoch,
//! and the Brownian path id of each gradient evaluation is the global
//! step counter (times the samples-per-step), so a rerun with the same
//! seed and config is bitwise identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::brownian::{BrownianPath, SeedKey};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SdeBnnModel};
use crate::rng::Stream;
use crate::sde::{Estimator, Gradients, SolverConfig};
use crate::variational::{grad_neg_elbo, ElboData};
use serde::{Deserialize, Serialize};

/// Adam first/second moments plus the bias-correction step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }
}

/// One Adam update in place.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    };
    update(
        params.phi.data_mut(),
        grads.phi.data(),
        state.m.phi.data_mut(),
        state.v.phi.data_mut(),
    );
    update(
        params.w0.data_mut(),
        grads.w0.data(),
        state.m.w0.data_mut(),
        state.v.w0.data_mut(),
    );
    update(
        params.readout_w.data_mut(),
        grads.readout_w.data(),
        state.m.readout_w.data_mut(),
        state.v.readout_w.data_mut(),
    );
    update(
        params.readout_b.data_mut(),
        grads.readout_b.data(),
        state.m.readout_b.data_mut(),
        state.v.readout_b.data_mut(),
    );
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// KL weight (1 = the plain ELBO).
    pub beta: f64,
    pub estimator: Estimator,
    pub seed: u64,
    /// Posterior samples per gradient step.
    pub train_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            batch_size: 40,
            lr: 1e-3,
            beta: 1.0,
            estimator: Estimator::Standard,
            seed: 0,
            train_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::Config(
                "epochs, batch_size, and train_samples must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-step negative ELBO over the epoch.
    pub mean_loss: f64,
    pub lr: f64,
    pub global_step: u64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub records: Vec<EpochRecord>,
    pub final_loss: f64,
    pub final_lr: f64,
    pub global_step: u64,
    pub lr_halvings: usize,
    /// Optimizer moments at the end of the run, for checkpointing.
    pub adam: AdamState,
}

/// Maximum learning-rate halvings before a divergence aborts the run.
pub const MAX_LR_HALVINGS: usize = 3;

/// Minibatch training of a supervised model. On divergence the epoch is
/// rolled back to its starting parameters, the learning rate halves, and
/// the epoch is retried; after [`MAX_LR_HALVINGS`] rollbacks the error
/// propagates.
pub fn fit(
    model: &mut SdeBnnModel,
    data: &Dataset,
    solver: &SolverConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitReport> {
    cfg.validate()?;
    solver.validate()?;
    assert!(
        !data.train_idx.is_empty(),
        "training requires a non-empty train split"
    );

    let mut adam = AdamState::new(&model.params);
    let mut lr = cfg.lr;
    let mut halvings = 0usize;
    let mut global_step = 0u64;
    let mut records = Vec::with_capacity(cfg.epochs);
    let n_train = data.train_idx.len();

    let mut epoch = 0;
    while epoch < cfg.epochs {
        // snapshot for rollback on divergence
        let params_snapshot = model.params.clone();
        let adam_snapshot = adam.clone();
        let step_snapshot = global_step;

        let mut order = data.train_idx.clone();
        Stream::new(cfg.seed, 0xE0 ^ epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        let mut diverged: Option<Error> = None;

        for batch_idx in order.chunks(cfg.batch_size) {
            let inputs = data.select_inputs(batch_idx);
            let targets = data.targets.select(batch_idx);
            let batch = ElboData::Supervised {
                inputs: &inputs,
                targets: &targets,
                dataset_size: n_train,
            };

            let mut grads = Gradients::zeros_like(&model.params);
            let mut loss = 0.0;
            let mut failed = None;
            for k in 0..cfg.train_samples {
                let path = BrownianPath::new(
                    SeedKey {
                        seed: cfg.seed,
                        path_id: global_step * cfg.train_samples as u64 + k as u64,
                    },
                    model.weight_dim(),
                );
                match grad_neg_elbo(model, cfg.estimator, &batch, &path, solver, cfg.beta, false) {
                    Ok(report) => {
                        grads.add_assign(&report.grads);
                        loss += report.loss;
                    }
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            if failed.is_none() && !grads.is_finite() {
                failed = Some(Error::Diverged {
                    t: 1.0,
                    norm: f64::INFINITY,
                });
            }
            if let Some(e) = failed {
                diverged = Some(e);
                break;
            }
            let scale = 1.0 / cfg.train_samples as f64;
            adam_step(&mut model.params, &grads.scale(scale), &mut adam, lr);
            global_step += 1;
            epoch_loss += loss * scale;
            n_batches += 1;
        }

        if let Some(e) = diverged {
            if halvings >= MAX_LR_HALVINGS {
                return Err(e);
            }
            model.params = params_snapshot;
            adam = adam_snapshot;
            global_step = step_snapshot;
            lr /= 2.0;
            halvings += 1;
            continue; // retry the same epoch
        }

        let record = EpochRecord {
            epoch,
            mean_loss: epoch_loss / n_batches as f64,
            lr,
            global_step,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)
                .map_err(|e| Error::Checkpoint(format!("log serialization: {e}")))?;
            writeln!(w)?;
        }
        records.push(record);
        epoch += 1;
    }

    let final_loss = records.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    Ok(FitReport {
        records,
        final_loss,
        final_lr: lr,
        global_step,
        lr_halvings: halvings,
        adam,
    })
}

/// Training for weight-space-only models against direct path
/// observations. Each epoch is one Adam step whose gradient averages
/// `train_samples` Monte Carlo weight paths; the divergence policy
/// (rollback, halve the learning rate, at most [`MAX_LR_HALVINGS`]
/// times) matches [`fit`].
pub fn fit_latent(
    model: &mut SdeBnnModel,
    observations: &[(f64, f64)],
    solver: &SolverConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitReport> {
    cfg.validate()?;
    solver.validate()?;
    assert!(
        !observations.is_empty(),
        "latent training requires at least one observation"
    );
    let data = ElboData::PathObs { observations };

    let mut adam = AdamState::new(&model.params);
    let mut lr = cfg.lr;
    let mut halvings = 0usize;
    let mut global_step = 0u64;
    let mut records = Vec::with_capacity(cfg.epochs);

    let mut epoch = 0;
    while epoch < cfg.epochs {
        let params_snapshot = model.params.clone();
        let adam_snapshot = adam.clone();
        let step_snapshot = global_step;

        let mut grads = Gradients::zeros_like(&model.params);
        let mut loss = 0.0;
        let mut failed = None;
        for k in 0..cfg.train_samples {
            let path = BrownianPath::new(
                SeedKey {
                    seed: cfg.seed,
                    path_id: global_step * cfg.train_samples as u64 + k as u64,
                },
                model.weight_dim(),
            );
            match grad_neg_elbo(model, cfg.estimator, &data, &path, solver, cfg.beta, false) {
                Ok(report) => {
                    grads.add_assign(&report.grads);
                    loss += report.loss;
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if failed.is_none() && !grads.is_finite() {
            failed = Some(Error::Diverged {
                t: 1.0,
                norm: f64::INFINITY,
            });
        }
        if let Some(e) = failed {
            if halvings >= MAX_LR_HALVINGS {
                return Err(e);
            }
            model.params = params_snapshot;
            adam = adam_snapshot;
            global_step = step_snapshot;
            lr /= 2.0;
            halvings += 1;
            continue;
        }

        let scale = 1.0 / cfg.train_samples as f64;
        adam_step(&mut model.params, &grads.scale(scale), &mut adam, lr);
        global_step += 1;

        let record = EpochRecord {
            epoch,
            mean_loss: loss * scale,
            lr,
            global_step,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)
                .map_err(|e| Error::Checkpoint(format!("log serialization: {e}")))?;
            writeln!(w)?;
        }
        records.push(record);
        epoch += 1;
    }

    let final_loss = records.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    Ok(FitReport {
        records,
        final_loss,
        final_lr: lr,
        global_step,
        lr_halvings: halvings,
        adam,
    })
}

pub const CHECKPOINT_VERSION: &str = "sdebnn-checkpoint-v1";

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub model: SdeBnnModel,
    pub adam: AdamState,
    pub global_step: u64,
    pub train: TrainConfig,
    pub solver: SolverConfig,
}

impl Checkpoint {
    pub fn new(
        model: &SdeBnnModel,
        adam: &AdamState,
        global_step: u64,
        train: &TrainConfig,
        solver: &SolverConfig,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            model: model.clone(),
            adam: adam.clone(),
            global_step,
            train: train.clone(),
            solver: *solver,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, ckpt)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version '{}' (expected '{CHECKPOINT_VERSION}')",
            ckpt.version
        )));
    }
    if !ckpt.model.params.is_finite() {
        return Err(Error::Checkpoint(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;
    use crate::likelihood::Likelihood;
    use crate::nets::Activation;
    use crate::tensor::Tensor;

    fn tiny_model(seed: u64) -> SdeBnnModel {
        SdeBnnModel::supervised(
            3,
            &[4],
            Activation::Tanh,
            &[2, 4, 2],
            Likelihood::Categorical { n_classes: 2 },
            0.1,
            seed,
        )
    }

    #[test]
    fn adam_first_step_moves_by_roughly_lr_times_sign() {
        let model = tiny_model(0);
        let mut params = model.params.clone();
        let before = params.phi.data()[0];
        let mut grads = Gradients::zeros_like(&params);
        grads.phi.data_mut()[0] = 2.5;
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.01);
        let moved = before - params.phi.data()[0];
        // m_hat = g, v_hat = g^2 => step = lr * g / (|g| + eps) ~ lr
        assert!((moved - 0.01).abs() < 1e-8, "moved {moved}");
        // untouched components stay put
        assert_eq!(params.phi.data()[1], model.params.phi.data()[1]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let model = tiny_model(1);
        let mut params = model.params.clone();
        params.phi = Tensor::vector(vec![-4.0]);
        let mut state = AdamState {
            m: Gradients {
                phi: Tensor::zeros(vec![1]),
                ..Gradients::zeros_like(&model.params)
            },
            v: Gradients {
                phi: Tensor::zeros(vec![1]),
                ..Gradients::zeros_like(&model.params)
            },
            step: 0,
        };
        for _ in 0..4000 {
            let x = params.phi.data()[0];
            let mut g = Gradients {
                phi: Tensor::vector(vec![2.0 * (x - 3.0)]),
                ..Gradients::zeros_like(&model.params)
            };
            g.w0 = Tensor::zeros(model.params.w0.shape().to_vec());
            adam_step(&mut params, &g, &mut state, 0.05);
        }
        assert!((params.phi.data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let data = gen_two_moons(24, 0.1, 3);
        let solver = SolverConfig::fixed(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-2,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut m1 = tiny_model(11);
        let mut m2 = tiny_model(11);
        let r1 = fit(&mut m1, &data, &solver, &cfg, None).unwrap();
        let r2 = fit(&mut m2, &data, &solver, &cfg, None).unwrap();
        assert_eq!(m1.params.phi, m2.params.phi);
        assert_eq!(m1.params.w0, m2.params.w0);
        assert_eq!(m1.params.readout_w, m2.params.readout_w);
        assert!(r1.final_loss == r2.final_loss, "loss must match bitwise");
    }

    #[test]
    fn fit_reduces_the_loss_on_two_moons() {
        let data = gen_two_moons(40, 0.1, 5);
        let solver = SolverConfig::fixed(4);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 36,
            lr: 5e-2,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(2);
        let report = fit(&mut model, &data, &solver, &cfg, None).unwrap();
        let first = report.records.first().unwrap().mean_loss;
        let last = report.records.last().unwrap().mean_loss;
        assert!(last < first, "loss should fall: first {first}, last {last}");
    }

    #[test]
    fn fit_writes_json_lines() {
        let data = gen_two_moons(16, 0.1, 7);
        let solver = SolverConfig::fixed(4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(7);
        let mut buf = Vec::new();
        fit(&mut model, &data, &solver, &cfg, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for (i, line) in lines.iter().enumerate() {
            let rec: EpochRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.epoch, i);
            assert!(rec.mean_loss.is_finite());
        }
    }

    #[test]
    fn divergent_run_halves_lr_then_aborts() {
        let data = gen_two_moons(16, 0.1, 9);
        let solver = SolverConfig::fixed(4);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e200, // guaranteed blow-up even after three halvings
            seed: 4,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(9);
        match fit(&mut model, &data, &solver, &cfg, None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let model = tiny_model(3);
        let adam = AdamState::new(&model.params);
        let cfg = TrainConfig::default();
        let solver = SolverConfig::fixed(8);
        let ckpt = Checkpoint::new(&model, &adam, 42, &cfg, &solver);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.params.phi, model.params.phi);
        assert_eq!(loaded.model.params.w0, model.params.w0);
        assert_eq!(loaded.global_step, 42);
    }

    #[test]
    fn checkpoint_version_mismatch_is_rejected() {
        let model = tiny_model(3);
        let ckpt = Checkpoint {
            version: "sdebnn-checkpoint-v0".into(),
            model: model.clone(),
            adam: AdamState::new(&model.params),
            global_step: 0,
            train: TrainConfig::default(),
            solver: SolverConfig::fixed(8),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.ckpt.json");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_checkpoint_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
