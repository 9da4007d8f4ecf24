//! Output likelihoods log p(y | h_1) and evaluation metrics.
//!
//! Conventions pinned here and documented in the output artifacts:
//! ECE uses 15 equal-width confidence bins; the Brier score is the sum of
//! squared differences over classes averaged over examples (range [0, 2]).

use crate::autodiff::Var;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Regression or classification targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Targets {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Class(v) => Targets::Class(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian { scale: f64 },
    Cauchy { scale: f64 },
    Categorical { n_classes: usize },
}

impl Likelihood {
    /// Dimension of the network output feeding this likelihood.
    pub fn output_dim(&self) -> usize {
        match self {
            Likelihood::Gaussian { .. } | Likelihood::Cauchy { .. } => 1,
            Likelihood::Categorical { n_classes } => *n_classes,
        }
    }

    pub fn validate(&self) {
        let scale = match self {
            Likelihood::Gaussian { scale } | Likelihood::Cauchy { scale } => *scale,
            Likelihood::Categorical { n_classes } => {
                assert!(*n_classes >= 2, "categorical needs at least 2 classes");
                return;
            }
        };
        assert!(
            scale > 0.0,
            "likelihood scale must be positive, got {scale}"
        );
    }

    /// Summed log-likelihood over the batch, taped. `out` is the readout
    /// output: [batch x 1] for regression, [batch x n_classes] logits for
    /// classification.
    pub fn log_prob_taped<'t>(&self, out: Var<'t>, y: &Targets) -> Var<'t> {
        let batch = out.shape()[0];
        assert!(
            y.len() == batch,
            "batch size {batch} does not match {} targets",
            y.len()
        );
        match (self, y) {
            (Likelihood::Gaussian { scale }, Targets::Real(ys)) => {
                let mu = out.reshape(vec![batch]);
                let tape_y = mu.sub(leaf_like(mu, ys));
                tape_y
                    .square()
                    .sum()
                    .scale(-1.0 / (2.0 * scale * scale))
                    .add_scalar(
                        -(batch as f64) * 0.5 * (2.0 * std::f64::consts::PI * scale * scale).ln(),
                    )
            }
            (Likelihood::Cauchy { scale }, Targets::Real(ys)) => {
                let mu = out.reshape(vec![batch]);
                let z = mu.sub(leaf_like(mu, ys)).scale(1.0 / scale);
                z.square()
                    .add_scalar(1.0)
                    .ln()
                    .sum()
                    .neg()
                    .add_scalar(-(batch as f64) * (std::f64::consts::PI * scale).ln())
            }
            (Likelihood::Categorical { n_classes }, Targets::Class(ys)) => {
                assert!(
                    out.shape() == [batch, *n_classes],
                    "logits shape {:?} does not match {n_classes} classes",
                    out.shape()
                );
                for &c in ys {
                    assert!(
                        c < *n_classes,
                        "target index {c} out of {n_classes} classes"
                    );
                }
                out.gather_rows(ys).sub(out.logsumexp_rows()).sum()
            }
            _ => panic!("likelihood {:?} does not match target kind", self),
        }
    }

    /// Value-only twin of [`Likelihood::log_prob_taped`].
    pub fn log_prob_values(&self, out: &Tensor, y: &Targets) -> f64 {
        let batch = out.shape()[0];
        match (self, y) {
            (Likelihood::Gaussian { scale }, Targets::Real(ys)) => {
                let mut lp =
                    -(batch as f64) * 0.5 * (2.0 * std::f64::consts::PI * scale * scale).ln();
                for (i, &yv) in ys.iter().enumerate() {
                    let d = out.data()[i] - yv;
                    lp -= d * d / (2.0 * scale * scale);
                }
                lp
            }
            (Likelihood::Cauchy { scale }, Targets::Real(ys)) => {
                let mut lp = -(batch as f64) * (std::f64::consts::PI * scale).ln();
                for (i, &yv) in ys.iter().enumerate() {
                    let z = (out.data()[i] - yv) / scale;
                    lp -= (1.0 + z * z).ln();
                }
                lp
            }
            (Likelihood::Categorical { n_classes }, Targets::Class(ys)) => {
                let c = *n_classes;
                let mut lp = 0.0;
                for (i, &yv) in ys.iter().enumerate() {
                    let row = &out.data()[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                    lp += row[yv] - lse;
                }
                lp
            }
            _ => panic!("likelihood {:?} does not match target kind", self),
        }
    }
}

/// Constant target leaf on the same tape as `reference`.
fn leaf_like<'t>(reference: Var<'t>, ys: &[f64]) -> Var<'t> {
    reference.tape().leaf(Tensor::vector(ys.to_vec()))
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let shape = logits.shape().to_vec();
    assert!(shape.len() == 2, "softmax_rows expects a matrix");
    let (r, c) = (shape[0], shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            data[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            data[i * c + j] /= sum;
        }
    }
    Tensor::matrix(r, c, data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// 15-bin expected calibration error plus companion metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    /// Sum of squared differences over classes, averaged over examples.
    pub brier: f64,
    pub bins: Vec<CalibrationBin>,
}

pub const ECE_BINS: usize = 15;

/// Metrics over a probability matrix [N x C] and labels. Rows must sum to
/// one within 1e-6 (contract error otherwise).
pub fn calibration(probs: &Tensor, labels: &[usize]) -> CalibrationReport {
    let shape = probs.shape().to_vec();
    assert!(
        shape.len() == 2 && shape[0] == labels.len(),
        "probability matrix {:?} does not match {} labels",
        shape,
        labels.len()
    );
    let (n, c) = (shape[0], shape[1]);
    assert!(n > 0, "calibration requires at least one example");

    let mut bin_conf = vec![0.0; ECE_BINS];
    let mut bin_acc = vec![0.0; ECE_BINS];
    let mut bin_count = vec![0usize; ECE_BINS];
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut brier = 0.0;

    for i in 0..n {
        let row = &probs.data()[i * c..(i + 1) * c];
        let sum: f64 = row.iter().sum();
        assert!(
            (sum - 1.0).abs() <= 1e-6,
            "probability row {i} sums to {sum}, not 1"
        );
        let label = labels[i];
        assert!(label < c, "label {label} out of range for {c} classes");

        let (pred, conf) =
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                    if v > bv {
                        (j, v)
                    } else {
                        (bi, bv)
                    }
                });
        let hit = pred == label;
        if hit {
            correct += 1;
        }
        nll -= row[label].max(1e-300).ln();
        for (j, &p) in row.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            brier += (p - target) * (p - target);
        }
        let b = ((conf * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        bin_conf[b] += conf;
        bin_acc[b] += if hit { 1.0 } else { 0.0 };
        bin_count[b] += 1;
    }

    let mut ece = 0.0;
    let bins = (0..ECE_BINS)
        .map(|b| {
            if bin_count[b] == 0 {
                return CalibrationBin {
                    confidence: 0.0,
                    accuracy: 0.0,
                    count: 0,
                };
            }
            let conf = bin_conf[b] / bin_count[b] as f64;
            let acc = bin_acc[b] / bin_count[b] as f64;
            ece += bin_count[b] as f64 / n as f64 * (acc - conf).abs();
            CalibrationBin {
                confidence: conf,
                accuracy: acc,
                count: bin_count[b],
            }
        })
        .collect();

    CalibrationReport {
        accuracy: correct as f64 / n as f64,
        nll: nll / n as f64,
        ece,
        brier: brier / n as f64,
        bins,
    }
}
