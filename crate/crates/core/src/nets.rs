//! Network architectures: the hidden-state dynamics f_h driven by a flat
//! weight vector, and the small drift network that parameterizes the
//! approximate-posterior weight dynamics.
//!
//! The drift network output is a *residual over the prior drift*: the
//! posterior drift is f_q(w, t) = f_p(w, t) + net(w, t), so a net whose
//! final layer is initialized to exact zeros starts the posterior at the
//! prior and the path-space KL integrand at zero.

use crate::autodiff::{Tape, Var};
use crate::rng::Stream;
use crate::tensor::{matmul, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Swish,
    Softplus,
    None,
}

impl Activation {
    fn apply<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Swish => x.swish(),
            Activation::Softplus => x.softplus(),
            Activation::None => x,
        }
    }

    fn apply_scalar(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Swish => {
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                x * s
            }
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else if x < -30.0 {
                    x.exp()
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::None => x,
        }
    }
}

/// One affine layer with an elementwise activation. When
/// `time_conditioned` is set the scalar depth t is appended to the input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub time_conditioned: bool,
}

impl LayerSpec {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        time_conditioned: bool,
    ) -> Self {
        assert!(
            input_dim > 0 && output_dim > 0,
            "layer dims must be positive"
        );
        LayerSpec {
            input_dim,
            output_dim,
            activation,
            time_conditioned,
        }
    }

    fn effective_input(&self) -> usize {
        self.input_dim + usize::from(self.time_conditioned)
    }

    /// Flat parameter count: weight matrix plus bias.
    pub fn param_count(&self) -> usize {
        self.effective_input() * self.output_dim + self.output_dim
    }

    /// Taped evaluation. `weights` is the flat parameter vector; the
    /// layer's block starts at `offset`. Returns [batch x output_dim].
    fn apply<'t>(
        &self,
        tape: &'t Tape,
        t: f64,
        x: Var<'t>,
        weights: Var<'t>,
        offset: usize,
    ) -> Var<'t> {
        let batch = x.shape()[0];
        let in_eff = self.effective_input();
        let x = if self.time_conditioned {
            let t_col = tape.leaf(Tensor::matrix(batch, 1, vec![t; batch]));
            x.concat_cols(t_col)
        } else {
            x
        };
        let w = weights
            .slice(offset, in_eff * self.output_dim)
            .reshape(vec![in_eff, self.output_dim]);
        let b = weights.slice(offset + in_eff * self.output_dim, self.output_dim);
        self.activation.apply(x.matmul(w).add_row(b))
    }

    /// Value-only twin of [`LayerSpec::apply`].
    fn apply_values(&self, t: f64, x: &Tensor, weights: &[f64], offset: usize) -> Tensor {
        let batch = x.shape()[0];
        let in_eff = self.effective_input();
        let x = if self.time_conditioned {
            let mut data = Vec::with_capacity(batch * in_eff);
            for i in 0..batch {
                data.extend_from_slice(&x.data()[i * self.input_dim..(i + 1) * self.input_dim]);
                data.push(t);
            }
            Tensor::matrix(batch, in_eff, data)
        } else {
            x.clone()
        };
        let w = Tensor::matrix(
            in_eff,
            self.output_dim,
            weights[offset..offset + in_eff * self.output_dim].to_vec(),
        );
        let bias_off = offset + in_eff * self.output_dim;
        let b = &weights[bias_off..bias_off + self.output_dim];
        let mut y = matmul(&x, &w);
        for i in 0..batch {
            for j in 0..self.output_dim {
                y.data_mut()[i * self.output_dim + j] += b[j];
            }
        }
        y.map(|v| self.activation.apply_scalar(v))
    }
}

/// Lossless mapping from a flat weight vector to per-layer (W, b) pairs.
/// W has shape [effective_input x output_dim], row-major.
pub fn unpack(layers: &[LayerSpec], flat: &Tensor) -> Vec<(Tensor, Tensor)> {
    let expected: usize = layers.iter().map(LayerSpec::param_count).sum();
    assert!(
        flat.len() == expected,
        "unpack: flat vector has {} entries, layers need {}",
        flat.len(),
        expected
    );
    let mut out = Vec::with_capacity(layers.len());
    let mut off = 0;
    for layer in layers {
        let in_eff = layer.effective_input();
        let wn = in_eff * layer.output_dim;
        let w = Tensor::matrix(
            in_eff,
            layer.output_dim,
            flat.data()[off..off + wn].to_vec(),
        );
        off += wn;
        let b = Tensor::vector(flat.data()[off..off + layer.output_dim].to_vec());
        off += layer.output_dim;
        out.push((w, b));
    }
    out
}

/// Inverse of [`unpack`].
pub fn pack(layers: &[LayerSpec], parts: &[(Tensor, Tensor)]) -> Tensor {
    assert!(
        layers.len() == parts.len(),
        "pack: {} layers but {} tensor pairs",
        layers.len(),
        parts.len()
    );
    let mut data = Vec::new();
    for (layer, (w, b)) in layers.iter().zip(parts) {
        assert!(
            w.shape() == [layer.effective_input(), layer.output_dim]
                && b.shape() == [layer.output_dim],
            "pack: tensor shapes {:?}/{:?} do not match layer {:?}",
            w.shape(),
            b.shape(),
            layer
        );
        data.extend_from_slice(w.data());
        data.extend_from_slice(b.data());
    }
    Tensor::vector(data)
}

/// The hidden-state dynamics f_h(t, h, w): an MLP whose weights are the
/// flat vector w evolved by the weight SDE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenDynamics {
    pub layers: Vec<LayerSpec>,
    pub state_dim: usize,
}

impl HiddenDynamics {
    pub fn new(layers: Vec<LayerSpec>, state_dim: usize) -> Self {
        assert!(!layers.is_empty());
        assert!(layers[0].input_dim == state_dim);
        assert!(layers.last().unwrap().output_dim == state_dim);
        HiddenDynamics { layers, state_dim }
    }

    /// state -> widths... -> state MLP, activation on every layer except
    /// the last, every layer time-conditioned.
    pub fn mlp(state_dim: usize, widths: &[usize], activation: Activation) -> Self {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(widths);
        dims.push(state_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let act = if i + 2 == dims.len() {
                    Activation::None
                } else {
                    activation
                };
                LayerSpec::new(pair[0], pair[1], act, true)
            })
            .collect();
        HiddenDynamics::new(layers, state_dim)
    }

    /// Total flattened weight count D_w.
    pub fn weight_dim(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// dh/dt, taped. `h` is [batch x state_dim], `w` the flat weights.
    pub fn eval<'t>(&self, tape: &'t Tape, t: f64, h: Var<'t>, w: Var<'t>) -> Var<'t> {
        assert!(
            w.value().len() == self.weight_dim(),
            "hidden dynamics expect {} weights, got {}",
            self.weight_dim(),
            w.value().len()
        );
        let mut x = h;
        let mut off = 0;
        for layer in &self.layers {
            x = layer.apply(tape, t, x, w, off);
            off += layer.param_count();
        }
        x
    }

    /// Value-only twin of [`HiddenDynamics::eval`].
    pub fn eval_values(&self, t: f64, h: &Tensor, w: &[f64]) -> Tensor {
        assert!(
            w.len() == self.weight_dim(),
            "hidden dynamics expect {} weights, got {}",
            self.weight_dim(),
            w.len()
        );
        let mut x = h.clone();
        let mut off = 0;
        for layer in &self.layers {
            x = layer.apply_values(t, &x, w, off);
            off += layer.param_count();
        }
        x
    }
}

/// The posterior drift residual families.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DriftNet {
    Mlp(MlpDrift),
    Conjugate(ConjugateDrift),
    Constant(ConstantDrift),
}

impl DriftNet {
    pub fn param_dim(&self) -> usize {
        match self {
            DriftNet::Mlp(m) => m.param_dim(),
            DriftNet::Conjugate(_) => 1,
            DriftNet::Constant(c) => c.dim,
        }
    }

    pub fn weight_dim(&self) -> usize {
        match self {
            DriftNet::Mlp(m) => m.weight_dim,
            DriftNet::Conjugate(_) => 1,
            DriftNet::Constant(c) => c.dim,
        }
    }

    /// Residual drift net(w, t); the posterior drift is f_p + residual.
    pub fn eval<'t>(&self, tape: &'t Tape, t: f64, w: Var<'t>, phi: Var<'t>) -> Var<'t> {
        match self {
            DriftNet::Mlp(m) => m.eval(tape, t, w, phi),
            DriftNet::Conjugate(c) => c.eval(tape, t, w, phi),
            DriftNet::Constant(_) => phi,
        }
    }

    /// Value-only twin of [`DriftNet::eval`].
    pub fn eval_values(&self, t: f64, w: &Tensor, phi: &Tensor) -> Tensor {
        match self {
            DriftNet::Mlp(m) => m.eval_values(t, w, phi),
            DriftNet::Conjugate(c) => c.eval_values(t, w, phi),
            DriftNet::Constant(_) => phi.clone(),
        }
    }

    /// Initial parameter vector. The MLP's final layer starts at exact
    /// zeros so the posterior starts at the prior.
    pub fn init_params(&self, seed: u64) -> Tensor {
        match self {
            DriftNet::Mlp(m) => m.init_params(seed),
            DriftNet::Conjugate(_) => Tensor::vector(vec![0.0]),
            DriftNet::Constant(c) => Tensor::zeros(vec![c.dim]),
        }
    }
}

/// State- and time-independent drift residual; the residual simply equals
/// the parameter vector. Test fixture for closed-form KL checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantDrift {
    pub dim: usize,
}

/// MLP drift residual over (w, t): input D_w + 1, bottleneck hidden
/// widths (default 2-128-2), output D_w.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpDrift {
    pub layers: Vec<LayerSpec>,
    pub weight_dim: usize,
}

impl MlpDrift {
    pub fn new(weight_dim: usize, hidden_widths: &[usize], activation: Activation) -> Self {
        let mut dims = vec![weight_dim];
        dims.extend_from_slice(hidden_widths);
        dims.push(weight_dim);
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let act = if i + 2 == dims.len() {
                    Activation::None
                } else {
                    activation
                };
                // time enters through the first layer only
                LayerSpec::new(pair[0], pair[1], act, i == 0)
            })
            .collect();
        MlpDrift { layers, weight_dim }
    }

    /// Default bottleneck widths for the drift over D_w weights.
    pub fn bottleneck(weight_dim: usize) -> Self {
        MlpDrift::new(weight_dim, &[2, 128, 2], Activation::Tanh)
    }

    pub fn param_dim(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn eval<'t>(&self, tape: &'t Tape, t: f64, w: Var<'t>, phi: Var<'t>) -> Var<'t> {
        let mut x = w.reshape(vec![1, self.weight_dim]);
        let mut off = 0;
        for layer in &self.layers {
            x = layer.apply(tape, t, x, phi, off);
            off += layer.param_count();
        }
        x.reshape(vec![self.weight_dim])
    }

    pub fn eval_values(&self, t: f64, w: &Tensor, phi: &Tensor) -> Tensor {
        let mut x = w.clone().reshape(vec![1, self.weight_dim]);
        let mut off = 0;
        for layer in &self.layers {
            x = layer.apply_values(t, &x, phi.data(), off);
            off += layer.param_count();
        }
        x.reshape(vec![self.weight_dim])
    }

    /// Kaiming-uniform fan-in init for hidden layers, exact zeros for the
    /// final layer and all biases.
    pub fn init_params(&self, seed: u64) -> Tensor {
        init_mlp_params(&self.layers, seed, true)
    }
}

/// Kaiming-uniform fan-in initialization over a layer stack. When
/// `zero_final` is set the last layer (weights and bias) is exact zeros.
pub fn init_mlp_params(layers: &[LayerSpec], seed: u64, zero_final: bool) -> Tensor {
    let mut rng = Stream::new(seed, 0xD81F);
    let mut data = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let last = i + 1 == layers.len();
        let in_eff = layer.effective_input();
        let wn = in_eff * layer.output_dim;
        if last && zero_final {
            data.extend(std::iter::repeat(0.0).take(wn + layer.output_dim));
        } else {
            let bound = (6.0 / in_eff as f64).sqrt();
            for _ in 0..wn {
                data.push(rng.uniform_in(-bound, bound));
            }
            data.extend(std::iter::repeat(0.0).take(layer.output_dim));
        }
    }
    Tensor::vector(data)
}

/// Exact posterior drift family for the conjugate toy: OU prior with one
/// Gaussian observation of w at t = 1. The single parameter is the
/// pseudo-observation the drift conditions on; at the true observed value
/// the approximate posterior *is* the exact posterior.
///
/// Residual over the prior drift (Doob h-transform of the OU process):
/// net(w, t) = sigma^2 * k(t) * (phi - k(t) w) / (v(t) + obs_noise^2)
/// with k(t) = e^{-(1-t)} and v(t) = sigma^2/2 * (1 - e^{-2(1-t)}).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConjugateDrift {
    pub sigma: f64,
    pub obs_noise: f64,
}

impl ConjugateDrift {
    fn coeffs(&self, t: f64) -> (f64, f64) {
        let k = (-(1.0 - t)).exp();
        let v = self.sigma * self.sigma / 2.0 * (1.0 - (-2.0 * (1.0 - t)).exp());
        let denom = v + self.obs_noise * self.obs_noise;
        let c_phi = self.sigma * self.sigma * k / denom;
        let c_w = self.sigma * self.sigma * k * k / denom;
        (c_phi, c_w)
    }

    pub fn eval<'t>(&self, _tape: &'t Tape, t: f64, w: Var<'t>, phi: Var<'t>) -> Var<'t> {
        let (c_phi, c_w) = self.coeffs(t);
        phi.scale(c_phi).add(w.scale(-c_w))
    }

    pub fn eval_values(&self, t: f64, w: &Tensor, phi: &Tensor) -> Tensor {
        let (c_phi, c_w) = self.coeffs(t);
        w.zip(&Tensor::vector(vec![phi.data()[0]; w.len()]), |wv, p| {
            c_phi * p - c_w * wv
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};

    #[test]
    fn parameter_counting_for_1_32_1_mlp() {
        // 1 -> 32 -> 1 tanh MLP with biases, no time conditioning:
        // 1*32 + 32 + 32*1 + 1 = 97
        let layers = vec![
            LayerSpec::new(1, 32, Activation::Tanh, false),
            LayerSpec::new(32, 1, Activation::None, false),
        ];
        let total: usize = layers.iter().map(LayerSpec::param_count).sum();
        assert_eq!(total, 97);
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let layers = vec![
            LayerSpec::new(3, 4, Activation::Tanh, true),
            LayerSpec::new(4, 3, Activation::None, false),
        ];
        let n: usize = layers.iter().map(LayerSpec::param_count).sum();
        let flat = Tensor::vector((0..n).map(|i| i as f64 * 0.1 - 1.0).collect());
        let parts = unpack(&layers, &flat);
        assert_eq!(pack(&layers, &parts), flat);
    }

    #[test]
    fn pack_of_zeros_unpacks_to_zero_layers() {
        let layers = vec![LayerSpec::new(2, 2, Activation::None, false)];
        let parts = unpack(&layers, &Tensor::vector(vec![0.0; 6]));
        assert!(parts[0].0.data().iter().all(|&v| v == 0.0));
        assert!(parts[0].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "unpack")]
    fn unpack_wrong_length_is_contract_error() {
        let layers = vec![LayerSpec::new(2, 2, Activation::None, false)];
        unpack(&layers, &Tensor::vector(vec![0.0; 5]));
    }

    #[test]
    fn zero_weights_give_zero_hidden_drift() {
        let f_h = HiddenDynamics::mlp(3, &[8], Activation::Tanh);
        let tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(2, 3, vec![0.5; 6]));
        let w = tape.leaf(Tensor::zeros(vec![f_h.weight_dim()]));
        let out = f_h.eval(&tape, 0.3, h, w);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_is_hand_packed_affine_map() {
        // state_dim 2, one linear layer, no time conditioning
        let f_h = HiddenDynamics::new(vec![LayerSpec::new(2, 2, Activation::None, false)], 2);
        // W = [[1, 2], [3, 4]] (input x output, row-major), b = [0.5, -0.5]
        let w_flat = vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        let h = Tensor::matrix(1, 2, vec![1.0, 1.0]);
        let out = f_h.eval_values(0.0, &h, &w_flat);
        // h W + b = [1+3+0.5, 2+4-0.5]
        assert_eq!(out.data(), &[4.5, 5.5]);
    }

    #[test]
    fn taped_and_value_evaluations_agree() {
        let f_h = HiddenDynamics::mlp(2, &[5], Activation::Swish);
        let w_flat: Vec<f64> = (0..f_h.weight_dim())
            .map(|i| ((i * 37 % 19) as f64 - 9.0) * 0.07)
            .collect();
        let h = Tensor::matrix(3, 2, vec![0.2, -0.4, 1.0, 0.0, -1.5, 0.7]);
        let plain = f_h.eval_values(0.6, &h, &w_flat);
        let tape = Tape::new();
        let hv = tape.leaf(h);
        let wv = tape.leaf(Tensor::vector(w_flat));
        let taped = f_h.eval(&tape, 0.6, hv, wv);
        assert_eq!(*taped.value(), plain);
    }

    #[test]
    fn hidden_gradient_wrt_weights_matches_finite_differences() {
        let f_h = HiddenDynamics::mlp(2, &[4], Activation::Tanh);
        let dw = f_h.weight_dim();
        let mut rng = Stream::new(3, 1);
        let w0: Vec<f64> = (0..dw).map(|_| rng.normal() * 0.4).collect();
        let h = Tensor::matrix(1, 2, vec![0.7, -0.3]);

        let eval = |wv: &[f64]| f_h.eval_values(0.25, &h, wv).data().iter().sum::<f64>();

        let tape = Tape::new();
        let hv = tape.leaf(h.clone());
        let wv = tape.leaf(Tensor::vector(w0.clone()));
        let out = f_h.eval(&tape, 0.25, hv, wv).sum();
        let grads = backward(out);
        let gw = grads.wrt(wv);

        let step = 1e-5;
        for i in (0..dw).step_by(3) {
            let mut plus = w0.clone();
            let mut minus = w0.clone();
            plus[i] += step;
            minus[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let rel = (fd - gw.data()[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "weight {i}: fd {fd} vs ad {}", gw.data()[i]);
        }
    }

    #[test]
    fn zero_initialized_drift_net_outputs_zero() {
        let drift = MlpDrift::new(4, &[2, 8, 2], Activation::Tanh);
        let phi = drift.init_params(7);
        let w = Tensor::vector(vec![0.3, -0.2, 1.1, 0.0]);
        let out = drift.eval_values(0.5, &w, &phi);
        assert_eq!(out.data(), &[0.0; 4]);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn drift_output_length_is_weight_dim_for_random_phi() {
        let drift = MlpDrift::bottleneck(6);
        let mut rng = Stream::new(1, 2);
        let phi = Tensor::vector((0..drift.param_dim()).map(|_| rng.normal() * 0.1).collect());
        let w = Tensor::vector(vec![0.1; 6]);
        assert_eq!(drift.eval_values(0.2, &w, &phi).len(), 6);
    }

    #[test]
    fn drift_jacobian_wrt_phi_matches_finite_differences() {
        let drift = MlpDrift::new(3, &[2, 6, 2], Activation::Tanh);
        let mut rng = Stream::new(5, 0);
        let phi0: Vec<f64> = (0..drift.param_dim()).map(|_| rng.normal() * 0.3).collect();
        let w = Tensor::vector(vec![0.4, -0.9, 0.2]);

        let eval = |pv: &[f64]| {
            drift
                .eval_values(0.7, &w, &Tensor::vector(pv.to_vec()))
                .data()
                .iter()
                .sum::<f64>()
        };

        let tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let pv = tape.leaf(Tensor::vector(phi0.clone()));
        let out = drift.eval(&tape, 0.7, wv, pv).sum();
        let g = backward(out).wrt(pv);

        let step = 1e-5;
        let mut nonzero = 0;
        for i in (0..phi0.len()).step_by(5) {
            let mut plus = phi0.clone();
            let mut minus = phi0.clone();
            plus[i] += step;
            minus[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            if fd.abs() > 1e-9 {
                nonzero += 1;
                let rel = (fd - g.data()[i]).abs() / fd.abs();
                assert!(rel < 1e-5, "phi {i}: fd {fd} vs ad {}", g.data()[i]);
            }
        }
        assert!(nonzero > 0, "degenerate Jacobian on random input");
    }
}
