use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{FarlError, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Transform applied to the last layer's affine output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    /// Squashes to (0, 1); only for heads whose target lies in [0, 1].
    Sigmoid,
    /// `scale * tanh(u)`, for bounded regression heads.
    TanhScaled { scale: f64 },
}

/// Architecture descriptor for a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_transform: OutputTransform,
}

impl NetworkSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: Activation,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        let spec = Self {
            layer_widths,
            hidden_activation,
            output_transform,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(FarlError::InvalidConfig(
                "network needs at least 2 layers".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(FarlError::InvalidConfig(
                "all layer widths must be >= 1".into(),
            ));
        }
        if let OutputTransform::TanhScaled { scale } = self.output_transform {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(FarlError::InvalidConfig(
                    "tanh scale must be finite and positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Total parameter count: per layer `w_in * w_out` weights plus `w_out` biases.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// A network spec together with its flat parameter vector.
///
/// Layout per layer: weights row-major `[out][in]`, then biases `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(spec: NetworkSpec) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            values: vec![0.0; n],
        }
    }

    /// Glorot-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn init<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(spec.param_count());
        for w in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.gen_range(-bound..bound));
            }
            for _ in 0..fan_out {
                values.push(0.0);
            }
        }
        Self { spec, values }
    }

    pub fn check(&self) -> Result<()> {
        self.spec.validate()?;
        if self.values.len() != self.spec.param_count() {
            return Err(FarlError::ShapeMismatch(format!(
                "params length {} != spec count {}",
                self.values.len(),
                self.spec.param_count()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(FarlError::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    /// Deterministic forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    /// Forward pass that caches layer inputs and pre-activations for backward().
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.spec.input_dim() {
            return Err(FarlError::ShapeMismatch(format!(
                "input length {} != first layer width {}",
                input.len(),
                self.spec.input_dim()
            )));
        }
        let n_layers = self.spec.layer_widths.len() - 1;
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        let mut x = input.to_vec();
        let mut offset = 0;
        for (l, w) in self.spec.layer_widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.values[offset..offset + n_in * n_out];
            let biases = &self.values[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;

            let mut u = vec![0.0; n_out];
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let mut acc = biases[o];
                for i in 0..n_in {
                    acc += row[i] * x[i];
                }
                u[o] = acc;
            }
            layer_inputs.push(std::mem::replace(&mut x, Vec::new()));
            let last = l == n_layers - 1;
            x = u
                .iter()
                .map(|&v| {
                    if last {
                        apply_output(self.spec.output_transform, v)
                    } else {
                        apply_hidden(self.spec.hidden_activation, v)
                    }
                })
                .collect();
            pre_activations.push(u);
        }
        Ok(ForwardTrace {
            layer_inputs,
            pre_activations,
            output: x,
        })
    }

    /// Gradient of a scalar loss with respect to parameters and input, given
    /// `dLoss/dOutput`. Convenience wrapper that recomputes the forward trace.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<BackwardResult> {
        let trace = self.forward_trace(input)?;
        self.backward_from_trace(&trace, output_grad)
    }

    /// Backward pass reusing a cached forward trace.
    pub fn backward_from_trace(
        &self,
        trace: &ForwardTrace,
        output_grad: &[f64],
    ) -> Result<BackwardResult> {
        if output_grad.len() != self.spec.output_dim() {
            return Err(FarlError::ShapeMismatch(format!(
                "output_grad length {} != last layer width {}",
                output_grad.len(),
                self.spec.output_dim()
            )));
        }
        let n_layers = self.spec.layer_widths.len() - 1;
        let mut param_grad = vec![0.0; self.values.len()];
        // Per-layer parameter offsets.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.spec.layer_widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }

        // delta = dLoss/d(pre-activation) of the current layer.
        let mut delta: Vec<f64> = Vec::new();
        for l in (0..n_layers).rev() {
            let n_in = self.spec.layer_widths[l];
            let n_out = self.spec.layer_widths[l + 1];
            let u = &trace.pre_activations[l];
            if l == n_layers - 1 {
                delta = (0..n_out)
                    .map(|o| output_grad[o] * output_deriv(self.spec.output_transform, u[o]))
                    .collect();
            } else {
                // delta currently holds dLoss/d(activation output) of layer l.
                for o in 0..n_out {
                    delta[o] *= hidden_deriv(self.spec.hidden_activation, u[o]);
                }
            }
            let x = &trace.layer_inputs[l];
            let base = offsets[l];
            for o in 0..n_out {
                let row = base + o * n_in;
                for i in 0..n_in {
                    param_grad[row + i] = delta[o] * x[i];
                }
                param_grad[base + n_in * n_out + o] = delta[o];
            }
            // Propagate to the layer input.
            let weights = &self.values[base..base + n_in * n_out];
            let mut input_grad = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    input_grad[i] += delta[o] * row[i];
                }
            }
            delta = input_grad;
        }
        Ok(BackwardResult {
            params: param_grad,
            input: delta,
        })
    }
}

/// Cached activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input vector of each layer (layer 0's is the network input).
    layer_inputs: Vec<Vec<f64>>,
    /// Affine outputs before the nonlinearity, per layer.
    pre_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Gradients produced by [`NetworkParams::backward`].
#[derive(Debug, Clone)]
pub struct BackwardResult {
    /// dLoss/dθ, same layout as `NetworkParams::values`.
    pub params: Vec<f64>,
    /// dLoss/dInput, for chaining through composed networks.
    pub input: Vec<f64>,
}

fn apply_hidden(act: Activation, u: f64) -> f64 {
    match act {
        Activation::Tanh => u.tanh(),
        Activation::Relu => u.max(0.0),
    }
}

fn hidden_deriv(act: Activation, u: f64) -> f64 {
    match act {
        Activation::Tanh => {
            let t = u.tanh();
            1.0 - t * t
        }
        Activation::Relu => {
            if u > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn apply_output(t: OutputTransform, u: f64) -> f64 {
    match t {
        OutputTransform::Identity => u,
        OutputTransform::Sigmoid => sigmoid(u),
        OutputTransform::TanhScaled { scale } => scale * u.tanh(),
    }
}

fn output_deriv(t: OutputTransform, u: f64) -> f64 {
    match t {
        OutputTransform::Identity => 1.0,
        OutputTransform::Sigmoid => {
            let s = sigmoid(u);
            s * (1.0 - s)
        }
        OutputTransform::TanhScaled { scale } => {
            let th = u.tanh();
            scale * (1.0 - th * th)
        }
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(widths: &[usize]) -> NetworkSpec {
        NetworkSpec::new(widths.to_vec(), Activation::Tanh, OutputTransform::Identity).unwrap()
    }

    #[test]
    fn zero_weight_network_outputs_zero() {
        let net = NetworkParams::zeros(spec(&[3, 4, 2]));
        let out = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_affine_network() {
        // 1x1 net, w=2, b=1, input 3 -> 7.
        let mut net = NetworkParams::zeros(spec(&[1, 1]));
        net.values = vec![2.0, 1.0];
        let out = net.forward(&[3.0]).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn forward_matches_reference_matrix_multiply() {
        // Independent oracle: plain nested-loop affine + tanh chain.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = spec(&[4, 8, 2]);
        let net = NetworkParams::init(s.clone(), &mut rng);
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut x = input.clone();
        let mut off = 0;
        for (l, w) in s.layer_widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mut y = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = net.values[off + n_in * n_out + o];
                for i in 0..n_in {
                    acc += net.values[off + o * n_in + i] * x[i];
                }
                y[o] = if l == 0 { acc.tanh() } else { acc };
            }
            off += n_in * n_out + n_out;
            x = y;
        }

        let out = net.forward(&input).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetworkParams::init(spec(&[5, 6, 3]), &mut rng);
        let input = vec![0.1, -0.7, 0.3, 0.9, -0.2];
        let a = net.forward(&input).unwrap();
        let b = net.forward(&input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = NetworkParams::zeros(spec(&[3, 2]));
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(FarlError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = NetworkParams::init(spec(&[3, 5, 2]), &mut rng);
        let g = net.backward(&[0.3, -0.1, 0.8], &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_gradient() {
        // loss = output = w*x + b, so grad = (x, 1).
        let mut net = NetworkParams::zeros(spec(&[1, 1]));
        net.values = vec![0.4, -0.3];
        let g = net.backward(&[2.5], &[1.0]).unwrap();
        assert!((g.params[0] - 2.5).abs() < 1e-15);
        assert!((g.params[1] - 1.0).abs() < 1e-15);
        assert!((g.input[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..20 {
            let act = if case % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let out_t = match case % 3 {
                0 => OutputTransform::Identity,
                1 => OutputTransform::Sigmoid,
                _ => OutputTransform::TanhScaled { scale: 1.5 },
            };
            let s = NetworkSpec::new(vec![3, 6, 4, 2], act, out_t).unwrap();
            let net = NetworkParams::init(s, &mut rng);
            let input: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Scalar loss: weighted sum of outputs.
            let w: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |p: &NetworkParams| -> f64 {
                let out = p.forward(&input).unwrap();
                out.iter().zip(&w).map(|(o, wi)| o * wi).sum()
            };
            let analytic = net.backward(&input, &w).unwrap();
            let h = 1e-5;
            for idx in 0..net.values.len() {
                let mut plus = net.clone();
                plus.values[idx] += h;
                let mut minus = net.clone();
                minus.values[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic.params[idx].abs()).max(1e-6);
                assert!(
                    (fd - analytic.params[idx]).abs() / denom <= 1e-4,
                    "case {case} param {idx}: fd {fd} vs analytic {}",
                    analytic.params[idx]
                );
            }
        }
    }

    #[test]
    fn param_count_matches_allocation_for_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n_layers = rng.gen_range(2..5);
            let widths: Vec<usize> = (0..n_layers).map(|_| rng.gen_range(1..10)).collect();
            let s = spec(&widths);
            let net = NetworkParams::init(s.clone(), &mut rng);
            assert_eq!(net.values.len(), s.param_count());
        }
    }
}
