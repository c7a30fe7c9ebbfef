use super::matrix::Mat;
use super::params::Parameterized;
use super::tape::{AdError, AdResult, NodeId, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Elu,
    Linear,
    /// `h + tanh(W h + b)`; needs a square weight.
    ResidualTanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Mat,
    /// `out × 1`
    pub bias: Mat,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weight.cols
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows
    }
}

/// Feed-forward network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Random network with `sizes = [in, h1, ..., out]` and one activation per layer.
    ///
    /// Weights are uniform on `±1/√fan_in`, biases start at zero.
    pub fn init<R: Rng>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1, "one activation per layer");
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Mat::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
                Layer { weight, bias: Mat::zeros(fan_out, 1), activation }
            })
            .collect();
        MlpParams { layers }
    }

    /// Network whose weights and biases are all zero.
    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1, "one activation per layer");
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weight: Mat::zeros(w[1], w[0]),
                bias: Mat::zeros(w[1], 1),
                activation,
            })
            .collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    /// Checks layer compatibility and finiteness.
    pub fn validate(&self) -> Result<(), String> {
        if self.layers.is_empty() {
            return Err("network has no layers".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (l.outputs(), 1) {
                return Err(format!("layer {i}: bias {:?} does not match {} outputs", l.bias.shape(), l.outputs()));
            }
            if l.activation == Activation::ResidualTanh && l.inputs() != l.outputs() {
                return Err(format!("layer {i}: residual layer must be square, got {:?}", l.weight.shape()));
            }
            if i > 0 && self.layers[i - 1].outputs() != l.inputs() {
                return Err(format!(
                    "layer {i}: expects {} inputs but previous layer has {} outputs",
                    l.inputs(),
                    self.layers[i - 1].outputs()
                ));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(format!("layer {i}: non-finite parameter"));
            }
        }
        Ok(())
    }

    /// Registers all arrays on the tape, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut leaf = |m: &Mat| if trainable { tape.var(m.clone()) } else { tape.constant(m.clone()) };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer { weight: leaf(&l.weight), bias: leaf(&l.bias), activation: l.activation })
            .collect();
        BoundMlp { layers, input_dim: self.input_dim(), output_dim: self.output_dim() }
    }

    /// Plain evaluation at a single input, without a tape.
    pub fn eval_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = l.weight.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(&l.bias.data) {
                *zi += bi;
            }
            h = match l.activation {
                Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                Activation::Elu => z.iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect(),
                Activation::Linear => z,
                Activation::ResidualTanh => h.iter().zip(&z).map(|(a, b)| a + b.tanh()).collect(),
            };
        }
        h
    }
}

impl Parameterized for MlpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("{prefix}.layers[{i}].weight"), &l.weight);
            f(format!("{prefix}.layers[{i}].bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.layers[{i}].weight"), &mut l.weight);
            f(format!("{prefix}.layers[{i}].bias"), &mut l.bias);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub weight: NodeId,
    pub bias: NodeId,
    pub activation: Activation,
}

/// Network parameters registered on a particular tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLayer>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl BoundMlp {
    /// Leaf ids in the same order as [`Parameterized::visit`].
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

struct LayerTrace {
    input: NodeId,
    pre: NodeId,
    /// `tanh(pre)` for tanh-type layers.
    squashed: Option<NodeId>,
}

fn forward_traced(tape: &mut Tape, net: &BoundMlp, input: NodeId) -> AdResult<(NodeId, Vec<LayerTrace>)> {
    let (rows, _) = tape.shape(input);
    if rows != net.input_dim {
        return Err(AdError::Shape { op: "mlp_eval", lhs: (net.input_dim, 1), rhs: tape.shape(input) });
    }
    let mut h = input;
    let mut trace = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        let wx = tape.matmul(l.weight, h)?;
        let pre = tape.add(wx, l.bias)?;
        let (out, squashed) = match l.activation {
            Activation::Tanh => {
                let t = tape.tanh(pre);
                (t, Some(t))
            }
            Activation::Elu => (tape.elu(pre), None),
            Activation::Linear => (pre, None),
            Activation::ResidualTanh => {
                let t = tape.tanh(pre);
                (tape.add(h, t)?, Some(t))
            }
        };
        trace.push(LayerTrace { input: h, pre, squashed });
        h = out;
    }
    Ok((h, trace))
}

/// Evaluates the network on `input` (`in × B`), returning `out × B`.
pub fn mlp_eval(tape: &mut Tape, net: &BoundMlp, input: NodeId) -> AdResult<NodeId> {
    forward_traced(tape, net, input).map(|(out, _)| out)
}

/// Network output together with its input gradient, both as graph nodes.
///
/// The gradient is assembled layer by layer from primitives
/// (`tanh' = 1 - tanh²`, `elu'`), so it can itself be differentiated with
/// respect to the parameters. Requires a scalar-output network; with a
/// batch of `B` columns the result is `in × B`.
pub fn mlp_value_and_input_gradient(tape: &mut Tape, net: &BoundMlp, input: NodeId) -> AdResult<(NodeId, NodeId)> {
    if net.output_dim != 1 {
        return Err(AdError::Invalid {
            op: "mlp_input_gradient",
            detail: format!("network output must be scalar, got {} outputs", net.output_dim),
        });
    }
    let (out, trace) = forward_traced(tape, net, input)?;
    // `None` stands for an all-ones adjoint at the scalar output.
    let mut delta: Option<NodeId> = None;
    for (l, tr) in net.layers.iter().zip(&trace).rev() {
        let local = match l.activation {
            Activation::Linear => None,
            Activation::Elu => Some(tape.elu_deriv(tr.pre)),
            Activation::Tanh | Activation::ResidualTanh => {
                let t = tr.squashed.expect("tanh layers record their output");
                let t2 = tape.square(t);
                let neg = tape.scale(t2, -1.0);
                Some(tape.offset(neg, 1.0))
            }
        };
        let delta_pre = match (delta, local) {
            (Some(d), Some(s)) => tape.mul(d, s)?,
            (Some(d), None) => d,
            (None, Some(s)) => s,
            (None, None) => {
                let cols = tape.shape(tr.pre).1;
                tape.constant(Mat::filled(1, cols, 1.0))
            }
        };
        let wt = tape.transpose(l.weight);
        let through = tape.matmul(wt, delta_pre)?;
        let next = if l.activation == Activation::ResidualTanh {
            let skip = match delta {
                Some(d) => d,
                None => {
                    let cols = tape.shape(tr.input).1;
                    tape.constant(Mat::filled(1, cols, 1.0))
                }
            };
            tape.add(skip, through)?
        } else {
            through
        };
        delta = Some(next);
    }
    Ok((out, delta.expect("network has at least one layer")))
}

/// `∇ₓ net(x)` as a graph node; see [`mlp_value_and_input_gradient`].
pub fn mlp_input_gradient(tape: &mut Tape, net: &BoundMlp, input: NodeId) -> AdResult<NodeId> {
    mlp_value_and_input_gradient(tape, net, input).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_layer() {
        let net = MlpParams {
            layers: vec![Layer { weight: Mat::identity(2), bias: Mat::zeros(2, 1), activation: Activation::Linear }],
        };
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        let x = t.constant(Mat::col(&[1.0, 2.0]));
        let y = mlp_eval(&mut t, &b, x).unwrap();
        assert_eq!(t.value(y).data, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut net = MlpParams::zeros(&[3, 4, 2], &[Activation::Tanh, Activation::Linear]);
        net.layers[1].bias = Mat::col(&[0.25, -7.0]);
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        for x in [[0.0, 0.0, 0.0], [5.0, -3.0, 1e3]] {
            let xi = t.constant(Mat::col(&x));
            let y = mlp_eval(&mut t, &b, xi).unwrap();
            assert_eq!(t.value(y).data, vec![0.25, -7.0]);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = MlpParams::zeros(&[3, 1], &[Activation::Linear]);
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        let x = t.constant(Mat::col(&[1.0, 2.0]));
        assert!(matches!(mlp_eval(&mut t, &b, x), Err(AdError::Shape { op: "mlp_eval", .. })));
    }

    #[test]
    fn quadratic_network_gradient_is_identity() {
        // H(x) = ½‖x‖² is not an MLP, but for a linear network w·x the gradient is w.
        let net = MlpParams {
            layers: vec![Layer {
                weight: Mat::row(&[2.0, -3.0]),
                bias: Mat::scalar(0.5),
                activation: Activation::Linear,
            }],
        };
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        let x = t.constant(Mat::col(&[0.3, 0.7]));
        let g = mlp_input_gradient(&mut t, &b, x).unwrap();
        assert_eq!(t.value(g).data, vec![2.0, -3.0]);
    }

    #[test]
    fn constant_network_has_zero_gradient() {
        let mut net = MlpParams::zeros(&[2, 16, 1], &[Activation::Tanh, Activation::Elu]);
        net.layers[1].bias = Mat::scalar(1.3);
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        let x = t.constant(Mat::col(&[0.4, -2.0]));
        let g = mlp_input_gradient(&mut t, &b, x).unwrap();
        assert_eq!(t.value(g).data, vec![0.0, 0.0]);
    }

    #[test]
    fn vector_output_rejected_for_gradient() {
        let net = MlpParams::zeros(&[2, 2], &[Activation::Linear]);
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        let x = t.constant(Mat::col(&[0.0, 0.0]));
        assert!(mlp_input_gradient(&mut t, &b, x).is_err());
    }

    #[test]
    fn tape_eval_matches_plain_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(
            &[4, 8, 8, 3],
            &[Activation::Tanh, Activation::ResidualTanh, Activation::Elu],
            &mut rng,
        );
        net.validate().unwrap();
        let x = [0.1, -0.4, 2.0, 0.7];
        let mut t = Tape::new();
        let b = net.bind(&mut t, true);
        let xi = t.constant(Mat::col(&x));
        let y = mlp_eval(&mut t, &b, xi).unwrap();
        assert_eq!(t.value(y).data, net.eval_vec(&x));
    }

    #[test]
    fn validate_catches_bad_layers() {
        let mut net = MlpParams::zeros(&[2, 3, 1], &[Activation::Tanh, Activation::Linear]);
        net.layers[1].weight = Mat::zeros(1, 4);
        assert!(net.validate().unwrap_err().contains("layer 1"));
        let res = MlpParams::zeros(&[2, 3], &[Activation::ResidualTanh]);
        assert!(res.validate().is_err());
    }
}
