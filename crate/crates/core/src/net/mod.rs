//! The policy-value MLP: coordinates in, a value and an action distribution
//! out.
//!
//! Every hidden layer is an affine map followed by ReLU. The value head is a
//! raw scalar; the policy head is passed through a softmax. Everything here is
//! written out by hand, including the backward pass, so the gradients can be
//! checked against finite differences.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod loss;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{content_hash, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use loss::{compute_loss, gradients, n_step_targets, LossBreakdown, LossHyper, LOG_FLOOR};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, Cell};

pub const INPUT_DIM: usize = 2;
pub const NUM_ACTIONS: usize = Action::COUNT;

/// How a cell is turned into the network's input vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// `(row, col)` as-is.
    #[default]
    Raw,
    /// `(row, col) / (ncols - 1)`, mapping the grid onto `[0, 1]^2`.
    Normalized { ncols: usize },
}

impl InputEncoding {
    pub fn encode(self, cell: Cell) -> [f64; 2] {
        let [r, c] = cell.to_vec();
        match self {
            InputEncoding::Raw => [r, c],
            InputEncoding::Normalized { ncols } => {
                let scale = (ncols.max(2) - 1) as f64;
                [r / scale, c / scale]
            }
        }
    }
}

/// A fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for both weights and biases.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Shape(format!(
                "dense {}x{} has {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    pub policy: [f64; NUM_ACTIONS],
    pub value: f64,
}

/// Anything that can score a cell for the planner.
pub trait Evaluator {
    fn evaluate(&self, cell: Cell) -> NetworkOutput;
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, cell: Cell) -> NetworkOutput {
        (**self).evaluate(cell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub encoding: InputEncoding,
    pub hidden: Vec<Dense>,
    pub value_head: Dense,
    pub policy_head: Dense,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Activations {
    /// `layers[0]` is the input; `layers[k]` the output of hidden layer `k`.
    pub layers: Vec<Vec<f64>>,
    pub logits: [f64; NUM_ACTIONS],
    pub output: NetworkOutput,
}

impl NetworkParams {
    pub fn new<R: Rng + ?Sized>(
        hidden_size: usize,
        hidden_num: usize,
        encoding: InputEncoding,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::with_capacity(hidden_num);
        let mut fan_in = INPUT_DIM;
        for _ in 0..hidden_num {
            hidden.push(Dense::uniform(fan_in, hidden_size, rng));
            fan_in = hidden_size;
        }
        let value_head = Dense::uniform(fan_in, 1, rng);
        let policy_head = Dense::uniform(fan_in, NUM_ACTIONS, rng);
        NetworkParams {
            encoding,
            hidden,
            value_head,
            policy_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs, d.outputs);
        NetworkParams {
            encoding: self.encoding,
            hidden: self.hidden.iter().map(z).collect(),
            value_head: z(&self.value_head),
            policy_head: z(&self.policy_head),
        }
    }

    /// Checks that layer shapes chain from the 2-d input to both heads and
    /// that every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        let mut fan_in = INPUT_DIM;
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.check()?;
            if layer.inputs != fan_in {
                return Err(Error::Shape(format!(
                    "hidden layer {i} expects {} inputs, previous layer gives {fan_in}",
                    layer.inputs
                )));
            }
            fan_in = layer.outputs;
        }
        for (name, head, outputs) in [
            ("value", &self.value_head, 1),
            ("policy", &self.policy_head, NUM_ACTIONS),
        ] {
            head.check()?;
            if head.inputs != fan_in || head.outputs != outputs {
                return Err(Error::Shape(format!(
                    "{name} head is {}x{}, expected {outputs}x{fan_in}",
                    head.outputs, head.inputs
                )));
            }
        }
        if self.slices().iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(())
    }

    /// All parameter arrays in a fixed order: each hidden layer's weights
    /// then bias, the value head, then the policy head.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for d in self.layers() {
            out.push(d.weights.as_slice());
            out.push(d.bias.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        let layers = self
            .hidden
            .iter_mut()
            .chain([&mut self.value_head, &mut self.policy_head]);
        for d in layers {
            out.push(d.weights.as_mut_slice());
            out.push(d.bias.as_mut_slice());
        }
        out
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain([&self.value_head, &self.policy_head])
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn forward(&self, input: [f64; 2]) -> Result<NetworkOutput> {
        self.forward_cached(input).map(|a| a.output)
    }

    pub fn forward_cell(&self, cell: Cell) -> Result<NetworkOutput> {
        self.forward(self.encoding.encode(cell))
    }

    pub(crate) fn forward_cached(&self, input: [f64; 2]) -> Result<Activations> {
        let mut layers = Vec::with_capacity(self.hidden.len() + 1);
        layers.push(input.to_vec());
        for (i, layer) in self.hidden.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(layers.last().unwrap(), &mut out);
            for v in out.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { layer: i });
                }
                *v = v.max(0.0);
            }
            layers.push(out);
        }
        let top = layers.last().unwrap();
        let head_layer = self.hidden.len();
        let mut buf = Vec::with_capacity(NUM_ACTIONS);
        self.value_head.apply(top, &mut buf);
        let value = buf[0];
        self.policy_head.apply(top, &mut buf);
        let mut logits = [0.0; NUM_ACTIONS];
        logits.copy_from_slice(&buf);
        if !value.is_finite() || logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite { layer: head_layer });
        }
        let policy = softmax(&logits);
        Ok(Activations {
            layers,
            logits,
            output: NetworkOutput { policy, value },
        })
    }

    /// Accumulates into `grads` the gradient of a scalar objective, given its
    /// derivative with respect to the value output and to the policy logits.
    pub(crate) fn backward(
        &self,
        acts: &Activations,
        d_value: f64,
        d_logits: &[f64; NUM_ACTIONS],
        grads: &mut NetworkParams,
    ) {
        let top = acts.layers.last().unwrap();
        let width = top.len();

        accumulate_dense(&mut grads.value_head, &[d_value], top);
        accumulate_dense(&mut grads.policy_head, d_logits, top);

        let mut d_hidden: Vec<f64> = (0..width)
            .map(|i| {
                d_value * self.value_head.weights[i]
                    + d_logits
                        .iter()
                        .enumerate()
                        .map(|(o, g)| g * self.policy_head.weights[o * width + i])
                        .sum::<f64>()
            })
            .collect();

        for k in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[k];
            let out = &acts.layers[k + 1];
            // ReLU passes gradient only where the unit was active.
            for (d, &h) in d_hidden.iter_mut().zip(out) {
                if h <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = &acts.layers[k];
            accumulate_dense(&mut grads.hidden[k], &d_hidden, input);
            if k > 0 {
                let mut d_input = vec![0.0; layer.inputs];
                for (o, &g) in d_hidden.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (di, w) in d_input.iter_mut().zip(row) {
                        *di += g * w;
                    }
                }
                d_hidden = d_input;
            }
        }
    }
}

fn accumulate_dense(grad: &mut Dense, d_out: &[f64], input: &[f64]) {
    for (o, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad.bias[o] += g;
        let row = &mut grad.weights[o * grad.inputs..(o + 1) * grad.inputs];
        for (w, x) in row.iter_mut().zip(input) {
            *w += g * x;
        }
    }
}

impl Evaluator for NetworkParams {
    fn evaluate(&self, cell: Cell) -> NetworkOutput {
        // Parameters are validated on construction and load, and the inputs
        // are small grid coordinates.
        self.forward_cell(cell)
            .expect("finite parameters give finite outputs on grid inputs")
    }
}

pub fn softmax(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

pub(crate) fn log_softmax(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}
