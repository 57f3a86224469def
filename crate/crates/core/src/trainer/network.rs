//! Dense feed-forward network with an optional tanh hidden layer.
//!
//! The network reads a fixed subset of input columns. Dropout, when active,
//! is applied to the input of the output layer with inverted scaling.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weights: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut sample = || rng.random_range(-bound..=bound);
        let weights = Array2::from_shape_simple_fn((outputs, inputs), &mut sample);
        let bias = Array1::from_shape_simple_fn(outputs, &mut sample);
        Self { weights, bias }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        standard(x.dot(&self.weights.t()) + &self.bias)
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    /// Input columns read by the first layer, ascending.
    pub input_columns: Vec<usize>,
    /// One layer (linear model) or two (tanh hidden layer, then output).
    pub layers: Vec<Dense>,
}

/// Values kept from a forward pass for backpropagation.
#[derive(Debug)]
pub struct ForwardCache {
    inputs: Array2<f64>,
    hidden: Option<Array2<f64>>,
    /// Inverted-dropout multipliers applied to the output layer's input.
    mask: Option<Array2<f64>>,
    head_input: Array2<f64>,
}

impl Network {
    pub fn new<R: Rng>(input_dim: usize, input_columns: Vec<usize>, hidden_units: usize, n_outputs: usize, rng: &mut R) -> Self {
        let d = input_columns.len();
        let layers = if hidden_units == 0 {
            vec![Dense::init(d, n_outputs, rng)]
        } else {
            vec![Dense::init(d, hidden_units, rng), Dense::init(hidden_units, n_outputs, rng)]
        };
        Self { input_dim, input_columns, layers }
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    fn select_inputs(&self, x: &Array2<f64>) -> Array2<f64> {
        x.select(Axis(1), &self.input_columns)
    }

    /// Logits for a batch (`rows x input_dim`). With `dropout = Some((rate, rng))`
    /// a fresh mask is drawn; `None` is the deterministic inference pass.
    pub fn forward<R: Rng>(&self, x: &Array2<f64>, dropout: Option<(f64, &mut R)>) -> (Array2<f64>, ForwardCache) {
        let inputs = self.select_inputs(x);
        let (hidden, mut head_input) = if self.layers.len() == 2 {
            let h = self.layers[0].forward(&inputs).mapv(f64::tanh);
            (Some(h.clone()), h)
        } else {
            (None, inputs.clone())
        };
        let mask = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = Array2::from_shape_simple_fn(head_input.raw_dim(), || {
                    if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
                });
                head_input *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let logits = self.layers.last().expect("at least one layer").forward(&head_input);
        (logits, ForwardCache { inputs, hidden, mask, head_input })
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward::<rand::rngs::ThreadRng>(x, None).0
    }

    /// Parameter gradients given `d loss / d logits`, in `layers` order.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>) -> Vec<Dense> {
        let head = self.layers.last().expect("at least one layer");
        let head_grad = Dense { weights: standard(d_logits.t().dot(&cache.head_input)), bias: d_logits.sum_axis(Axis(0)) };
        match &cache.hidden {
            None => vec![head_grad],
            Some(h) => {
                let mut d_hidden = d_logits.dot(&head.weights);
                if let Some(mask) = &cache.mask {
                    d_hidden *= mask;
                }
                let d_pre = d_hidden * &h.mapv(|v| 1.0 - v * v);
                let first = Dense { weights: standard(d_pre.t().dot(&cache.inputs)), bias: d_pre.sum_axis(Axis(0)) };
                vec![first, head_grad]
            }
        }
    }

    /// Gradient of one output logit w.r.t. every input feature (dropout off).
    /// Columns the network does not read get zero.
    pub fn input_gradient(&self, x: &[f64], output: usize) -> Vec<f64> {
        let head = self.layers.last().expect("at least one layer");
        let selected_grad: Array1<f64> = if self.layers.len() == 2 {
            let first = &self.layers[0];
            let xs = Array1::from_iter(self.input_columns.iter().map(|&c| x[c]));
            let h = (first.weights.dot(&xs) + &first.bias).mapv(f64::tanh);
            let d_pre = &head.weights.row(output) * &h.mapv(|v| 1.0 - v * v);
            first.weights.t().dot(&d_pre)
        } else {
            head.weights.row(output).to_owned()
        };
        let mut full = vec![0.0; self.input_dim];
        for (&c, g) in self.input_columns.iter().zip(selected_grad) {
            full[c] = g;
        }
        full
    }

    /// Single-sample logit for one output.
    pub fn logit(&self, x: &[f64], output: usize) -> f64 {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        self.logits(&row)[[0, output]]
    }

    /// Mutable views over every parameter tensor, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_slice_mut().expect("standard layout"), l.bias.as_slice_mut().expect("contiguous")])
            .collect()
    }

    /// One optimizer step with gradients shaped like `layers`.
    pub fn apply_gradients(&mut self, optimizer: &mut AdamW, grads: &[Dense]) {
        let grads: Vec<&[f64]> = grads
            .iter()
            .flat_map(|g| [g.weights.as_slice().expect("standard layout"), g.bias.as_slice().expect("contiguous")])
            .collect();
        optimizer.step(&mut self.tensors_mut(), &grads);
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.weights.len(), l.bias.len()]).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Concatenates layer tensors in the same order as [`Network::tensors_mut`].
pub fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::new(5, vec![0, 2, 4], 4, 2, &mut rng);
        let flat = net.flat_params();
        assert_eq!(flat.len(), net.n_params());
        assert_eq!(net.n_params(), 3 * 4 + 4 + 4 * 2 + 2);
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        net.set_flat_params(&doubled);
        assert_eq!(net.flat_params(), doubled);
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(3, vec![0, 1, 2], 6, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (with, _) = net.forward(&x, Some((0.0, &mut rng)));
        assert_eq!(with, net.logits(&x));
    }

    #[test]
    fn unread_columns_have_zero_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new(4, vec![1, 3], 3, 1, &mut rng);
        let g = net.input_gradient(&[0.1, 0.2, 0.3, 0.4], 0);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[1] != 0.0 && g[3] != 0.0);
    }
}
