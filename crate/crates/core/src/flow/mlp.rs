use nalgebra::DMatrix;
use rand::Rng;

use crate::autograd::{self, Parameter, Tape, Tensor, Var};

/// Fully connected layer `y = W x + b`, `W: out x in`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(outputs, inputs)),
            bias: Parameter::new(Tensor::zeros(1, outputs)),
        }
    }

    /// Weights and biases uniform in `±scale / sqrt(inputs)`.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let w = draw(outputs * inputs);
        let b = draw(outputs);
        Self {
            weight: Parameter::new(Tensor::new(outputs, inputs, w).expect("shape")),
            bias: Parameter::new(Tensor::new(1, outputs, b).expect("shape")),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape().1
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape().0
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (w, b) = (self.weight.value(), self.bias.value());
        (0..self.outputs())
            .map(|o| {
                // Same accumulation order as the taped matvec.
                let mut acc = b.get(0, o);
                for (a, v) in w.row_slice(o).iter().zip(x) {
                    acc += a * v;
                }
                acc
            })
            .collect()
    }
}

/// Multilayer perceptron with tanh hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Hidden layers get the seeded uniform `±1/sqrt(fan_in)` init; the
    /// output layer starts at zero so the network outputs 0 everywhere.
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = inputs;
        for &width in hidden {
            layers.push(Dense::uniform(fan_in, width, 1.0, rng));
            fan_in = width;
        }
        layers.push(Dense::zeros(fan_in, outputs));
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs()
    }

    pub fn output_layer_mut(&mut self) -> &mut Dense {
        self.layers.last_mut().expect("at least one layer")
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if i < last {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        a
    }

    /// Output and `∂output/∂x`.
    pub fn eval_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        let mut jac = DMatrix::<f64>::identity(x.len(), x.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.weight.value();
            let wm = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
            a = layer.apply(&a);
            jac = wm * jac;
            if i < last {
                for (r, v) in a.iter_mut().enumerate() {
                    *v = v.tanh();
                    let d = 1.0 - *v * *v;
                    jac.row_mut(r).scale_mut(d);
                }
            }
        }
        (a, jac)
    }

    /// Records the network on `tape`; `params` are this network's parameters
    /// in [`Mlp::parameters`] order.
    pub fn record(&self, tape: &mut Tape, x: Var, params: &[Var]) -> autograd::Result<Var> {
        debug_assert_eq!(params.len(), self.parameter_count());
        let last = self.layers.len() - 1;
        let mut a = x;
        for i in 0..self.layers.len() {
            a = tape.matvec(a, params[2 * i], Some(params[2 * i + 1]))?;
            if i < last {
                a = tape.tanh(a)?;
            }
        }
        Ok(a)
    }
}
