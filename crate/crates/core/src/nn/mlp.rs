use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::params::{GradStore, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{silu, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer recipe for a multilayer perceptron.
///
/// Every hidden layer is `Linear -> [LayerNorm + affine] -> SiLU`. The output
/// layer is a plain `Linear` (bias optional), optionally followed by a
/// LayerNorm without affine terms so that the output rows are normalised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub use_layernorm: bool,
    pub final_bias: bool,
    #[serde(default)]
    pub normalize_output: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            use_layernorm: true,
            final_bias: true,
            normalize_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("MLP input/output dims must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "MLP hidden layers must be non-empty with dims >= 1".into(),
            ));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn is_output(&self, layer: usize) -> bool {
        layer + 1 == self.num_layers()
    }

    fn has_bias(&self, layer: usize) -> bool {
        !self.is_output(layer) || self.final_bias
    }

    fn has_affine_norm(&self, layer: usize) -> bool {
        !self.is_output(layer) && self.use_layernorm
    }
}

fn weight_name(l: usize) -> String {
    format!("l{l}.weight")
}
fn bias_name(l: usize) -> String {
    format!("l{l}.bias")
}
fn gain_name(l: usize) -> String {
    format!("l{l}.ln_gain")
}
fn shift_name(l: usize) -> String {
    format!("l{l}.ln_bias")
}

/// A multilayer perceptron together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    params: ParamStore<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Weights and biases uniform in `±sqrt(1/fan_in)`; LayerNorm gain 1, shift 0.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut uniform = || T::from_f64_lossy(rng.random_range(-bound..bound));
            let w = Tensor::from_fn(fan_in, fan_out, |_, _| uniform());
            params.insert(weight_name(l), w);
            if spec.has_bias(l) {
                let b = Tensor::from_fn(1, fan_out, |_, _| uniform());
                params.insert(bias_name(l), b);
            }
            if spec.has_affine_norm(l) {
                params.insert(gain_name(l), Tensor::full(1, fan_out, T::one()));
                params.insert(shift_name(l), Tensor::zeros(1, fan_out));
            }
        }
        Ok(Self { spec, params })
    }

    /// Every parameter set to `value` (LayerNorm gains included).
    pub fn constant(spec: MlpSpec, value: T) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            params.insert(weight_name(l), Tensor::full(fan_in, fan_out, value));
            if spec.has_bias(l) {
                params.insert(bias_name(l), Tensor::full(1, fan_out, value));
            }
            if spec.has_affine_norm(l) {
                params.insert(gain_name(l), Tensor::full(1, fan_out, value));
                params.insert(shift_name(l), Tensor::full(1, fan_out, value));
            }
        }
        Ok(Self { spec, params })
    }

    /// Wraps an existing parameter store, checking that every layer is present.
    pub fn from_params(spec: MlpSpec, params: ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let expected = Self::constant(spec.clone(), T::zero())?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Shape(format!(
                        "tensor {name}: expected {:?}, got {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                _ => {}
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        self.params.get(name).expect("layer parameter present")
    }

    /// Batched forward pass, one sample per row.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::dim(
                "mlp layer 0 input",
                self.spec.input_dim,
                x.cols(),
            ));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let mut h = x.clone();
        for l in 0..self.spec.num_layers() {
            h = h.matmul(self.p(&weight_name(l)));
            if self.spec.has_bias(l) {
                h = h.add_row(self.p(&bias_name(l)));
            }
            if self.spec.is_output(l) {
                if self.spec.normalize_output {
                    h = h.layer_norm(eps).0;
                }
            } else {
                if self.spec.use_layernorm {
                    h = h.layer_norm(eps).0;
                    h = h.mul_row(self.p(&gain_name(l)));
                    h = h.add_row(self.p(&shift_name(l)));
                }
                h = h.map(silu);
            }
        }
        Ok(h)
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(&Tensor::row_vector(x))?.into_vec())
    }

    /// Places the parameters on `tape`. With `trainable = false` they enter as
    /// constants: gradients still flow through the network to its inputs.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundMlp {
        let mut names = Vec::with_capacity(self.params.len());
        let mut layers = Vec::with_capacity(self.spec.num_layers());
        let mut leaf = |tape: &mut Tape<T>, name: String| -> Var {
            let value = self.p(&name).clone();
            let v = if trainable {
                tape.param(value)
            } else {
                tape.constant(value)
            };
            names.push((name, v));
            v
        };
        for l in 0..self.spec.num_layers() {
            let weight = leaf(tape, weight_name(l));
            let bias = self.spec.has_bias(l).then(|| leaf(tape, bias_name(l)));
            let norm = self
                .spec
                .has_affine_norm(l)
                .then(|| (leaf(tape, gain_name(l)), leaf(tape, shift_name(l))));
            layers.push(BoundLayer { weight, bias, norm });
        }
        BoundMlp {
            spec: self.spec.clone(),
            layers,
            names,
        }
    }
}

#[derive(Clone, Debug)]
struct BoundLayer {
    weight: Var,
    bias: Option<Var>,
    norm: Option<(Var, Var)>,
}

/// Parameters of an [`Mlp`] living on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    spec: MlpSpec,
    layers: Vec<BoundLayer>,
    names: Vec<(String, Var)>,
}

impl BoundMlp {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.spec.input_dim {
            return Err(Error::dim("mlp layer 0 input", self.spec.input_dim, cols));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, layer.weight);
            if let Some(b) = layer.bias {
                h = tape.add_row(h, b);
            }
            if self.spec.is_output(l) {
                if self.spec.normalize_output {
                    h = tape.layer_norm(h, eps);
                }
            } else {
                if let Some((gain, shift)) = layer.norm {
                    h = tape.layer_norm(h, eps);
                    h = tape.mul_row(h, gain);
                    h = tape.add_row(h, shift);
                }
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    /// Gradient of the scalar output with respect to the input rows,
    /// expressed as tape operations so it can itself be differentiated with
    /// respect to the parameters. Only defined for networks without
    /// normalisation and with a single output.
    pub fn input_gradient<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.spec.use_layernorm || self.spec.normalize_output || self.spec.output_dim != 1 {
            return Err(Error::Config(
                "input_gradient requires a scalar-output MLP without LayerNorm".into(),
            ));
        }
        let cols = tape.value(x).cols();
        if cols != self.spec.input_dim {
            return Err(Error::dim("mlp layer 0 input", self.spec.input_dim, cols));
        }
        // Forward, keeping pre-activations.
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x;
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut u = tape.matmul(h, layer.weight);
            if let Some(b) = layer.bias {
                u = tape.add_row(u, b);
            }
            pre.push(u);
            h = tape.silu(u);
        }
        // Backward: delta_L = w_out^T broadcast over rows, then through each layer.
        let out = self.layers.last().expect("at least one layer");
        let rows = tape.value(x).rows();
        let ones = tape.constant(Tensor::full(rows, 1, T::one()));
        let mut delta = tape.matmul_t(ones, out.weight, false, true);
        for (layer, &u) in self.layers[..self.layers.len() - 1].iter().zip(&pre).rev() {
            let d_act = tape.silu_grad(u);
            let local = tape.mul(delta, d_act);
            delta = tape.matmul_t(local, layer.weight, false, true);
        }
        Ok(delta)
    }

    /// Collects gradients for every parameter; unreached ones are zero.
    pub fn grads<T: Scalar>(&self, g: &Gradients<T>) -> GradStore<T> {
        let mut out = GradStore::new();
        for (name, v) in &self.names {
            out.insert(name.clone(), g.get_or_zero(*v));
        }
        out
    }
}
