use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Matrix, NamedTensor, NamedTensors, NumericsError, Result, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }

    fn code(self) -> f64 {
        match self {
            Activation::Tanh => 0.0,
            Activation::Relu => 1.0,
            Activation::Identity => 2.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One dense layer `y = act(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    layers: Vec<Layer<T>>,
}

/// Tape handles for each layer's `(weight, bias)`.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn layers(&self) -> &[(Var, Var)] {
        &self.layers
    }
}

impl<T: Scalar> MlpParams<T> {
    /// Validates that layer dimensions chain and every entry is finite.
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NumericsError::InvalidNetwork("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NumericsError::InvalidNetwork(format!(
                    "layer {i}: bias length {} != output dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if !l.weight.all_finite() || !l.bias.iter().all(|b| b.is_finite()) {
                return Err(NumericsError::InvalidNetwork(format!("layer {i}: non-finite entry")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(NumericsError::InvalidNetwork(format!(
                    "layer {i}: input dim {} does not match previous output {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)` (times `sqrt 2` for relu);
    /// zero biases. `sizes` lists every width including input and output.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output size");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let act = if i + 1 == n { output } else { hidden };
                let gain = if act == Activation::Relu { 2.0f64.sqrt() } else { 1.0 };
                let std = gain / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::lit(z * std)
                    })
                    .collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![T::zero(); fan_out],
                    activation: act,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![T::zero(); l.out_dim()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.input_dim() {
            return Err(NumericsError::Dimension {
                context: "mlp_forward input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(self.forward_batch(&Matrix::row_vector(input))?.into_data())
    }

    /// Batched forward pass, one sample per row. Each row is computed
    /// exactly as [`forward`](Self::forward) would compute it alone.
    pub fn forward_batch(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(NumericsError::Dimension {
                context: "mlp_forward batch input",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut y = h.matmul_t(&l.weight);
            for r in 0..y.rows() {
                for (o, &b) in y.row_mut(r).iter_mut().zip(&l.bias) {
                    *o = l.activation.apply(*o + b);
                }
            }
            h = y;
        }
        Ok(h)
    }

    /// Record every layer's weight and bias as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.param(l.weight.clone());
                let b = tape.param(Matrix::row_vector(&l.bias));
                (w, b)
            })
            .collect();
        MlpVars { layers }
    }

    /// Forward pass recorded on `tape`, using handles from [`bind`](Self::bind).
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &MlpVars, x: Var) -> Var {
        let mut h = x;
        for (i, (l, (w, b))) in self.layers.iter().zip(&vars.layers).enumerate() {
            let z = tape.matmul_t(h, *w);
            tape.set_label(z, format!("layer {i} matmul"));
            let z = tape.add_bias(z, *b);
            tape.set_label(z, format!("layer {i} pre-activation"));
            h = tape.activate(z, l.activation);
            tape.set_label(h, format!("layer {i}"));
        }
        h
    }

    /// Add `k · other` in place (used for combining gradients).
    pub fn add_scaled(&mut self, other: &MlpParams<T>, k: T) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += k * y;
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += k * y;
            }
        }
    }

    pub fn to_named(&self, prefix: &str, out: &mut NamedTensors) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor::new(
                format!("{prefix}.{i}.weight"),
                vec![l.out_dim(), l.in_dim()],
                l.weight.data().iter().map(|v| v.as_f64()).collect(),
            ));
            out.push(NamedTensor::new(
                format!("{prefix}.{i}.bias"),
                vec![l.out_dim()],
                l.bias.iter().map(|v| v.as_f64()).collect(),
            ));
            out.push(NamedTensor::new(format!("{prefix}.{i}.act"), vec![1], vec![l.activation.code()]));
        }
    }

    pub fn from_named(prefix: &str, tensors: &NamedTensors) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let wname = format!("{prefix}.{i}.weight");
            let Some(w) = tensors.get(&wname) else { break };
            let b = tensors
                .get(&format!("{prefix}.{i}.bias"))
                .ok_or_else(|| NumericsError::MissingTensor(format!("{prefix}.{i}.bias")))?;
            let a = tensors
                .get(&format!("{prefix}.{i}.act"))
                .ok_or_else(|| NumericsError::MissingTensor(format!("{prefix}.{i}.act")))?;
            if w.dims.len() != 2 {
                return Err(NumericsError::InvalidNetwork(format!("{wname}: rank {}", w.dims.len())));
            }
            let activation = a
                .values
                .first()
                .and_then(|&c| Activation::from_code(c))
                .ok_or_else(|| NumericsError::InvalidNetwork(format!("{prefix}.{i}.act: bad code")))?;
            layers.push(Layer {
                weight: Matrix::from_vec(w.dims[0], w.dims[1], w.values.iter().map(|&v| T::lit(v)).collect())?,
                bias: b.values.iter().map(|&v| T::lit(v)).collect(),
                activation,
            });
        }
        if layers.is_empty() {
            return Err(NumericsError::MissingTensor(format!("{prefix}.0.weight")));
        }
        Self::new(layers)
    }
}
