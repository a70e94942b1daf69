//! MLP feature extractor with a linear classifier head.
//!
//! `features` applies every hidden layer followed by ReLU; `classify` is the
//! affine head `W x' + b` with no activation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// One affine layer; `weight` is `out × in`, `bias` has length `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            weight: Tensor::matrix(outputs, inputs, data).expect("sized above"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        tensor::add_row(&tensor::matmul_nt(x, &self.weight)?, &self.bias)
    }
}

/// Layer widths of an MLP: `input → hidden[0] → … → hidden[last] = d′ → classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "architecture needs positive widths and at least one hidden layer \
                 (input {input_dim}, hidden {hidden:?}, classes {classes})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden,
            classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated non-empty")
    }
}

/// Weights of one client model: feature extractor layers plus the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

impl ModelParams {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = arch.input_dim;
        for &width in &arch.hidden {
            hidden.push(Dense::glorot(fan_in, width, &mut rng));
            fan_in = width;
        }
        let head = Dense::glorot(fan_in, arch.classes, &mut rng);
        Self { hidden, head }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let mut fan_in = arch.input_dim;
        let hidden = arch
            .hidden
            .iter()
            .map(|&w| {
                let d = Dense::zeros(fan_in, w);
                fan_in = w;
                d
            })
            .collect();
        Self {
            hidden,
            head: Dense::zeros(fan_in, arch.classes),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.hidden.iter().map(Dense::outputs).collect(),
            classes: self.classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.head.inputs(), Dense::inputs)
    }

    pub fn feature_dim(&self) -> usize {
        self.head.inputs()
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    /// Checks layer chaining and that the head consumes the last hidden width.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for layer in self.hidden.iter().chain(std::iter::once(&self.head)) {
            if layer.inputs() != width {
                return Err(Error::dim("layer chaining", width, layer.inputs()));
            }
            if layer.bias.len() != layer.outputs() {
                return Err(Error::dim("bias length", layer.outputs(), layer.bias.len()));
            }
            width = layer.outputs();
        }
        Ok(())
    }

    /// All tensors in a fixed order: hidden (weight, bias) pairs, then head weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 2);
        for l in &self.hidden {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 2);
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Names matching [`ModelParams::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(format!("hidden.{i}.weight"));
            out.push(format!("hidden.{i}.bias"));
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Feature representations for a batch (`n × d` → `n × d′`).
    pub fn features_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("features input", self.input_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &self.hidden {
            h = tensor::relu(&layer.apply(&h)?);
        }
        Ok(h)
    }

    /// Logits for a batch of feature vectors (`n × d′` → `n × C`).
    pub fn classify_batch(&self, feats: &Tensor) -> Result<Tensor> {
        if feats.cols() != self.feature_dim() {
            return Err(Error::dim("classify input", self.feature_dim(), feats.cols()));
        }
        self.head.apply(feats)
    }

    pub fn logits_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.classify_batch(&self.features_batch(x)?)
    }
}

/// φ(x) for a single input vector.
pub fn forward_features(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::dim("forward_features", params.input_dim(), x.len()));
    }
    let m = Tensor::vector(x.to_vec()).as_row_matrix();
    Ok(params.features_batch(&m)?.into_data())
}

/// τ(x′) = W x′ + b for a single feature vector.
pub fn classify(params: &ModelParams, feats: &[f64]) -> Result<Vec<f64>> {
    if feats.len() != params.feature_dim() {
        return Err(Error::dim("classify", params.feature_dim(), feats.len()));
    }
    let m = Tensor::vector(feats.to_vec()).as_row_matrix();
    Ok(params.classify_batch(&m)?.into_data())
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    tensor::softmax_slice(z, &mut out);
    out
}

/// Model parameters recorded as trainable leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    hidden: Vec<(Var, Var)>,
    head: (Var, Var),
}

impl BoundModel {
    pub fn bind(params: &ModelParams, tape: &mut Tape) -> Self {
        let hidden = params
            .hidden
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        let head = (tape.param(params.head.weight.clone()), tape.param(params.head.bias.clone()));
        Self { hidden, head }
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.hidden {
            let z = tape.matmul_nt(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }

    pub fn classify(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let z = tape.matmul_nt(feats, self.head.0)?;
        tape.add_row(z, self.head.1)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.hidden.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.push(self.head.0);
        out.push(self.head.1);
        out
    }

    /// Gradients after [`Tape::backward`], shaped like the bound parameters.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn gradients(&self, tape: &Tape, like: &ModelParams) -> ModelParams {
        let mut grads = like.clone();
        for (slot, var) in grads.tensors_mut().into_iter().zip(self.vars()) {
            *slot = match tape.grad(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(slot.shape()),
            };
        }
        grads
    }
}
