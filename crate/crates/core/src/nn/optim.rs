use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (adam|sgd)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_tensors(tensors: &[&Tensor]) -> Self {
        Self {
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::for_tensors(&params.tensors())
    }
}

/// One bias-corrected Adam update over matching parameter/gradient tensors.
pub fn adam_step_tensors(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adam tensor count", params.len(), grads.len()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.len() != m.len() {
            return Err(Error::dim("adam tensor shape", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    adam_step_tensors(&mut p, &g, state, lr)
}

pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    let g = grads.tensors();
    let p = params.tensors_mut();
    if p.len() != g.len() {
        return Err(Error::dim("sgd tensor count", p.len(), g.len()));
    }
    for (p, g) in p.into_iter().zip(g) {
        p.same_shape(g, "sgd tensor shape")?;
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Optimizer attached to one model.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(AdamState::for_model(params)),
            OptimizerKind::Sgd => Self::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        match self {
            Self::Adam(state) => adam_step(params, grads, state, lr),
            Self::Sgd => sgd_step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(w: &mut Tensor, g: f64, state: &mut AdamState, lr: f64) {
        let grad = Tensor::vector(vec![g]);
        adam_step_tensors(&mut [w], &[&grad], state, lr).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut w = Tensor::vector(vec![0.7, -1.3]);
        let mut st = AdamState::for_tensors(&[&w]);
        let g = Tensor::zeros(&[2]);
        adam_step_tensors(&mut [&mut w], &[&g], &mut st, 0.1).unwrap();
        assert_eq!(w.data(), &[0.7, -1.3]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_about_lr() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        for g in [1e-3, 0.5, -2.0, 300.0] {
            let mut w = Tensor::vector(vec![1.0]);
            let mut st = AdamState::for_tensors(&[&w]);
            scalar_step(&mut w, g, &mut st, 1e-3);
            let expected = 1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((1.0 - w.data()[0] - expected).abs() < 1e-15);
            assert!(((1.0 - w.data()[0]).abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn descends_quadratic() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut st = AdamState::for_tensors(&[&w]);
        for _ in 0..100 {
            let g = 2.0 * w.data()[0];
            scalar_step(&mut w, g, &mut st, 0.1);
        }
        assert!(w.data()[0].abs() < 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::for_tensors(&[&w]);
        let g = Tensor::vector(vec![1.0]);
        assert!(adam_step_tensors(&mut [&mut w], &[&g], &mut st, 0.1).is_err());
    }
}
