//! Bias-corrected Adam.

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update of `param` in place; `t` is the 1-based step count.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut AdamMoments,
    lr: f64,
    t: u64,
    hp: AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(invalid_arg!("adam step count starts at 1"));
    }
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(invalid_arg!(
            "adam: parameter ({}), gradient ({}) and moments ({}) differ in length",
            param.len(),
            grad.len(),
            moments.m.len()
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::AdaptationDiverged("non-finite gradient".into()));
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = hp.beta1 * moments.m[i] + (1.0 - hp.beta1) * g;
        moments.v[i] = hp.beta2 * moments.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Adam over a fixed, ordered list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub hyper: AdamHyper,
    t: u64,
    moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, AdamHyper::default())
    }

    pub fn with_hyper(lr: f64, hyper: AdamHyper) -> Self {
        Self {
            lr,
            hyper,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn reset(&mut self) {
        self.t = 0;
        self.moments.clear();
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid_arg!("adam: {} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| AdamMoments::zeros(p.len())).collect();
        } else if self.moments.len() != params.len() {
            return Err(invalid_arg!("adam: parameter list changed between steps"));
        }
        self.t += 1;
        for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            adam_step(p.data_mut(), g.data(), m, self.lr, self.t, self.hyper)?;
        }
        Ok(())
    }
}
