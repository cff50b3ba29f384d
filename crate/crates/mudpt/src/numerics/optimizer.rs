//! Plain stochastic gradient descent: a schedule type and a functional step.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Training schedule for SGD without momentum or weight decay.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgdSchedule {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        SgdSchedule { learning_rate: 2.5e-3, epochs: 10, batch_size: 4 }
    }
}

impl SgdSchedule {
    /// A zero learning rate is allowed deliberately: it turns training into a
    /// pure evaluation loop, which the identity tests rely on.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One descent step: `param - lr * grad`, elementwise, returning a new tensor.
pub fn sgd_step(param: &Tensor, grad: &[f64], lr: f64) -> Result<Tensor> {
    if grad.len() != param.data.len() {
        return Err(Error::shape(
            "sgd_step gradient",
            format!("{} elements", param.data.len()),
            format!("{} elements", grad.len()),
        ));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    let data: Vec<f64> = param.data.iter().zip(grad).map(|(p, g)| p - lr * g).collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("sgd_step produced non-finite parameter".into()));
    }
    let mut out = Tensor::from_vec(data, &param.shape)?;
    out.requires_grad = param.requires_grad;
    Ok(out)
}
