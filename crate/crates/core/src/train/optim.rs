use crate::error::{config_err, usage_err, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: Float,
    pub momentum: Float,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 8e-3,
            momentum: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// Classical momentum state: one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub learning_rate: Float,
    pub momentum: Float,
    pub velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &[Tensor], cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimState {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }
}

/// `v ← m·v − lr·g; p ← p + v` for every parameter.
pub fn sgd_momentum_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(usage_err!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(usage_err!(
                "parameter {} / gradient {} / velocity {} shape mismatch",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = state.momentum * *vv - state.learning_rate * gv;
            *pv += *vv;
        }
    }
    Ok(())
}
