use super::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step applied in place. `step` counts from 1.
pub fn adam_update(
    param: &mut Array,
    grad: &Array,
    moment1: &mut Array,
    moment2: &mut Array,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Input("adam step counts from 1".into()));
    }
    if !param.same_shape(grad) || !param.same_shape(moment1) || !param.same_shape(moment2) {
        return Err(Error::shape("adam_update", param.shape(), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(Error::NumericDomain {
            op: "adam_update",
            detail: "non-finite gradient".into(),
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let (p, g) = (param.data_mut(), grad.data());
    let (m, v) = (moment1.data_mut(), moment2.data_mut());
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
