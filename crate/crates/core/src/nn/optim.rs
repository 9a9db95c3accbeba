use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{GradStore, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step over every tensor in `grads`.
///
/// All gradients are checked before anything is written, so a non-finite
/// entry leaves parameters and moments untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .param(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {name}: expected {:?}, got {:?}",
                p.value.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one_m_b1 = T::lit(1.0 - cfg.beta1);
    let one_m_b2 = T::lit(1.0 - cfg.beta2);
    let eps = T::lit(cfg.eps);
    for (name, g) in grads.iter() {
        let p = params.param_mut(name).expect("checked above");
        p.step += 1;
        let t = p.step as i32;
        let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
        let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
        let step = T::lit(lr) / bc1;
        let value = p.value.data_mut();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for i in 0..value.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let denom = (v[i] / bc2).sqrt() + eps;
            value[i] = value[i] - step * m[i] / denom;
        }
    }
    Ok(())
}

/// Global L2 norm across several gradient stores.
pub fn global_norm<T: Scalar>(grads: &[GradStore<T>]) -> f64 {
    grads.iter().map(GradStore::sq_norm_f64).sum::<f64>().sqrt()
}

/// Rescales all stores jointly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [GradStore<T>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// `target <- (1 - coeff) * target + coeff * online`, elementwise.
pub fn polyak_update<T: Scalar>(
    target: &mut ParamStore<T>,
    online: &ParamStore<T>,
    coeff: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&coeff) {
        return Err(Error::Config(format!(
            "polyak coefficient {coeff} outside [0, 1]"
        )));
    }
    if target.len() != online.len() {
        return Err(Error::Shape("polyak stores differ in tensor count".into()));
    }
    for (name, src) in online.iter() {
        match target.get(name) {
            Some(dst) if dst.shape() == src.shape() => {}
            _ => return Err(Error::Shape(format!("polyak mismatch at tensor {name}"))),
        }
    }
    let c = T::lit(coeff);
    let keep = T::lit(1.0 - coeff);
    for (name, p) in target.iter_mut() {
        let src = online.get(name).expect("checked above");
        for (d, &s) in p.value.data_mut().iter_mut().zip(src.data()) {
            *d = keep * *d + c * s;
        }
    }
    Ok(())
}
