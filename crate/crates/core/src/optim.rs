//! Plain SGD with decoupled-from-nothing weight decay and optional classical
//! momentum. One deliberately boring optimizer; reproducibility beats zoo.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            momentum: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        SgdConfig {
            learning_rate,
            weight_decay,
            momentum: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

fn check_keys<T: Scalar>(params: &ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
    for name in params.names() {
        if !grads.contains(name) {
            return Err(Error::Config(format!("missing gradient for parameter {name}")));
        }
    }
    for name in grads.names() {
        if !params.contains(name) {
            return Err(Error::Config(format!("gradient {name} has no matching parameter")));
        }
    }
    Ok(())
}

/// One momentum-free update: `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_step<T: Scalar>(
    params: &ParamSet<T>,
    grads: &ParamSet<T>,
    cfg: &SgdConfig,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    check_keys(params, grads)?;
    let lr = T::from_f64(cfg.learning_rate);
    let wd = T::from_f64(cfg.weight_decay);
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        let updated = p.zip_map(g, "sgd_step", |pv, gv| pv - lr * (gv + wd * pv))?;
        out.insert(name, updated)?;
    }
    Ok(out)
}

/// Stateful SGD; carries the velocity buffers when momentum is enabled.
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Option<ParamSet<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: None,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Applies one update in place. With momentum `m > 0`:
    /// `v <- m*v + (g + wd*p); p <- p - lr*v`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        check_keys(params, grads)?;
        let lr = T::from_f64(self.cfg.learning_rate);
        let wd = T::from_f64(self.cfg.weight_decay);
        if self.cfg.momentum == 0.0 {
            for (name, p) in params.iter_mut() {
                let g = grads.get(name)?;
                for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv = *pv - lr * (gv + wd * *pv);
                }
            }
            return Ok(());
        }
        let m = T::from_f64(self.cfg.momentum);
        if self.velocity.is_none() {
            let mut v = ParamSet::new();
            for (name, p) in params.iter() {
                v.insert(name, crate::tensor::Tensor::zeros(p.shape()))?;
            }
            self.velocity = Some(v);
        }
        let vel = self.velocity.as_mut().expect("velocity initialized");
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let v = vel.get_mut(name)?;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = m * *vv + (gv + wd * *pv);
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }
}
