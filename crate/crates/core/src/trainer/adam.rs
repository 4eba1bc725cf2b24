use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParameterStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("adam step size and epsilon must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates mirroring the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: ParameterStore<T>,
    pub second: ParameterStore<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParameterStore<T>) -> Self {
        OptimizerState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// Rescales `grads` to global norm `threshold` when it is exceeded.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut Gradients<T>, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = grads.global_norm();
    if norm > threshold {
        grads.scale(T::from_f64_lossy(threshold / norm));
    }
    Ok(norm)
}

/// Bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Contract("parameter, gradient and moment sets differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.step_size);
    let eps = T::from_f64_lossy(cfg.epsilon);
    let one = T::one();
    let moments = state.first.iter_mut().zip(state.second.iter_mut());
    for (((name, p), (gname, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        if name != gname || p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pv, &gv), (mv, vv)) in it {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
