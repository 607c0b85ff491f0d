use serde::{Deserialize, Serialize};

use super::{dim_err, Bindings, Gradients, ParamStore, Real, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// One classical-momentum SGD update in place:
/// `v ← momentum·v + grad + weight_decay·param`, then `param ← param − lr·v`.
pub fn sgd_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    cfg: &SgdConfig,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(dim_err(format!(
            "sgd_step: {} params, {} grads, {} velocity slots",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (lr, mom, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mom * *v + *g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with per-parameter velocity buffers over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sgd<T = f32> {
    pub cfg: SgdConfig,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// Updates every non-frozen parameter from the gradients of one backward pass.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        bindings: &Bindings,
        grads: &Gradients<T>,
    ) -> Result<(), TensorError> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, var) in bindings.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let numel = store.get(id).numel();
            let zeros;
            let g = match grads.slice(var) {
                Some(g) => g,
                None => {
                    zeros = vec![T::zero(); numel];
                    &zeros
                }
            };
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); numel]);
            sgd_step(store.get_mut(id).data_mut(), g, v, &self.cfg)?;
        }
        Ok(())
    }
}
