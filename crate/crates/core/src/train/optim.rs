use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling. A non-finite norm leaves the
/// gradients alone so the optimizer can report the offending parameter.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let k = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// SGD with classical momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    momentum: f32,
    velocity: Vec<Option<Tensor<f32>>>,
}

impl Sgd {
    pub fn new(momentum: f64, num_params: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            momentum: momentum as f32,
            velocity: vec![None; num_params],
        })
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    /// Velocity buffer of a parameter, if it has ever been updated.
    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<f32>> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor<f32>) -> Result<()> {
        let slot = self
            .velocity
            .get_mut(id.index())
            .ok_or_else(|| Error::Index(format!("no parameter {}", id.index())))?;
        *slot = Some(v);
        Ok(())
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// moves, so a non-finite gradient leaves the model untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.is_buffer(*id) {
                return Err(Error::Contract(format!("`{}` is a buffer, not a parameter", store.name(*id))));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} does not match `{}` {:?}",
                    g.shape(),
                    store.name(*id),
                    store.get(*id).shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.name(*id).to_owned(),
                });
            }
        }
        let lr = lr as f32;
        for (id, g) in grads {
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            for (p, &vi) in store.get_mut(*id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
        Ok(())
    }
}
