//! Channel-wise affine normalization with data-dependent initialization:
//! forward t' = (t + beta) (x) exp(gamma), reverse t = t' (x) exp(-gamma) - beta.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub struct ActNorm {
    pub name: String,
    pub beta: ParamId,
    pub gamma: ParamId,
    pub initialized: bool,
    pub channels: usize,
}

impl ActNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<ActNorm> {
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(Shape::new(1, channels, 1, 1)))?;
        let gamma =
            store.insert(format!("{name}.gamma"), Tensor::zeros(Shape::new(1, channels, 1, 1)))?;
        Ok(ActNorm { name: name.to_string(), beta, gamma, initialized: false, channels })
    }

    /// Data-dependent init on the first training batch: beta = -mean,
    /// gamma = -log(std), so the batch leaves with zero mean, unit variance.
    pub fn init_from<T: Scalar>(&mut self, store: &mut ParamStore<T>, t: &Tensor<T>) -> Result<()> {
        if t.shape().c != self.channels {
            return Err(Error::shape(format!(
                "{}: init tensor has {} channels, expected {}",
                self.name,
                t.shape().c,
                self.channels
            )));
        }
        let (mean, var) = t.channel_stats();
        let floor = T::of_f64(1e-12);
        for c in 0..self.channels {
            store.get_mut(self.beta).value.data_mut()[c] = -mean[c];
            let std = (var[c] + floor).sqrt();
            store.get_mut(self.gamma).value.data_mut()[c] = -(std.ln_());
        }
        self.initialized = true;
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        if training && !self.initialized {
            return Err(Error::ActNormUninitialized(self.name.clone()));
        }
        let beta = g.param(store, self.beta);
        let gamma = g.param(store, self.gamma);
        let shifted = g.add(t, beta)?;
        let scale = g.exp(gamma)?;
        g.mul(shifted, scale)
    }

    pub fn reverse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t: NodeId,
    ) -> Result<NodeId> {
        let beta = g.param(store, self.beta);
        let gamma = g.param(store, self.gamma);
        let neg_gamma = g.scale(gamma, -1.0)?;
        let scale = g.exp(neg_gamma)?;
        let unscaled = g.mul(t, scale)?;
        g.sub(unscaled, beta)
    }
}
