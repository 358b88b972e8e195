//! Invertible 1x1 convolution: per-pixel channel mixing by a square matrix,
//! initialized as a random rotation. The inverse is recomputed on demand and
//! cached, keyed by the parameter's optimizer step.

use std::sync::Mutex;

use crate::error::Result;
use crate::graph::{invert_checked, Graph, NodeId};
use crate::linalg;
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub struct Inv1x1<T> {
    pub name: String,
    pub weight: ParamId,
    pub channels: usize,
    cache: Mutex<Option<(u64, Tensor<T>)>>,
}

impl<T: Scalar> Inv1x1<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut SplitRng,
        name: &str,
        channels: usize,
    ) -> Result<Inv1x1<T>> {
        let mut wrng = rng.split(name);
        let w = Tensor::from_vec(
            Shape::new(channels, channels, 1, 1),
            linalg::random_rotation(channels, &mut wrng),
        )?;
        let weight = store.insert(format!("{name}.weight"), w)?;
        Ok(Inv1x1 { name: name.to_string(), weight, channels, cache: Mutex::new(None) })
    }

    pub fn det(&self, store: &ParamStore<T>) -> f64 {
        linalg::det(store.value(self.weight).data(), self.channels).as_f64()
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        g.matmul_chan(x, w)
    }

    /// Reverse map. In training the solve stays on the tape so gradients
    /// reach the weight through the inverse; at inference the cached inverse
    /// is used (numerically identical: same LU inverse, same multiply).
    pub fn reverse(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        if training {
            let w = g.param(store, self.weight);
            return g.matsolve_chan(x, w, &self.name);
        }
        let inv = self.cached_inverse(store)?;
        let invn = g.leaf(inv);
        g.matmul_chan(x, invn)
    }

    fn cached_inverse(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let step = store.get(self.weight).step;
        let mut guard = self.cache.lock().expect("inverse cache poisoned");
        if let Some((cached_step, inv)) = guard.as_ref() {
            if *cached_step == step {
                return Ok(inv.clone());
            }
        }
        let inv = invert_checked(store.value(self.weight), &self.name)?;
        *guard = Some((step, inv.clone()));
        Ok(inv)
    }
}
