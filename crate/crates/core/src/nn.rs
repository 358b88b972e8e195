//! Convolution layer plumbing shared by the transform, entropy nets and the
//! post-processing network.

use std::sync::Arc;

use crate::error::Result;
use crate::graph::{Graph, KernelMask, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-normal fan-in scaling, for layers followed by ReLU.
    HeNormal,
    /// All-zero weights; layers that must start as the identity map.
    Zero,
}

pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub mask: Option<Arc<KernelMask>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mask: Option<Arc<KernelMask>>,
        init: Init,
    ) -> Result<Conv2dLayer> {
        let wshape = Shape::new(out_ch, in_ch, k, k);
        let weight = match init {
            Init::HeNormal => {
                let std = libm::sqrt(2.0 / (in_ch * k * k) as f64);
                let mut wrng = rng.split(name);
                Tensor::randn(wshape, std, &mut wrng)
            }
            Init::Zero => Tensor::zeros(wshape),
        };
        let weight = store.insert(format!("{name}.weight"), weight)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_ch, 1, 1)))?;
        Ok(Conv2dLayer { weight, bias, stride, pad, mask, in_ch, out_ch, k })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad, self.mask.clone())
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k + self.out_ch
    }
}
