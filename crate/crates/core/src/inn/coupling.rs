//! Affine coupling: the first half of the channels conditions an affine map
//! applied to the second half. The multiplicative factor exp(2*sigmoid(s)-1)
//! stays inside (1/e, e), so the map is always invertible.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Conv2dLayer, Init};
use crate::params::ParamStore;
use crate::rng::SplitRng;
use crate::scalar::Scalar;

pub struct AffineCoupling {
    pub channels: usize,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    skip: Conv2dLayer,
    head: Conv2dLayer,
}

impl AffineCoupling {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitRng,
        name: &str,
        channels: usize,
        width: usize,
    ) -> Result<AffineCoupling> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!(
                "{name}: coupling needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let conv1 =
            Conv2dLayer::new(store, rng, &format!("{name}.conv1"), half, width, 3, 1, 1, None, Init::HeNormal)?;
        let conv2 =
            Conv2dLayer::new(store, rng, &format!("{name}.conv2"), width, width, 3, 1, 1, None, Init::HeNormal)?;
        let skip =
            Conv2dLayer::new(store, rng, &format!("{name}.skip"), half, width, 1, 1, 0, None, Init::HeNormal)?;
        // Zero-initialized head: every coupling starts as the identity.
        let head =
            Conv2dLayer::new(store, rng, &format!("{name}.head"), width, channels, 1, 1, 0, None, Init::Zero)?;
        Ok(AffineCoupling { channels, conv1, conv2, skip, head })
    }

    /// bias and raw scale logits computed from the conditioner half only.
    fn bias_scale<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u1: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let half = self.channels / 2;
        let t = self.conv1.forward(g, store, u1)?;
        let t = g.relu(t)?;
        let t = self.conv2.forward(g, store, t)?;
        let s = self.skip.forward(g, store, u1)?;
        let t = g.add(t, s)?;
        let t = g.relu(t)?;
        let h = self.head.forward(g, store, t)?;
        let bias = g.narrow(h, 1, 0, half)?;
        let scale = g.narrow(h, 1, half, half)?;
        Ok((bias, scale))
    }

    /// exp(2*sigmoid(scale) - 1), or its reciprocal for the reverse map.
    fn factor<T: Scalar>(g: &mut Graph<T>, scale: NodeId, inverse: bool) -> Result<NodeId> {
        let sig = g.sigmoid(scale)?;
        let two_sig = g.scale(sig, 2.0)?;
        let sm1 = g.add_const(two_sig, -1.0)?;
        let arg = if inverse { g.scale(sm1, -1.0)? } else { sm1 };
        g.exp(arg)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: NodeId,
    ) -> Result<NodeId> {
        self.check_input(g, u)?;
        let half = self.channels / 2;
        let u1 = g.narrow(u, 1, 0, half)?;
        let u2 = g.narrow(u, 1, half, half)?;
        let (bias, scale) = self.bias_scale(g, store, u1)?;
        let f = Self::factor(g, scale, false)?;
        let shifted = g.add(u2, bias)?;
        let u2p = g.mul(shifted, f)?;
        g.concat(u1, u2p, 1)
    }

    pub fn reverse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        up: NodeId,
    ) -> Result<NodeId> {
        self.check_input(g, up)?;
        let half = self.channels / 2;
        let u1 = g.narrow(up, 1, 0, half)?;
        let u2p = g.narrow(up, 1, half, half)?;
        let (bias, scale) = self.bias_scale(g, store, u1)?;
        let finv = Self::factor(g, scale, true)?;
        let unscaled = g.mul(u2p, finv)?;
        let u2 = g.sub(unscaled, bias)?;
        g.concat(u1, u2, 1)
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, u: NodeId) -> Result<()> {
        let c = g.value(u).shape().c;
        if c != self.channels {
            return Err(Error::shape(format!(
                "coupling expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.skip.param_count()
            + self.head.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn setup(c: usize, w: usize, seed: u64) -> (ParamStore<f64>, AffineCoupling) {
        let mut store = ParamStore::new();
        let mut rng = SplitRng::new(seed);
        let cp = AffineCoupling::new(&mut store, &mut rng, "cp", c, w).unwrap();
        (store, cp)
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = SplitRng::new(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).value.data_mut() {
                *v = rng.normal() * 0.3;
            }
        }
    }

    #[test]
    fn odd_channel_count_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitRng::new(1);
        assert!(AffineCoupling::new(&mut store, &mut rng, "cp", 5, 8).is_err());
    }

    #[test]
    fn zero_head_is_identity() {
        let (store, cp) = setup(6, 8, 2);
        let mut rng = SplitRng::new(3);
        let x = Tensor::<f64>::randn(Shape::new(1, 6, 4, 4), 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let y = cp.forward(&mut g, &store, xn).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_of_forward_is_identity_random_weights() {
        let (mut store, cp) = setup(8, 6, 4);
        randomize(&mut store, 9);
        let mut rng = SplitRng::new(5);
        let x = Tensor::<f64>::randn(Shape::new(2, 8, 4, 4), 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let y = cp.forward(&mut g, &store, xn).unwrap();
        let back = cp.reverse(&mut g, &store, y).unwrap();
        for (a, b) in g.value(back).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn conditioner_depends_only_on_first_half() {
        // Perturbing u2 must never change bias/scale: probe via gradients.
        let (mut store, cp) = setup(6, 8, 6);
        randomize(&mut store, 10);
        let mut rng = SplitRng::new(7);
        let x = Tensor::<f64>::randn(Shape::new(1, 6, 3, 3), 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let u1 = g.narrow(xn, 1, 0, 3).unwrap();
        let (bias, scale) = cp.bias_scale(&mut g, &store, u1).unwrap();
        let joined = g.concat(bias, scale, 1).unwrap();
        let probe = g.sum_all(joined).unwrap();
        let grads = g.backward(probe).unwrap();
        let gx = grads.get(xn).unwrap();
        let s = gx.shape();
        for c in 3..6 {
            for h in 0..s.h {
                for w in 0..s.w {
                    assert_eq!(gx.at(0, c, h, w), 0.0, "bias/scale saw u2 at c={c}");
                }
            }
        }
    }

    #[test]
    fn multiplicative_factor_stays_inside_bounds() {
        let (mut store, cp) = setup(6, 8, 8);
        randomize(&mut store, 11);
        let mut rng = SplitRng::new(12);
        // Inputs well beyond the trained-activation range; the bound is
        // strict as long as the sigmoid has not saturated to the last ulp.
        let x = Tensor::<f64>::randn(Shape::new(1, 6, 4, 4), 4.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let u1 = g.narrow(xn, 1, 0, 3).unwrap();
        let (_, scale) = cp.bias_scale(&mut g, &store, u1).unwrap();
        let f = AffineCoupling::factor(&mut g, scale, false).unwrap();
        let (lo, hi) = ((-1.0f64).exp(), 1.0f64.exp());
        for &v in g.value(f).data() {
            assert!(v > lo && v < hi, "factor {v} outside (1/e, e)");
        }
    }
}
