//! Multi-scale invertible transform: four blocks, each a space-to-depth
//! squeeze followed by a stack of invertible units (actnorm, invertible 1x1
//! convolution, affine coupling) and a channel split. Blocks 1-3 emit one
//! latent and forward the rest; the last block splits evenly into the two
//! coarsest latents.

mod actnorm;
mod coupling;
mod inv1x1;

pub use actnorm::ActNorm;
pub use coupling::AffineCoupling;
pub use inv1x1::Inv1x1;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const SQUEEZE_FACTOR: usize = 2;
pub const NUM_BLOCKS: usize = 4;
pub const NUM_SCALES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Invertible blocks; the five-scale latent layout fixes this at 4.
    pub blocks: usize,
    pub units_per_block: usize,
    /// Latent channels split off by blocks 1-3 (block 4 splits evenly).
    pub y_channels: [usize; 3],
    /// Residual-block width inside the couplings, per block.
    pub widths: [usize; NUM_BLOCKS],
}

impl TransformConfig {
    /// Small configuration for CPU-scale work.
    pub fn desk() -> Self {
        TransformConfig {
            blocks: 4,
            units_per_block: 4,
            y_channels: [3, 9, 27],
            widths: [32, 32, 32, 32],
        }
    }

    /// Full-size configuration (only instantiated for parameter accounting).
    pub fn full() -> Self {
        TransformConfig {
            blocks: 4,
            units_per_block: 4,
            y_channels: [3, 9, 27],
            widths: [128, 128, 128, 192],
        }
    }

    pub fn validate(&self) -> Result<ScaleDims> {
        if self.blocks != NUM_BLOCKS {
            return Err(Error::Config(format!(
                "the five-scale pipeline requires exactly {NUM_BLOCKS} blocks, got {}",
                self.blocks
            )));
        }
        if self.units_per_block == 0 {
            return Err(Error::Config("units_per_block must be at least 1".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("coupling widths must be positive".into()));
        }
        let f2 = SQUEEZE_FACTOR * SQUEEZE_FACTOR;
        let mut block_channels = [0usize; NUM_BLOCKS];
        let mut y_channels = [0usize; NUM_SCALES];
        let mut h_channels = [0usize; NUM_BLOCKS];
        let mut carry = 3;
        for b in 0..NUM_BLOCKS {
            block_channels[b] = carry * f2;
            if block_channels[b] % 2 != 0 {
                return Err(Error::Config(format!(
                    "block {b} works on {} channels; couplings need an even count",
                    block_channels[b]
                )));
            }
            if b < 3 {
                let y = self.y_channels[b];
                if y == 0 || y >= block_channels[b] {
                    return Err(Error::Config(format!(
                        "block {b} splits {y} of {} channels; need 0 < y < total",
                        block_channels[b]
                    )));
                }
                y_channels[b] = y;
                h_channels[b] = block_channels[b] - y;
                carry = h_channels[b];
            } else {
                let half = block_channels[b] / 2;
                y_channels[3] = half;
                y_channels[4] = half;
                h_channels[3] = half; // h4 is the y5 latent itself
            }
        }
        Ok(ScaleDims { block_channels, y_channels, h_channels })
    }
}

/// Channel bookkeeping derived from a [`TransformConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleDims {
    pub block_channels: [usize; NUM_BLOCKS],
    pub y_channels: [usize; NUM_SCALES],
    pub h_channels: [usize; NUM_BLOCKS],
}

impl ScaleDims {
    /// Latent shapes (channels, height, width) for a padded input HxW.
    pub fn latent_shapes(&self, h: usize, w: usize) -> Result<[(usize, usize, usize); NUM_SCALES]> {
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!(
                "transform input must be a multiple of 16, got {h}x{w}"
            )));
        }
        Ok([
            (self.y_channels[0], h / 2, w / 2),
            (self.y_channels[1], h / 4, w / 4),
            (self.y_channels[2], h / 8, w / 8),
            (self.y_channels[3], h / 16, w / 16),
            (self.y_channels[4], h / 16, w / 16),
        ])
    }

    /// Channel count of the hidden state feeding scale i's channel context
    /// (the h4 slot is the y5 latent).
    pub fn hidden_channels(&self, scale: usize) -> usize {
        self.h_channels[scale]
    }
}

struct InvertibleUnit<T> {
    actnorm: ActNorm,
    inv1x1: Inv1x1<T>,
    coupling: AffineCoupling,
}

impl<T: Scalar> InvertibleUnit<T> {
    fn new(
        store: &mut ParamStore<T>,
        rng: &mut SplitRng,
        name: &str,
        channels: usize,
        width: usize,
    ) -> Result<Self> {
        Ok(InvertibleUnit {
            actnorm: ActNorm::new(store, &format!("{name}.actnorm"), channels)?,
            inv1x1: Inv1x1::new(store, rng, &format!("{name}.inv1x1"), channels)?,
            coupling: AffineCoupling::new(store, rng, &format!("{name}.coupling"), channels, width)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let t = self.actnorm.forward(g, store, t, training)?;
        let t = self.inv1x1.forward(g, store, t)?;
        self.coupling.forward(g, store, t)
    }

    fn reverse(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let t = self.coupling.reverse(g, store, t)?;
        let t = self.inv1x1.reverse(g, store, t, training)?;
        self.actnorm.reverse(g, store, t)
    }
}

struct InvertibleBlock<T> {
    units: Vec<InvertibleUnit<T>>,
}

impl<T: Scalar> InvertibleBlock<T> {
    fn forward_body(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let mut t = g.space_to_depth(x, SQUEEZE_FACTOR)?;
        for unit in &self.units {
            t = unit.forward(g, store, t, training)?;
        }
        Ok(t)
    }

    fn reverse_body(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let mut t = t;
        for unit in self.units.iter().rev() {
            t = unit.reverse(g, store, t, training)?;
        }
        g.depth_to_space(t, SQUEEZE_FACTOR)
    }
}

/// Latent and hidden nodes produced by a forward transform pass.
pub struct ForwardLatents {
    pub y: [NodeId; NUM_SCALES],
    /// hidden[i] is h_{i+1}; hidden[3] aliases the y5 node.
    pub hidden: [NodeId; NUM_BLOCKS],
}

pub struct MultiScaleTransform<T> {
    pub dims: ScaleDims,
    blocks: Vec<InvertibleBlock<T>>,
}

impl<T: Scalar> MultiScaleTransform<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut SplitRng,
        cfg: &TransformConfig,
    ) -> Result<Self> {
        let dims = cfg.validate()?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for b in 0..NUM_BLOCKS {
            let mut units = Vec::with_capacity(cfg.units_per_block);
            for u in 0..cfg.units_per_block {
                units.push(InvertibleUnit::new(
                    store,
                    rng,
                    &format!("transform.block{b}.unit{u}"),
                    dims.block_channels[b],
                    cfg.widths[b],
                )?);
            }
            blocks.push(InvertibleBlock { units });
        }
        Ok(MultiScaleTransform { dims, blocks })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        training: bool,
    ) -> Result<ForwardLatents> {
        let mut y = Vec::with_capacity(NUM_SCALES);
        let mut hidden = Vec::with_capacity(NUM_BLOCKS);
        let mut cur = x;
        for b in 0..NUM_BLOCKS {
            let t = self.blocks[b].forward_body(g, store, cur, training)?;
            if b < 3 {
                let yc = self.dims.y_channels[b];
                let hc = self.dims.h_channels[b];
                y.push(g.narrow(t, 1, 0, yc)?);
                let h = g.narrow(t, 1, yc, hc)?;
                hidden.push(h);
                cur = h;
            } else {
                let half = self.dims.y_channels[3];
                y.push(g.narrow(t, 1, 0, half)?);
                let y5 = g.narrow(t, 1, half, half)?;
                y.push(y5);
                hidden.push(y5);
            }
        }
        let y: [NodeId; NUM_SCALES] = y.try_into().expect("five latents");
        let hidden: [NodeId; NUM_BLOCKS] = hidden.try_into().expect("four hiddens");
        Ok(ForwardLatents { y, hidden })
    }

    /// Reverse blocks 4..=down_to_block+1 (0-indexed), returning the hidden
    /// state at that level; `down_to_block == 0` reconstructs the input.
    fn reverse_blocks(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y: &[NodeId; NUM_SCALES],
        down_to_block: usize,
        training: bool,
    ) -> Result<NodeId> {
        let t = g.concat(y[3], y[4], 1)?;
        let mut cur = self.blocks[3].reverse_body(g, store, t, training)?;
        for b in (down_to_block..3).rev() {
            let t = g.concat(y[b], cur, 1)?;
            cur = self.blocks[b].reverse_body(g, store, t, training)?;
        }
        Ok(cur)
    }

    /// Full reverse composition back to the (padded, normalized) image.
    pub fn reverse(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y: &[NodeId; NUM_SCALES],
        training: bool,
    ) -> Result<NodeId> {
        self.reverse_blocks(g, store, y, 0, training)
    }

    /// Hidden state h_level from the latents above it (level in 1..=4).
    /// h4 is defined as the y5 latent itself.
    pub fn partial_reverse(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y: &[NodeId; NUM_SCALES],
        level: usize,
        training: bool,
    ) -> Result<NodeId> {
        match level {
            4 => Ok(y[4]),
            1..=3 => self.reverse_blocks(g, store, y, level, training),
            _ => Err(Error::Config(format!("partial_reverse level {level} outside 1..=4"))),
        }
    }

    /// Data-dependent actnorm init, walking the forward pass on a batch.
    pub fn init_actnorms(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>) -> Result<()> {
        let mut g = Graph::new();
        let mut cur = g.leaf(x.clone());
        for b in 0..NUM_BLOCKS {
            cur = g.space_to_depth(cur, SQUEEZE_FACTOR)?;
            for unit in &mut self.blocks[b].units {
                if !unit.actnorm.initialized {
                    let t_in = g.value(cur).clone();
                    unit.actnorm.init_from(store, &t_in)?;
                }
                cur = unit.actnorm.forward(&mut g, store, cur, true)?;
                cur = unit.inv1x1.forward(&mut g, store, cur)?;
                cur = unit.coupling.forward(&mut g, store, cur)?;
            }
            if b < 3 {
                let yc = self.dims.y_channels[b];
                cur = g.narrow(cur, 1, yc, self.dims.h_channels[b])?;
            }
        }
        Ok(())
    }

    pub fn actnorms_initialized(&self) -> bool {
        self.blocks.iter().all(|b| b.units.iter().all(|u| u.actnorm.initialized))
    }

    pub fn set_actnorms_initialized(&mut self, v: bool) {
        for b in &mut self.blocks {
            for u in &mut b.units {
                u.actnorm.initialized = v;
            }
        }
    }

    /// Smallest |det W| across all invertible 1x1 convolutions.
    pub fn min_abs_det(&self, store: &ParamStore<T>) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.units.iter())
            .map(|u| u.inv1x1.det(store).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Names of the actnorm-initialized flags, for model state round trips.
    pub fn actnorm_flags(&self) -> Vec<(String, bool)> {
        self.blocks
            .iter()
            .flat_map(|b| b.units.iter())
            .map(|u| (format!("{}.initialized", u.actnorm.name), u.actnorm.initialized))
            .collect()
    }

    pub fn restore_actnorm_flags(&mut self, flags: &dyn Fn(&str) -> Option<bool>) {
        for b in &mut self.blocks {
            for u in &mut b.units {
                if let Some(v) = flags(&format!("{}.initialized", u.actnorm.name)) {
                    u.actnorm.initialized = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64, cfg: &TransformConfig) -> (ParamStore<f64>, MultiScaleTransform<f64>) {
        let mut store = ParamStore::new();
        let mut rng = SplitRng::new(seed);
        let tr = MultiScaleTransform::new(&mut store, &mut rng, cfg).unwrap();
        (store, tr)
    }

    /// Give couplings and actnorms non-trivial weights so bijectivity is a
    /// real test rather than an identity check. Perturbations stay at the
    /// scale of the initialization so activations remain bounded, as they
    /// would be for trained weights.
    fn roughen(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = SplitRng::new(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            if name.contains("inv1x1") {
                continue;
            }
            let p = store.get_mut(id);
            if name.contains("actnorm") {
                for v in p.value.data_mut() {
                    *v += rng.normal() * 0.2;
                }
            } else if name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v += rng.normal() * 0.05;
                }
            } else {
                // Fan-in-scaled noise; also wakes up zero-initialized heads.
                let s = p.value.shape();
                let std = 0.4 * libm::sqrt(1.0 / (s.c * s.h * s.w) as f64);
                for v in p.value.data_mut() {
                    *v += rng.normal() * std;
                }
            }
        }
    }

    #[test]
    fn default_config_latent_bookkeeping_at_256() {
        let dims = TransformConfig::desk().validate().unwrap();
        let shapes = dims.latent_shapes(256, 256).unwrap();
        assert_eq!(shapes[0], (3, 128, 128));
        assert_eq!(shapes[1], (9, 64, 64));
        assert_eq!(shapes[2], (27, 32, 32));
        assert_eq!(shapes[3], (162, 16, 16));
        assert_eq!(shapes[4], (162, 16, 16));
        let total: usize = shapes.iter().map(|s| s.0 * s.1 * s.2).sum();
        assert_eq!(total, 3 * 256 * 256);
        assert_eq!(
            shapes.iter().map(|s| s.0 * s.1 * s.2).collect::<Vec<_>>(),
            vec![49152, 36864, 27648, 41472, 41472]
        );
    }

    #[test]
    fn element_conservation_across_split_configs() {
        let alt1 = TransformConfig { y_channels: [6, 12, 24], ..TransformConfig::desk() };
        let alt2 = TransformConfig { y_channels: [4, 16, 16], ..TransformConfig::desk() };
        let alt3 = TransformConfig { y_channels: [2, 4, 8], ..TransformConfig::desk() };
        for cfg in [TransformConfig::desk(), alt1, alt2, alt3] {
            let dims = cfg.validate().unwrap();
            for (h, w) in [(16, 16), (64, 48), (128, 256)] {
                let shapes = dims.latent_shapes(h, w).unwrap();
                let total: usize = shapes.iter().map(|s| s.0 * s.1 * s.2).sum();
                assert_eq!(total, 3 * h * w, "cfg {cfg:?} at {h}x{w}");
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = TransformConfig::desk();
        cfg.blocks = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = TransformConfig::desk();
        cfg.y_channels = [12, 9, 27]; // y1 == block channels
        assert!(cfg.validate().is_err());
        let mut cfg = TransformConfig::desk();
        cfg.units_per_block = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_then_reverse_recovers_input() {
        let cfg = TransformConfig {
            units_per_block: 2,
            widths: [8, 8, 8, 8],
            ..TransformConfig::desk()
        };
        let (mut store, tr) = build(41, &cfg);
        roughen(&mut store, 42);
        let mut rng = SplitRng::new(43);
        let x = Tensor::<f64>::randn(Shape::new(1, 3, 32, 32), 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let lat = tr.forward(&mut g, &store, xn, false).unwrap();
        let back = tr.reverse(&mut g, &store, &lat.y, false).unwrap();
        let mut max_err = 0.0f64;
        for (a, b) in g.value(back).data().iter().zip(x.data()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err < 1e-8, "64-bit reverse error {max_err}");
    }

    #[test]
    fn partial_reverse_matches_forward_hiddens() {
        let cfg = TransformConfig {
            units_per_block: 2,
            widths: [8, 8, 8, 8],
            ..TransformConfig::desk()
        };
        let (mut store, tr) = build(51, &cfg);
        roughen(&mut store, 52);
        let mut rng = SplitRng::new(53);
        let x = Tensor::<f64>::randn(Shape::new(1, 3, 32, 32), 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let lat = tr.forward(&mut g, &store, xn, false).unwrap();
        for level in 1..=4usize {
            let h = tr.partial_reverse(&mut g, &store, &lat.y, level, false).unwrap();
            let want = g.value(lat.hidden[level - 1]).clone();
            let got = g.value(h);
            assert_eq!(got.shape(), want.shape(), "level {level}");
            let mut max_err = 0.0f64;
            for (a, b) in got.data().iter().zip(want.data()) {
                max_err = max_err.max((a - b).abs());
            }
            assert!(max_err < 1e-4, "level {level} err {max_err}");
            if level == 4 {
                assert_eq!(got.data(), want.data(), "h4 must alias y5 exactly");
            }
        }
    }

    #[test]
    fn batch_processing_equals_independent_processing() {
        let cfg = TransformConfig {
            units_per_block: 1,
            widths: [8, 8, 8, 8],
            ..TransformConfig::desk()
        };
        let (mut store, tr) = build(61, &cfg);
        roughen(&mut store, 62);
        let mut rng = SplitRng::new(63);
        let a = Tensor::<f64>::randn(Shape::new(1, 3, 16, 16), 1.0, &mut rng);
        let b = Tensor::<f64>::randn(Shape::new(1, 3, 16, 16), 1.0, &mut rng);
        let mut joint = Vec::new();
        joint.extend_from_slice(a.data());
        joint.extend_from_slice(b.data());
        let joint = Tensor::<f64>::from_vec(Shape::new(2, 3, 16, 16), joint).unwrap();

        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xn = g.leaf(x);
            let lat = tr.forward(&mut g, &store, xn, false).unwrap();
            lat.y.map(|id| g.value(id).clone())
        };
        let ya = run(a);
        let yb = run(b);
        let yj = run(joint);
        for s in 0..NUM_SCALES {
            let n = ya[s].shape().numel();
            assert_eq!(&yj[s].data()[..n], ya[s].data(), "scale {s} first element");
            assert_eq!(&yj[s].data()[n..], yb[s].data(), "scale {s} second element");
        }
    }

    #[test]
    fn zero_latents_reverse_deterministically() {
        let cfg = TransformConfig {
            units_per_block: 1,
            widths: [8, 8, 8, 8],
            ..TransformConfig::desk()
        };
        let (mut store, tr) = build(71, &cfg);
        roughen(&mut store, 72);
        let dims = tr.dims;
        let shapes = dims.latent_shapes(16, 16).unwrap();
        let run = || {
            let mut g = Graph::new();
            let y: Vec<NodeId> = shapes
                .iter()
                .map(|&(c, h, w)| g.leaf(Tensor::<f64>::zeros(Shape::new(1, c, h, w))))
                .collect();
            let y: [NodeId; 5] = y.try_into().map_err(|_| ()).unwrap();
            let x = tr.reverse(&mut g, &store, &y, false).unwrap();
            g.value(x).clone()
        };
        let x1 = run();
        let x2 = run();
        assert_eq!(x1.data(), x2.data());
    }

    #[test]
    fn indivisible_extents_error() {
        let (store, tr) = build(81, &TransformConfig::desk());
        let mut g = Graph::new();
        let xn = g.leaf(Tensor::<f64>::zeros(Shape::new(1, 3, 24, 24)));
        assert!(tr.forward(&mut g, &store, xn, false).is_err());
    }

    #[test]
    fn actnorm_init_walk_standardizes_each_unit_input() {
        let cfg = TransformConfig {
            units_per_block: 2,
            widths: [8, 8, 8, 8],
            ..TransformConfig::desk()
        };
        let (mut store, mut tr) = build(91, &cfg);
        let mut rng = SplitRng::new(92);
        let x = Tensor::<f64>::randn(Shape::new(4, 3, 32, 32), 1.0, &mut rng).map(|v| v * 2.0 + 0.7);
        tr.init_actnorms(&mut store, &x).unwrap();
        assert!(tr.actnorms_initialized());
        // First unit of block 0: its input is just the squeezed image, so the
        // normalized output must be standardized.
        let sq = crate::tensor::space_to_depth(&x, 2).unwrap();
        let mut g = Graph::new();
        let tn = g.leaf(sq);
        let out = tr.blocks[0].units[0].actnorm.forward(&mut g, &store, tn, true).unwrap();
        let (mean, var) = g.value(out).channel_stats();
        for c in 0..mean.len() {
            assert!(mean[c].abs() < 1e-3);
            assert!((var[c] - 1.0).abs() < 1e-3);
        }
    }
}
