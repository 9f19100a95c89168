//! Encoder-decoder convolutional network with skip connections, used as the
//! deep image prior over the 2K-channel TSMI.
//!
//! Downsampling is 2×2 max-pool, upsampling nearest-neighbour + 3×3 conv,
//! and every conv block is conv → instance-norm → leaky ReLU. Inputs whose
//! spatial dims are not divisible by 2^levels are zero-padded and the output
//! cropped back.

use crate::nn::{ChannelAffine, Conv2d, ParamSet};
use crate::rng::rng_from_seed;
use crate::tensor::{Conv2dSpec, NodeId, Tape};

#[derive(Debug, Clone, Copy)]
pub struct UnetConfig {
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { levels: 4, base_channels: 32 }
    }
}

impl UnetConfig {
    /// Channel width at level `l`, doubling per level and capped at 8× base.
    fn channels(&self, l: usize) -> usize {
        (self.base_channels << l.min(3)).min(self.base_channels * 8)
    }
}

struct ConvBlock {
    c1: Conv2d,
    n1: ChannelAffine,
    c2: Conv2d,
    n2: ChannelAffine,
}

impl ConvBlock {
    fn new(set: &mut ParamSet, rng: &mut impl rand::Rng, c_in: usize, c_out: usize, name: &str) -> Self {
        let spec1 = Conv2dSpec { c_in, c_out, kernel: 3, stride: 1, padding: 1 };
        let spec2 = Conv2dSpec { c_in: c_out, c_out, kernel: 3, stride: 1, padding: 1 };
        Self {
            c1: Conv2d::new(set, rng, spec1, &format!("{name}.conv1")),
            n1: ChannelAffine::new(set, c_out, &format!("{name}.norm1")),
            c2: Conv2d::new(set, rng, spec2, &format!("{name}.conv2")),
            n2: ChannelAffine::new(set, c_out, &format!("{name}.norm2")),
        }
    }

    fn forward(&self, tape: &mut Tape, set: &ParamSet, x: NodeId) -> NodeId {
        let x = self.c1.forward(tape, set, x);
        let g = tape.param(set, self.n1.gamma);
        let b = tape.param(set, self.n1.beta);
        let x = tape.instance_norm(x, g, b);
        let x = tape.leaky_relu(x, 0.1);
        let x = self.c2.forward(tape, set, x);
        let g = tape.param(set, self.n2.gamma);
        let b = tape.param(set, self.n2.beta);
        let x = tape.instance_norm(x, g, b);
        tape.leaky_relu(x, 0.1)
    }
}

pub struct Unet {
    pub set: ParamSet,
    pub cfg: UnetConfig,
    pub in_channels: usize,
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    up: Vec<Conv2d>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
}

impl Unet {
    /// Seeded construction; in/out channel count is 2K.
    pub fn new(cfg: UnetConfig, in_channels: usize, seed: u64) -> Self {
        assert!(cfg.levels >= 1, "unet needs at least one level");
        let mut set = ParamSet::new();
        let mut rng = rng_from_seed(seed);

        let mut enc = Vec::with_capacity(cfg.levels);
        let mut c_prev = in_channels;
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            enc.push(ConvBlock::new(&mut set, &mut rng, c_prev, c, &format!("enc{l}")));
            c_prev = c;
        }
        let c_bot = cfg.channels(cfg.levels);
        let bottleneck = ConvBlock::new(&mut set, &mut rng, c_prev, c_bot, "bottleneck");

        let mut up = Vec::with_capacity(cfg.levels);
        let mut dec = Vec::with_capacity(cfg.levels);
        let mut c_cur = c_bot;
        for l in (0..cfg.levels).rev() {
            let c_skip = cfg.channels(l);
            up.push(Conv2d::new(
                &mut set,
                &mut rng,
                Conv2dSpec { c_in: c_cur, c_out: c_skip, kernel: 3, stride: 1, padding: 1 },
                &format!("up{l}"),
            ));
            dec.push(ConvBlock::new(&mut set, &mut rng, 2 * c_skip, c_skip, &format!("dec{l}")));
            c_cur = c_skip;
        }
        let head = Conv2d::new(
            &mut set,
            &mut rng,
            Conv2dSpec { c_in: c_cur, c_out: in_channels, kernel: 1, stride: 1, padding: 0 },
            "head",
        );

        Self { set, cfg, in_channels, enc, bottleneck, up, dec, head }
    }

    /// Forward pass; `x` is a [2K, h, w] node. Pads internally so spatial
    /// dims divide 2^levels.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let shape = tape.shape(x).to_vec();
        assert_eq!(shape.len(), 3);
        assert_eq!(shape[0], self.in_channels, "unet input channels");
        let (h, w) = (shape[1], shape[2]);
        let div = 1 << self.cfg.levels;
        let ph = h.div_ceil(div) * div;
        let pw = w.div_ceil(div) * div;
        let mut cur = if (ph, pw) != (h, w) { tape.pad2(x, 0, 0, ph, pw) } else { x };

        let mut skips = Vec::with_capacity(self.cfg.levels);
        for block in &self.enc {
            let out = block.forward(tape, &self.set, cur);
            skips.push(out);
            cur = tape.max_pool2(out);
        }
        cur = self.bottleneck.forward(tape, &self.set, cur);

        for (i, (upconv, block)) in self.up.iter().zip(&self.dec).enumerate() {
            let skip = skips[self.cfg.levels - 1 - i];
            let upsampled = tape.upsample2(cur);
            let reduced = upconv.forward(tape, &self.set, upsampled);
            let reduced = tape.leaky_relu(reduced, 0.1);
            let cat = tape.concat_ch(skip, reduced);
            cur = block.forward(tape, &self.set, cat);
        }
        let out = self.head.forward(tape, &self.set, cur);
        if (ph, pw) != (h, w) {
            tape.crop2(out, 0, 0, h, w)
        } else {
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_matches_input() {
        let unet = Unet::new(UnetConfig { levels: 2, base_channels: 4 }, 4, 7);
        let mut tape = Tape::new();
        let x = tape.leaf(&[4, 8, 8], vec![0.3; 4 * 64], false);
        let y = unet.forward(&mut tape, x);
        assert_eq!(tape.shape(y), &[4, 8, 8]);
    }

    #[test]
    fn padding_handles_non_divisible_dims() {
        let unet = Unet::new(UnetConfig { levels: 3, base_channels: 4 }, 2, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 10, 6], vec![0.1; 2 * 60], false);
        let y = unet.forward(&mut tape, x);
        assert_eq!(tape.shape(y), &[2, 10, 6]);
        assert!(tape.values(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_output() {
        let a = Unet::new(UnetConfig { levels: 2, base_channels: 4 }, 2, 42);
        let b = Unet::new(UnetConfig { levels: 2, base_channels: 4 }, 2, 42);
        let input = vec![0.25; 2 * 16 * 16];
        let mut ta = Tape::new();
        let xa = ta.leaf(&[2, 16, 16], input.clone(), false);
        let ya = a.forward(&mut ta, xa);
        let mut tb = Tape::new();
        let xb = tb.leaf(&[2, 16, 16], input, false);
        let yb = b.forward(&mut tb, xb);
        assert_eq!(ta.values(ya), tb.values(yb));

        let c = Unet::new(UnetConfig { levels: 2, base_channels: 4 }, 2, 43);
        assert_ne!(a.set.params[0].values, c.set.params[0].values);
    }

    #[test]
    fn gradients_reach_all_parameters() {
        let mut unet = Unet::new(UnetConfig { levels: 2, base_channels: 4 }, 2, 3);
        let mut tape = Tape::new();
        let mut rng = crate::rng::rng_from_seed(9);
        let input: Vec<f64> =
            (0..2 * 16 * 16).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
        let x = tape.leaf(&[2, 16, 16], input, false);
        let y = unet.forward(&mut tape, x);
        let t = tape.leaf(&[2, 16, 16], vec![0.0; 2 * 256], false);
        let loss = tape.sum_sq_diff(y, t);
        tape.backward(loss).unwrap();
        tape.write_param_grads(&mut unet.set);
        for p in &unet.set.params {
            assert!(
                p.grad.iter().any(|&g| g != 0.0),
                "no gradient reached {}",
                p.name
            );
        }
    }
}
