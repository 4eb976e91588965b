use rand_chacha::ChaCha8Rng;

use super::layers::{
    join, BatchNorm2d, Conv2d, ConvTranspose2d, ForwardCtx, Module, Visit, VisitMut,
};
use super::ModelSpec;
use crate::autodiff::Tensor;

/// Two 3x3 convolutions, each followed by batch norm and ReLU.
pub struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DoubleConv {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        DoubleConv {
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            bn2: BatchNorm2d::new(c_out),
        }
    }

    fn param_count(c_in: usize, c_out: usize) -> usize {
        Conv2d::param_count(c_in, c_out, 3)
            + Conv2d::param_count(c_out, c_out, 3)
            + 2 * BatchNorm2d::param_count(c_out)
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let x = self.bn1.forward(&self.conv1.forward(x), train).relu();
        self.bn2.forward(&self.conv2.forward(&x), train).relu()
    }
}

impl Module for DoubleConv {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

/// Encoder blocks `c1..c5` with 2x2 max pooling between them, decoder
/// `dc1..dc4` (2x2 stride-2 transposed convolutions) each followed by a skip
/// concatenation and blocks `c6..c9`, then a 1x1 sigmoid head.
pub struct UNet33 {
    blocks: Vec<DoubleConv>,
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
    dropout: f64,
}

pub const UNET_LAYERS: [&str; 18] = [
    "c1", "c2", "c3", "c4", "c5", "dc1", "s1", "c6", "dc2", "s2", "c7", "dc3", "s3", "c8", "dc4",
    "s4", "c9", "out",
];

impl UNet33 {
    pub(crate) fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let u = spec.base_width;
        let widths = [u, 2 * u, 4 * u, 8 * u, 16 * u];
        let mut blocks = Vec::with_capacity(9);
        let mut c_in = spec.in_channels;
        for &w in &widths {
            blocks.push(DoubleConv::new(rng, c_in, w));
            c_in = w;
        }
        let mut ups = Vec::with_capacity(4);
        for level in (0..4).rev() {
            let w = widths[level];
            ups.push(ConvTranspose2d::new(rng, 2 * w, w, 2, 2, 0));
            blocks.push(DoubleConv::new(rng, 2 * w, w));
        }
        UNet33 {
            blocks,
            ups,
            head: Conv2d::new(rng, u, spec.out_channels, 1, 1, 0),
            dropout: spec.dropout,
        }
    }

    pub fn expected_params(spec: &ModelSpec) -> usize {
        let u = spec.base_width;
        let widths = [u, 2 * u, 4 * u, 8 * u, 16 * u];
        let mut total = 0;
        let mut c_in = spec.in_channels;
        for &w in &widths {
            total += DoubleConv::param_count(c_in, w);
            c_in = w;
        }
        for &w in widths[..4].iter().rev() {
            total += ConvTranspose2d::param_count(2 * w, w, 2);
            total += DoubleConv::param_count(2 * w, w);
        }
        total + Conv2d::param_count(u, spec.out_channels, 1)
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let train = ctx.train;
        let mut skips = Vec::with_capacity(4);
        let mut h = x.clone();
        for (i, block) in self.blocks[..5].iter().enumerate() {
            h = block.forward(&h, train);
            ctx.record(&format!("c{}", i + 1), &h);
            if i < 4 {
                skips.push(h.clone());
                h = h.max_pool2d(2);
            }
        }
        for (i, (up, block)) in self.ups.iter().zip(&self.blocks[5..]).enumerate() {
            h = up.forward(&h);
            ctx.record(&format!("dc{}", i + 1), &h);
            h = Tensor::concat(&[h, skips[3 - i].clone()], 1);
            if i < 2 {
                h = ctx.dropout(&h, self.dropout);
            }
            ctx.record(&format!("s{}", i + 1), &h);
            h = block.forward(&h, train);
            ctx.record(&format!("c{}", i + 6), &h);
        }
        let out = self.head.forward(&h).sigmoid();
        ctx.record("out", &out);
        out
    }

    /// Shape of the `c5` bottleneck activation for input `x`.
    pub fn bottleneck(&self, x: &Tensor) -> Vec<usize> {
        let mut ctx = ForwardCtx::eval().tap("c5");
        crate::autodiff::no_grad(|| self.forward(x, &mut ctx));
        ctx.tapped("c5")
            .map(|t| t.shape().to_vec())
            .unwrap_or_default()
    }
}

impl Module for UNet33 {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("c{}", i + 1)), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.visit(&join(prefix, &format!("dc{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("c{}", i + 1)), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("dc{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "out"), f);
    }
}
