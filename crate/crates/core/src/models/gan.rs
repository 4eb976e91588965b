use rand_chacha::ChaCha8Rng;

use super::attention::SelfAttention;
use super::layers::{
    join, BatchNorm2d, Conv2d, ConvTranspose2d, ForwardCtx, Linear, Module, Visit, VisitMut,
};
use super::ModelSpec;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const SLOPE: f64 = 0.2;

/// Generator stages in forward order.
pub const GENERATOR_STAGES: [&str; 8] = [
    "enc1",
    "enc2",
    "enc3",
    "bottleneck",
    "dec1",
    "dec2",
    "dec3",
    "out",
];
/// Critic stages in forward order.
pub const CRITIC_STAGES: [&str; 4] = ["c1", "c2", "c3", "c4"];

/// Channels leaving each generator stage (decoder stages after their skip
/// concatenation) for base width `b`.
pub fn generator_channels(stage: &str, b: usize, out_channels: usize) -> Option<usize> {
    Some(match stage {
        "enc1" => b,
        "enc2" => 2 * b,
        "enc3" => 4 * b,
        "bottleneck" => 8 * b,
        "dec1" => 8 * b,
        "dec2" => 4 * b,
        "dec3" => 2 * b,
        "out" => out_channels,
        _ => return None,
    })
}

pub fn critic_channels(stage: &str, b: usize) -> Option<usize> {
    Some(match stage {
        "c1" => b,
        "c2" => 2 * b,
        "c3" => 4 * b,
        "c4" => 8 * b,
        _ => return None,
    })
}

/// Down (4x4 stride-2) convolution with optional batch norm.
struct Down {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

impl Down {
    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let y = self.conv.forward(x);
        match &self.bn {
            Some(bn) => bn.forward(&y, train),
            None => y,
        }
        .leaky_relu(SLOPE)
    }
}

struct Up {
    deconv: ConvTranspose2d,
    bn: BatchNorm2d,
}

impl Up {
    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        self.bn.forward(&self.deconv.forward(x), train).relu()
    }
}

/// Attention modules keyed by the stage they follow, in forward order.
struct Anchored(Vec<(String, SelfAttention)>);

impl Anchored {
    fn build(
        rng: &mut ChaCha8Rng,
        anchors: &[&str],
        stages: &[&str],
        channels: impl Fn(&str) -> Option<usize>,
    ) -> Result<Self> {
        for a in anchors {
            if !stages.contains(a) {
                return Err(Error::Placement((*a).to_string()));
            }
        }
        let mut out = Vec::new();
        for stage in stages {
            if anchors.contains(stage) {
                let c = channels(stage).expect("stage listed");
                out.push((stage.to_string(), SelfAttention::new(rng, c)?));
            }
        }
        Ok(Anchored(out))
    }

    /// Applies the module after `stage`, if any, recording its output as `sa<k>`.
    fn apply(&self, stage: &str, x: Tensor, ctx: &mut ForwardCtx, tag: &str) -> Tensor {
        match self.0.iter().position(|(s, _)| s == stage) {
            Some(k) => {
                let y = self.0[k].1.forward(&x);
                ctx.record(&format!("{tag}sa{}", k + 1), &y);
                y
            }
            None => x,
        }
    }

    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        for (k, (_, sa)) in self.0.iter().enumerate() {
            sa.visit(&join(prefix, &format!("sa{}", k + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        for (k, (_, sa)) in self.0.iter_mut().enumerate() {
            sa.visit_mut(&join(prefix, &format!("sa{}", k + 1)), f);
        }
    }
}

/// Encoder-decoder generator: four 4x4 stride-2 convolutions down, four 4x4
/// stride-2 transposed convolutions up, same-level skip concatenations and a
/// tanh head rescaled to `[0, 1]`.
pub struct Generator {
    down: Vec<Down>,
    up: Vec<Up>,
    head: ConvTranspose2d,
    attention: Anchored,
    dropout: f64,
}

impl Generator {
    pub(crate) fn new(
        spec: &ModelSpec,
        rng: &mut ChaCha8Rng,
        sa_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let b = spec.base_width;
        let down = vec![
            Down {
                conv: Conv2d::new(rng, spec.in_channels, b, 4, 2, 1),
                bn: None,
            },
            Down {
                conv: Conv2d::new(rng, b, 2 * b, 4, 2, 1),
                bn: Some(BatchNorm2d::new(2 * b)),
            },
            Down {
                conv: Conv2d::new(rng, 2 * b, 4 * b, 4, 2, 1),
                bn: Some(BatchNorm2d::new(4 * b)),
            },
            Down {
                conv: Conv2d::new(rng, 4 * b, 8 * b, 4, 2, 1),
                bn: Some(BatchNorm2d::new(8 * b)),
            },
        ];
        let up = [(8 * b, 4 * b), (8 * b, 2 * b), (4 * b, b)]
            .into_iter()
            .map(|(i, o)| Up {
                deconv: ConvTranspose2d::new(rng, i, o, 4, 2, 1),
                bn: BatchNorm2d::new(o),
            })
            .collect();
        let head = ConvTranspose2d::new(rng, 2 * b, spec.out_channels, 4, 2, 1);
        let anchors = spec.generator_anchors();
        let attention = Anchored::build(sa_rng, &anchors, &GENERATOR_STAGES, |s| {
            generator_channels(s, b, spec.out_channels)
        })?;
        Ok(Generator {
            down,
            up,
            head,
            attention,
            dropout: spec.dropout,
        })
    }

    pub fn expected_params(spec: &ModelSpec) -> usize {
        let b = spec.base_width;
        let convs = Conv2d::param_count(spec.in_channels, b, 4)
            + Conv2d::param_count(b, 2 * b, 4)
            + Conv2d::param_count(2 * b, 4 * b, 4)
            + Conv2d::param_count(4 * b, 8 * b, 4);
        let bns = BatchNorm2d::param_count(2 * b)
            + BatchNorm2d::param_count(4 * b)
            + BatchNorm2d::param_count(8 * b);
        let ups = ConvTranspose2d::param_count(8 * b, 4 * b, 4)
            + ConvTranspose2d::param_count(8 * b, 2 * b, 4)
            + ConvTranspose2d::param_count(4 * b, b, 4)
            + BatchNorm2d::param_count(4 * b)
            + BatchNorm2d::param_count(2 * b)
            + BatchNorm2d::param_count(b);
        let head = ConvTranspose2d::param_count(2 * b, spec.out_channels, 4);
        let sa: usize = spec
            .generator_anchors()
            .iter()
            .filter_map(|s| generator_channels(s, b, spec.out_channels))
            .map(SelfAttention::param_count)
            .sum();
        convs + bns + ups + head + sa
    }

    pub fn attention_count(&self) -> usize {
        self.attention.0.len()
    }

    pub fn attention_modules(&self) -> impl Iterator<Item = (&str, &SelfAttention)> {
        self.attention.0.iter().map(|(s, m)| (s.as_str(), m))
    }

    pub fn attention_modules_mut(&mut self) -> impl Iterator<Item = (&str, &mut SelfAttention)> {
        self.attention.0.iter_mut().map(|(s, m)| (s.as_str(), m))
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let train = ctx.train;
        let mut skips: Vec<Tensor> = Vec::with_capacity(3);
        let mut h = x.clone();
        for (i, down) in self.down.iter().enumerate() {
            let stage = GENERATOR_STAGES[i];
            h = down.forward(&h, train);
            ctx.record(stage, &h);
            h = self.attention.apply(stage, h, ctx, "");
            if i < 3 {
                skips.push(h.clone());
            }
        }
        for (i, up) in self.up.iter().enumerate() {
            let stage = GENERATOR_STAGES[4 + i];
            let mut u = up.forward(&h, train);
            if i < 2 {
                u = ctx.dropout(&u, self.dropout);
            }
            h = Tensor::concat(&[u, skips[2 - i].clone()], 1);
            ctx.record(stage, &h);
            h = self.attention.apply(stage, h, ctx, "");
        }
        let out = self.head.forward(&h).tanh().add_scalar(1.0).scale(0.5);
        ctx.record("out", &out);
        out
    }
}

impl Module for Generator {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        for (i, d) in self.down.iter().enumerate() {
            let p = join(prefix, GENERATOR_STAGES[i]);
            d.conv.visit(&join(&p, "conv"), f);
            if let Some(bn) = &d.bn {
                bn.visit(&join(&p, "bn"), f);
            }
        }
        for (i, u) in self.up.iter().enumerate() {
            let p = join(prefix, GENERATOR_STAGES[4 + i]);
            u.deconv.visit(&join(&p, "deconv"), f);
            u.bn.visit(&join(&p, "bn"), f);
        }
        self.head.visit(&join(prefix, "out"), f);
        self.attention.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        for (i, d) in self.down.iter_mut().enumerate() {
            let p = join(prefix, GENERATOR_STAGES[i]);
            d.conv.visit_mut(&join(&p, "conv"), f);
            if let Some(bn) = &mut d.bn {
                bn.visit_mut(&join(&p, "bn"), f);
            }
        }
        for (i, u) in self.up.iter_mut().enumerate() {
            let p = join(prefix, GENERATOR_STAGES[4 + i]);
            u.deconv.visit_mut(&join(&p, "deconv"), f);
            u.bn.visit_mut(&join(&p, "bn"), f);
        }
        self.head.visit_mut(&join(prefix, "out"), f);
        self.attention.visit_mut(prefix, f);
    }
}

/// Convolutional critic over the channel-concatenated (input, candidate)
/// pair: four 4x4 stride-2 convolutions with LeakyReLU and no
/// normalization, then a linear head giving one unbounded score per sample.
pub struct Critic {
    convs: Vec<Conv2d>,
    head: Linear,
    attention: Anchored,
}

impl Critic {
    pub(crate) fn new(
        spec: &ModelSpec,
        rng: &mut ChaCha8Rng,
        sa_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let b = spec.critic_width;
        let c_in = spec.in_channels + spec.out_channels;
        let convs = vec![
            Conv2d::new(rng, c_in, b, 4, 2, 1),
            Conv2d::new(rng, b, 2 * b, 4, 2, 1),
            Conv2d::new(rng, 2 * b, 4 * b, 4, 2, 1),
            Conv2d::new(rng, 4 * b, 8 * b, 4, 2, 1),
        ];
        let head = Linear::new(rng, Self::flat_len(spec), 1);
        let anchors = spec.critic_anchors();
        let attention =
            Anchored::build(sa_rng, &anchors, &CRITIC_STAGES, |s| critic_channels(s, b))?;
        Ok(Critic {
            convs,
            head,
            attention,
        })
    }

    fn flat_len(spec: &ModelSpec) -> usize {
        8 * spec.critic_width * (spec.height / 16) * (spec.width / 16)
    }

    pub fn expected_params(spec: &ModelSpec) -> usize {
        let b = spec.critic_width;
        let c_in = spec.in_channels + spec.out_channels;
        let sa: usize = spec
            .critic_anchors()
            .iter()
            .filter_map(|s| critic_channels(s, b))
            .map(SelfAttention::param_count)
            .sum();
        Conv2d::param_count(c_in, b, 4)
            + Conv2d::param_count(b, 2 * b, 4)
            + Conv2d::param_count(2 * b, 4 * b, 4)
            + Conv2d::param_count(4 * b, 8 * b, 4)
            + Linear::param_count(Self::flat_len(spec), 1)
            + sa
    }

    pub fn attention_count(&self) -> usize {
        self.attention.0.len()
    }

    pub fn attention_modules_mut(&mut self) -> impl Iterator<Item = (&str, &mut SelfAttention)> {
        self.attention.0.iter_mut().map(|(s, m)| (s.as_str(), m))
    }

    /// Scores `[N]` for inputs and candidates of shape `[N, C, H, W]`.
    pub fn forward(&self, input: &Tensor, candidate: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        self.score(&Tensor::concat(&[input.clone(), candidate.clone()], 1), ctx)
    }

    /// Scores an already concatenated pair.
    pub fn score(&self, pair: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let n = pair.dim(0);
        let mut h = pair.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let stage = CRITIC_STAGES[i];
            h = conv.forward(&h).leaky_relu(SLOPE);
            ctx.record(&format!("critic.{stage}"), &h);
            h = self.attention.apply(stage, h, ctx, "critic.");
        }
        let flat = h.numel() / n;
        self.head.forward(&h.reshape(&[n, flat])).reshape(&[n])
    }
}

impl Module for Critic {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, CRITIC_STAGES[i]), f);
        }
        self.head.visit(&join(prefix, "head"), f);
        self.attention.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, CRITIC_STAGES[i]), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        self.attention.visit_mut(prefix, f);
    }
}
