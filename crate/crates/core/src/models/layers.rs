use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

/// Per-call state threaded through a forward pass.
pub struct ForwardCtx {
    pub train: bool,
    rng: ChaCha8Rng,
    tap: Tap,
    pub taps: Vec<(String, Tensor)>,
}

enum Tap {
    None,
    One(String),
    All,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            tap: Tap::None,
            taps: Vec::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tap: Tap::None,
            taps: Vec::new(),
        }
    }

    /// Keeps the activation of the named layer in `taps`.
    pub fn tap(mut self, layer: &str) -> Self {
        self.tap = Tap::One(layer.to_string());
        self
    }

    /// Keeps every named activation in `taps`.
    pub fn tap_all(mut self) -> Self {
        self.tap = Tap::All;
        self
    }

    pub(crate) fn record(&mut self, name: &str, t: &Tensor) {
        let keep = match &self.tap {
            Tap::None => false,
            Tap::One(n) => n == name,
            Tap::All => true,
        };
        if keep {
            self.taps.push((name.to_string(), t.clone()));
        }
    }

    pub fn tapped(&self, name: &str) -> Option<&Tensor> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Inverted dropout: active only in training mode.
    pub(crate) fn dropout(&mut self, x: &Tensor, p: f64) -> Tensor {
        if !self.train || p <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        x.mul(&Tensor::from_vec(mask, x.shape()))
    }
}

/// A named parameter or running statistic, as seen by checkpointing and
/// optimizers.
pub enum Entry<'a> {
    Param(&'a Tensor),
    Buffer(Vec<f64>),
}

pub enum EntryMut<'a> {
    Param(&'a mut Tensor),
    Buffer(&'a mut Vec<f64>),
}

pub type Visit<'v> = dyn FnMut(String, Entry<'_>) + 'v;
pub type VisitMut<'v> = dyn FnMut(String, EntryMut<'_>) + 'v;

pub trait Module {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Tensor::param(
                uniform(rng, c_out * c_in * k * k, bound),
                &[c_out, c_in, k, k],
            ),
            bias: Tensor::param(uniform(rng, c_out, bound), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let c = self.out_channels();
        x.conv2d(&self.weight, self.stride, self.pad)
            .add(&self.bias.reshape(&[1, c, 1, 1]))
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(join(prefix, "weight"), Entry::Param(&self.weight));
        f(join(prefix, "bias"), Entry::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        f(join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        f(join(prefix, "bias"), EntryMut::Param(&mut self.bias));
    }
}

/// Transposed convolution, weights `[c_in, c_out, k, k]`.
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
        ConvTranspose2d {
            weight: Tensor::param(
                uniform(rng, c_in * c_out * k * k, bound),
                &[c_in, c_out, k, k],
            ),
            bias: Tensor::param(uniform(rng, c_out, bound), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * c_out * k * k + c_out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let c = self.weight.dim(1);
        x.conv_transpose2d(&self.weight, self.stride, self.pad)
            .add(&self.bias.reshape(&[1, c, 1, 1]))
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(join(prefix, "weight"), Entry::Param(&self.weight));
        f(join(prefix, "bias"), Entry::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        f(join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        f(join(prefix, "bias"), EntryMut::Param(&mut self.bias));
    }
}

struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    stats: Mutex<RunningStats>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![1.0; c], &[c]),
            beta: Tensor::param(vec![0.0; c], &[c]),
            stats: Mutex::new(RunningStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            }),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn param_count(c: usize) -> usize {
        2 * c
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let c = x.dim(1);
        let per_channel = (x.numel() / c) as f64;
        let shape = [1, c, 1, 1];
        let (centered, var) = if train {
            let mean = x.sum_keepdim(&[0, 2, 3]).scale(1.0 / per_channel);
            let centered = x.sub(&mean);
            let var = centered
                .square()
                .sum_keepdim(&[0, 2, 3])
                .scale(1.0 / per_channel);
            let mut s = self.stats.lock().expect("running stats lock");
            let unbias = if per_channel > 1.0 {
                per_channel / (per_channel - 1.0)
            } else {
                1.0
            };
            for ch in 0..c {
                s.mean[ch] = (1.0 - self.momentum) * s.mean[ch] + self.momentum * mean.data()[ch];
                s.var[ch] =
                    (1.0 - self.momentum) * s.var[ch] + self.momentum * var.data()[ch] * unbias;
            }
            (centered, var)
        } else {
            let s = self.stats.lock().expect("running stats lock");
            let mean = Tensor::from_vec(s.mean.clone(), &shape);
            (x.sub(&mean), Tensor::from_vec(s.var.clone(), &shape))
        };
        let std = var.add_scalar(self.eps).sqrt();
        centered
            .div(&std)
            .mul(&self.gamma.reshape(&shape))
            .add(&self.beta.reshape(&shape))
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(join(prefix, "gamma"), Entry::Param(&self.gamma));
        f(join(prefix, "beta"), Entry::Param(&self.beta));
        let s = self.stats.lock().expect("running stats lock");
        f(join(prefix, "running_mean"), Entry::Buffer(s.mean.clone()));
        f(join(prefix, "running_var"), Entry::Buffer(s.var.clone()));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        f(join(prefix, "gamma"), EntryMut::Param(&mut self.gamma));
        f(join(prefix, "beta"), EntryMut::Param(&mut self.beta));
        let s = self.stats.get_mut().expect("running stats lock");
        f(join(prefix, "running_mean"), EntryMut::Buffer(&mut s.mean));
        f(join(prefix, "running_var"), EntryMut::Buffer(&mut s.var));
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::param(uniform(rng, d_in * d_out, bound), &[d_in, d_out]),
            bias: Tensor::param(uniform(rng, d_out, bound), &[d_out]),
        }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    /// `[N, d_in] -> [N, d_out]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, d_in, d_out) = (x.dim(0), self.weight.dim(0), self.weight.dim(1));
        x.reshape(&[1, n, d_in])
            .bmm(&self.weight.reshape(&[1, d_in, d_out]))
            .reshape(&[n, d_out])
            .add(&self.bias)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(join(prefix, "weight"), Entry::Param(&self.weight));
        f(join(prefix, "bias"), Entry::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        f(join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        f(join(prefix, "bias"), EntryMut::Param(&mut self.bias));
    }
}
