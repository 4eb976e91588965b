use rand_chacha::ChaCha8Rng;

use super::layers::{join, Conv2d, Entry, EntryMut, Module, Visit, VisitMut};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Position-wise self-attention with a learnable residual gate.
///
/// Keys `f` and queries `g` are 1x1 projections to `c / 8` channels, values
/// `h` keep all `c`. Each output position `j` mixes values by
/// `softmax_i(f(x_i) . g(x_j))` and the block returns `x + gamma * o`.
pub struct SelfAttention {
    pub f: Conv2d,
    pub g: Conv2d,
    pub h: Conv2d,
    /// Residual gate, shape `[1]`, starts at 0.
    pub gamma: Tensor,
}

impl SelfAttention {
    pub fn new(rng: &mut ChaCha8Rng, c: usize) -> Result<Self> {
        if c < 8 {
            return Err(Error::Channel(c));
        }
        Ok(SelfAttention {
            f: Conv2d::new(rng, c, c / 8, 1, 1, 0),
            g: Conv2d::new(rng, c, c / 8, 1, 1, 0),
            h: Conv2d::new(rng, c, c, 1, 1, 0),
            gamma: Tensor::param(vec![0.0], &[1]),
        })
    }

    pub fn param_count(c: usize) -> usize {
        2 * Conv2d::param_count(c, c / 8, 1) + Conv2d::param_count(c, c, 1) + 1
    }

    pub fn channels(&self) -> usize {
        self.h.out_channels()
    }

    /// Attention weights `[N, P, P]`; row `j` holds the weights output
    /// position `j` assigns to every input position.
    pub fn attention(&self, x: &Tensor) -> Tensor {
        let (n, c, hh, ww) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (p, r) = (hh * ww, c / 8);
        let keys = self.f.forward(x).reshape(&[n, r, p]);
        let queries = self.g.forward(x).reshape(&[n, r, p]);
        // logits[j, i] = g(x_j) . f(x_i); each row is a distribution over i.
        queries.bmm_t(&keys, true, false).softmax_last()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, hh, ww) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (p, r) = (hh * ww, c / 8);
        let keys = self.f.forward(x).reshape(&[n, r, p]);
        let queries = self.g.forward(x).reshape(&[n, r, p]);
        let values = self.h.forward(x).reshape(&[n, c, p]);
        let o = Tensor::attend(&queries, &keys, &values).reshape(x.shape());
        x.add(&o.mul(&self.gamma.reshape(&[1, 1, 1, 1])))
    }
}

impl Module for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.f.visit(&join(prefix, "f"), f);
        self.g.visit(&join(prefix, "g"), f);
        self.h.visit(&join(prefix, "h"), f);
        f(join(prefix, "gamma"), Entry::Param(&self.gamma));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.f.visit_mut(&join(prefix, "f"), f);
        self.g.visit_mut(&join(prefix, "g"), f);
        self.h.visit_mut(&join(prefix, "h"), f);
        f(join(prefix, "gamma"), EntryMut::Param(&mut self.gamma));
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand::SeedableRng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn too_few_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            SelfAttention::new(&mut rng, 7).err().unwrap().code(),
            "CHANNEL_ERROR"
        );
        assert!(SelfAttention::new(&mut rng, 8).is_ok());
    }

    #[test]
    fn zero_gate_is_identity_and_shape_is_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sa = SelfAttention::new(&mut rng, 64).unwrap();
        let x = random(&mut rng, &[1, 64, 32, 22]);
        let y = sa.forward(&x);
        assert_eq!(y.shape(), &[1, 64, 32, 22]);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sa = SelfAttention::new(&mut rng, 16).unwrap();
        let x = random(&mut rng, &[2, 16, 5, 4]);
        let beta = sa.attention(&x);
        assert_eq!(beta.shape(), &[2, 20, 20]);
        for row in beta.data().chunks(20) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn untracked_kernel_matches_recorded_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sa = SelfAttention::new(&mut rng, 16).unwrap();
        sa.gamma = Tensor::param(vec![0.9], &[1]);
        let x = random(&mut rng, &[2, 16, 10, 13]);
        let tracked = sa.forward(&x.to_param());
        let plain = crate::autodiff::no_grad(|| sa.forward(&x));
        assert!(tracked.requires_grad() && !plain.requires_grad());
        for (a, b) in tracked.data().iter().zip(plain.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn swapping_positions_swaps_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sa = SelfAttention::new(&mut rng, 16).unwrap();
        sa.gamma = Tensor::param(vec![0.7], &[1]);
        let (c, h, w) = (16, 4, 5);
        let x = random(&mut rng, &[1, c, h, w]);
        let (p, q) = (3, 17);
        let swap = |t: &Tensor| {
            let mut d = t.to_vec();
            for ch in 0..c {
                d.swap(ch * h * w + p, ch * h * w + q);
            }
            Tensor::from_vec(d, t.shape())
        };
        let a = swap(&sa.forward(&x));
        let b = sa.forward(&swap(&x));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}
