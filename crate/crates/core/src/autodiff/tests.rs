use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

/// Central differences of a scalar function of one flat parameter vector.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

fn check(shape: &[usize], seed: u64, f: impl Fn(&Tensor) -> Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random(shape, &mut rng);
    let x = Tensor::param(x0.clone(), shape);
    let y = f(&x);
    let analytic = grad(&y, &[&x], false)[0].to_vec();
    let numeric = numeric_grad(&x0, |p| {
        no_grad(|| f(&Tensor::from_vec(p.to_vec(), shape)).item())
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-6, "relative error {e}");
}

#[test]
fn elementwise_and_broadcast_gradients() {
    check(&[2, 3, 4], 1, |x| {
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[1, 3, 1]);
        x.mul(&b).tanh().add(&x.sigmoid()).square().sum()
    });
    check(&[3, 4], 2, |x| {
        x.square().add_scalar(1.0).sqrt().ln().mean()
    });
    check(&[3, 4], 3, |x| {
        x.sum_keepdim(&[1]).expand(&[3, 4]).mul(x).exp().sum()
    });
    check(&[5], 4, |x| x.leaky_relu(0.2).mul(&x.abs()).sum());
    check(&[2, 3], 5, |x| x.div(&x.square().add_scalar(2.0)).sum());
}

#[test]
fn matmul_softmax_permute_gradients() {
    check(&[2, 3, 4], 6, |x| {
        let s = x.bmm(&x.transpose_last());
        s.softmax_last().mul(&s).sum()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let other = Tensor::from_vec(random(&[2, 4, 3], &mut rng), &[2, 4, 3]);
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        // x is [2, 3, 4]; pick the other operand's layout so op(x) op(o) is defined.
        let o = if ta == tb {
            other.clone()
        } else {
            other.transpose_last()
        };
        check(&[2, 3, 4], 14, |x| x.bmm_t(&o, ta, tb).square().sum());
        check(&[2, 3, 4], 15, |x| o.bmm_t(x, ta, tb).tanh().sum());
    }
    check(&[2, 3, 4], 7, |x| {
        x.permute(&[2, 0, 1])
            .reshape(&[4, 6])
            .square()
            .narrow(0, 1, 2)
            .sum()
    });
}

#[test]
fn conv_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = Tensor::from_vec(random(&[4, 2, 3, 3], &mut rng), &[4, 2, 3, 3]);
    check(&[2, 2, 6, 5], 9, |x| {
        x.conv2d(&w, 1, 1).relu().square().sum()
    });
    let w2 = Tensor::from_vec(random(&[4, 2, 4, 4], &mut rng), &[4, 2, 4, 4]);
    check(&[2, 2, 8, 6], 10, |x| x.conv2d(&w2, 2, 1).tanh().sum());
    let wt = Tensor::from_vec(random(&[2, 3, 4, 4], &mut rng), &[2, 3, 4, 4]);
    check(&[1, 2, 3, 4], 11, |x| {
        let y = x.conv_transpose2d(&wt, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 6, 8]);
        y.square().sum()
    });
    let input = Tensor::from_vec(random(&[2, 2, 6, 6], &mut rng), &[2, 2, 6, 6]);
    check(&[3, 2, 4, 4], 12, |w| input.conv2d(w, 2, 1).square().sum());
}

#[test]
fn pool_concat_gradients() {
    check(&[1, 2, 4, 4], 13, |x| x.max_pool2d(2).square().sum());
    check(&[2, 2, 3, 3], 14, |x| {
        let c = Tensor::concat(&[x.clone(), x.scale(2.0), x.narrow(1, 0, 1)], 1);
        c.square().mul(&c).sum()
    });
    check(&[2, 3], 15, |x| x.embed(1, 1, 5).exp().sum());
}

#[test]
fn second_order_through_conv() {
    // Penalty-style objective: d/dw of |d/dx f(x, w)|^2, checked against
    // finite differences of a first-order autodiff evaluation.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xs = [1, 2, 6, 6];
    let ws = [3, 2, 4, 4];
    let x0 = random(&xs, &mut rng);
    let w0 = random(&ws, &mut rng);
    let w2_0 = random(&[1, 3, 3, 3], &mut rng);
    let penalty = |w: &Tensor, create: bool| {
        let x = Tensor::param(x0.clone(), &xs);
        let w2 = Tensor::from_vec(w2_0.clone(), &[1, 3, 3, 3]);
        let y = x
            .conv2d(w, 2, 1)
            .leaky_relu(0.2)
            .conv2d(&w2, 1, 0)
            .tanh()
            .sum();
        let gx = grad(&y, &[&x], create).remove(0);
        gx.square().sum()
    };
    let w = Tensor::param(w0.clone(), &ws);
    let p = penalty(&w, true);
    let analytic = grad(&p, &[&w], false)[0].to_vec();
    let numeric = numeric_grad(&w0, |v| {
        penalty(&Tensor::param(v.to_vec(), &ws), false).item()
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-6, "relative error {e}");
}

#[test]
fn second_order_through_attention_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x0 = random(&[1, 3, 4], &mut rng);
    let a0 = random(&[1, 4, 4], &mut rng);
    let penalty = |a: &Tensor, create: bool| {
        let x = Tensor::param(x0.clone(), &[1, 3, 4]);
        let s = x
            .bmm(a)
            .softmax_last()
            .bmm(&x.transpose_last())
            .sigmoid()
            .sum();
        grad(&s, &[&x], create).remove(0).square().sum()
    };
    let a = Tensor::param(a0.clone(), &[1, 4, 4]);
    let analytic = grad(&penalty(&a, true), &[&a], false)[0].to_vec();
    let numeric = numeric_grad(&a0, |v| {
        penalty(&Tensor::param(v.to_vec(), &[1, 4, 4]), false).item()
    });
    assert!(rel_err(&analytic, &numeric) < 1e-6);

    // Same pattern through the transposed-operand products used by attention.
    let penalty_t = |a: &Tensor, create: bool| {
        let x = Tensor::param(x0.clone(), &[1, 3, 4]);
        let s = x
            .bmm_t(&x.bmm(a), true, false)
            .softmax_last()
            .bmm_t(&x, false, true)
            .sigmoid()
            .sum();
        grad(&s, &[&x], create).remove(0).square().sum()
    };
    let analytic = grad(&penalty_t(&a, true), &[&a], false)[0].to_vec();
    let numeric = numeric_grad(&a0, |v| {
        penalty_t(&Tensor::param(v.to_vec(), &[1, 4, 4]), false).item()
    });
    assert!(rel_err(&analytic, &numeric) < 1e-6);
}

#[test]
fn unreachable_input_gets_zeros() {
    let a = Tensor::param(vec![1.0, 2.0], &[2]);
    let b = Tensor::param(vec![3.0], &[1]);
    let y = a.square().sum();
    let g = grad(&y, &[&a, &b], false);
    assert_eq!(g[0].data(), &[2.0, 4.0]);
    assert_eq!(g[1].data(), &[0.0]);
}

#[test]
fn no_grad_records_nothing() {
    let a = Tensor::param(vec![1.0, 2.0], &[2]);
    let y = no_grad(|| a.square());
    assert!(!y.requires_grad());
    assert!(a.square().requires_grad());
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (n, ci, co, h, w, k, s, p) = (2, 3, 2, 7, 6, 3, 2, 1);
    let x = Tensor::from_vec(random(&[n, ci, h, w], &mut rng), &[n, ci, h, w]);
    let wt = Tensor::from_vec(random(&[co, ci, k, k], &mut rng), &[co, ci, k, k]);
    let y = x.conv2d(&wt, s, p);
    let (oh, ow) = (y.dim(2), y.dim(3));
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()
                                        [((b * ci + c) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((o * ci + c) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    let got = y.data()[((b * co + o) * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
