use rand::Rng;

use crate::autodiff::{grad, Tensor};
use crate::error::{Error, Result};

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.numel() == 0 {
        return Err(Error::EmptyData("loss over empty tensors".into()));
    }
    Ok(())
}

/// Mean squared difference over every element.
pub fn l2_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y)?;
    Ok(x.sub(y).square().mean())
}

/// Mean absolute difference over every element.
pub fn l1_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y)?;
    Ok(x.sub(y).abs().mean())
}

/// One minus the cosine similarity of the two tensors taken as flat vectors.
pub fn cosine_distance(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y)?;
    let xx = x.square().sum();
    let yy = y.square().sum();
    if xx.item() == 0.0 || yy.item() == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot = x.mul(y).sum();
    Ok(dot.div(&xx.sqrt().mul(&yy.sqrt())).neg().add_scalar(1.0))
}

fn check_slices(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} elements", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::EmptyData("loss over empty inputs".into()));
    }
    Ok(())
}

/// [`l2_loss`] on plain values.
pub fn l2(x: &[f64], y: &[f64]) -> Result<f64> {
    check_slices(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// [`l1_loss`] on plain values.
pub fn l1(x: &[f64], y: &[f64]) -> Result<f64> {
    check_slices(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// [`cosine_distance`] on plain values.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    check_slices(x, y)?;
    let (mut dot, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(1.0 - dot / (xx.sqrt() * yy.sqrt()))
}

/// Added under the square root so the norm stays differentiable at zero.
const NORM_EPS: f64 = 1e-16;

/// Gradient penalty at points between `real` and `fake` (both `[N, ...]`),
/// with one mixing weight per sample drawn uniformly from `rng`.
pub fn gradient_penalty(
    critic: impl Fn(&Tensor) -> Tensor,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let eps: Vec<f64> = (0..real.dim(0)).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_with_eps(critic, real, fake, &eps)
}

/// [`gradient_penalty`] with explicit mixing weights: the point for sample
/// `i` is `eps[i] * real + (1 - eps[i]) * fake`.
pub fn gradient_penalty_with_eps(
    critic: impl Fn(&Tensor) -> Tensor,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
) -> Result<Tensor> {
    same_shape(real, fake)?;
    let n = real.dim(0);
    if eps.len() != n {
        return Err(Error::Shape(format!(
            "{} mixing weights for {n} samples",
            eps.len()
        )));
    }
    let per = real.numel() / n;
    let (r, f) = (real.data(), fake.data());
    let mixed: Vec<f64> = (0..real.numel())
        .map(|i| {
            let e = eps[i / per];
            e * r[i] + (1.0 - e) * f[i]
        })
        .collect();
    let x_hat = Tensor::param(mixed, real.shape());
    let scores = critic(&x_hat);
    let g = grad(&scores.sum(), &[&x_hat], true).remove(0);
    let norms = g
        .square()
        .reshape(&[n, per])
        .sum_keepdim(&[1])
        .add_scalar(NORM_EPS)
        .sqrt();
    let penalty = norms.add_scalar(-1.0).square().mean();
    if !penalty.item().is_finite() {
        return Err(Error::NonFinite("gradient penalty".into()));
    }
    Ok(penalty)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape)
    }

    #[test]
    fn worked_examples() {
        let x = t(&[0.2, 0.4], &[1, 2]);
        let y = t(&[0.1, 0.8], &[1, 2]);
        // (0.1^2 + 0.4^2) / 2 and (0.1 + 0.4) / 2.
        assert!((l2_loss(&x, &y).unwrap().item() - 0.085).abs() < 1e-15);
        assert!((l1_loss(&x, &y).unwrap().item() - 0.25).abs() < 1e-15);
        let e = t(&[1.0, 0.0], &[2]);
        assert!((cosine_distance(&e, &t(&[0.0, 1.0], &[2])).unwrap().item() - 1.0).abs() < 1e-15);
        let expected = 1.0 - 1.0 / 2f64.sqrt();
        assert!(
            (cosine_distance(&e, &t(&[1.0, 1.0], &[2])).unwrap().item() - expected).abs() < 1e-12
        );
        assert_eq!(cosine_distance(&e, &e).unwrap().item(), 0.0);
    }

    #[test]
    fn identities() {
        let ones = Tensor::ones(&[2, 3, 4, 5]);
        let zeros = Tensor::zeros(&[2, 3, 4, 5]);
        assert_eq!(l2_loss(&ones, &zeros).unwrap().item(), 1.0);
        assert_eq!(l1_loss(&ones, &zeros).unwrap().item(), 1.0);
        assert_eq!(l2_loss(&ones, &ones).unwrap().item(), 0.0);
        assert_eq!(l1(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let a = Tensor::ones(&[2, 2]);
        let b = Tensor::ones(&[4]);
        assert_eq!(l2_loss(&a, &b).unwrap_err().code(), "SHAPE_ERROR");
        assert_eq!(l1(&[1.0], &[1.0, 2.0]).unwrap_err().code(), "SHAPE_ERROR");
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(
            cosine_distance(&a, &z).unwrap_err().code(),
            "ZERO_NORM_ERROR"
        );
        assert_eq!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err().code(),
            "ZERO_NORM_ERROR"
        );
    }

    #[test]
    fn slice_and_tensor_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let (tx, ty) = (t(&x, &[2, 2, 3]), t(&y, &[2, 2, 3]));
        assert!((l2(&x, &y).unwrap() - l2_loss(&tx, &ty).unwrap().item()).abs() < 1e-15);
        assert!((l1(&x, &y).unwrap() - l1_loss(&tx, &ty).unwrap().item()).abs() < 1e-15);
        assert!(
            (cosine(&x, &y).unwrap() - cosine_distance(&tx, &ty).unwrap().item()).abs() < 1e-15
        );
    }

    #[test]
    fn penalty_of_linear_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real = t(&[0.1, 0.5, 0.9, 0.3], &[1, 4]);
        let fake = t(&[0.7, 0.2, 0.4, 0.8], &[1, 4]);
        let sum = |x: &Tensor| x.sum_keepdim(&[1]).reshape(&[x.dim(0)]);
        let first = |x: &Tensor| x.narrow(1, 0, 1).reshape(&[x.dim(0)]);
        let zero = |x: &Tensor| Tensor::zeros(&[x.dim(0)]);
        let p = gradient_penalty(sum, &real, &fake, &mut rng)
            .unwrap()
            .item();
        assert!((p - 1.0).abs() < 1e-6);
        assert!(
            gradient_penalty(first, &real, &fake, &mut rng)
                .unwrap()
                .item()
                .abs()
                < 1e-6
        );
        assert!(
            (gradient_penalty(zero, &real, &fake, &mut rng)
                .unwrap()
                .item()
                - 1.0)
                .abs()
                < 1e-6
        );
    }

    #[test]
    fn penalty_symmetric_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let real = Tensor::from_vec((0..24).map(|_| rng.random()).collect(), &[3, 8]);
        let fake = Tensor::from_vec((0..24).map(|_| rng.random()).collect(), &[3, 8]);
        let critic = |x: &Tensor| x.square().sum_keepdim(&[1]).reshape(&[x.dim(0)]);
        let eps = [0.2, 0.7, 0.5];
        let flipped: Vec<f64> = eps.iter().map(|e| 1.0 - e).collect();
        let a = gradient_penalty_with_eps(critic, &real, &fake, &eps)
            .unwrap()
            .item();
        let b = gradient_penalty_with_eps(critic, &fake, &real, &flipped)
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-12);
    }
}
