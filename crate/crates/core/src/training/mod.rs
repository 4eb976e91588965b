//! Reconstruction losses, the gradient penalty, Adam and the training loops.

pub mod history;
pub mod losses;
pub mod optim;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use history::{EarlyStopping, StepRecord, TrainHistory};
pub use losses::{
    cosine, cosine_distance, gradient_penalty, gradient_penalty_with_eps, l1, l1_loss, l2, l2_loss,
};
pub use optim::Adam;

use crate::autodiff::{grad, no_grad, Tensor};
use crate::data::split::group_by_subject;
use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::models::{batch_tensor, ForwardCtx, Model, ModelKind, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub l1: f64,
    pub cosine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            l1: 100.0,
            cosine: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Adam betas; `None` picks (0.5, 0.9) for adversarial models and
    /// (0.9, 0.999) for UNet33.
    pub betas: Option<(f64, f64)>,
    pub batch_size: usize,
    /// UNet33 epoch budget.
    pub max_epochs: usize,
    /// UNet33 early-stopping patience in epochs.
    pub patience: usize,
    /// Adversarial budget in generator updates.
    pub generator_steps: usize,
    pub critic_steps: usize,
    pub gp_lambda: f64,
    pub weights: LossWeights,
    /// Share of training subjects held out for validation.
    pub val_fraction: f64,
    /// Adversarial models: generator steps between validation passes.
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.0e-4,
            betas: None,
            batch_size: 8,
            max_epochs: 200,
            patience: 10,
            generator_steps: 1650,
            critic_steps: 5,
            gp_lambda: 10.0,
            weights: LossWeights::default(),
            val_fraction: 0.1,
            validate_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.adversarial, w.l1, w.cosine, self.gp_lambda]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.critic_steps == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "batch size, critic steps and validation interval must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn betas_for(&self, kind: ModelKind) -> (f64, f64) {
        self.betas.unwrap_or(if kind.is_adversarial() {
            (0.5, 0.9)
        } else {
            (0.9, 0.999)
        })
    }
}

/// Splits window indices into training and validation by holding out whole
/// subjects: `round(fraction * subjects)` of them, at least one when there
/// are two or more subjects and `fraction > 0`.
pub fn validation_split(
    windows: &[WindowPair],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let groups = group_by_subject(windows);
    let mut subjects: Vec<&String> = groups.keys().collect();
    let mut held = (fraction * subjects.len() as f64).round() as usize;
    if fraction > 0.0 && subjects.len() >= 2 {
        held = held.clamp(1, subjects.len() - 1);
    } else {
        held = 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    subjects.shuffle(&mut rng);
    let val_subjects: BTreeSet<&String> = subjects.into_iter().take(held).collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, w) in windows.iter().enumerate() {
        if val_subjects.contains(&w.subject_id) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

fn batch(windows: &[WindowPair], idx: &[usize]) -> (Tensor, Tensor) {
    let inputs: Vec<_> = idx.iter().map(|&i| &windows[i].input).collect();
    let targets: Vec<_> = idx.iter().map(|&i| &windows[i].target).collect();
    (batch_tensor(&inputs), batch_tensor(&targets))
}

/// Mean squared reconstruction error over `idx` in inference mode.
pub fn reconstruction_l2(
    model: &Model,
    windows: &[WindowPair],
    idx: &[usize],
    batch_size: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = batch(windows, chunk);
        let out = model.reconstruct(&x);
        sum += out
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += y.numel();
    }
    sum / count.max(1) as f64
}

fn check_inputs(model: &Model, windows: &[WindowPair], config: &TrainConfig) -> Result<()> {
    config.validate()?;
    let first = windows
        .first()
        .ok_or_else(|| Error::EmptyData("no training windows".into()))?;
    model.check_input(&first.input)?;
    let spec = model.spec();
    if first.target.dims() != (spec.out_channels, spec.height, spec.width) {
        return Err(Error::Geometry(format!(
            "target stack {:?} does not match model output {}x{}x{}",
            first.target.dims(),
            spec.height,
            spec.width,
            spec.out_channels
        )));
    }
    Ok(())
}

fn finite(v: f64, step: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            what: what.to_string(),
        })
    }
}

/// Trains UNet33 on L2 with early stopping on validation L2, then restores the
/// best epoch. On divergence the model keeps the last finite parameters.
pub fn train_unet(
    model: &mut Model,
    windows: &[WindowPair],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    check_inputs(model, windows, config)?;
    let (train_idx, val_idx) = validation_split(windows, config.val_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model, "", config.lr, config.betas_for(model.kind()));
    let mut stopper = EarlyStopping::new(config.patience.max(1));
    let mut history = TrainHistory::new("epoch");
    let mut best = model.snapshot();
    let mut order = train_idx.clone();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = batch(windows, chunk);
            let mut ctx = ForwardCtx::train(rng.random());
            let out = model.generate(&x, &mut ctx);
            let loss = l2_loss(&out, &y)?;
            epoch_loss += finite(loss.item(), epoch, "l2 loss")? * chunk.len() as f64;
            let params = adam.params(model);
            let refs: Vec<&Tensor> = params.iter().collect();
            let grads = grad(&loss, &refs, false);
            adam.step(model, &grads);
        }
        let train_l2 = epoch_loss / order.len() as f64;
        let val_l2 = if val_idx.is_empty() {
            None
        } else {
            Some(finite(
                reconstruction_l2(model, windows, &val_idx, config.batch_size),
                epoch,
                "validation l2",
            )?)
        };
        history.push(StepRecord {
            step: epoch,
            generator: train_l2,
            critic: None,
            penalty: None,
            l1: None,
            cosine: None,
            val_l2,
        });
        let stop = stopper.observe(epoch, val_l2.unwrap_or(train_l2));
        if stopper.improved() {
            best = model.snapshot();
        }
        if stop {
            history.stopped_early = true;
            break;
        }
    }
    model.restore(&best);
    Ok(history)
}

/// Cycles through a shuffled index list, reshuffling on each pass.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(mut order: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Sampler { order, pos: 0, rng }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        let n = n.min(self.order.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Adversarial training: `critic_steps` critic updates on
/// `D(fake) - D(real) + gp_lambda * penalty`, then one generator update on
/// `-adversarial * D(fake) + l1 * L1 + cosine * cosine_distance`, for
/// `generator_steps` rounds. On divergence the model keeps the last finite
/// parameters.
pub fn train_gan(
    model: &mut Model,
    windows: &[WindowPair],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    check_inputs(model, windows, config)?;
    if !model.kind().is_adversarial() {
        return Err(Error::Config(format!(
            "{} is not an adversarial model",
            model.kind()
        )));
    }
    let (train_idx, val_idx) = validation_split(windows, config.val_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = Sampler::new(train_idx, rng.random());
    let betas = config.betas_for(model.kind());
    let mut opt_g = Adam::new(model, "generator.", config.lr, betas);
    let mut opt_d = Adam::new(model, "critic.", config.lr, betas);
    let w = config.weights;
    let mut history = TrainHistory::new("generator_step");

    for step in 0..config.generator_steps {
        let mut critic_loss = 0.0;
        let mut penalty = 0.0;
        for _ in 0..config.critic_steps {
            let (x, y) = batch(windows, &sampler.next(config.batch_size));
            let fake = no_grad(|| model.generate(&x, &mut ForwardCtx::train(rng.random())));
            let real_pair = Tensor::concat(&[x.clone(), y], 1);
            let fake_pair = Tensor::concat(&[x, fake], 1);
            let critic = model.critic().expect("adversarial model has a critic");
            let mut ctx = ForwardCtx::train(0);
            let d_real = critic.score(&real_pair, &mut ctx).mean();
            let d_fake = critic.score(&fake_pair, &mut ctx).mean();
            let gp = gradient_penalty(
                |p| critic.score(p, &mut ForwardCtx::train(0)),
                &real_pair,
                &fake_pair,
                &mut rng,
            )
            .map_err(|_| Error::Divergence {
                step,
                what: "gradient penalty".into(),
            })?;
            let loss = d_fake.sub(&d_real).add(&gp.scale(config.gp_lambda));
            critic_loss = finite(loss.item(), step, "critic loss")?;
            penalty = gp.item();
            let params = opt_d.params(model);
            let refs: Vec<&Tensor> = params.iter().collect();
            let grads = grad(&loss, &refs, false);
            opt_d.step(model, &grads);
        }

        let (x, y) = batch(windows, &sampler.next(config.batch_size));
        let fake = model.generate(&x, &mut ForwardCtx::train(rng.random()));
        let critic = model.critic().expect("adversarial model has a critic");
        let adv = critic
            .forward(&x, &fake, &mut ForwardCtx::train(0))
            .mean()
            .neg();
        let l1 = l1_loss(&fake, &y)?;
        let mut loss = adv.scale(w.adversarial).add(&l1.scale(w.l1));
        let mut cos_value = None;
        if w.cosine > 0.0 {
            let c = cosine_distance(&fake, &y)?;
            cos_value = Some(c.item());
            loss = loss.add(&c.scale(w.cosine));
        }
        let generator_loss = finite(loss.item(), step, "generator loss")?;
        let params = opt_g.params(model);
        let refs: Vec<&Tensor> = params.iter().collect();
        let grads = grad(&loss, &refs, false);
        opt_g.step(model, &grads);

        let last = step + 1 == config.generator_steps;
        let val_l2 = if !val_idx.is_empty() && ((step + 1) % config.validate_every == 0 || last) {
            Some(finite(
                reconstruction_l2(model, windows, &val_idx, config.batch_size),
                step,
                "validation l2",
            )?)
        } else {
            None
        };
        history.push(StepRecord {
            step,
            generator: generator_loss,
            critic: Some(critic_loss),
            penalty: Some(penalty),
            l1: Some(l1.item()),
            cosine: cos_value,
            val_l2,
        });
    }
    Ok(history)
}

/// Trains `model` with the loop matching its kind.
pub fn train(
    mut model: Model,
    windows: &[WindowPair],
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let history = if model.kind().is_adversarial() {
        train_gan(&mut model, windows, config)?
    } else {
        train_unet(&mut model, windows, config)?
    };
    Ok(TrainedModel::new(model, Some(history)))
}
