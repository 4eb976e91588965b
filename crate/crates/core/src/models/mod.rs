//! Encoder-decoder generators (UNet33, GAN33, SAGAN33), their critic and
//! the self-attention block.

pub mod attention;
pub mod checkpoint;
pub mod gan;
pub mod layers;
pub mod unet;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use attention::SelfAttention;
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, TrainedModel, CHECKPOINT_VERSION,
};
pub use gan::{Critic, Generator, CRITIC_STAGES, GENERATOR_STAGES};
pub use layers::{Entry, EntryMut, ForwardCtx, Module};
pub use unet::{UNet33, UNET_LAYERS};

use crate::autodiff::{no_grad, Tensor};
use crate::data::{Plane, SliceStack};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "UNET33")]
    UNet33,
    #[serde(rename = "GAN33")]
    Gan33,
    #[serde(rename = "SAGAN33")]
    Sagan33,
}

impl ModelKind {
    pub fn is_adversarial(self) -> bool {
        !matches!(self, ModelKind::UNet33)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::UNet33 => "UNET33",
            ModelKind::Gan33 => "GAN33",
            ModelKind::Sagan33 => "SAGAN33",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unet33" | "unet" => Ok(ModelKind::UNet33),
            "gan33" | "gan" => Ok(ModelKind::Gan33),
            "sagan33" | "sagan" => Ok(ModelKind::Sagan33),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Attention placement used by SAGAN33 unless configured otherwise: after
/// the third encoder stage, the bottleneck and the three decoder stages, and
/// after the critic's two middle convolutions.
pub const DEFAULT_SA_PLACEMENT: [&str; 7] = [
    "generator.enc3",
    "generator.bottleneck",
    "generator.dec1",
    "generator.dec2",
    "generator.dec3",
    "critic.c2",
    "critic.c3",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the first generator (or UNet) stage.
    pub base_width: usize,
    /// Width of the first critic stage; unused by UNet33.
    pub critic_width: usize,
    /// `generator.<stage>` or `critic.<stage>` anchors.
    pub sa_placement: Vec<String>,
    pub dropout: f64,
    pub seed: u64,
    /// Plane the model was trained on, if fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<Plane>,
}

impl ModelSpec {
    /// Full-width defaults for an `height x width` plane.
    pub fn new(kind: ModelKind, height: usize, width: usize) -> Self {
        let base_width = match kind {
            ModelKind::UNet33 => 16,
            _ => 64,
        };
        let sa_placement = match kind {
            ModelKind::Sagan33 => DEFAULT_SA_PLACEMENT.iter().map(|s| s.to_string()).collect(),
            _ => Vec::new(),
        };
        ModelSpec {
            kind,
            height,
            width,
            in_channels: 3,
            out_channels: 3,
            base_width,
            critic_width: 64,
            sa_placement,
            dropout: 0.5,
            seed: 0,
            plane: None,
        }
    }

    pub fn with_widths(mut self, base: usize, critic: usize) -> Self {
        self.base_width = base;
        self.critic_width = critic;
        self
    }

    pub fn with_channels(mut self, input: usize, output: usize) -> Self {
        self.in_channels = input;
        self.out_channels = output;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_plane(mut self, plane: Plane) -> Self {
        self.plane = Some(plane);
        self
    }

    fn anchors(&self, prefix: &str) -> Vec<&str> {
        self.sa_placement
            .iter()
            .filter_map(|a| a.strip_prefix(prefix))
            .collect()
    }

    pub fn generator_anchors(&self) -> Vec<&str> {
        self.anchors("generator.")
    }

    pub fn critic_anchors(&self) -> Vec<&str> {
        self.anchors("critic.")
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Geometry(format!(
                "input {}x{} must be a positive multiple of 16 in both dimensions",
                self.height, self.width
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config(
                "channel counts and widths must be positive".into(),
            ));
        }
        if self.kind.is_adversarial() && self.critic_width == 0 {
            return Err(Error::Config("critic width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for a in &self.sa_placement {
            let known = match a.split_once('.') {
                Some(("generator", s)) => GENERATOR_STAGES.contains(&s),
                Some(("critic", s)) => CRITIC_STAGES.contains(&s),
                _ => false,
            };
            if !known || self.kind != ModelKind::Sagan33 {
                return Err(Error::Placement(a.clone()));
            }
        }
        Ok(())
    }

    /// Trainable parameter count derived from the model spec alone.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::UNet33 => UNet33::expected_params(self),
            _ => Generator::expected_params(self) + Critic::expected_params(self),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub enum Network {
    UNet(UNet33),
    Gan {
        generator: Generator,
        critic: Critic,
    },
}

/// A built architecture with its parameters.
pub struct Model {
    spec: ModelSpec,
    pub net: Network,
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // Attention parameters come from their own stream so the remaining
        // parameters do not depend on the placement.
        let mut sa_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        sa_rng.set_stream(1);
        let net = match spec.kind {
            ModelKind::UNet33 => Network::UNet(UNet33::new(spec, &mut rng)),
            ModelKind::Gan33 | ModelKind::Sagan33 => {
                let generator = Generator::new(spec, &mut rng, &mut sa_rng)?;
                let critic = Critic::new(spec, &mut rng, &mut sa_rng)?;
                Network::Gan { generator, critic }
            }
        };
        Ok(Model {
            spec: spec.clone(),
            net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn generator(&self) -> Option<&Generator> {
        match &self.net {
            Network::Gan { generator, .. } => Some(generator),
            Network::UNet(_) => None,
        }
    }

    pub fn critic(&self) -> Option<&Critic> {
        match &self.net {
            Network::Gan { critic, .. } => Some(critic),
            Network::UNet(_) => None,
        }
    }

    /// Runs the reconstruction network on `[N, C_in, H, W]`.
    pub fn generate(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        match &self.net {
            Network::UNet(u) => u.forward(x, ctx),
            Network::Gan { generator, .. } => generator.forward(x, ctx),
        }
    }

    /// Inference-mode reconstruction without graph recording.
    pub fn reconstruct(&self, x: &Tensor) -> Tensor {
        no_grad(|| self.generate(x, &mut ForwardCtx::eval()))
    }

    /// Checks that `stack` can be fed to the reconstruction network.
    pub fn check_input(&self, stack: &SliceStack) -> Result<()> {
        let (c, h, w) = stack.dims();
        if (c, h, w) != (self.spec.in_channels, self.spec.height, self.spec.width) {
            return Err(Error::Geometry(format!(
                "model expects {}x{}x{}, window is {h}x{w}x{c}",
                self.spec.height, self.spec.width, self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Names accepted by [`ForwardCtx::tap`].
    pub fn layer_names(&self) -> Vec<String> {
        match &self.net {
            Network::UNet(_) => UNET_LAYERS.iter().map(|s| s.to_string()).collect(),
            Network::Gan { generator, critic } => {
                let mut names: Vec<String> =
                    GENERATOR_STAGES.iter().map(|s| s.to_string()).collect();
                names.extend((1..=generator.attention_count()).map(|k| format!("sa{k}")));
                names.extend(CRITIC_STAGES.iter().map(|s| format!("critic.{s}")));
                names.extend((1..=critic.attention_count()).map(|k| format!("critic.sa{k}")));
                names
            }
        }
    }

    pub fn visit(&self, f: &mut layers::Visit<'_>) {
        match &self.net {
            Network::UNet(u) => u.visit("unet", f),
            Network::Gan { generator, critic } => {
                generator.visit("generator", f);
                critic.visit("critic", f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut layers::VisitMut<'_>) {
        match &mut self.net {
            Network::UNet(u) => u.visit_mut("unet", f),
            Network::Gan { generator, critic } => {
                generator.visit_mut("generator", f);
                critic.visit_mut("critic", f);
            }
        }
    }

    /// Trainable tensors whose names start with `prefix`, in visit order.
    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, e| {
            if let Entry::Param(t) = e {
                if name.starts_with(prefix) {
                    out.push((name, t.clone()));
                }
            }
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.params("").iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over parameter names and values, hex encoded.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params("") {
            h.update(name.as_bytes());
            for v in t.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces parameters by name; every name must exist with a matching shape.
    pub fn set_params(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> =
            values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut seen = 0;
        let mut err = None;
        self.visit_mut(&mut |name, e| {
            if let (EntryMut::Param(slot), Some(t)) = (e, lookup.get(name.as_str())) {
                if slot.shape() != t.shape() {
                    err.get_or_insert_with(|| Error::Shape(format!("parameter {name}")));
                } else {
                    *slot = t.to_param();
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != values.len() {
            return Err(Error::Config(format!(
                "{} of {} parameters matched",
                seen,
                values.len()
            )));
        }
        Ok(())
    }
}

/// A copy of every parameter and running statistic.
#[derive(Clone)]
pub struct ModelState(Vec<(String, StateValue)>);

#[derive(Clone)]
enum StateValue {
    Param(Tensor),
    Buffer(Vec<f64>),
}

impl Model {
    pub fn snapshot(&self) -> ModelState {
        let mut out = Vec::new();
        self.visit(&mut |name, e| {
            out.push((
                name,
                match e {
                    Entry::Param(t) => StateValue::Param(t.clone()),
                    Entry::Buffer(b) => StateValue::Buffer(b),
                },
            ))
        });
        ModelState(out)
    }

    /// Restores a snapshot taken from this model.
    pub fn restore(&mut self, state: &ModelState) {
        let mut it = state.0.iter();
        self.visit_mut(&mut |name, e| {
            let (saved, value) = it.next().expect("snapshot matches model");
            debug_assert_eq!(saved, &name);
            match (e, value) {
                (EntryMut::Param(t), StateValue::Param(v)) => *t = v.clone(),
                (EntryMut::Buffer(b), StateValue::Buffer(v)) => b.copy_from_slice(v),
                _ => unreachable!("snapshot entry kinds follow the model"),
            }
        });
    }
}

/// Packs stacks `[C, H, W]` into an `[N, C, H, W]` tensor.
pub fn batch_tensor(stacks: &[&SliceStack]) -> Tensor {
    let (c, h, w) = stacks[0].dims();
    let mut data = Vec::with_capacity(stacks.len() * c * h * w);
    for s in stacks {
        assert_eq!(s.dims(), (c, h, w), "stacks in a batch share dimensions");
        data.extend_from_slice(s.values());
    }
    Tensor::from_vec(data, &[stacks.len(), c, h, w])
}
