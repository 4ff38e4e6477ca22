//! Model configuration and assembly of the generator (encoders, policy,
//! pose transformer) and the critic, each with its own parameter store.

use criticvio_tensor::nn::ParamStore;
use criticvio_tensor::{no_grad, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticConfig, Critic};
use crate::encoders::{EncoderConfig, FeatureEncoder, LatentFeatures};
use crate::error::{Error, Result};
use crate::policy::{apply_gating, PolicyConfig, PolicyEncoder, PolicyWeights};
use crate::pose_transformer::{PoseIterations, PoseTransformer, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Desk,
    S,
    M,
    L,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Desk => "desk",
            Variant::S => "s",
            Variant::M => "m",
            Variant::L => "l",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Frames per window `S`.
    pub seq_len: usize,
    /// IMU samples per frame interval.
    pub imu_k: usize,
    /// Flow field size (H, W).
    pub image: (usize, usize),
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub transformer: TransformerConfig,
    pub critic: CriticConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Desk)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let desk = Self {
            variant,
            seq_len: 4,
            imu_k: 11,
            image: (16, 32),
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            transformer: TransformerConfig::default(),
            critic: CriticConfig::default(),
        };
        let (n_c, hidden) = match variant {
            Variant::Desk => return desk,
            Variant::S => (256, 512),
            Variant::M => (384, 768),
            Variant::L => (512, 1024),
        };
        Self {
            image: (256, 512),
            encoder: EncoderConfig {
                n_c,
                conv_channels: vec![32, 64, 128, 256, 256],
                residual_blocks: 4,
                imu_channels: 64,
                imu_blocks: 4,
                dropout: 0.1,
            },
            policy: PolicyConfig {
                hidden: n_c,
                blocks: 2,
                kappa: 1.0,
            },
            transformer: TransformerConfig {
                layers: 4,
                hidden,
                heads: 8,
                ffn_mult: 4,
                dropout: 0.1,
                iterations: 16,
                n_z: 0,
                post_ln: false,
            },
            critic: CriticConfig {
                layers: 4,
                hidden,
                heads: 8,
                ffn_mult: 4,
            },
            ..desk
        }
    }

    pub fn transitions(&self) -> usize {
        self.seq_len - 1
    }

    pub fn n_c(&self) -> usize {
        self.encoder.n_c
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 || self.imu_k == 0 || self.image.0 == 0 || self.image.1 == 0 {
            return Err(Error::Config("seq_len >= 2, imu_k and image size must be positive".into()));
        }
        if self.policy.kappa <= 0.0 {
            return Err(Error::Config("policy kappa must be positive".into()));
        }
        self.encoder.validate()?;
        self.transformer.validate()?;
        self.critic.validate()
    }
}

/// Encoders, policy and pose transformer.
pub struct Generator {
    pub store: ParamStore,
    pub encoder: FeatureEncoder,
    pub policy: PolicyEncoder,
    pub transformer: PoseTransformer,
}

/// Everything one generator pass produces.
pub struct GenOutput {
    pub latents: LatentFeatures,
    pub weights: PolicyWeights,
    pub iterations: PoseIterations,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let store = ParamStore::new();
        let root = store.root();
        let n_c = cfg.n_c();
        let encoder = FeatureEncoder::new(&root.sub("encoder"), &cfg.encoder, cfg.image, cfg.imu_k, rng);
        let policy = PolicyEncoder::new(&root.sub("policy"), &cfg.policy, n_c, rng);
        let transformer = PoseTransformer::new(&root.sub("transformer"), &cfg.transformer, n_c, cfg.transitions(), rng);
        Self {
            store,
            encoder,
            policy,
            transformer,
        }
    }

    pub fn encode(&self, flow: &Tensor, imu: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<LatentFeatures> {
        self.encoder.forward(flow, imu, rng)
    }

    /// Policy gating and `iterations` refinement passes from given latents.
    pub fn refine(
        &self,
        latents: &LatentFeatures,
        z: &Tensor,
        iterations: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(PolicyWeights, PoseIterations)> {
        let weights = self.policy.forward(latents)?;
        let gated = apply_gating(latents, &weights)?;
        let its = self.transformer.iterate(z, &gated, &latents.imu_context(), iterations, rng)?;
        Ok((weights, its))
    }

    pub fn forward(
        &self,
        flow: &Tensor,
        imu: &Tensor,
        z: &Tensor,
        iterations: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<GenOutput> {
        let latents = self.encode(flow, imu, criticvio_tensor::nn::reborrow(&mut rng))?;
        let (weights, iterations) = self.refine(&latents, z, iterations, rng)?;
        Ok(GenOutput {
            latents,
            weights,
            iterations,
        })
    }
}

pub struct CriticNet {
    pub store: ParamStore,
    pub critic: Critic,
}

impl CriticNet {
    pub fn new(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let store = ParamStore::new();
        let critic = Critic::new(&store.root().sub("critic"), &cfg.critic, cfg.n_c(), cfg.transitions(), rng);
        Self { store, critic }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub generator: Generator,
    pub critic: CriticNet,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(cfg, &mut rng);
        let critic = CriticNet::new(cfg, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            generator,
            critic,
        })
    }

    pub fn iterations(&self) -> usize {
        self.cfg.transformer.iterations
    }

    pub fn noise_shape(&self, batch: usize) -> [usize; 3] {
        [batch, self.cfg.transitions(), self.generator.transformer.noise_width()]
    }

    /// Inference pass without dropout or graph recording.
    pub fn infer(&self, flow: &Tensor, imu: &Tensor, z: &Tensor, iterations: usize) -> Result<(GenOutput, Tensor)> {
        no_grad(|| {
            let out = self.generator.forward(flow, imu, z, iterations, None)?;
            let c = crate::critic::score_iterations(&self.critic.critic, &out.latents, &out.iterations)?;
            Ok((out, c))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use criticvio_tensor::nn::disjoint;

    #[test]
    fn stores_are_disjoint_and_named() {
        let m = Model::new(&ModelConfig::default(), 0).unwrap();
        assert!(disjoint(&m.generator.store, &m.critic.store));
        let names: Vec<String> = m.generator.store.params().iter().map(|p| p.name().to_string()).collect();
        assert!(names.iter().any(|n| n.starts_with("encoder.visual")));
        assert!(names.iter().any(|n| n.starts_with("policy.head")));
        assert!(names.iter().any(|n| n.starts_with("transformer.head")));
        assert!(m.critic.store.params().iter().all(|p| p.name().starts_with("critic.")));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(&ModelConfig::default(), 4).unwrap();
        let b = Model::new(&ModelConfig::default(), 4).unwrap();
        for (p, q) in a.generator.store.params().iter().zip(b.generator.store.params()) {
            assert_eq!(p.value(), q.value());
        }
    }

    #[test]
    fn variants_validate() {
        for v in [Variant::Desk, Variant::S, Variant::M, Variant::L] {
            ModelConfig::for_variant(v).validate().unwrap();
        }
        let mut bad = ModelConfig::default();
        bad.transformer.heads = 5;
        assert!(bad.validate().is_err());
    }
}
