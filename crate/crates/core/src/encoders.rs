//! Feature encoders: optical flow and the two inertial branches, each mapping
//! a window of transitions to `[B, S-1, N_C]` latents.

use criticvio_tensor::nn::{dropout, reborrow, Conv2d, Linear, Path};
use criticvio_tensor::Tensor;
use ndarray::{ArrayD, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Latent width per modality.
    pub n_c: usize,
    /// Output channels of the stride-2 stem convolutions.
    pub conv_channels: Vec<usize>,
    pub residual_blocks: usize,
    /// Channels of the inertial branches.
    pub imu_channels: usize,
    pub imu_blocks: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_c: 32,
            conv_channels: vec![8, 16],
            residual_blocks: 4,
            imu_channels: 16,
            imu_blocks: 2,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.conv_channels.is_empty() || self.imu_channels == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-modality latents, each `[B, S-1, N_C]`.
#[derive(Clone)]
pub struct LatentFeatures {
    pub flow: Tensor,
    pub imu_rot: Tensor,
    pub imu_trans: Tensor,
}

impl LatentFeatures {
    /// Modalities in fixed order: flow, imu_rot, imu_trans.
    pub fn modalities(&self) -> [&Tensor; 3] {
        [&self.flow, &self.imu_rot, &self.imu_trans]
    }

    /// `[B, S-1, 3 N_C]`.
    pub fn concat(&self) -> Tensor {
        Tensor::concat(&[self.flow.clone(), self.imu_rot.clone(), self.imu_trans.clone()], 2)
    }

    /// Inertial context `[B, S-1, 2 N_C]` (rotation then translation).
    pub fn imu_context(&self) -> Tensor {
        Tensor::concat(&[self.imu_rot.clone(), self.imu_trans.clone()], 2)
    }

    pub fn detach(&self) -> Self {
        Self {
            flow: self.flow.detach(),
            imu_rot: self.imu_rot.detach(),
            imu_trans: self.imu_trans.detach(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.modalities().iter().all(|t| t.all_finite())
    }
}

/// Two convolutions with a skip: `x + relu(conv2(relu(conv1(x))))`.
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(path: &Path, ch: usize, kernel: (usize, usize), pad: (usize, usize), rng: &mut dyn RngCore) -> Self {
        Self {
            conv1: Conv2d::new(&path.sub("conv1"), ch, ch, kernel, (1, 1), pad, rng),
            conv2: Conv2d::new(&path.sub("conv2"), ch, ch, kernel, (1, 1), pad, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.add(&self.conv2.forward(&self.conv1.forward(x).relu()).relu())
    }
}

/// Flow encoder: strided stem, residual blocks, global average pool, linear
/// head.
pub struct VisualEncoder {
    stem: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    pub head: Linear,
    image: (usize, usize),
    dropout: f64,
}

impl VisualEncoder {
    pub fn new(path: &Path, cfg: &EncoderConfig, image: (usize, usize), rng: &mut dyn RngCore) -> Self {
        let mut stem = Vec::new();
        let mut c_in = 2;
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            stem.push(Conv2d::new(&path.sub(format!("stem{i}")), c_in, c, (3, 3), (2, 2), (1, 1), rng));
            c_in = c;
        }
        let blocks = (0..cfg.residual_blocks)
            .map(|i| ResBlock::new(&path.sub(format!("block{i}")), c_in, (3, 3), (1, 1), rng))
            .collect();
        let head = Linear::new(&path.sub("head"), c_in, cfg.n_c, rng);
        head.bias.set(ArrayD::zeros(ndarray::IxDyn(&[cfg.n_c])));
        Self {
            stem,
            blocks,
            head,
            image,
            dropout: cfg.dropout,
        }
    }

    /// Spatial size after the stem.
    pub fn feature_hw(&self) -> (usize, usize) {
        self.stem
            .iter()
            .fold(self.image, |(h, w), c| c.out_hw(h, w))
    }

    /// `[B, T, 2, H, W] -> [B, T, N_C]`.
    pub fn forward(&self, flows: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let s = flows.shape();
        if s.len() != 5 || s[2] != 2 || (s[3], s[4]) != self.image {
            return Err(Error::ShapeMismatch(format!(
                "flow input {:?}, expected [B, T, 2, {}, {}]",
                s, self.image.0, self.image.1
            )));
        }
        let (b, t) = (s[0], s[1]);
        let mut x = flows
            .reshape(&[b * t, 2, s[3], s[4]])
            .permute(&[0, 2, 3, 1]);
        for conv in &self.stem {
            x = conv.forward(&x).relu();
        }
        for block in &self.blocks {
            x = block.forward(&x);
        }
        let xs = x.shape().to_vec();
        let pooled = x
            .reshape(&[xs[0], xs[1] * xs[2], xs[3]])
            .mean_axis_keep(1)
            .reshape(&[xs[0], xs[3]]);
        let pooled = dropout(&pooled, self.dropout, rng);
        Ok(self.head.forward(&pooled).reshape(&[b, t, self.head.out_dim()]))
    }
}

/// One inertial branch: 1-D residual stack over the K axis on three columns.
pub struct ImuBranch {
    input: Conv2d,
    blocks: Vec<ResBlock>,
    pub head: Linear,
    k: usize,
    dropout: f64,
}

impl ImuBranch {
    pub fn new(path: &Path, cfg: &EncoderConfig, k: usize, rng: &mut dyn RngCore) -> Self {
        let c = cfg.imu_channels;
        let input = Conv2d::new(&path.sub("input"), 3, c, (1, 3), (1, 1), (0, 1), rng);
        let blocks = (0..cfg.imu_blocks)
            .map(|i| ResBlock::new(&path.sub(format!("block{i}")), c, (1, 3), (0, 1), rng))
            .collect();
        let head = Linear::new(&path.sub("head"), k * c, cfg.n_c, rng);
        head.bias.set(ArrayD::zeros(ndarray::IxDyn(&[cfg.n_c])));
        Self {
            input,
            blocks,
            head,
            k,
            dropout: cfg.dropout,
        }
    }

    /// `[N, K, 3] -> [N, N_C]`.
    fn forward(&self, x: &Tensor, rng: Option<&mut dyn RngCore>) -> Tensor {
        let n = x.shape()[0];
        let mut h = self.input.forward(&x.reshape(&[n, 1, self.k, 3])).relu();
        for block in &self.blocks {
            h = block.forward(&h);
        }
        let flat = h.reshape(&[n, h.len() / n]);
        self.head.forward(&dropout(&flat, self.dropout, rng))
    }
}

/// Separate rotation (gyro columns) and translation (accel columns) branches.
pub struct InertialEncoder {
    pub rot: ImuBranch,
    pub trans: ImuBranch,
    k: usize,
}

impl InertialEncoder {
    pub fn new(path: &Path, cfg: &EncoderConfig, k: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            rot: ImuBranch::new(&path.sub("rot"), cfg, k, rng),
            trans: ImuBranch::new(&path.sub("trans"), cfg, k, rng),
            k,
        }
    }

    /// `[B, T, K, 6] -> (imu_rot, imu_trans)`, each `[B, T, N_C]`.
    pub fn forward(&self, imu: &Tensor, mut rng: Option<&mut dyn RngCore>) -> Result<(Tensor, Tensor)> {
        let s = imu.shape();
        if s.len() != 4 || s[2] != self.k || s[3] != 6 {
            return Err(Error::ShapeMismatch(format!(
                "IMU input {:?}, expected [B, T, {}, 6]",
                s, self.k
            )));
        }
        let (b, t) = (s[0], s[1]);
        let flat = imu.reshape(&[b * t, self.k, 6]);
        let accel = flat.narrow(2, 0, 3);
        let gyro = flat.narrow(2, 3, 3);
        let rot = self.rot.forward(&gyro, reborrow(&mut rng));
        let trans = self.trans.forward(&accel, reborrow(&mut rng));
        let n_c = rot.shape()[1];
        Ok((rot.reshape(&[b, t, n_c]), trans.reshape(&[b, t, n_c])))
    }
}

/// The complete feature encoder.
pub struct FeatureEncoder {
    pub visual: VisualEncoder,
    pub inertial: InertialEncoder,
}

impl FeatureEncoder {
    pub fn new(path: &Path, cfg: &EncoderConfig, image: (usize, usize), k: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            visual: VisualEncoder::new(&path.sub("visual"), cfg, image, rng),
            inertial: InertialEncoder::new(&path.sub("inertial"), cfg, k, rng),
        }
    }

    pub fn forward(&self, flow: &Tensor, imu: &Tensor, mut rng: Option<&mut dyn RngCore>) -> Result<LatentFeatures> {
        let flow_lat = self.visual.forward(flow, reborrow(&mut rng))?;
        let (imu_rot, imu_trans) = self.inertial.forward(imu, rng)?;
        if flow_lat.shape()[..2] != imu_rot.shape()[..2] {
            return Err(Error::ShapeMismatch(format!(
                "flow batch {:?} vs IMU batch {:?}",
                &flow_lat.shape()[..2],
                &imu_rot.shape()[..2]
            )));
        }
        let lat = LatentFeatures {
            flow: flow_lat,
            imu_rot,
            imu_trans,
        };
        if !lat.all_finite() {
            return Err(Error::NonFiniteActivation("feature encoder".into()));
        }
        Ok(lat)
    }
}

/// Casts image-like input `[B, S, c, H, W]` to three channels by replicating
/// a single channel.
pub fn cast_input(x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    if x.ndim() != 5 {
        return Err(Error::ShapeMismatch(format!("expected [B, S, c, H, W], got {:?}", x.shape())));
    }
    match x.shape()[2] {
        3 => Ok(x.clone()),
        1 => Ok(ndarray::concatenate(Axis(2), &[x.view(), x.view(), x.view()]).expect("same shapes")),
        c => Err(Error::UnsupportedChannels(c)),
    }
}
