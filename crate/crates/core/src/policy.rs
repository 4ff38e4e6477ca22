//! Policy encoder: positive per-modality weights that gate the latents.

use std::io::Write;
use std::path::Path as FsPath;

use criticvio_tensor::nn::{Linear, Path};
use criticvio_tensor::Tensor;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoders::LatentFeatures;
use crate::error::{Error, Result};

pub const MODALITIES: [&str; 3] = ["flow", "imu_rot", "imu_trans"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub blocks: usize,
    /// Softness of the shifted softplus.
    pub kappa: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 2,
            kappa: 1.0,
        }
    }
}

/// `softplus(kappa (x + x0)) / kappa` with `x0 = ln(e^kappa - 1) / kappa`, so
/// that a zero logit maps to exactly 1.
///
/// The `1 / kappa` factor is applied as a division by `softplus(kappa x0)`
/// (which equals `kappa`) evaluated through the same operations, making
/// `f(0) == 1.0` hold in floating point too.
pub fn shifted_softplus(x: &Tensor, kappa: f64) -> Tensor {
    assert!(kappa > 0.0, "kappa must be positive");
    let x0 = kappa.exp_m1().ln() / kappa;
    let norm = Tensor::scalar(0.0).add_scalar(x0).mul_scalar(kappa).softplus().item();
    x.add_scalar(x0).mul_scalar(kappa).softplus().div_scalar(norm)
}

/// Positive weights `[B, 3, S-1]` in modality order flow, imu_rot, imu_trans.
#[derive(Clone)]
pub struct PolicyWeights(pub Tensor);

impl PolicyWeights {
    pub fn modality(&self, m: usize) -> Tensor {
        self.0.narrow(1, m, 1)
    }
}

struct MlpBlock {
    l1: Linear,
    l2: Linear,
}

/// Residual MLP over the concatenated latents with a zero-initialized head.
pub struct PolicyEncoder {
    input: Linear,
    blocks: Vec<MlpBlock>,
    pub head: Linear,
    kappa: f64,
}

impl PolicyEncoder {
    pub fn new(path: &Path, cfg: &PolicyConfig, n_c: usize, rng: &mut dyn RngCore) -> Self {
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = path.sub(format!("block{i}"));
                MlpBlock {
                    l1: Linear::new(&p.sub("l1"), cfg.hidden, cfg.hidden, rng),
                    l2: Linear::new(&p.sub("l2"), cfg.hidden, cfg.hidden, rng),
                }
            })
            .collect();
        Self {
            input: Linear::new(&path.sub("input"), 3 * n_c, cfg.hidden, rng),
            blocks,
            head: Linear::zeros(&path.sub("head"), cfg.hidden, 3),
            kappa: cfg.kappa,
        }
    }

    /// Raw logits `[B, S-1, 3]`.
    pub fn logits(&self, latents: &LatentFeatures) -> Result<Tensor> {
        let x = latents.concat();
        if x.shape()[2] != self.input.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "policy input width {} vs {}",
                x.shape()[2],
                self.input.in_dim()
            )));
        }
        let mut h = self.input.forward(&x).relu();
        for b in &self.blocks {
            h = h.add(&b.l2.forward(&b.l1.forward(&h).relu()));
        }
        Ok(self.head.forward(&h))
    }

    pub fn forward(&self, latents: &LatentFeatures) -> Result<PolicyWeights> {
        let w = shifted_softplus(&self.logits(latents)?, self.kappa).permute(&[0, 2, 1]);
        if !w.all_finite() {
            return Err(Error::NonFiniteActivation("policy weights".into()));
        }
        Ok(PolicyWeights(w))
    }
}

/// Scales each modality's latents by its weight: `gated.m[b, s, :] =
/// latents.m[b, s, :] * w[b, m, s]`.
pub fn apply_gating(latents: &LatentFeatures, w: &PolicyWeights) -> Result<LatentFeatures> {
    let ls = latents.flow.shape();
    let ws = w.0.shape();
    if ws != [ls[0], 3, ls[1]] {
        return Err(Error::ShapeMismatch(format!("weights {:?} for latents {:?}", ws, ls)));
    }
    let gate = |m: usize, x: &Tensor| x.mul(&w.modality(m).permute(&[0, 2, 1]));
    Ok(LatentFeatures {
        flow: gate(0, &latents.flow),
        imu_rot: gate(1, &latents.imu_rot),
        imu_trans: gate(2, &latents.imu_trans),
    })
}

/// Per-frame policy weights of one sequence, with per-modality min-max
/// normalized copies for display.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrace {
    pub seq: String,
    pub frames: Vec<usize>,
    pub raw: Vec<[f64; 3]>,
    pub normalized: Vec<[f64; 3]>,
}

impl PolicyTrace {
    pub fn new(seq: impl Into<String>, frames: Vec<usize>, raw: Vec<[f64; 3]>) -> Self {
        let mut normalized = raw.clone();
        for m in 0..3 {
            let lo = raw.iter().map(|r| r[m]).fold(f64::INFINITY, f64::min);
            let hi = raw.iter().map(|r| r[m]).fold(f64::NEG_INFINITY, f64::max);
            for (n, r) in normalized.iter_mut().zip(&raw) {
                n[m] = if hi > lo { (r[m] - lo) / (hi - lo) } else { 0.0 };
            }
        }
        Self {
            seq: seq.into(),
            frames,
            raw,
            normalized,
        }
    }

    pub fn write_csv(&self, path: &FsPath) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_rows(&mut out, true)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_rows(&self, out: &mut dyn Write, header: bool) -> Result<()> {
        if header {
            writeln!(out, "seq,frame,w_flow,w_imu_rot,w_imu_trans,n_flow,n_imu_rot,n_imu_trans")?;
        }
        for ((f, r), n) in self.frames.iter().zip(&self.raw).zip(&self.normalized) {
            writeln!(out, "{},{},{},{},{},{},{},{}", self.seq, f, r[0], r[1], r[2], n[0], n[1], n[2])?;
        }
        Ok(())
    }
}
