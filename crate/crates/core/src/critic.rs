//! Critic: scores how real a pose sequence looks given the encoded inputs,
//! and picks the best refinement iteration at inference.

use criticvio_tensor::nn::{randn, LayerNorm, Linear, Param, Path};
use criticvio_tensor::Tensor;
use ndarray::{Array2, Array3, ArrayView2, ArrayView4};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoders::LatentFeatures;
use crate::error::{Error, Result};
use crate::pose_transformer::{Block, PoseIterations};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_mult: 2,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "critic hidden width {} / heads {} invalid",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

pub struct Critic {
    pose_embed: Linear,
    in_proj: Linear,
    pos: Param,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    n_c: usize,
}

impl Critic {
    pub fn new(path: &Path, cfg: &CriticConfig, n_c: usize, max_len: usize, rng: &mut dyn RngCore) -> Self {
        let d = cfg.hidden;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&path.sub(format!("block{i}")), d, cfg.heads, cfg.ffn_mult * d, None, false, rng))
            .collect();
        Self {
            pose_embed: Linear::new(&path.sub("pose_embed"), 6, n_c, rng),
            in_proj: Linear::new(&path.sub("in_proj"), 4 * n_c, d, rng),
            pos: path.param("pos", randn(&[max_len, d], 0.02, rng)),
            blocks,
            final_ln: LayerNorm::new(&path.sub("final_ln"), d),
            head: Linear::new(&path.sub("head"), d, 1, rng),
            n_c,
        }
    }

    /// Scores `[B*]` for poses `[B*, T, 6]` given concatenated latents
    /// `[B*, T, 3 N_C]`.
    pub fn score(&self, latents: &Tensor, poses: &Tensor) -> Result<Tensor> {
        let ls = latents.shape();
        let ps = poses.shape();
        if ls.len() != 3 || ps.len() != 3 || ls[..2] != ps[..2] || ls[2] != 3 * self.n_c || ps[2] != 6 || ps[1] > self.pos.shape()[0] {
            return Err(Error::ShapeMismatch(format!("critic latents {:?}, poses {:?}", ls, ps)));
        }
        let (b, t) = (ps[0], ps[1]);
        let x = Tensor::concat(&[latents.clone(), self.pose_embed.forward(poses)], 2);
        let mut h = self.in_proj.forward(&x).add(&self.pos.tensor().narrow(0, 0, t));
        for block in &self.blocks {
            h = block.forward(&h, None, false, 0.0, None)?;
        }
        let pooled = self.final_ln.forward(&h).mean_axis_keep(1);
        let c = self.head.forward(&pooled).reshape(&[b]);
        if !c.all_finite() {
            return Err(Error::NonFiniteActivation("critic".into()));
        }
        Ok(c)
    }
}

/// Scores `[B]` for poses `[B, T, 6]`.
pub fn critic_score(critic: &Critic, latents: &LatentFeatures, poses: &Tensor) -> Result<Tensor> {
    critic.score(&latents.concat(), poses)
}

/// Scores every stored iteration: `[B, I]`.
pub fn score_iterations(critic: &Critic, latents: &LatentFeatures, p: &PoseIterations) -> Result<Tensor> {
    score_iterations_raw(critic, &latents.concat(), &p.p_all)
}

/// As [`score_iterations`] on a raw `[B, I, T, 6]` tensor.
pub fn score_iterations_raw(critic: &Critic, latents: &Tensor, p_all: &Tensor) -> Result<Tensor> {
    let s = p_all.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("pose iterations {:?}", s)));
    }
    let (b, i, t) = (s[0], s[1], s[2]);
    let f = latents.shape()[2];
    let lat = latents
        .unsqueeze(1)
        .broadcast_to(&[b, i, t, f])
        .reshape(&[b * i, t, f]);
    Ok(critic.score(&lat, &p_all.reshape(&[b * i, t, 6]))?.reshape(&[b, i]))
}

/// Chosen iterate per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// `[B, T, 6]`.
    pub pose: Array3<f64>,
    pub index: Vec<usize>,
}

/// Per-element argmax over iterations; ties go to the lowest index.
pub fn argmax_rows(c: ArrayView2<f64>) -> Vec<usize> {
    c.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn select_best(p_all: ArrayView4<f64>, c: ArrayView2<f64>) -> Result<SelectionResult> {
    let s = p_all.shape();
    if c.shape() != [s[0], s[1]] {
        return Err(Error::ShapeMismatch(format!("scores {:?} for iterations {:?}", c.shape(), s)));
    }
    let index = argmax_rows(c);
    let mut pose = Array3::zeros((s[0], s[2], s[3]));
    for (b, &i) in index.iter().enumerate() {
        pose.index_axis_mut(ndarray::Axis(0), b)
            .assign(&p_all.index_axis(ndarray::Axis(0), b).index_axis(ndarray::Axis(0), i));
    }
    Ok(SelectionResult { pose, index })
}

/// Converts a `[B, I]` score tensor into an owned matrix.
pub fn scores_matrix(c: &Tensor) -> Array2<f64> {
    let s = c.shape();
    c.value().to_shape((s[0], s[1])).expect("2-d scores").to_owned()
}
