//! Generative-iterative pose transformer: a Pre-LN self-attention stack over
//! the transition axis that emits delta poses, applied repeatedly to a pose
//! accumulator.

use criticvio_tensor::nn::{dropout, reborrow, randn, LayerNorm, Linear, Path};
use criticvio_tensor::Tensor;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoders::LatentFeatures;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Refinement iterations `I`.
    pub iterations: usize,
    /// Noise width; `0` means "same as the latent width".
    pub n_z: usize,
    /// Post-LN arrangement instead of Pre-LN, for comparison runs.
    pub post_ln: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_mult: 2,
            dropout: 0.1,
            iterations: 4,
            n_z: 0,
            post_ln: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.iterations == 0 {
            return Err(Error::Config("transformer sizes and iterations must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn noise_width(&self, n_c: usize) -> usize {
        if self.n_z == 0 {
            n_c
        } else {
            self.n_z
        }
    }
}

/// Multi-head scaled dot-product self-attention over axis 1 of `[B, T, D]`.
pub struct SelfAttention {
    qkv: Linear,
    pub out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(path: &Path, dim: usize, heads: usize, zero_out: bool, rng: &mut dyn RngCore) -> Self {
        let out = if zero_out {
            Linear::zeros(&path.sub("out"), dim, dim)
        } else {
            Linear::new(&path.sub("out"), dim, dim, rng)
        };
        Self {
            qkv: Linear::new(&path.sub("qkv"), dim, 3 * dim, rng),
            out,
            heads,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(x);
        let split = |i: usize| {
            qkv.narrow(2, i * d, d)
                .reshape(&[b, t, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * h, t, dh])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let att = q.matmul(&k.t()).mul_scalar(1.0 / (dh as f64).sqrt()).softmax_last();
        let ctx = att
            .matmul(&v)
            .reshape(&[b, h, t, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, t, d]);
        self.out.forward(&ctx)
    }
}

/// Position-wise GELU feed-forward.
pub struct FeedForward {
    up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(path: &Path, dim: usize, width: usize, zero_out: bool, rng: &mut dyn RngCore) -> Self {
        let down = if zero_out {
            Linear::zeros(&path.sub("down"), width, dim)
        } else {
            Linear::new(&path.sub("down"), width, dim, rng)
        };
        Self {
            up: Linear::new(&path.sub("up"), dim, width, rng),
            down,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.down.forward(&self.up.forward(x).gelu())
    }
}

/// Feature-wise affine modulation from a context vector, zero-initialized
/// so it starts as the identity.
pub struct Film {
    pub proj: Linear,
}

impl Film {
    pub fn new(path: &Path, ctx_dim: usize, dim: usize) -> Self {
        Self {
            proj: Linear::zeros(&path.sub("proj"), ctx_dim, 2 * dim),
        }
    }
}

/// `hidden * (1 + gamma) + beta` with `(gamma, beta)` projected from `ctx`.
pub fn film_condition(hidden: &Tensor, ctx: &Tensor, film: &Film) -> Result<Tensor> {
    let d = hidden.shape()[2];
    if hidden.shape()[..2] != ctx.shape()[..2] || film.proj.out_dim() != 2 * d || film.proj.in_dim() != ctx.shape()[2] {
        return Err(Error::ShapeMismatch(format!(
            "FiLM hidden {:?} ctx {:?}",
            hidden.shape(),
            ctx.shape()
        )));
    }
    let gb = film.proj.forward(ctx);
    let gamma = gb.narrow(2, 0, d);
    let beta = gb.narrow(2, d, d);
    Ok(hidden.mul(&gamma.add_scalar(1.0)).add(&beta))
}

/// One encoder block: attention, optional FiLM, feed-forward.
pub struct Block {
    ln1: LayerNorm,
    pub attn: SelfAttention,
    pub film: Option<Film>,
    ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(
        path: &Path,
        dim: usize,
        heads: usize,
        ffn_width: usize,
        film_ctx: Option<usize>,
        zero_out: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(&path.sub("ln1"), dim),
            attn: SelfAttention::new(&path.sub("attn"), dim, heads, zero_out, rng),
            film: film_ctx.map(|c| Film::new(&path.sub("film"), c, dim)),
            ln2: LayerNorm::new(&path.sub("ln2"), dim),
            ffn: FeedForward::new(&path.sub("ffn"), dim, ffn_width, zero_out, rng),
        }
    }

    pub fn forward(
        &self,
        h: &Tensor,
        ctx: Option<&Tensor>,
        post_ln: bool,
        p_drop: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        let mut h = if post_ln {
            self.ln1.forward(&h.add(&dropout(&self.attn.forward(h), p_drop, reborrow(&mut rng))))
        } else {
            h.add(&dropout(&self.attn.forward(&self.ln1.forward(h)), p_drop, reborrow(&mut rng)))
        };
        if let (Some(film), Some(ctx)) = (&self.film, ctx) {
            h = film_condition(&h, ctx, film)?;
        }
        Ok(if post_ln {
            self.ln2.forward(&h.add(&dropout(&self.ffn.forward(&h), p_drop, rng)))
        } else {
            h.add(&dropout(&self.ffn.forward(&self.ln2.forward(&h)), p_drop, rng))
        })
    }
}

/// The delta-pose generator `G_T`.
pub struct PoseTransformer {
    embed: Linear,
    pos: criticvio_tensor::nn::Param,
    pub blocks: Vec<Block>,
    final_ln: LayerNorm,
    pub head: Linear,
    cfg: TransformerConfig,
    n_z: usize,
}

impl PoseTransformer {
    /// `n_c` is the latent width per modality and `max_len` the number of
    /// transitions per window.
    pub fn new(path: &Path, cfg: &TransformerConfig, n_c: usize, max_len: usize, rng: &mut dyn RngCore) -> Self {
        let d = cfg.hidden;
        let n_z = cfg.noise_width(n_c);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&path.sub(format!("block{i}")), d, cfg.heads, cfg.ffn_mult * d, Some(2 * n_c), true, rng))
            .collect();
        Self {
            embed: Linear::new(&path.sub("embed"), 3 * n_c + n_z + 6, d, rng),
            pos: path.param("pos", randn(&[max_len, d], 0.02, rng)),
            blocks,
            final_ln: LayerNorm::new(&path.sub("final_ln"), d),
            head: Linear::zeros(&path.sub("head"), d, 6),
            cfg: cfg.clone(),
            n_z,
        }
    }

    pub fn noise_width(&self) -> usize {
        self.n_z
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// One pass: `delta = G_T(z, gated, p)`, conditioned on the ungated
    /// inertial latents `imu_ctx` (`[B, T, 2 N_C]`).
    pub fn forward_delta(
        &self,
        z: &Tensor,
        gated: &LatentFeatures,
        imu_ctx: &Tensor,
        p: &Tensor,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        let g = gated.concat();
        let (b, t) = (g.shape()[0], g.shape()[1]);
        if z.shape() != [b, t, self.n_z] || p.shape() != [b, t, 6] || t > self.pos.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "generator inputs z {:?}, latents {:?}, p {:?}",
                z.shape(),
                g.shape(),
                p.shape()
            )));
        }
        let x = Tensor::concat(&[g, z.clone(), p.clone()], 2);
        let pos = self.pos.tensor().narrow(0, 0, t);
        let mut h = dropout(&self.embed.forward(&x).add(&pos), self.cfg.dropout, reborrow(&mut rng));
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, Some(imu_ctx), self.cfg.post_ln, self.cfg.dropout, reborrow(&mut rng))?;
            if !h.all_finite() {
                return Err(Error::NonFiniteActivation(format!("generator block {i}")));
            }
        }
        let out = self.head.forward(&self.final_ln.forward(&h));
        if !out.all_finite() {
            return Err(Error::NonFiniteActivation("generator head".into()));
        }
        Ok(out)
    }

    /// Runs `iterations` refinement passes with a shared `z`.
    pub fn iterate(
        &self,
        z: &Tensor,
        gated: &LatentFeatures,
        imu_ctx: &Tensor,
        iterations: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<PoseIterations> {
        let s = gated.flow.shape();
        iterate_fn(iterations, (s[0], s[1]), |p| {
            self.forward_delta(z, gated, imu_ctx, p, reborrow(&mut rng))
        })
    }
}

/// Stacked accumulator states `[B, I, T, 6]`; entry `i` is the running sum of
/// the first `i + 1` deltas.
#[derive(Clone)]
pub struct PoseIterations {
    pub p_all: Tensor,
    pub deltas: Vec<Tensor>,
}

impl PoseIterations {
    pub fn iterations(&self) -> usize {
        self.deltas.len()
    }

    pub fn at(&self, i: usize) -> Tensor {
        self.p_all.narrow(1, i, 1).reshape(&self.deltas[i].shape().to_vec())
    }

    pub fn last(&self) -> Tensor {
        self.at(self.iterations() - 1)
    }
}

/// The refinement loop with the delta generator supplied as a closure:
/// `p = 0; for each iteration p += step(p)`.
pub fn iterate_fn(
    iterations: usize,
    (b, t): (usize, usize),
    mut step: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<PoseIterations> {
    if iterations == 0 {
        return Err(Error::Domain("iterations must be >= 1".into()));
    }
    let mut p = Tensor::zeros(&[b, t, 6]);
    let mut states = Vec::with_capacity(iterations);
    let mut deltas = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let delta = step(&p)?;
        p = p.add(&delta);
        states.push(p.unsqueeze(1));
        deltas.push(delta);
    }
    Ok(PoseIterations {
        p_all: Tensor::concat(&states, 1),
        deltas,
    })
}
