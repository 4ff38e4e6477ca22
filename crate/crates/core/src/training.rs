//! Adversarial training loop, plateau scheduling, Monte-Carlo evaluation and
//! the iteration/runtime benchmark.

use std::time::Instant;

use criticvio_tensor::nn::{randn, reborrow};
use criticvio_tensor::optim::{AdamW, AdamWConfig, ReduceOnPlateau};
use criticvio_tensor::{grad, no_grad, Tensor};
use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{score_iterations, score_iterations_raw, scores_matrix, select_best};
use crate::encoders::LatentFeatures;
use crate::data::{covering_windows, make_batch, Batch, NormStats, SampleWindow, SequenceData};
use crate::error::{Error, Result};
use crate::geometry::{integrate_relative, kitti_rel_errors, rmse_errors, Pose6};
use crate::losses::{
    critic_loss, generator_loss, gradient_penalty, interpolate, iteration_mse, lambda_for, pose_losses,
    regressive_weight, GpMode, LossBreakdown, LossHyperParams,
};
use crate::model::{Model, ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr_g: f64,
    pub lr_c: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub dropout: f64,
    pub patience: usize,
    pub factor: f64,
    /// Generator updates per batch (`m`).
    pub gen_steps: usize,
    /// Critic updates per batch (`n`).
    pub critic_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Noise samples averaged per generator update.
    pub z_samples: usize,
    pub loss: LossHyperParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            lr_g: 1e-4,
            lr_c: 1e-4,
            betas: (0.5, 0.9),
            weight_decay: 1e-3,
            dropout: 0.1,
            patience: 10,
            factor: 0.5,
            gen_steps: 1,
            critic_steps: 2,
            epochs: 20,
            seed: 0,
            variant: Variant::Desk,
            z_samples: 1,
            loss: LossHyperParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_g, self.lr_c, self.factor, self.betas.0, self.betas.1];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates, betas and factor must be positive".into()));
        }
        if self.batch == 0 || self.gen_steps == 0 || self.critic_steps == 0 || self.z_samples == 0 {
            return Err(Error::Config("batch, gen_steps, critic_steps and z_samples must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.factor >= 1.0 {
            return Err(Error::Config("dropout must be in [0, 1) and factor below 1".into()));
        }
        self.loss.validate()
    }

    /// Copies the dropout rate into the model configuration.
    pub fn apply_to(&self, model: &mut ModelConfig) {
        model.encoder.dropout = self.dropout;
        model.transformer.dropout = self.dropout;
        model.variant = self.variant;
    }

    fn adam(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Independent random streams, so data order, noise, dropout masks and
/// penalty interpolation are separately reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub shuffle: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub gp: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            shuffle: stream(1),
            noise: stream(2),
            dropout: stream(3),
            gp: stream(4),
        }
    }
}

pub fn sample_noise(shape: [usize; 3], rng: &mut dyn RngCore) -> Tensor {
    Tensor::constant(randn(&shape, 1.0, rng))
}

/// Per-epoch aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub train: LossBreakdown,
    pub val_pose_loss: Option<f64>,
    pub lr_g: f64,
    pub lr_c: f64,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub norm: NormStats,
    pub opt_g: AdamW,
    pub opt_c: AdamW,
    pub scheduler: ReduceOnPlateau,
    pub rngs: RngStreams,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches over the whole run.
    pub step: usize,
}

fn check_finite(step: usize, bd: LossBreakdown) -> Result<LossBreakdown> {
    if bd.is_finite() {
        Ok(bd)
    } else {
        Err(Error::NonFiniteLoss {
            step,
            breakdown: Box::new(bd),
        })
    }
}

fn grads_of(loss: &Tensor, params: &[Tensor]) -> Result<Vec<ArrayD<f64>>> {
    let g = grad(loss, params, false);
    let out: Vec<ArrayD<f64>> = g.iter().map(|t| t.value().to_owned()).collect();
    if out.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient("parameter gradient".into()));
    }
    Ok(out)
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, norm: NormStats) -> Result<Self> {
        cfg.validate()?;
        let opt_g = AdamW::new(model.generator.store.params(), cfg.adam(cfg.lr_g));
        let opt_c = AdamW::new(model.critic.store.params(), cfg.adam(cfg.lr_c));
        let rngs = RngStreams::new(cfg.seed);
        Ok(Self {
            model,
            scheduler: ReduceOnPlateau::new(cfg.patience, cfg.factor),
            cfg,
            norm,
            opt_g,
            opt_c,
            rngs,
            epoch: 0,
            step: 0,
        })
    }

    /// One critic update on a batch with latents already computed.
    fn critic_step(&mut self, latents: &LatentFeatures, batch: &Batch) -> Result<(f64, f64, f64)> {
        let model = &self.model;
        let iters = model.iterations();
        let b = batch.size();
        let z = sample_noise(model.noise_shape(b), &mut self.rngs.noise);
        let lat = &latents.concat();
        let p_all = no_grad(|| {
            model
                .generator
                .refine(latents, &z, iters, Some(&mut self.rngs.dropout))
                .map(|(_, its)| its.p_all.detach())
        })?;
        let critic = &model.critic.critic;
        let c_fake = score_iterations_raw(critic, lat, &p_all)?.reshape(&[b * iters]);
        let c_real = critic.score(lat, &batch.y)?;
        let mut w = regressive_weight(&batch.y, &p_all)?;
        let w_raw_mean = w.mean().item();
        if self.cfg.loss.w_normalize && w_raw_mean > 0.0 {
            w = w.div_scalar(w_raw_mean);
        }

        let (t, f) = (lat.shape()[1], lat.shape()[2]);
        let lat_rep = lat.unsqueeze(1).broadcast_to(&[b, iters, t, f]).reshape(&[b * iters, t, f]);
        let fake_flat = p_all.reshape(&[b * iters, t, 6]);
        let gp_at = match self.cfg.loss.gp_mode {
            GpMode::Generated => fake_flat,
            GpMode::Interpolated => {
                let y_rep = batch.y.unsqueeze(1).broadcast_to(&[b, iters, t, 6]).reshape(&[b * iters, t, 6]);
                interpolate(&y_rep, &fake_flat, &mut self.rngs.gp)
            }
        };
        let gp = gradient_penalty(|x| critic.score(&lat_rep, x), &gp_at)?;
        let l_c = critic_loss(&c_fake, &c_real, &w, &gp, &self.cfg.loss)?;
        let (l_c_v, gp_v, w_v) = (l_c.item(), gp.item(), w_raw_mean);
        if l_c_v.is_finite() {
            let g = grads_of(&l_c, &self.model.critic.store.tensors())?;
            self.opt_c.step(&g);
        }
        Ok((l_c_v, gp_v, w_v))
    }

    fn generator_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let model = &self.model;
        let iters = model.iterations();
        let lam = lambda_for(&self.cfg.loss, iters)?;
        let mut total: Option<Tensor> = None;
        let mut parts = Vec::new();
        let mut rng: Option<&mut dyn RngCore> = Some(&mut self.rngs.dropout);
        let latents = model.generator.encode(&batch.flow, &batch.imu, reborrow(&mut rng))?;
        let lat_det = latents.concat().detach();
        for _ in 0..self.cfg.z_samples {
            let z = sample_noise(model.noise_shape(batch.size()), &mut self.rngs.noise);
            let (_, its) = model.generator.refine(&latents, &z, iters, reborrow(&mut rng))?;
            let c = score_iterations_raw(&model.critic.critic, &lat_det, &its.p_all)?;
            let (l_pt, l_pr) = pose_losses(&batch.y, &its.p_all, &lam)?;
            let (l_g, bd) = generator_loss(&l_pt, &l_pr, &c, &lam, &self.cfg.loss)?;
            total = Some(match total {
                None => l_g,
                Some(t) => t.add(&l_g),
            });
            parts.push(bd);
        }
        let l_g = total.expect("z_samples >= 1").div_scalar(self.cfg.z_samples as f64);
        let bd = LossBreakdown::mean(&parts);
        if bd.is_finite() {
            let g = grads_of(&l_g, &self.model.generator.store.tensors())?;
            self.opt_g.step(&g);
        }
        Ok(bd)
    }

    /// `n` critic updates then `m` generator updates on one batch.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let lat = no_grad(|| {
            self.model
                .generator
                .encode(&batch.flow, &batch.imu, Some(&mut self.rngs.dropout))
                .map(|l| l.detach())
        })?;
        let mut critic_parts = (0.0, 0.0, 0.0);
        for _ in 0..self.cfg.critic_steps {
            critic_parts = self.critic_step(&lat, batch)?;
            if !critic_parts.0.is_finite() {
                break;
            }
        }
        let mut bd = LossBreakdown::default();
        if critic_parts.0.is_finite() {
            let mut gens = Vec::new();
            for _ in 0..self.cfg.gen_steps {
                let g = self.generator_step(batch)?;
                gens.push(g);
                if !g.is_finite() {
                    break;
                }
            }
            bd = LossBreakdown::mean(&gens);
        }
        (bd.l_c, bd.l_gp, bd.w_mean) = critic_parts;
        self.step += 1;
        check_finite(self.step, bd)
    }

    /// One pass over `windows` in shuffled order; `log` sees every batch.
    pub fn train_epoch(
        &mut self,
        windows: &[SampleWindow],
        log: &mut dyn FnMut(usize, &LossBreakdown),
    ) -> Result<LossBreakdown> {
        if windows.is_empty() {
            return Err(Error::Domain("no training windows".into()));
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.rngs.shuffle);
        let mut all = Vec::new();
        for chunk in order.chunks(self.cfg.batch) {
            let refs: Vec<&SampleWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = make_batch(&refs, &self.norm)?;
            let bd = self.train_batch(&batch)?;
            log(self.step, &bd);
            all.push(bd);
        }
        self.epoch += 1;
        Ok(LossBreakdown::mean(&all))
    }

    /// Feeds the validation signal to the scheduler (both optimizers share it).
    pub fn end_epoch(&mut self, val_pose_loss: f64) {
        let mult = self.scheduler.observe(val_pose_loss);
        self.scheduler.apply(&mut self.opt_g, mult);
        self.scheduler.apply(&mut self.opt_c, mult);
    }

    /// Trains one epoch, computes the validation loss and steps the scheduler.
    pub fn run_epoch(
        &mut self,
        train: &[SampleWindow],
        val: &[SampleWindow],
        log: &mut dyn FnMut(usize, &LossBreakdown),
    ) -> Result<EpochSummary> {
        let batches = train.len().div_ceil(self.cfg.batch);
        let bd = self.train_epoch(train, log)?;
        let val_pose_loss = if val.is_empty() {
            None
        } else {
            let v = validation_pose_loss(&self.model, &self.norm, val, &self.cfg, self.cfg.seed)?;
            self.end_epoch(v);
            Some(v)
        };
        Ok(EpochSummary {
            epoch: self.epoch,
            batches,
            train: bd,
            val_pose_loss,
            lr_g: self.opt_g.config.lr,
            lr_c: self.opt_c.config.lr,
        })
    }
}

/// Mean weighted pose loss `l_pt + beta l_pr` in inference mode with a fixed
/// noise stream.
pub fn validation_pose_loss(
    model: &Model,
    norm: &NormStats,
    windows: &[SampleWindow],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let lam = lambda_for(&cfg.loss, model.iterations())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut sum = 0.0;
    for chunk in windows.chunks(cfg.batch) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let batch = make_batch(&refs, norm)?;
        let z = sample_noise(model.noise_shape(batch.size()), &mut rng);
        let v = no_grad(|| -> Result<f64> {
            let out = model.generator.forward(&batch.flow, &batch.imu, &z, model.iterations(), None)?;
            let (l_pt, l_pr) = pose_losses(&batch.y, &out.iterations.p_all, &lam)?;
            Ok(l_pt.item() + cfg.loss.beta * l_pr.item())
        })?;
        sum += v * chunk.len() as f64;
    }
    Ok(sum / windows.len() as f64)
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; `None` when empty or non-finite.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub repeats: usize,
    pub iterations: usize,
    pub seed: u64,
    pub batch: usize,
    /// Rotation weight in the per-iteration pose loss curve.
    pub beta: f64,
}

impl EvalConfig {
    pub fn new(repeats: usize, iterations: usize, seed: u64) -> Self {
        Self {
            repeats,
            iterations,
            seed,
            batch: 64,
            beta: LossHyperParams::default().beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iterations: usize,
    pub repeats: usize,
    /// Windows per repeat.
    pub windows: usize,
    /// Relative translational error in percent; absent when every sequence is
    /// shorter than the shortest segment length.
    pub t_rel: Option<MeanStd>,
    /// Relative rotational error in degrees per 100 m.
    pub r_rel: Option<MeanStd>,
    pub t_rmse: Option<MeanStd>,
    /// Degrees.
    pub r_rmse: Option<MeanStd>,
    /// Plain pose MSE per iteration, averaged over windows and repeats.
    pub iteration_mse: Vec<f64>,
    /// Unweighted `l_pt + beta l_pr` per iteration.
    pub iteration_pose_loss: Vec<f64>,
    /// Negated mean critic score per iteration.
    pub neg_critic: Vec<f64>,
    /// Pose MSE of the critic-selected iterate.
    pub selected_mse: f64,
    /// How often each iteration was selected, over all windows and repeats.
    pub selection_histogram: Vec<usize>,
}

/// One repeat over one sequence.
struct SeqRun {
    rel: Vec<Pose6>,
    sq_iter: Vec<f64>,
    sq_t_iter: Vec<f64>,
    sq_r_iter: Vec<f64>,
    score_iter: Vec<f64>,
    sq_sel: f64,
    index: Vec<usize>,
    weights: Vec<[f64; 3]>,
}

fn run_sequence(
    model: &Model,
    norm: &NormStats,
    windows: &[SampleWindow],
    frames: usize,
    iters: usize,
    batch: usize,
    rng: &mut dyn RngCore,
) -> Result<SeqRun> {
    let mut rel: Vec<Option<Pose6>> = vec![None; frames - 1];
    let mut weights: Vec<Option<[f64; 3]>> = vec![None; frames - 1];
    let mut run = SeqRun {
        rel: Vec::new(),
        sq_iter: vec![0.0; iters],
        sq_t_iter: vec![0.0; iters],
        sq_r_iter: vec![0.0; iters],
        score_iter: vec![0.0; iters],
        sq_sel: 0.0,
        index: Vec::new(),
        weights: Vec::new(),
    };
    for chunk in windows.chunks(batch) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let b = make_batch(&refs, norm)?;
        let z = sample_noise(model.noise_shape(b.size()), rng);
        let (out, c) = model.infer(&b.flow, &b.imu, &z, iters)?;
        let p = out.iterations.p_all.value().to_owned();
        let p = p.into_dimensionality::<ndarray::Ix4>().expect("[B, I, T, 6]");
        let y = b.y.value().to_owned().into_dimensionality::<ndarray::Ix3>().expect("[B, T, 6]");
        let c = scores_matrix(&c);
        let sel = select_best(p.view(), c.view())?;
        let w = out.weights.0.value().to_owned().into_dimensionality::<ndarray::Ix3>().expect("[B, 3, T]");
        for (bi, win) in chunk.iter().enumerate() {
            for i in 0..iters {
                let d = &p.index_axis(Axis(0), bi).index_axis(Axis(0), i) - &y.index_axis(Axis(0), bi);
                let sq = d.mapv(|v| v * v);
                run.sq_iter[i] += sq.mean().unwrap_or(0.0);
                run.sq_t_iter[i] += sq.slice(ndarray::s![.., 0..3]).mean().unwrap_or(0.0);
                run.sq_r_iter[i] += sq.slice(ndarray::s![.., 3..6]).mean().unwrap_or(0.0);
                run.score_iter[i] += c[[bi, i]];
            }
            let d = &sel.pose.index_axis(Axis(0), bi) - &y.index_axis(Axis(0), bi);
            run.sq_sel += d.mapv(|v| v * v).mean().unwrap_or(0.0);
            run.index.push(sel.index[bi]);
            for s in 0..win.transitions() {
                let slot = win.frame_index + s;
                if rel[slot].is_none() {
                    let row = sel.pose.index_axis(Axis(0), bi);
                    let row = row.index_axis(Axis(0), s);
                    rel[slot] = Some(Pose6::from_array([row[0], row[1], row[2], row[3], row[4], row[5]]));
                    weights[slot] = Some([w[[bi, 0, s]], w[[bi, 1, s]], w[[bi, 2, s]]]);
                }
            }
        }
    }
    run.rel = rel
        .into_iter()
        .map(|r| r.ok_or_else(|| Error::Domain("windows do not cover the sequence".into())))
        .collect::<Result<_>>()?;
    run.weights = weights.into_iter().map(|w| w.unwrap_or([1.0; 3])).collect();
    Ok(run)
}

fn noise_rng(seed: u64, repeat: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(16 + repeat as u64);
    r
}

/// Predicted trajectory and per-transition raw policy weights for one
/// sequence, starting from the ground-truth initial pose.
pub fn predict_sequence(
    model: &Model,
    norm: &NormStats,
    seq: &SequenceData,
    iterations: usize,
    seed: u64,
) -> Result<(crate::geometry::Trajectory, Vec<[f64; 3]>)> {
    let windows = covering_windows(seq, model.cfg.seq_len)?;
    let mut rng = noise_rng(seed, 0);
    let run = run_sequence(model, norm, &windows, seq.frames(), iterations, 64, &mut rng)?;
    Ok((integrate_relative(&seq.trajectory.poses[0], &run.rel), run.weights))
}

/// Monte-Carlo evaluation: fresh noise per window and repeat, critic-selected
/// iterates chained into full trajectories.
pub fn evaluate(model: &Model, norm: &NormStats, seqs: &[SequenceData], cfg: &EvalConfig) -> Result<EvalReport> {
    if seqs.is_empty() || cfg.repeats == 0 || cfg.iterations == 0 {
        return Err(Error::Domain("evaluation needs sequences, repeats and iterations".into()));
    }
    let iters = cfg.iterations;
    let windows: Vec<Vec<SampleWindow>> = seqs
        .iter()
        .map(|s| covering_windows(s, model.cfg.seq_len))
        .collect::<Result<_>>()?;
    let n_windows: usize = windows.iter().map(Vec::len).sum();
    let mut metrics: [Vec<f64>; 4] = Default::default();
    let mut sq_iter = vec![0.0; iters];
    let mut sq_t = vec![0.0; iters];
    let mut sq_r = vec![0.0; iters];
    let mut score = vec![0.0; iters];
    let mut sq_sel = 0.0;
    let mut hist = vec![0usize; iters];
    for r in 0..cfg.repeats {
        let mut rng = noise_rng(cfg.seed, r);
        let (mut t_rel, mut r_rel, mut t_rmse, mut r_rmse) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut rel_weight = Vec::new();
        for (seq, wins) in seqs.iter().zip(&windows) {
            let run = run_sequence(model, norm, wins, seq.frames(), iters, cfg.batch, &mut rng)?;
            for i in 0..iters {
                sq_iter[i] += run.sq_iter[i];
                sq_t[i] += run.sq_t_iter[i];
                sq_r[i] += run.sq_r_iter[i];
                score[i] += run.score_iter[i];
            }
            sq_sel += run.sq_sel;
            run.index.iter().for_each(|&i| hist[i] += 1);
            let gt_rel = crate::data::relative_from_trajectory(&seq.trajectory);
            let (tr, rr) = rmse_errors(&gt_rel, &run.rel)?;
            t_rmse.push(tr);
            r_rmse.push(rr);
            let pred = integrate_relative(&seq.trajectory.poses[0], &run.rel);
            match kitti_rel_errors(&seq.trajectory, &pred) {
                Ok(e) => {
                    t_rel.push(e.t_rel * e.segments as f64);
                    r_rel.push(e.r_rel * e.segments as f64);
                    rel_weight.push(e.segments as f64);
                }
                Err(Error::TooShort) => {}
                Err(e) => return Err(e),
            }
        }
        // Sequence errors are pooled over segments, RMSE over sequences.
        let segs: f64 = rel_weight.iter().sum();
        if segs > 0.0 {
            metrics[0].push(t_rel.iter().sum::<f64>() / segs);
            metrics[1].push(r_rel.iter().sum::<f64>() / segs);
        }
        metrics[2].push(t_rmse.iter().sum::<f64>() / t_rmse.len() as f64);
        metrics[3].push(r_rmse.iter().sum::<f64>() / r_rmse.len() as f64);
    }
    let n = (n_windows * cfg.repeats) as f64;
    Ok(EvalReport {
        iterations: iters,
        repeats: cfg.repeats,
        windows: n_windows,
        t_rel: MeanStd::of(&metrics[0]),
        r_rel: MeanStd::of(&metrics[1]),
        t_rmse: MeanStd::of(&metrics[2]),
        r_rmse: MeanStd::of(&metrics[3]),
        iteration_mse: sq_iter.iter().map(|v| v / n).collect(),
        iteration_pose_loss: sq_t.iter().zip(&sq_r).map(|(t, r)| (t + cfg.beta * r) / n).collect(),
        neg_critic: score.iter().map(|v| -v / n).collect(),
        selected_mse: sq_sel / n,
        selection_histogram: hist,
    })
}

/// Per-iteration MSE of the stored iterates for a set of windows, one noise
/// draw per batch. Cheaper than [`evaluate`] when trajectories are not needed.
pub fn window_iteration_mse(
    model: &Model,
    norm: &NormStats,
    windows: &[SampleWindow],
    iterations: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let mut rng = noise_rng(seed, 0);
    let mut curve = vec![0.0; iterations];
    let mut sel = 0.0;
    for chunk in windows.chunks(64) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let b = make_batch(&refs, norm)?;
        let z = sample_noise(model.noise_shape(b.size()), &mut rng);
        let (out, c) = model.infer(&b.flow, &b.imu, &z, iterations)?;
        let w = chunk.len() as f64;
        for (acc, v) in curve.iter_mut().zip(iteration_mse(&b.y, &out.iterations.p_all)?) {
            *acc += v * w;
        }
        let p = out.iterations.p_all.value().to_owned().into_dimensionality::<ndarray::Ix4>().expect("4-d");
        let chosen = select_best(p.view(), scores_matrix(&c).view())?;
        let y = b.y.value().to_owned().into_dimensionality::<ndarray::Ix3>().expect("3-d");
        sel += (&chosen.pose - &y).mapv(|v| v * v).mean().unwrap_or(0.0) * w;
    }
    let n = windows.len() as f64;
    Ok((curve.iter().map(|v| v / n).collect(), sel / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub iterations: usize,
    pub seconds: f64,
    /// Runtime relative to the largest iteration count in the list.
    pub relative: f64,
    pub report: EvalReport,
}

/// Evaluates at each iteration count, timing the best of `timing_repeats`
/// runs to reduce scheduler noise.
pub fn benchmark_iterations(
    model: &Model,
    norm: &NormStats,
    seqs: &[SequenceData],
    iteration_list: &[usize],
    seed: u64,
    timing_repeats: usize,
) -> Result<Vec<BenchRow>> {
    if iteration_list.is_empty() {
        return Err(Error::Domain("empty iteration list".into()));
    }
    let mut rows = Vec::with_capacity(iteration_list.len());
    for &i in iteration_list {
        let cfg = EvalConfig::new(1, i, seed);
        let mut best = f64::INFINITY;
        let mut report = None;
        for _ in 0..timing_repeats.max(1) {
            let t0 = Instant::now();
            let r = evaluate(model, norm, seqs, &cfg)?;
            best = best.min(t0.elapsed().as_secs_f64());
            report = Some(r);
        }
        rows.push(BenchRow {
            iterations: i,
            seconds: best,
            relative: 0.0,
            report: report.expect("at least one timing run"),
        });
    }
    let base = rows
        .iter()
        .max_by_key(|r| r.iterations)
        .map(|r| r.seconds)
        .unwrap_or(1.0);
    rows.iter_mut().for_each(|r| r.relative = r.seconds / base);
    Ok(rows)
}

/// Scores `[B, I]` for a model on a batch, without dropout.
pub fn batch_scores(model: &Model, batch: &Batch, z: &Tensor, iterations: usize) -> Result<Tensor> {
    no_grad(|| {
        let out = model.generator.forward(&batch.flow, &batch.imu, z, iterations, None)?;
        score_iterations(&model.critic.critic, &out.latents, &out.iterations)
    })
}
