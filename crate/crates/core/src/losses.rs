//! Training objectives: iteration-weighted pose loss, the adversarial
//! generator term, and the regressively weighted WGAN-GP critic loss.

use criticvio_tensor::{grad, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the gradient penalty is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpMode {
    /// At the generated poses.
    #[default]
    Generated,
    /// At random interpolates between real and generated poses.
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyperParams {
    /// Weight of the pose loss in the generator objective.
    pub alpha: f64,
    /// Weight of the rotational pose loss.
    pub beta: f64,
    /// Iteration discount.
    pub gamma: f64,
    /// Gradient-penalty weight.
    pub psi: f64,
    /// Normalize iteration weights to sum to one instead of dividing by the
    /// continuous integral.
    pub lambda_sum_normalize: bool,
    pub gp_mode: GpMode,
    /// Divide the regressive weights by their batch mean before the critic
    /// loss.
    pub w_normalize: bool,
}

impl Default for LossHyperParams {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 10.0,
            gamma: 0.8,
            psi: 10.0,
            lambda_sum_normalize: false,
            gp_mode: GpMode::Generated,
            w_normalize: false,
        }
    }
}

impl LossHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 || self.psi < 0.0 {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar summary of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_pose: f64,
    pub l_pt: f64,
    pub l_pr: f64,
    pub l_critic_term: f64,
    pub l_c: f64,
    pub l_gp: f64,
    pub w_mean: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_pose, self.l_pt, self.l_pr, self.l_critic_term, self.l_c, self.l_gp, self.w_mean]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for it in items {
            m.l_g += it.l_g / n;
            m.l_pose += it.l_pose / n;
            m.l_pt += it.l_pt / n;
            m.l_pr += it.l_pr / n;
            m.l_critic_term += it.l_critic_term / n;
            m.l_c += it.l_c / n;
            m.l_gp += it.l_gp / n;
            m.w_mean += it.w_mean / n;
        }
        m
    }
}

/// `lambda[i] = gamma^(I-1-i) / Z` with `Z = (1 - gamma^I) / ln(1/gamma)`, the
/// integral of `gamma^x` over `[0, I]`.
pub fn lambda_weights(gamma: f64, iterations: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma {gamma} not in (0, 1)")));
    }
    if iterations == 0 {
        return Err(Error::Domain("iterations must be >= 1".into()));
    }
    let z = (1.0 - gamma.powi(iterations as i32)) / (1.0 / gamma).ln();
    Ok((0..iterations)
        .map(|i| gamma.powi((iterations - 1 - i) as i32) / z)
        .collect())
}

/// Iteration weights per the configuration.
pub fn lambda_for(hp: &LossHyperParams, iterations: usize) -> Result<Vec<f64>> {
    let mut l = lambda_weights(hp.gamma, iterations)?;
    if hp.lambda_sum_normalize {
        let s: f64 = l.iter().sum();
        l.iter_mut().for_each(|v| *v /= s);
    }
    Ok(l)
}

fn check_pose_shapes(y: &Tensor, p_all: &Tensor) -> Result<(usize, usize, usize)> {
    let ys = y.shape();
    let ps = p_all.shape();
    if ys.len() != 3 || ps.len() != 4 || ps[0] != ys[0] || ps[2] != ys[1] || ys[2] != 6 || ps[3] != 6 {
        return Err(Error::ShapeMismatch(format!("targets {:?}, iterations {:?}", ys, ps)));
    }
    Ok((ps[0], ps[1], ps[2]))
}

/// Per-iteration mean squared error over batch, time and the given three
/// pose components: `[I]`.
fn per_iteration_mse(sq: &Tensor, start: usize) -> Tensor {
    let s = sq.shape();
    let (b, i, t) = (s[0], s[1], s[2]);
    sq.narrow(3, start, 3)
        .permute(&[1, 0, 2, 3])
        .reshape(&[i, b * t * 3])
        .mean_axis_keep(1)
        .reshape(&[i])
}

/// Iteration-weighted translational and rotational squared errors.
pub fn pose_losses(y: &Tensor, p_all: &Tensor, lambda: &[f64]) -> Result<(Tensor, Tensor)> {
    let (_, i, _) = check_pose_shapes(y, p_all)?;
    if lambda.len() != i {
        return Err(Error::ShapeMismatch(format!("{} weights for {} iterations", lambda.len(), i)));
    }
    let sq = p_all.sub(&y.unsqueeze(1)).square();
    let lam = Tensor::from_vec(&[i], lambda.to_vec());
    let l_pt = per_iteration_mse(&sq, 0).mul(&lam).sum();
    let l_pr = per_iteration_mse(&sq, 3).mul(&lam).sum();
    Ok((l_pt, l_pr))
}

/// Plain per-iteration pose MSE over all six components: `[I]`.
pub fn iteration_mse(y: &Tensor, p_all: &Tensor) -> Result<Vec<f64>> {
    let (b, i, t) = check_pose_shapes(y, p_all)?;
    let sq = p_all.value().to_owned() - &y.value().view().insert_axis(ndarray::Axis(1));
    let sq = sq.mapv(|v| v * v);
    Ok((0..i)
        .map(|k| sq.index_axis(ndarray::Axis(1), k).sum() / (b * t * 6) as f64)
        .collect())
}

/// The generator objective `alpha (l_pt + beta l_pr) - mean_b sum_i lambda_i c[b, i]`.
///
/// The adversarial term is negated so that higher critic scores (more
/// realistic poses) lower the loss.
pub fn generator_loss(
    l_pt: &Tensor,
    l_pr: &Tensor,
    c: &Tensor,
    lambda: &[f64],
    hp: &LossHyperParams,
) -> Result<(Tensor, LossBreakdown)> {
    let s = c.shape();
    if s.len() != 2 || s[1] != lambda.len() {
        return Err(Error::ShapeMismatch(format!("scores {:?} for {} weights", s, lambda.len())));
    }
    let lam = Tensor::from_vec(&[lambda.len()], lambda.to_vec());
    let l_pose = l_pt.add(&l_pr.mul_scalar(hp.beta));
    let l_critic = c.mul(&lam).sum_axis_keep(1).mean().neg();
    let l_g = l_pose.mul_scalar(hp.alpha).add(&l_critic);
    let bd = LossBreakdown {
        l_g: l_g.item(),
        l_pose: l_pose.item(),
        l_pt: l_pt.item(),
        l_pr: l_pr.item(),
        l_critic_term: l_critic.item(),
        ..Default::default()
    };
    Ok((l_g, bd))
}

/// Per-(sample, iteration) mean squared pose error, flattened sample-major to
/// `[B * I]` and detached.
pub fn regressive_weight(y: &Tensor, p_all: &Tensor) -> Result<Tensor> {
    let (b, i, t) = check_pose_shapes(y, p_all)?;
    let sq = p_all.detach().sub(&y.detach().unsqueeze(1)).square();
    Ok(sq.reshape(&[b * i, t * 6]).mean_axis_keep(1).reshape(&[b * i]).detach())
}

/// `mean_n (||d score / d x_n|| - 1)^2` with the gradient taken w.r.t. the
/// `[N, T, 6]` poses `x` fed to `score`. The result is differentiable w.r.t.
/// the critic parameters.
pub fn gradient_penalty(score: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor) -> Result<Tensor> {
    let x = Tensor::leaf(x.value().clone(), true);
    let c = score(&x)?;
    let g = grad(&c.sum(), &[x], true).remove(0);
    if !g.all_finite() {
        return Err(Error::NonFiniteGradient("critic w.r.t. poses".into()));
    }
    Ok(g.row_norm().add_scalar(-1.0).square().mean())
}

/// Random per-sample interpolates `eps y + (1 - eps) y_hat` for the
/// interpolated penalty variant.
pub fn interpolate(y: &Tensor, y_hat: &Tensor, rng: &mut dyn RngCore) -> Tensor {
    let n = y.shape()[0];
    let mut eps = ArrayD::zeros(IxDyn(&[n, 1, 1]));
    eps.iter_mut().for_each(|e| *e = rng.random::<f64>());
    let eps = Tensor::constant(eps);
    y.detach()
        .mul(&eps)
        .add(&y_hat.detach().mul(&eps.neg().add_scalar(1.0)))
}

/// `mean(w * c_fake) - mean(c_real) + psi * gp`.
pub fn critic_loss(c_fake: &Tensor, c_real: &Tensor, w: &Tensor, gp: &Tensor, hp: &LossHyperParams) -> Result<Tensor> {
    if c_fake.shape() != w.shape() || c_fake.ndim() != 1 || c_real.ndim() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "fake {:?}, real {:?}, w {:?}",
            c_fake.shape(),
            c_real.shape(),
            w.shape()
        )));
    }
    Ok(w.mul(c_fake).mean().sub(&c_real.mean()).add(&gp.mul_scalar(hp.psi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use criticvio_tensor::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_reference_values() {
        let l = lambda_weights(0.8, 16).unwrap();
        let z = (1.0 - 0.8f64.powi(16)) / (1.0f64 / 0.8).ln();
        assert!((z - 4.3553).abs() < 1e-4);
        assert_eq!(l[15], 1.0 / z);
        assert!((l[15] - 0.22961).abs() < 1e-5);
        assert!((l[0] - 0.008078).abs() < 1e-6);
        assert!(l.windows(2).all(|w| w[1] > w[0]));
        assert!((l.iter().sum::<f64>() - 1.115718).abs() < 1e-6);
        assert!(lambda_weights(1.0, 4).is_err());
        assert!(lambda_weights(0.0, 4).is_err());
        let hp = LossHyperParams {
            lambda_sum_normalize: true,
            ..Default::default()
        };
        assert!((lambda_for(&hp, 7).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y0 = randn(&[2, 3, 6], 1.0, &mut rng);
        let y = Tensor::constant(y0.clone());
        let p = y.unsqueeze(1).broadcast_to(&[2, 4, 3, 6]);
        let lam = lambda_weights(0.8, 4).unwrap();
        let (t, r) = pose_losses(&y, &p, &lam).unwrap();
        assert_eq!((t.item(), r.item()), (0.0, 0.0));

        let lam1 = lambda_weights(0.8, 1).unwrap();
        let y = Tensor::zeros(&[1, 1, 6]);
        let p = Tensor::from_vec(&[1, 1, 1, 6], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let (t, r) = pose_losses(&y, &p, &lam1).unwrap();
        assert!((t.item() - lam1[0] / 3.0).abs() < 1e-15);
        assert_eq!(r.item(), 0.0);
    }

    #[test]
    fn generator_loss_sign_and_zero_scores() {
        let hp = LossHyperParams::default();
        let lam = lambda_weights(0.8, 3).unwrap();
        let (pt, pr) = (Tensor::scalar(0.2), Tensor::scalar(0.05));
        let (lg, bd) = generator_loss(&pt, &pr, &Tensor::zeros(&[2, 3]), &lam, &hp).unwrap();
        assert_eq!(lg.item(), hp.alpha * (0.2 + hp.beta * 0.05));
        assert_eq!(bd.l_pose, 0.2 + hp.beta * 0.05);
        let (higher, _) = generator_loss(&pt, &pr, &Tensor::ones(&[2, 3]), &lam, &hp).unwrap();
        assert!(higher.item() < lg.item());
    }

    #[test]
    fn regressive_weight_cases() {
        let y = Tensor::zeros(&[2, 3, 6]);
        let w = regressive_weight(&y, &Tensor::zeros(&[2, 4, 3, 6])).unwrap();
        assert_eq!(w.shape(), &[8]);
        assert!(w.value().iter().all(|v| *v == 0.0));
        let w = regressive_weight(&y, &Tensor::ones(&[2, 4, 3, 6])).unwrap();
        assert!(w.value().iter().all(|v| *v == 1.0));
        assert!(!w.requires_grad());
    }

    #[test]
    fn penalty_for_analytic_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::constant(randn(&[5, 3, 6], 1.0, &mut rng));
        let konst = gradient_penalty(|x| Ok(x.sum_to(&[5, 1, 1]).reshape(&[5]).mul_scalar(0.0).add_scalar(2.0)), &x).unwrap();
        assert_eq!(konst.item(), 1.0);
        let mut v = ArrayD::zeros(IxDyn(&[1, 3, 6]));
        v[[0, 1, 4]] = 1.0;
        let v = Tensor::constant(v);
        let lin = gradient_penalty(|x| Ok(x.mul(&v).sum_to(&[5, 1, 1]).reshape(&[5])), &x).unwrap();
        assert_eq!(lin.item(), 0.0);
    }

    #[test]
    fn critic_loss_cases() {
        let hp = LossHyperParams::default();
        let real = Tensor::from_vec(&[2], vec![0.3, -1.1]);
        let fake = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let gp = Tensor::scalar(0.25);
        let l = critic_loss(&fake, &real, &Tensor::zeros(&[4]), &gp, &hp).unwrap();
        assert!((l.item() - (0.4 + hp.psi * 0.25)).abs() < 1e-15);
        let fake = Tensor::from_vec(&[4], vec![0.3, 0.3, -1.1, -1.1]);
        let l = critic_loss(&fake, &real, &Tensor::ones(&[4]), &Tensor::scalar(0.0), &hp).unwrap();
        assert!(l.item().abs() < 1e-15);
    }
}
