//! Decoupled-weight-decay Adam and a plateau learning-rate scheduler.

use ndarray::{ArrayD, IxDyn, Zip};

use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

pub struct AdamW {
    params: Vec<Param>,
    moments: Vec<Moments>,
    pub config: AdamWConfig,
    step: u64,
}

impl AdamW {
    pub fn new(params: Vec<Param>, config: AdamWConfig) -> Self {
        let moments = params
            .iter()
            .map(|p| Moments {
                m: ArrayD::zeros(IxDyn(&p.shape())),
                v: ArrayD::zeros(IxDyn(&p.shape())),
            })
            .collect();
        Self {
            params,
            moments,
            config,
            step: 0,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    pub fn restore(&mut self, step: u64, moments: Vec<Moments>) {
        assert_eq!(moments.len(), self.params.len());
        for (p, m) in self.params.iter().zip(&moments) {
            assert_eq!(m.m.shape(), p.shape().as_slice());
        }
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update given gradients aligned with `params()`.
    pub fn step(&mut self, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), self.params.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, st), g) in self.params.iter().zip(self.moments.iter_mut()).zip(grads) {
            let mut value = p.value().to_owned();
            Zip::from(&mut value)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *w -= c.lr * c.weight_decay * *w;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                });
            p.set(value);
        }
    }
}

/// Halves (by `factor`) the learning rate after `patience` epochs without a
/// relative improvement of `threshold` in the monitored value (mode: min).
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOnPlateau {
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            threshold: 1e-4,
            min_lr: 0.0,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's metric; returns the multiplier to apply to the
    /// learning rates (1.0 when unchanged).
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad_epochs = 0;
            return 1.0;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return self.factor;
        }
        1.0
    }

    pub fn apply(&self, opt: &mut AdamW, multiplier: f64) {
        opt.config.lr = (opt.config.lr * multiplier).max(self.min_lr);
    }
}
