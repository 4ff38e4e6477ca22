//! Parameters and the handful of layers the models are built from.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::ops::conv_out_hw;
use crate::tensor::{Data, Tensor};

struct ParamCell {
    name: String,
    leaf: RefCell<Tensor>,
}

/// A named trainable tensor. Handles are shared between the owning layer and
/// its [`ParamStore`].
#[derive(Clone)]
pub struct Param(Rc<ParamCell>);

impl Param {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// Current value as a differentiable leaf.
    pub fn tensor(&self) -> Tensor {
        self.0.leaf.borrow().clone()
    }

    pub fn value(&self) -> Data {
        self.0.leaf.borrow().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.leaf.borrow().shape().to_vec()
    }

    /// Replaces the value. Panics on shape change.
    pub fn set(&self, value: ArrayD<f64>) {
        assert_eq!(value.shape(), self.shape().as_slice(), "param {} shape", self.name());
        *self.0.leaf.borrow_mut() = Tensor::leaf(value, true);
    }

    pub fn numel(&self) -> usize {
        self.0.leaf.borrow().len()
    }
}

/// Ordered collection of parameters with hierarchical names.
#[derive(Default)]
pub struct ParamStore {
    params: RefCell<Vec<Param>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root(&self) -> Path<'_> {
        Path {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        self.params.borrow().clone()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.params.borrow().iter().find(|p| p.name() == name).cloned()
    }

    pub fn numel(&self) -> usize {
        self.params.borrow().iter().map(Param::numel).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.borrow().iter().map(Param::tensor).collect()
    }

    fn register(&self, name: String, value: ArrayD<f64>) -> Param {
        let mut params = self.params.borrow_mut();
        assert!(
            params.iter().all(|p| p.name() != name),
            "duplicate parameter name {name}"
        );
        let p = Param(Rc::new(ParamCell {
            name,
            leaf: RefCell::new(Tensor::leaf(value, true)),
        }));
        params.push(p.clone());
        p
    }
}

/// Naming scope inside a [`ParamStore`].
#[derive(Clone)]
pub struct Path<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Path<'a> {
    pub fn sub(&self, name: impl AsRef<str>) -> Path<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Path {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&self, name: &str, value: ArrayD<f64>) -> Param {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.register(full, value)
    }
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> ArrayD<f64> {
    if bound == 0.0 {
        return ArrayD::zeros(IxDyn(shape));
    }
    let dist = Uniform::new(-bound, bound).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn randn(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Affine map over the last axis.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(fan_in)`.
    pub fn new(path: &Path, fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: path.param("weight", uniform(&[fan_in, fan_out], bound, rng)),
            bias: path.param("bias", uniform(&[fan_out], bound, rng)),
        }
    }

    pub fn zeros(path: &Path, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: path.param("weight", ArrayD::zeros(IxDyn(&[fan_in, fan_out]))),
            bias: path.param("bias", ArrayD::zeros(IxDyn(&[fan_out]))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul_last(&self.weight.tensor()).add(&self.bias.tensor())
    }

    pub fn zero_(&self) {
        self.weight.set(ArrayD::zeros(IxDyn(&self.weight.shape())));
        self.bias.set(ArrayD::zeros(IxDyn(&self.bias.shape())));
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(path: &Path, dim: usize) -> Self {
        Self {
            gamma: path.param("gamma", ArrayD::ones(IxDyn(&[dim]))),
            beta: path.param("beta", ArrayD::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let last = x.ndim() - 1;
        let centered = x.sub(&x.mean_axis_keep(last));
        let var = centered.square().mean_axis_keep(last);
        let normed = centered.div(&var.add_scalar(self.eps).sqrt());
        normed.mul(&self.gamma.tensor()).add(&self.beta.tensor())
    }
}

/// 2-D convolution on NHWC tensors, lowered to patch extraction plus matmul.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        path: &Path,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut dyn RngCore,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        // He-style uniform bound suited to the ReLU stacks using this layer.
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: path.param("weight", uniform(&[fan_in, out_channels], bound, rng)),
            bias: path.param("bias", ArrayD::zeros(IxDyn(&[out_channels]))),
            kernel,
            stride,
            pad,
            out_channels,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        conv_out_hw(h, w, self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let cols = x.unfold2d(self.kernel, self.stride, self.pad);
        let s = cols.shape().to_vec();
        let (n, oh, ow) = (s[0], s[1], s[2]);
        cols.reshape(&[n * oh * ow, s[3]])
            .matmul(&self.weight.tensor())
            .add(&self.bias.tensor())
            .reshape(&[n, oh, ow, self.out_channels])
    }
}

/// Inverted dropout. `rng = None` means evaluation mode (identity).
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut dyn RngCore>) -> Tensor {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = ArrayD::from_shape_simple_fn(IxDyn(x.shape()), || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            x.mul(&Tensor::constant(mask))
        }
        _ => x.clone(),
    }
}

/// True when the two stores share no parameter handle.
pub fn disjoint(a: &ParamStore, b: &ParamStore) -> bool {
    let ids: HashSet<*const ParamCell> = a.params().iter().map(|p| Rc::as_ptr(&p.0)).collect();
    b.params().iter().all(|p| !ids.contains(&Rc::as_ptr(&p.0)))
}

/// Reborrows an optional dropout RNG for one call while keeping it usable.
pub fn reborrow<'s>(rng: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}
