//! Differentiable operations.
//!
//! Every backward rule is written in terms of other differentiable ops, so a
//! backward pass run with `create_graph` can itself be differentiated.

use ndarray::{ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn, Slice, Zip};

use crate::tensor::Tensor;

/// Sums `a` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to(a: ArrayViewD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.shape() == shape {
        return a.to_owned();
    }
    let mut r = a.to_owned();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if s == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(r.shape(), shape, "cannot reduce to target shape");
    r
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.value().broadcast(IxDyn(&shape)).unwrap();
    let bv = b.value().broadcast(IxDyn(&shape)).unwrap();
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
    a.value().map(|&x| f(x))
}

impl Tensor {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = zip_broadcast(self, other, |x, y| x + y);
        Tensor::from_op(v, "add", vec![self.clone(), other.clone()], |ins, _, g| {
            vec![
                Some(g.sum_to(ins[0].shape())),
                Some(g.sum_to(ins[1].shape())),
            ]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = zip_broadcast(self, other, |x, y| x - y);
        Tensor::from_op(v, "sub", vec![self.clone(), other.clone()], |ins, _, g| {
            vec![
                Some(g.sum_to(ins[0].shape())),
                Some(g.neg().sum_to(ins[1].shape())),
            ]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = zip_broadcast(self, other, |x, y| x * y);
        Tensor::from_op(v, "mul", vec![self.clone(), other.clone()], |ins, _, g| {
            let ga = ins[0]
                .requires_grad()
                .then(|| g.mul(&ins[1]).sum_to(ins[0].shape()));
            let gb = ins[1]
                .requires_grad()
                .then(|| g.mul(&ins[0]).sum_to(ins[1].shape()));
            vec![ga, gb]
        })
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = zip_broadcast(self, other, |x, y| x / y);
        Tensor::from_op(v, "div", vec![self.clone(), other.clone()], |ins, out, g| {
            let ga = ins[0]
                .requires_grad()
                .then(|| g.div(&ins[1]).sum_to(ins[0].shape()));
            let gb = ins[1]
                .requires_grad()
                .then(|| g.mul(out).div(&ins[1]).neg().sum_to(ins[1].shape()));
            vec![ga, gb]
        })
    }

    // ---- scalar forms -------------------------------------------------------

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(map(self, |x| -x), "neg", vec![self.clone()], |_, _, g| {
            vec![Some(g.neg())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(map(self, |x| x + s), "add_scalar", vec![self.clone()], |_, _, g| {
            vec![Some(g.clone())]
        })
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(
            map(self, |x| x * s),
            "mul_scalar",
            vec![self.clone()],
            move |_, _, g| vec![Some(g.mul_scalar(s))],
        )
    }

    /// Division by a scalar (not multiplication by its reciprocal), so
    /// `x.div_scalar(x0)` at `x == x0` yields exactly one.
    pub fn div_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(
            map(self, |x| x / s),
            "div_scalar",
            vec![self.clone()],
            move |_, _, g| vec![Some(g.div_scalar(s))],
        )
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(map(self, f64::exp), "exp", vec![self.clone()], |_, out, g| {
            vec![Some(g.mul(out))]
        })
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(map(self, f64::ln), "ln", vec![self.clone()], |ins, _, g| {
            vec![Some(g.div(&ins[0]))]
        })
    }

    /// Square root; the gradient at zero is taken as zero.
    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(map(self, f64::sqrt), "sqrt", vec![self.clone()], |_, out, g| {
            vec![Some(g.mul(&out.recip_or_zero()).mul_scalar(0.5))]
        })
    }

    /// `1/x`, with zero mapped to zero.
    pub fn recip_or_zero(&self) -> Tensor {
        let v = map(self, |x| if x == 0.0 { 0.0 } else { 1.0 / x });
        Tensor::from_op(v, "recip_or_zero", vec![self.clone()], |_, out, g| {
            vec![Some(g.mul(&out.square()).neg())]
        })
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(map(self, f64::tanh), "tanh", vec![self.clone()], |_, out, g| {
            let d = out.square().neg().add_scalar(1.0);
            vec![Some(g.mul(&d))]
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = map(self, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Tensor::from_op(v, "sigmoid", vec![self.clone()], |_, out, g| {
            let d = out.mul(&out.neg().add_scalar(1.0));
            vec![Some(g.mul(&d))]
        })
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Tensor {
        let v = map(self, |x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        Tensor::from_op(v, "softplus", vec![self.clone()], |ins, _, g| {
            vec![Some(g.mul(&ins[0].sigmoid()))]
        })
    }

    pub fn relu(&self) -> Tensor {
        // NaN must propagate, which `f64::max` would hide.
        Tensor::from_op(map(self, |x| if x < 0.0 { 0.0 } else { x }), "relu", vec![self.clone()], |ins, _, g| {
            let mask = Tensor::constant(map(&ins[0], |x| if x > 0.0 { 1.0 } else { 0.0 }));
            vec![Some(g.mul(&mask))]
        })
    }

    /// Tanh approximation of GELU, built from differentiable pieces.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let inner = self
            .add(&self.square().mul(self).mul_scalar(0.044715))
            .mul_scalar(C);
        self.mul(&inner.tanh().add_scalar(1.0)).mul_scalar(0.5)
    }

    // ---- shape ---------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value()
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape))
            .to_owned();
        let orig = self.shape().to_vec();
        Tensor::from_op(v, "reshape", vec![self.clone()], move |_, _, g| {
            vec![Some(g.reshape(&orig))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let v = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(v, "permute", vec![self.clone()], move |_, _, g| {
            vec![Some(g.permute(&inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Tensor {
        let n = self.ndim();
        assert!(n >= 2);
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(&axes)
    }

    pub fn unsqueeze(&self, axis: usize) -> Tensor {
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        let orig = self.shape().to_vec();
        Tensor::from_op(v, "broadcast_to", vec![self.clone()], move |_, _, g| {
            vec![Some(g.sum_to(&orig))]
        })
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = reduce_to(self.value().view(), shape);
        let orig = self.shape().to_vec();
        Tensor::from_op(v, "sum_to", vec![self.clone()], move |_, _, g| {
            vec![Some(g.broadcast_to(&orig))]
        })
    }

    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().div_scalar(n)
    }

    /// Sum over `axis`, keeping it with length one.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let mut s = self.shape().to_vec();
        s[axis] = 1;
        self.sum_to(&s)
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).div_scalar(n)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let full = self.shape()[axis];
        let orig = self.shape().to_vec();
        Tensor::from_op(v, "narrow", vec![self.clone()], move |_, _, g| {
            let mut parts = Vec::new();
            if start > 0 {
                let mut s = orig.clone();
                s[axis] = start;
                parts.push(Tensor::zeros(&s));
            }
            parts.push(g.clone());
            if start + len < full {
                let mut s = orig.clone();
                s[axis] = full - start - len;
                parts.push(Tensor::zeros(&s));
            }
            vec![Some(Tensor::concat(&parts, axis))]
        })
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .unwrap_or_else(|e| panic!("concat along {axis}: {e}"));
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(v, "concat", parts.to_vec(), move |ins, _, g| {
            let mut start = 0;
            lens.iter()
                .zip(ins)
                .map(|(&l, input)| {
                    let r = input.requires_grad().then(|| g.narrow(axis, start, l));
                    start += l;
                    r
                })
                .collect()
        })
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[M, K] x [K, N]` or batched `[B, M, K] x [B, K, N]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = match (self.ndim(), other.ndim()) {
            (2, 2) => {
                let a = as2(self.value().view());
                let b = as2(other.value().view());
                a.dot(&b).into_dyn()
            }
            (3, 3) => {
                let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
                let (bs2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
                assert!(bs == bs2 && k == k2, "bmm {:?} x {:?}", self.shape(), other.shape());
                let a = self.value().view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let b = other.value().view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
                for i in 0..bs {
                    ndarray::linalg::general_mat_mul(
                        1.0,
                        &a.index_axis(Axis(0), i),
                        &b.index_axis(Axis(0), i),
                        0.0,
                        &mut out.index_axis_mut(Axis(0), i),
                    );
                }
                out.into_dyn()
            }
            _ => panic!("matmul {:?} x {:?}", self.shape(), other.shape()),
        };
        Tensor::from_op(v, "matmul", vec![self.clone(), other.clone()], |ins, _, g| {
            let ga = ins[0].requires_grad().then(|| g.matmul(&ins[1].t()));
            let gb = ins[1].requires_grad().then(|| ins[0].t().matmul(g));
            vec![ga, gb]
        })
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul_last(&self, w: &Tensor) -> Tensor {
        let shape = self.shape().to_vec();
        let k = *shape.last().unwrap();
        let m = self.len() / k.max(1);
        let out = self.reshape(&[m, k]).matmul(w);
        let mut s = shape;
        *s.last_mut().unwrap() = w.shape()[1];
        out.reshape(&s)
    }

    // ---- composites ----------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let n = self.ndim();
        let max = self
            .value()
            .map_axis(Axis(n - 1), |row| {
                row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            })
            .insert_axis(Axis(n - 1));
        let shifted = self.sub(&Tensor::constant(max));
        let e = shifted.exp();
        e.div(&e.sum_axis_keep(n - 1))
    }

    /// Per-row Euclidean norm over all non-leading axes: `[N, ...] -> [N]`.
    pub fn row_norm(&self) -> Tensor {
        let n = self.shape()[0];
        let flat = self.reshape(&[n, self.len() / n.max(1)]);
        flat.square().sum_to(&[n, 1]).reshape(&[n]).sqrt()
    }

    // ---- convolution helpers -------------------------------------------------

    /// Patch extraction for NHWC input: `[N, H, W, C] -> [N, OH, OW, KH*KW*C]`,
    /// patch layout `(ki, kj, c)`.
    pub fn unfold2d(&self, kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Tensor {
        let geom = ConvGeom::new(self.shape(), kernel, stride, pad);
        let v = unfold_raw(self.value().view(), &geom);
        Tensor::from_op(v, "unfold2d", vec![self.clone()], move |_, _, g| {
            vec![Some(g.fold2d(&geom))]
        })
    }

    fn fold2d(&self, geom: &ConvGeom) -> Tensor {
        let v = fold_raw(self.value().view(), geom);
        let geom = *geom;
        Tensor::from_op(v, "fold2d", vec![self.clone()], move |_, _, g| {
            vec![Some(g.unfold2d(geom.kernel, geom.stride, geom.pad))]
        })
    }
}

fn as2(v: ArrayViewD<'_, f64>) -> ArrayView2<'_, f64> {
    v.into_dimensionality::<ndarray::Ix2>().unwrap()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvGeom {
    fn new(shape: &[usize], kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        assert_eq!(shape.len(), 4, "unfold2d expects NHWC input, got {shape:?}");
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(h + 2 * pad.0 >= kernel.0 && w + 2 * pad.1 >= kernel.1, "kernel larger than input");
        let oh = (h + 2 * pad.0 - kernel.0) / stride.0 + 1;
        let ow = (w + 2 * pad.1 - kernel.1) / stride.1 + 1;
        Self { n, h, w, c, oh, ow, kernel, stride, pad }
    }

    pub(crate) fn out_hw(&self) -> (usize, usize) {
        (self.oh, self.ow)
    }
}

fn unfold_raw(x: ArrayViewD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let x = x.as_standard_layout();
    let src = x.as_slice().unwrap();
    let (kh, kw) = g.kernel;
    let patch = kh * kw * g.c;
    let mut out = vec![0.0; g.n * g.oh * g.ow * patch];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = ((n * g.oh + oy) * g.ow + ox) * patch;
                for ki in 0..kh {
                    let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let s = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let d = base + (ki * kw + kj) * g.c;
                        out[d..d + g.c].copy_from_slice(&src[s..s + g.c]);
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.oh, g.ow, patch]), out).unwrap()
}

fn fold_raw(cols: ArrayViewD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let (kh, kw) = g.kernel;
    let patch = kh * kw * g.c;
    let mut out = vec![0.0; g.n * g.h * g.w * g.c];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = ((n * g.oh + oy) * g.ow + ox) * patch;
                for ki in 0..kh {
                    let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let s = base + (ki * kw + kj) * g.c;
                        for c in 0..g.c {
                            out[d + c] += src[s + c];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.h, g.w, g.c]), out).unwrap()
}

/// Output spatial size of a convolution.
pub fn conv_out_hw(h: usize, w: usize, kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> (usize, usize) {
    ConvGeom::new(&[1, h, w, 1], kernel, stride, pad).out_hw()
}
