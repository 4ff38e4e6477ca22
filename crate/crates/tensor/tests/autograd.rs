use criticvio_tensor::gradcheck::{max_rel_error, numeric_grad};
use criticvio_tensor::ndarray::{ArrayD, IxDyn};
use criticvio_tensor::nn::{randn, Conv2d, LayerNorm, Linear, ParamStore};
use criticvio_tensor::{grad, no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Checks d f(x)/dx against finite differences for a scalar-valued tensor fn.
fn check_unary(shape: &[usize], f: impl Fn(&Tensor) -> Tensor, tol: f64) {
    let mut r = rng();
    let x0 = randn(shape, 1.0, &mut r);
    let x = Tensor::leaf(x0.clone(), true);
    let analytic = grad(&f(&x).sum(), &[x.clone()], false)[0].to_array();
    let numeric = numeric_grad(|a| f(&Tensor::constant(a.clone())).sum().item(), &x0, 1e-6);
    let err = max_rel_error(&analytic, &numeric, 1e-3);
    assert!(err < tol, "relative error {err}");
}

#[test]
fn elementwise_gradients() {
    check_unary(&[3, 4], |x| x.exp(), 1e-6);
    check_unary(&[3, 4], |x| x.square().add_scalar(0.5).ln(), 1e-6);
    check_unary(&[3, 4], |x| x.square().add_scalar(0.1).sqrt(), 1e-6);
    check_unary(&[3, 4], |x| x.tanh(), 1e-6);
    check_unary(&[3, 4], |x| x.sigmoid(), 1e-6);
    check_unary(&[3, 4], |x| x.softplus(), 1e-6);
    check_unary(&[3, 4], |x| x.gelu(), 1e-6);
    check_unary(&[3, 4], |x| x.mul_scalar(3.0).div_scalar(7.0).neg(), 1e-6);
    check_unary(&[3, 4], |x| x.square().add_scalar(1.0).recip_or_zero(), 1e-6);
}

#[test]
fn broadcasting_binary_gradients() {
    let mut r = rng();
    let b0 = randn(&[1, 4], 1.0, &mut r);
    let b = Tensor::constant(b0.clone());
    check_unary(&[3, 4], |x| x.mul(&b).add(&b).sub(x), 1e-6);
    check_unary(&[3, 4], |x| x.div(&b.square().add_scalar(1.0)), 1e-6);
    // gradient to the broadcast operand
    let a0 = randn(&[3, 4], 1.0, &mut r);
    let a = Tensor::constant(a0);
    check_unary(&[4], |x| a.mul(x).add(x).div(&x.square().add_scalar(2.0)), 1e-6);
}

#[test]
fn shape_op_gradients() {
    let w = Tensor::constant(randn(&[2, 3, 4], 1.0, &mut rng()));
    check_unary(&[2, 3, 4], |x| x.permute(&[2, 0, 1]).reshape(&[4, 6]).mul(&w.permute(&[2, 0, 1]).reshape(&[4, 6])), 1e-6);
    check_unary(&[2, 3, 4], |x| x.narrow(2, 1, 2).mul(&w.narrow(2, 0, 2)), 1e-6);
    check_unary(&[2, 3, 4], |x| Tensor::concat(&[x.narrow(1, 2, 1), x.clone(), x.narrow(1, 0, 1)], 1).mul(&Tensor::concat(&[w.narrow(1, 0, 1), w.clone(), w.narrow(1, 1, 1)], 1)), 1e-6);
    check_unary(&[2, 3, 4], |x| x.sum_axis_keep(1).mul(x), 1e-6);
    check_unary(&[3, 4], |x| x.broadcast_to(&[2, 3, 4]).mul(&w), 1e-6);
    check_unary(&[3, 5], |x| x.softmax_last().mul(&Tensor::constant(randn(&[3, 5], 1.0, &mut rng()))), 1e-6);
    check_unary(&[4, 2, 3], |x| x.row_norm(), 1e-6);
}

#[test]
fn matmul_gradients() {
    let mut r = rng();
    let w2 = Tensor::constant(randn(&[4, 5], 1.0, &mut r));
    check_unary(&[3, 4], |x| x.matmul(&w2).square(), 1e-6);
    check_unary(&[3, 4], |x| Tensor::constant(randn(&[5, 3], 1.0, &mut rng())).matmul(x).tanh(), 1e-6);
    let w3 = Tensor::constant(randn(&[2, 4, 3], 1.0, &mut r));
    check_unary(&[2, 3, 4], |x| x.matmul(&w3).square(), 1e-6);
    check_unary(&[2, 3, 4], |x| w3.matmul(x).square(), 1e-6);
    check_unary(&[2, 3, 4], |x| { let y = x.matmul_last(&w2); y.tanh().mul(&y) }, 1e-6);
}

#[test]
fn conv_unfold_is_adjoint_of_fold() {
    // <unfold(x), y> == <x, fold(y)> is what makes the conv backward correct.
    let mut r = rng();
    let x0 = randn(&[2, 5, 6, 3], 1.0, &mut r);
    let x = Tensor::leaf(x0.clone(), true);
    let u = x.unfold2d((3, 3), (2, 2), (1, 1));
    let y = Tensor::constant(randn(u.shape(), 1.0, &mut r));
    let lhs = u.mul(&y).sum();
    let g = grad(&lhs, &[x.clone()], false)[0].to_array();
    let rhs: f64 = (&g * &x0).sum();
    assert!((lhs.item() - rhs).abs() < 1e-10);
}

#[test]
fn conv_and_norm_layers_gradients() {
    let store = ParamStore::new();
    let mut r = rng();
    let conv = Conv2d::new(&store.root().sub("c"), 2, 3, (3, 3), (2, 2), (1, 1), &mut r);
    let ln = LayerNorm::new(&store.root().sub("ln"), 3);
    check_unary(&[2, 5, 7, 2], |x| ln.forward(&conv.forward(x)).gelu(), 1e-5);
    let lin = Linear::new(&store.root().sub("l"), 6, 2, &mut r);
    check_unary(&[3, 6], |x| lin.forward(x).relu().add(&lin.forward(x).sigmoid()), 1e-5);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let store = ParamStore::new();
    let mut r = rng();
    let lin = Linear::new(&store.root().sub("l"), 4, 3, &mut r);
    let ln = LayerNorm::new(&store.root().sub("ln"), 3);
    let x = Tensor::constant(randn(&[5, 4], 1.0, &mut r));
    let loss = |store_w: &ArrayD<f64>| {
        lin.weight.set(store_w.clone());
        ln.forward(&lin.forward(&x)).tanh().square().sum().item()
    };
    let w0 = lin.weight.value().to_owned();
    let numeric = numeric_grad(loss, &w0, 1e-6);
    lin.weight.set(w0);
    let out = ln.forward(&lin.forward(&x)).tanh().square().sum();
    let analytic = grad(&out, &[lin.weight.tensor()], false)[0].to_array();
    assert!(max_rel_error(&analytic, &numeric, 1e-4) < 1e-5);
}

#[test]
fn second_order_gradient_of_gradient_norm() {
    // d/dW of || d/dx f(W, x) ||^2, as used by a gradient penalty.
    let mut r = rng();
    let x0 = randn(&[3, 4], 1.0, &mut r);
    let w0 = randn(&[4, 2], 0.7, &mut r);
    let v = randn(&[2], 1.0, &mut r);
    let penalty = |w: &ArrayD<f64>, create: bool| -> (Tensor, Tensor) {
        let w = Tensor::leaf(w.clone(), true);
        let x = Tensor::leaf(x0.clone(), true);
        let h = x.matmul(&w).gelu().softplus();
        let score = h.mul(&Tensor::constant(v.clone())).sum();
        let gx = &grad(&score, &[x.clone()], create)[0];
        let p = gx.row_norm().add_scalar(-1.0).square().mean();
        (p, w)
    };
    let (p, w) = penalty(&w0, true);
    let analytic = grad(&p, &[w], false)[0].to_array();
    let numeric = numeric_grad(|w| penalty(w, false).0.item(), &w0, 1e-6);
    let err = max_rel_error(&analytic, &numeric, 1e-4);
    assert!(err < 1e-5, "second-order relative error {err}");
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::leaf(ArrayD::ones(IxDyn(&[2])), true);
    let y = no_grad(|| x.exp().mul(&x));
    assert!(!y.requires_grad());
    assert!(y.is_leaf());
    let z = x.exp();
    assert!(z.requires_grad());
    assert!(z.depends_on(&x));
    assert!(!z.detach().depends_on(&x));
}

#[test]
fn unused_inputs_get_zero_gradient() {
    let x = Tensor::leaf(ArrayD::ones(IxDyn(&[2, 2])), true);
    let y = Tensor::leaf(ArrayD::ones(IxDyn(&[3])), true);
    let g = grad(&x.sum(), &[x.clone(), y.clone()], false);
    assert_eq!(g[0].to_array(), ArrayD::ones(IxDyn(&[2, 2])));
    assert_eq!(g[1].to_array(), ArrayD::zeros(IxDyn(&[3])));
}

#[test]
fn sqrt_gradient_at_zero_is_zero() {
    let x = Tensor::leaf(ArrayD::zeros(IxDyn(&[3])), true);
    let g = grad(&x.sqrt().sum(), &[x.clone()], false)[0].to_array();
    assert!(g.iter().all(|v| *v == 0.0));
}
