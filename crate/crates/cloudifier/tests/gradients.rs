//! Central finite-difference verification of every differentiable primitive,
//! on several random shapes each. The probe loss (softmax + dense NLL over
//! the op output) gives every output element a distinct adjoint, so permuted
//! or mis-scaled backward rules cannot cancel out.

mod common;

use cloudifier::tensor::ops;
use cloudifier::tensor::tape::GradTape;
use cloudifier::tensor::{
    BatchNormParams, ConvParams, LabelMap, Mode, Padding, Real, Shape, Tensor,
};
use common::*;

const TOL: Real = 1e-3;

/// Values in +-[0.1, 1.1] keep ReLU kinks farther than the FD step from 0.
fn rand_tensor_off_zero(shape: Shape, seed: u64) -> Tensor {
    let data = rand_vec(shape.count(), seed, 1.0)
        .into_iter()
        .map(|v| v + if v >= 0.0 { 0.1 } else { -0.1 })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let cases = [
        (Shape::nhwc(1, 4, 4, 2), (3, 3), 3, 1, Padding::Same),
        (Shape::nhwc(2, 5, 5, 3), (3, 3), 2, 2, Padding::Same),
        (Shape::nhwc(1, 5, 4, 2), (1, 1), 4, 1, Padding::Same),
        (Shape::nhwc(1, 6, 6, 1), (5, 5), 3, 2, Padding::Same),
        (Shape::nhwc(1, 5, 5, 2), (3, 3), 2, 1, Padding::Valid),
    ];
    for (i, &(xs, (kh, kw), co, stride, padding)) in cases.iter().enumerate() {
        let seed = 1000 + 10 * i as u64;
        let inputs = vec![
            rand_tensor(xs, seed),
            rand_tensor(Shape::nhwc(kh, kw, xs.c(), co), seed + 1),
            Tensor::from_vec(Shape::nhwc(1, 1, 1, co), rand_vec(co, seed + 2, 1.0)).unwrap(),
        ];
        let build = move |tape: &mut GradTape, ins: &[Tensor]| {
            let p = ConvParams::new(ins[1].clone(), Some(ins[2].clone()), stride, padding).unwrap();
            ops::conv2d(tape, &ins[0], &p).unwrap()
        };
        for wrt in 0..3 {
            check_grad(&format!("conv2d case {i}"), &inputs, wrt, TOL, build);
        }
    }
}

#[test]
fn depthwise_separable_gradients_match_finite_differences() {
    let cases = [
        (Shape::nhwc(1, 4, 4, 3), (3, 3), 4, 1),
        (Shape::nhwc(1, 6, 6, 2), (3, 3), 3, 2),
        (Shape::nhwc(2, 4, 4, 2), (3, 3), 2, 1),
        (Shape::nhwc(1, 5, 5, 4), (5, 5), 3, 1),
        (Shape::nhwc(1, 4, 6, 2), (1, 1), 2, 2),
    ];
    for (i, &(xs, (kh, kw), co, stride)) in cases.iter().enumerate() {
        let seed = 2000 + 10 * i as u64;
        let inputs = vec![
            rand_tensor(xs, seed),
            rand_tensor(Shape::nhwc(kh, kw, xs.c(), 1), seed + 1),
            rand_tensor(Shape::nhwc(1, 1, xs.c(), co), seed + 2),
            Tensor::from_vec(Shape::nhwc(1, 1, 1, co), rand_vec(co, seed + 3, 1.0)).unwrap(),
        ];
        let build = move |tape: &mut GradTape, ins: &[Tensor]| {
            ops::depthwise_separable_conv2d(tape, &ins[0], &ins[1], &ins[2], Some(&ins[3]), stride)
                .unwrap()
        };
        for wrt in 0..4 {
            check_grad(&format!("ds_conv case {i}"), &inputs, wrt, TOL, build);
        }
    }
}

#[test]
fn conv2d_transpose_gradients_match_finite_differences() {
    let cases = [
        (Shape::nhwc(1, 3, 3, 2), (4, 4), 3, 2),
        (Shape::nhwc(1, 2, 2, 3), (2, 2), 2, 2),
        (Shape::nhwc(2, 3, 3, 2), (3, 3), 2, 1),
        (Shape::nhwc(1, 2, 3, 2), (6, 6), 2, 3),
        (Shape::nhwc(1, 4, 4, 1), (1, 1), 3, 1),
    ];
    for (i, &(xs, (kh, kw), ca, stride)) in cases.iter().enumerate() {
        let seed = 3000 + 10 * i as u64;
        let inputs = vec![rand_tensor(xs, seed), rand_tensor(Shape::nhwc(kh, kw, ca, xs.c()), seed + 1)];
        let build = move |tape: &mut GradTape, ins: &[Tensor]| {
            ops::conv2d_transpose(tape, &ins[0], &ins[1], stride).unwrap()
        };
        for wrt in 0..2 {
            check_grad(&format!("conv2d_transpose case {i}"), &inputs, wrt, TOL, build);
        }
    }
}

#[test]
fn batch_norm_train_gradients_match_finite_differences() {
    let cases = [
        Shape::nhwc(2, 3, 3, 2),
        Shape::nhwc(4, 2, 2, 3),
        Shape::nhwc(2, 4, 4, 1),
        Shape::nhwc(3, 3, 2, 4),
        Shape::nhwc(8, 1, 1, 2),
    ];
    for (i, &xs) in cases.iter().enumerate() {
        let seed = 4000 + 10 * i as u64;
        let c = xs.c();
        let inputs = vec![
            rand_tensor(xs, seed),
            Tensor::from_vec(
                Shape::nhwc(1, 1, 1, c),
                rand_vec(c, seed + 1, 0.5).into_iter().map(|v| 1.0 + v).collect(),
            )
            .unwrap(),
            Tensor::from_vec(Shape::nhwc(1, 1, 1, c), rand_vec(c, seed + 2, 0.5)).unwrap(),
        ];
        let build = move |tape: &mut GradTape, ins: &[Tensor]| {
            let mut p = BatchNormParams::new(ins[0].shape().c());
            p.gamma = ins[1].clone();
            p.beta = ins[2].clone();
            ops::batch_norm(tape, &ins[0], &p, Mode::Train).unwrap()
        };
        for wrt in 0..3 {
            check_grad(&format!("batch_norm case {i}"), &inputs, wrt, TOL, build);
        }
    }
}

#[test]
fn relu_add_concat_gradients_match_finite_differences() {
    for (i, &shape) in [
        Shape::nhwc(1, 3, 3, 2),
        Shape::nhwc(2, 2, 4, 3),
        Shape::nhwc(1, 5, 2, 2),
        Shape::nhwc(2, 3, 3, 4),
        Shape::nhwc(1, 4, 4, 2),
    ]
    .iter()
    .enumerate()
    {
        let seed = 5000 + 10 * i as u64;
        let inputs = vec![rand_tensor_off_zero(shape, seed)];
        check_grad(&format!("relu case {i}"), &inputs, 0, TOL, |tape, ins| {
            ops::relu(tape, &ins[0]).unwrap()
        });

        let inputs = vec![rand_tensor(shape, seed + 1), rand_tensor(shape, seed + 2)];
        for wrt in 0..2 {
            check_grad(&format!("add case {i}"), &inputs, wrt, TOL, |tape, ins| {
                ops::add(tape, &ins[0], &ins[1]).unwrap()
            });
        }

        let other = Shape::nhwc(shape.n(), shape.h(), shape.w(), 3);
        let inputs = vec![rand_tensor(shape, seed + 3), rand_tensor(other, seed + 4)];
        for wrt in 0..2 {
            check_grad(&format!("concat case {i}"), &inputs, wrt, TOL, |tape, ins| {
                ops::concat_channels(tape, &[&ins[0], &ins[1]]).unwrap()
            });
        }
    }
}

#[test]
fn softmax_nll_composite_gradient_matches_finite_differences() {
    // Small pixel counts keep the 1/(N*H*W)-normalized gradients well
    // above the 32-bit finite-difference noise floor.
    for (i, &shape) in [
        Shape::nhwc(1, 2, 2, 4),
        Shape::nhwc(2, 1, 2, 3),
        Shape::nhwc(1, 3, 2, 5),
        Shape::nhwc(2, 2, 1, 2),
        Shape::nhwc(1, 2, 3, 6),
    ]
    .iter()
    .enumerate()
    {
        let seed = 6000 + 10 * i as u64;
        let fibers = shape.n() * shape.h() * shape.w();
        let labels: Vec<u16> = (0..fibers).map(|f| (f * 13 % shape.c()) as u16).collect();
        let lm = LabelMap::from_vec(shape.n(), shape.h(), shape.w(), labels).unwrap();
        let inputs = vec![rand_tensor(shape, seed)];
        let lm2 = lm.clone();
        check_grad(&format!("softmax+nll case {i}"), &inputs, 0, TOL, move |tape, ins| {
            let probs = ops::softmax_per_fiber(tape, &ins[0]).unwrap();
            ops::dense_nll_loss(tape, &probs, &lm2).unwrap()
        });
    }
}

#[test]
fn softmax_focal_composite_gradient_matches_finite_differences() {
    for (i, &(shape, gamma)) in [
        (Shape::nhwc(1, 2, 2, 4), 2.0 as Real),
        (Shape::nhwc(2, 1, 2, 3), 0.5),
        (Shape::nhwc(1, 3, 2, 5), 1.0),
        (Shape::nhwc(2, 2, 1, 2), 5.0),
        (Shape::nhwc(1, 2, 3, 6), 2.0),
    ]
    .iter()
    .enumerate()
    {
        let seed = 7000 + 10 * i as u64;
        let fibers = shape.n() * shape.h() * shape.w();
        let labels: Vec<u16> = (0..fibers).map(|f| (f * 11 % shape.c()) as u16).collect();
        let lm = LabelMap::from_vec(shape.n(), shape.h(), shape.w(), labels).unwrap();
        let weights: Vec<Real> = (0..shape.c()).map(|c| 0.5 + 0.25 * c as Real).collect();
        let inputs = vec![rand_tensor(shape, seed)];
        check_grad(&format!("softmax+focal case {i}"), &inputs, 0, TOL, move |tape, ins| {
            let probs = ops::softmax_per_fiber(tape, &ins[0]).unwrap();
            ops::focal_dense_loss(tape, &probs, &lm, gamma, Some(&weights)).unwrap()
        });
    }
}
