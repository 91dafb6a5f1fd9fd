//! Reusable check suites shared between the focused integration tests and
//! the acceptance runner.

use cloudifier::graph::{build_network, Network, NetworkConfig};
use cloudifier::tensor::ops;
use cloudifier::tensor::tape::GradTape;
use cloudifier::tensor::{
    BatchNormParams, ConvParams, LabelMap, Mode, Padding, Real, Shape, Tensor,
};

use super::*;

pub const GRAD_TOL: Real = 1e-3;

/// Values in +-[0.1, 1.1] keep ReLU kinks farther than the FD step from 0.
pub fn rand_tensor_off_zero(shape: Shape, seed: u64) -> Tensor {
    let data = rand_vec(shape.count(), seed, 1.0)
        .into_iter()
        .map(|v| v + if v >= 0.0 { 0.1 } else { -0.1 })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn conv2d_gradient_suite() {
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
            check_grad(&format!("conv2d case {i}"), &inputs, wrt, GRAD_TOL, build);
        }
    }
}

pub fn depthwise_separable_gradient_suite() {
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
            check_grad(&format!("ds_conv case {i}"), &inputs, wrt, GRAD_TOL, build);
        }
    }
}

pub fn conv2d_transpose_gradient_suite() {
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
            check_grad(&format!("conv2d_transpose case {i}"), &inputs, wrt, GRAD_TOL, build);
        }
    }
}

pub fn batch_norm_gradient_suite() {
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
            check_grad(&format!("batch_norm case {i}"), &inputs, wrt, GRAD_TOL, build);
        }
    }
}

pub fn elementwise_gradient_suite() {
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
        check_grad(&format!("relu case {i}"), &inputs, 0, GRAD_TOL, |tape, ins| {
            ops::relu(tape, &ins[0]).unwrap()
        });

        let inputs = vec![rand_tensor(shape, seed + 1), rand_tensor(shape, seed + 2)];
        for wrt in 0..2 {
            check_grad(&format!("add case {i}"), &inputs, wrt, GRAD_TOL, |tape, ins| {
                ops::add(tape, &ins[0], &ins[1]).unwrap()
            });
        }

        let other = Shape::nhwc(shape.n(), shape.h(), shape.w(), 3);
        let inputs = vec![rand_tensor(shape, seed + 3), rand_tensor(other, seed + 4)];
        for wrt in 0..2 {
            check_grad(&format!("concat case {i}"), &inputs, wrt, GRAD_TOL, |tape, ins| {
                ops::concat_channels(tape, &[&ins[0], &ins[1]]).unwrap()
            });
        }
    }
}

pub fn softmax_loss_gradient_suite() {
    // Small pixel counts keep the 1/(N*H*W)-normalized gradients well above
    // the 32-bit finite-difference noise floor.
    let shapes = [
        Shape::nhwc(1, 2, 2, 4),
        Shape::nhwc(2, 1, 2, 3),
        Shape::nhwc(1, 3, 2, 5),
        Shape::nhwc(2, 2, 1, 2),
        Shape::nhwc(1, 2, 3, 6),
    ];
    for (i, &shape) in shapes.iter().enumerate() {
        let seed = 6000 + 10 * i as u64;
        let fibers = shape.n() * shape.h() * shape.w();
        let labels: Vec<u16> = (0..fibers).map(|f| (f * 13 % shape.c()) as u16).collect();
        let lm = LabelMap::from_vec(shape.n(), shape.h(), shape.w(), labels).unwrap();
        let inputs = vec![rand_tensor(shape, seed)];
        let lm2 = lm.clone();
        check_grad(&format!("softmax+nll case {i}"), &inputs, 0, GRAD_TOL, move |tape, ins| {
            let probs = ops::softmax_per_fiber(tape, &ins[0]).unwrap();
            ops::dense_nll_loss(tape, &probs, &lm2).unwrap()
        });
    }
    for (i, (&shape, gamma)) in shapes.iter().zip([2.0 as Real, 0.5, 1.0, 5.0, 2.0]).enumerate() {
        let seed = 7000 + 10 * i as u64;
        let fibers = shape.n() * shape.h() * shape.w();
        let labels: Vec<u16> = (0..fibers).map(|f| (f * 11 % shape.c()) as u16).collect();
        let lm = LabelMap::from_vec(shape.n(), shape.h(), shape.w(), labels).unwrap();
        let weights: Vec<Real> = (0..shape.c()).map(|c| 0.5 + 0.25 * c as Real).collect();
        let inputs = vec![rand_tensor(shape, seed)];
        check_grad(&format!("softmax+focal case {i}"), &inputs, 0, GRAD_TOL, move |tape, ins| {
            let probs = ops::softmax_per_fiber(tape, &ins[0]).unwrap();
            ops::focal_dense_loss(tape, &probs, &lm, gamma, Some(&weights)).unwrap()
        });
    }
}

/// All per-primitive finite-difference checks.
pub fn primitive_gradient_suite() {
    conv2d_gradient_suite();
    depthwise_separable_gradient_suite();
    conv2d_transpose_gradient_suite();
    batch_norm_gradient_suite();
    elementwise_gradient_suite();
    softmax_loss_gradient_suite();
}

/// End-to-end finite differences through the micro network on >= 50 sampled
/// parameters, vector relative error <= 1e-2. See tests/network.rs for the
/// kink-filtering rationale.
pub fn micro_end_to_end_gradient_check() {
    let classes = 4;
    let mut net = build_network(NetworkConfig::micro(classes).with_seed(33)).unwrap();
    let shape = Shape::nhwc(1, 8, 8, 3);
    let x = Tensor::from_vec(
        shape,
        rand_vec(shape.count(), 404, 0.5).into_iter().map(|v| v + 0.5).collect(),
    )
    .unwrap();
    let labels =
        LabelMap::from_vec(1, 8, 8, (0..64).map(|f| (f * 31 % classes) as u16).collect()).unwrap();

    let mut tape = GradTape::new();
    let logits = net.forward(&mut tape, &x, Mode::Train).unwrap();
    let probs = ops::softmax_per_fiber(&mut tape, &logits).unwrap();
    let loss = ops::dense_nll_loss(&mut tape, &probs, &labels).unwrap();
    let grads = tape.backward(&loss).unwrap();
    drop(tape);

    let params = net.parameters();
    let max_g = params
        .iter()
        .filter_map(|p| grads.get(p))
        .flat_map(|g| g.iter().map(|v| v.abs()))
        .fold(0.0, Real::max);
    let floor = (0.15 * max_g).max(0.05);
    let mut candidates: Vec<(usize, usize, Real)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        if let Some(g) = grads.get(p) {
            for (ei, &gv) in g.iter().enumerate() {
                if gv.abs() >= floor {
                    candidates.push((pi, ei, gv));
                }
            }
        }
    }
    assert!(candidates.len() >= 80, "only {} candidates above the noise floor", candidates.len());

    let loss_of = |net: &Network| -> Real {
        let mut tape = GradTape::disabled();
        let logits = net.forward(&mut tape, &x, Mode::Train).unwrap();
        let probs = ops::softmax_per_fiber(&mut tape, &logits).unwrap();
        ops::dense_nll_loss(&mut tape, &probs, &labels).unwrap().item()
    };

    let eps: Real = if cfg!(feature = "f64") { FD_EPS } else { 2e-3 };
    let stride = (candidates.len() / 80).max(1);
    let mut analytic_v = Vec::new();
    let mut fd_v = Vec::new();
    let mut cursor = 0usize;
    while analytic_v.len() < 50 && cursor < candidates.len() {
        let (pi, ei, analytic) = candidates[(cursor * stride) % candidates.len()];
        cursor += 1;
        let base = net.parameters()[pi].data()[ei];
        let mut eval = |v: Real, net: &mut Network| -> Real {
            net.parameters_mut()[pi].data_mut()[ei] = v;
            loss_of(net)
        };
        let d_full = (eval(base + eps, &mut net) - eval(base - eps, &mut net)) / (2.0 * eps);
        let d_half = (eval(base + eps / 2.0, &mut net) - eval(base - eps / 2.0, &mut net)) / eps;
        net.parameters_mut()[pi].data_mut()[ei] = base;
        if (d_full - d_half).abs() > (0.005 * analytic.abs()).max(2.5e-3) {
            continue; // ReLU kink inside the probe interval
        }
        let rel = (analytic - d_half).abs() / analytic.abs().max(d_half.abs()).max(1e-12);
        assert!(
            rel <= 5e-2,
            "param {pi}[{ei}]: analytic {analytic:.6} vs fd {d_half:.6}, rel {rel:.3e} \
             (single element far outside rounding noise: wrong backward rule)"
        );
        analytic_v.push(analytic);
        fd_v.push(d_half);
    }
    assert!(analytic_v.len() >= 50, "only {} checkable parameters", analytic_v.len());
    let err = rel_vec_error(&analytic_v, &fd_v);
    assert!(err <= 1e-2, "end-to-end gradient vector relative error {err:.3e} > 1e-2");
}

/// Brute-force oracles for the convolution family, tolerance 1e-5 absolute.
pub fn conv_oracle_suite() {
    // conv2d
    let cases = [
        (Shape::nhwc(2, 9, 9, 4), (5, 5), 6, 2, true),
        (Shape::nhwc(1, 7, 7, 3), (3, 3), 4, 1, true),
        (Shape::nhwc(2, 8, 6, 2), (3, 3), 5, 2, true),
        (Shape::nhwc(1, 9, 9, 6), (5, 5), 2, 3, true),
        (Shape::nhwc(2, 6, 9, 3), (1, 1), 7, 1, true),
        (Shape::nhwc(1, 9, 8, 2), (3, 3), 3, 1, false),
        (Shape::nhwc(2, 9, 9, 6), (5, 5), 4, 2, false),
    ];
    for (i, &(xs, (kh, kw), co, stride, same)) in cases.iter().enumerate() {
        let seed = 100 + i as u64;
        let x = rand_tensor(xs, seed);
        let ks = Shape::nhwc(kh, kw, xs.c(), co);
        let k = rand_tensor(ks, seed + 50);
        let bias = Tensor::from_vec(Shape::nhwc(1, 1, 1, co), rand_vec(co, seed + 90, 1.0)).unwrap();
        let padding = if same { Padding::Same } else { Padding::Valid };
        let p = ConvParams::new(k.clone(), Some(bias.clone()), stride, padding).unwrap();
        let mut tape = GradTape::disabled();
        let y = ops::conv2d(&mut tape, &x, &p).unwrap();
        let (want, oh, ow) = conv2d_oracle(x.data(), xs, k.data(), ks, Some(bias.data()), stride, same);
        assert_eq!(y.shape(), Shape::nhwc(xs.n(), oh, ow, co), "conv case {i}");
        let diff = max_abs_diff(y.data(), &want);
        assert!(diff < 1e-5, "conv case {i}: max |diff| = {diff:e}");
    }

    // depthwise separable
    let cases = [
        (Shape::nhwc(1, 8, 8, 3), (3, 3), 5, 1),
        (Shape::nhwc(2, 6, 6, 4), (3, 3), 3, 2),
        (Shape::nhwc(1, 7, 5, 2), (5, 5), 4, 1),
        (Shape::nhwc(2, 9, 9, 6), (3, 3), 6, 2),
        (Shape::nhwc(1, 5, 9, 3), (1, 1), 2, 1),
    ];
    for (i, &(xs, (kh, kw), co, stride)) in cases.iter().enumerate() {
        let seed = 300 + i as u64;
        let x = rand_tensor(xs, seed);
        let dws = Shape::nhwc(kh, kw, xs.c(), 1);
        let pws = Shape::nhwc(1, 1, xs.c(), co);
        let dw = rand_tensor(dws, seed + 40);
        let pw = rand_tensor(pws, seed + 60);
        let bias = Tensor::from_vec(Shape::nhwc(1, 1, 1, co), rand_vec(co, seed + 80, 1.0)).unwrap();
        let mut tape = GradTape::disabled();
        let y = ops::depthwise_separable_conv2d(&mut tape, &x, &dw, &pw, Some(&bias), stride).unwrap();
        let want = depthwise_separable_oracle(
            x.data(),
            xs,
            dw.data(),
            dws,
            pw.data(),
            pws,
            Some(bias.data()),
            stride,
        );
        let diff = max_abs_diff(y.data(), &want);
        assert!(diff < 1e-5, "ds case {i}: max |diff| = {diff:e}");
    }

    // transposed
    let cases = [
        (Shape::nhwc(1, 4, 4, 2), (4, 4), 3, 2),
        (Shape::nhwc(2, 3, 3, 3), (2, 2), 2, 2),
        (Shape::nhwc(1, 2, 2, 2), (8, 8), 4, 4),
        (Shape::nhwc(1, 5, 4, 3), (3, 3), 2, 1),
        (Shape::nhwc(2, 3, 4, 1), (6, 6), 3, 3),
    ];
    for (i, &(xs, (kh, kw), ca, stride)) in cases.iter().enumerate() {
        let seed = 500 + i as u64;
        let x = rand_tensor(xs, seed);
        let ks = Shape::nhwc(kh, kw, ca, xs.c());
        let k = rand_tensor(ks, seed + 30);
        let mut tape = GradTape::disabled();
        let y = ops::conv2d_transpose(&mut tape, &x, &k, stride).unwrap();
        let want = deconv_oracle(x.data(), xs, k.data(), ks, stride);
        let diff = max_abs_diff(y.data(), &want);
        assert!(diff < 1e-5, "deconv case {i}: max |diff| = {diff:e}");
    }
}

/// <conv(x), y> = <x, deconv(y)> with shared kernel and stride, 1e-4 relative.
pub fn adjointness_suite() {
    let cases = [
        (Shape::nhwc(1, 6, 6, 3), (3, 3), 4, 1),
        (Shape::nhwc(2, 8, 8, 2), (3, 3), 3, 2),
        (Shape::nhwc(1, 8, 4, 4), (5, 5), 2, 2),
        (Shape::nhwc(1, 9, 9, 2), (5, 5), 5, 3),
        (Shape::nhwc(2, 4, 6, 1), (1, 1), 3, 2),
    ];
    for (i, &(xs, (kh, kw), co, stride)) in cases.iter().enumerate() {
        let seed = 700 + i as u64;
        let x = rand_tensor(xs, seed);
        let ks = Shape::nhwc(kh, kw, xs.c(), co);
        let k = rand_tensor(ks, seed + 20);
        let p = ConvParams::new(k.clone(), None, stride, Padding::Same).unwrap();
        let mut tape = GradTape::disabled();
        let cx = ops::conv2d(&mut tape, &x, &p).unwrap();
        let y = rand_tensor(cx.shape(), seed + 70);
        let ty = ops::conv2d_transpose(&mut tape, &y, &k, stride).unwrap();
        assert_eq!(ty.shape(), xs, "case {i}: adjoint must map back to the input space");
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-4, "case {i}: <conv(x),y> = {lhs:.6} vs <x,deconv(y)> = {rhs:.6}, rel {rel:e}");
    }
}

/// Share of consistent widget centers under rotation 10 deg, shift (5, -3),
/// over `scenes` random scenes. Returns (checked, consistent).
pub fn center_consistency_counts(scenes: u64) -> (usize, usize) {
    use cloudifier::augment::{warp_observation, AffineMap, GeoParams};
    use cloudifier::scene::{generate_observation, GenConfig, Granularity};

    let params = GeoParams { rotation_deg: 10.0, shift: (5.0, -3.0), scale: 1.0, flip_horizontal: false };
    let mut cfg = GenConfig::new(4242);
    cfg.size = 96;
    cfg.granularity = Granularity::Coarse;

    let mut checked = 0usize;
    let mut consistent = 0usize;
    for index in 0..scenes {
        let scene = generate_observation(&cfg, index).expect("scene");
        let obs = &scene.observation;
        let warped = warp_observation(obs, &params).expect("warp");
        let map = AffineMap::forward(&params, obs.width, obs.height);
        for widget in &scene.widgets {
            let (bx, by, bw, bh) = widget.bbox;
            if bw == 0 || bh == 0 {
                continue;
            }
            let (cx, cy) = (bx as f64 + bw as f64 / 2.0, by as f64 + bh as f64 / 2.0);
            let src_label = obs.label_at(cx.round() as usize, cy.round() as usize);
            if src_label != widget.class.coarse_id {
                continue; // occluded at its center
            }
            let (tx, ty) = map.apply(cx, cy);
            let margin = 5.0;
            if tx < margin || ty < margin || tx > obs.width as f64 - 1.0 - margin || ty > obs.height as f64 - 1.0 - margin {
                continue;
            }
            checked += 1;
            if warped.dense_labels[ty.round() as usize * obs.width + tx.round() as usize] == widget.class.coarse_id {
                consistent += 1;
            }
        }
    }
    (checked, consistent)
}
