//! Shared oracles for the integration suites.
//!
//! Everything here recomputes results by an independent route (direct
//! nested-loop summation, zero-stuffing, central finite differences) and must
//! never call back into the kernels it checks.

#![allow(dead_code)]

use cloudifier::tensor::ops;
use cloudifier::tensor::tape::GradTape;
use cloudifier::tensor::{Real, Shape, Tensor};
use rand::Rng;

#[cfg(not(feature = "f64"))]
pub const FD_EPS: Real = 1e-3;
#[cfg(feature = "f64")]
pub const FD_EPS: Real = 1e-6;

pub fn rand_vec(len: usize, seed: u64, scale: Real) -> Vec<Real> {
    let mut rng = cloudifier::rng::stream(seed, 0);
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    Tensor::from_vec(shape, rand_vec(shape.count(), seed, 1.0)).unwrap()
}

/// Direct-summation convolution: six nested loops, f64 accumulation,
/// same-padding pad = (k-1)/2 (or none), output dim = ceil(in/stride)
/// (or (in-k)/stride + 1 for valid).
pub fn conv2d_oracle(
    x: &[Real],
    xs: Shape,
    k: &[Real],
    ks: Shape,
    bias: Option<&[Real]>,
    stride: usize,
    same: bool,
) -> (Vec<Real>, usize, usize) {
    let [n, h, w, ci] = xs.dims();
    let [kh, kw, kci, co] = ks.dims();
    assert_eq!(ci, kci);
    let (oh, ow, py, px) = if same {
        (h.div_ceil(stride), w.div_ceil(stride), (kh - 1) / 2, (kw - 1) / 2)
    } else {
        ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0 as Real; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c_o in 0..co {
                    let mut acc = bias.map_or(0.0f64, |bb| bb[c_o] as f64);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for c_i in 0..ci {
                                let iy = (oy * stride + ky) as isize - py as isize;
                                let ix = (ox * stride + kx) as isize - px as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[xs.index(b, iy as usize, ix as usize, c_i)];
                                let kv = k[((ky * kw + kx) * ci + c_i) * co + c_o];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + c_o] = acc as Real;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Transposed-convolution oracle: zero-stuff the input by the stride, run a
/// full 2D convolution against the (ca, cb) mixing kernel, then crop with
/// offset (k-1)/2 per axis down to (in * stride).
pub fn deconv_oracle(x: &[Real], xs: Shape, k: &[Real], ks: Shape, stride: usize) -> Vec<Real> {
    let [n, h, w, cb] = xs.dims();
    let [kh, kw, ca, kcb] = ks.dims();
    assert_eq!(cb, kcb);
    let (zh, zw) = ((h - 1) * stride + 1, (w - 1) * stride + 1);
    let mut z = vec![0.0 as Real; n * zh * zw * cb];
    for b in 0..n {
        for iy in 0..h {
            for ix in 0..w {
                for c in 0..cb {
                    z[((b * zh + iy * stride) * zw + ix * stride) * cb + c] =
                        x[xs.index(b, iy, ix, c)];
                }
            }
        }
    }
    // Full convolution F[t] = sum_m z[m] * K[t - m], t in [0, z + k - 1)
    let (fh, fw) = (zh + kh - 1, zw + kw - 1);
    let mut full = vec![0.0f64; n * fh * fw * ca];
    for b in 0..n {
        for ty in 0..fh {
            for tx in 0..fw {
                for a in 0..ca {
                    let mut acc = 0.0f64;
                    for my in 0..zh {
                        for mx in 0..zw {
                            let (ky, kx) = (ty as isize - my as isize, tx as isize - mx as isize);
                            if ky < 0 || kx < 0 || ky >= kh as isize || kx >= kw as isize {
                                continue;
                            }
                            for c in 0..cb {
                                let zv = z[((b * zh + my) * zw + mx) * cb + c];
                                let kv = k[((ky as usize * kw + kx as usize) * ca + a) * cb + c];
                                acc += zv as f64 * kv as f64;
                            }
                        }
                    }
                    full[((b * fh + ty) * fw + tx) * ca + a] = acc;
                }
            }
        }
    }
    let (oh, ow) = (h * stride, w * stride);
    let (py, px) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0 as Real; n * oh * ow * ca];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for a in 0..ca {
                    out[((b * oh + oy) * ow + ox) * ca + a] =
                        full[((b * fh + oy + py) * fw + ox + px) * ca + a] as Real;
                }
            }
        }
    }
    out
}

/// Depthwise-separable oracle: per-channel grouped convolution via the direct
/// conv oracle, then a 1x1 mixing stage via the same oracle.
pub fn depthwise_separable_oracle(
    x: &[Real],
    xs: Shape,
    dw: &[Real], // (kh, kw, c, 1)
    dws: Shape,
    pw: &[Real], // (1, 1, c, co)
    pws: Shape,
    bias: Option<&[Real]>,
    stride: usize,
) -> Vec<Real> {
    let [n, h, w, c] = xs.dims();
    let [kh, kw, _, _] = dws.dims();
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut spatial = vec![0.0 as Real; n * oh * ow * c];
    for ch in 0..c {
        // one-channel slice of x and the channel's kernel
        let mut xc = vec![0.0 as Real; n * h * w];
        for b in 0..n {
            for y in 0..h {
                for xcol in 0..w {
                    xc[(b * h + y) * w + xcol] = x[xs.index(b, y, xcol, ch)];
                }
            }
        }
        let kc: Vec<Real> = (0..kh * kw).map(|t| dw[t * c + ch]).collect();
        let (oc, _, _) = conv2d_oracle(
            &xc,
            Shape::nhwc(n, h, w, 1),
            &kc,
            Shape::nhwc(kh, kw, 1, 1),
            None,
            stride,
            true,
        );
        for (fi, &v) in oc.iter().enumerate() {
            spatial[fi * c + ch] = v;
        }
    }
    let (mixed, _, _) = conv2d_oracle(
        &spatial,
        Shape::nhwc(n, oh, ow, c),
        pw,
        pws,
        bias,
        1,
        true,
    );
    mixed
}

pub fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

/// Relative error between gradient vectors: ||a - f|| / max(||a||, ||f||).
pub fn rel_vec_error(a: &[Real], f: &[Real]) -> Real {
    assert_eq!(a.len(), f.len());
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nf = 0.0f64;
    for (&x, &y) in a.iter().zip(f) {
        diff += ((x - y) as f64).powi(2);
        na += (x as f64).powi(2);
        nf += (y as f64).powi(2);
    }
    let denom = na.sqrt().max(nf.sqrt()).max(1e-12);
    (diff.sqrt() / denom) as Real
}

/// Reduce an op output to a scalar through a fixed random-weight sum so every
/// element receives a distinct, sign-varying, O(1) adjoint (keeping the
/// finite-difference signal well above 32-bit rounding noise). Scalar outputs
/// pass through unchanged.
pub fn probe_loss(tape: &mut GradTape, out: &Tensor) -> Tensor {
    if out.shape().count() == 1 {
        return out.clone();
    }
    let weights = rand_vec(out.len(), 0xBEEF ^ out.len() as u64, 1.0);
    ops::weighted_sum(tape, out, &weights).expect("probe weighted sum")
}

/// Analytic-vs-finite-difference check for one input of a forward graph.
///
/// `build` must run the graph from `inputs` to the op output on the given
/// tape. The harness appends the probe, runs backward for the analytic
/// gradient of `inputs[wrt]`, then central-differences every element of that
/// input. Fails the test if the vector relative error exceeds `tol`.
pub fn check_grad(
    name: &str,
    inputs: &[Tensor],
    wrt: usize,
    tol: Real,
    build: impl Fn(&mut GradTape, &[Tensor]) -> Tensor,
) {
    let mut inputs: Vec<Tensor> = inputs.to_vec();
    inputs[wrt] = inputs[wrt].clone().requires_grad(true);

    let mut tape = GradTape::new();
    let out = build(&mut tape, &inputs);
    let loss = probe_loss(&mut tape, &out);
    let grads = tape.backward(&loss).expect("backward");
    let analytic = grads.get(&inputs[wrt]).expect("gradient for checked input").to_vec();

    let base = inputs[wrt].data().to_vec();
    let eval = |vals: &[Real]| -> Real {
        let mut probe_inputs = inputs.clone();
        probe_inputs[wrt] = Tensor::from_vec(probe_inputs[wrt].shape(), vals.to_vec()).unwrap();
        let mut tape = GradTape::disabled();
        let out = build(&mut tape, &probe_inputs);
        probe_loss(&mut tape, &out).item()
    };

    let mut fd = vec![0.0 as Real; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + FD_EPS;
        let up = eval(&probe);
        probe[i] = base[i] - FD_EPS;
        let down = eval(&probe);
        probe[i] = base[i];
        fd[i] = (up - down) / (2.0 * FD_EPS);
    }

    let err = rel_vec_error(&analytic, &fd);
    assert!(
        err <= tol,
        "{name}: gradient mismatch wrt input {wrt}: vector relative error {err:.3e} > {tol:.0e}"
    );
}
