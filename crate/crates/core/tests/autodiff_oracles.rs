//! Tape gradients and convolution checked against independent references:
//! central differences and a direct nested-loop convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgm_core::{Tape, Tensor, Var};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Direct cross-correlation with zero "same" padding, straight from the
/// definition.
fn reference_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, dilation: usize) -> Tensor<f64> {
    let [bn, cin, h, w] = x.dims4().unwrap();
    let (cout, kk) = (k.shape()[0], k.shape()[2]);
    let pad = (dilation * (kk - 1) / 2) as isize;
    let mut out = Tensor::zeros([bn, cout, h, w]);
    for n in 0..bn {
        for o in 0..cout {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let sy = y + (ky * dilation) as isize - pad;
                                let sx = xx + (kx * dilation) as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + c) * h + sy as usize) * w + sx as usize];
                                let kv = k.data()[((o * cin + c) * kk + ky) * kk + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.data_mut()[((n * cout + o) * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
    }
    out
}

/// Gradient of `f` at `inputs` by central differences with step `h`.
fn numeric_grad(inputs: &[Tensor<f64>], which: usize, h: f64, f: &dyn Fn(&Tape<f64>, &[Var]) -> Var) -> Tensor<f64> {
    let eval = |perturbed: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= h;
        grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
    }
    grad
}

fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn check_op(seed: u64, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&Tape<f64>, &[Var]) -> Var, tol: f64) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_grad(&inputs, i, 1e-5, f);
        let err = max_rel_err(grads.get(*v).unwrap(), &numeric);
        assert!(err <= tol, "seed {seed} input {i}: rel err {err:e}");
    }
}

/// Random weights so the loss depends on every output element differently.
fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = tape.shape(y);
    let w = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let wy = tape.mul(y, w).unwrap();
    tape.mean(wy)
}

#[test]
fn conv_matches_nested_loop_reference_exactly_on_dyadic_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // multiples of 1/64 in [-2, 2]: every product and partial sum is exact in f64
    let mut dyadic = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-128i32..=128) as f64 / 64.0);
    let x = dyadic(&[1, 2, 5, 5]);
    let k = dyadic(&[3, 2, 3, 3]);
    let b = dyadic(&[3]);
    let tape = Tape::new();
    let (xv, kv, bv) = (
        tape.constant(x.clone()),
        tape.constant(k.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d(xv, kv, bv, 2).unwrap();
    assert_eq!(*tape.value(y), reference_conv(&x, &k, &b, 2));
}

#[test]
fn conv_matches_reference_on_random_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for dilation in [1, 2, 4, 8] {
        let x = random_tensor(&mut rng, &[2, 3, 7, 6], 1.0);
        let k = random_tensor(&mut rng, &[4, 3, 3, 3], 1.0);
        let b = random_tensor(&mut rng, &[4], 1.0);
        let tape = Tape::new();
        let (xv, kv, bv) = (
            tape.constant(x.clone()),
            tape.constant(k.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(xv, kv, bv, dilation).unwrap();
        let r = reference_conv(&x, &k, &b, dilation);
        assert!(max_rel_err(&tape.value(y), &r) < 1e-12, "dilation {dilation}");
    }
}

#[test]
fn conv_identity_kernel_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, &[1, 2, 6, 6], 3.0);
    let mut k = Tensor::zeros([2, 2, 3, 3]);
    k.data_mut()[4] = 1.0; // out 0 <- in 0, centre tap
    k.data_mut()[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1
    let tape = Tape::new();
    let y = tape
        .conv2d(
            tape.constant(x.clone()),
            tape.constant(k),
            tape.constant(Tensor::zeros([2])),
            3,
        )
        .unwrap();
    assert_eq!(*tape.value(y), x);
}

#[test]
fn sum_of_product_gradient_is_other_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[2, 3], 1.0);
    let b = random_tensor(&mut rng, &[2, 3], 1.0);
    let tape = Tape::new();
    let (av, bv) = (tape.param(a.clone()), tape.param(b.clone()));
    let prod = tape.mul(av, bv).unwrap();
    let s = tape.scalar_mul(tape.mean(prod), 6.0);
    let grads = tape.backward(s).unwrap();
    let fd = numeric_grad(&[a, b.clone()], 0, 1e-5, &|t, v| {
        let p = t.mul(v[0], v[1]).unwrap();
        t.scalar_mul(t.mean(p), 6.0)
    });
    assert!(max_rel_err(grads.get(av).unwrap(), &b) < 1e-12);
    assert!(max_rel_err(&fd, &b) < 1e-8);
}

#[test]
fn every_op_passes_randomized_gradient_check() {
    const TOL: f64 = 1e-6;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, 2, 3, 3];
        let a = random_tensor(&mut rng, &shape, 2.0);
        let b = random_tensor(&mut rng, &shape, 2.0);

        check_op(
            seed,
            vec![a.clone(), b.clone()],
            &|t, v| weighted_sum(t, t.add(v[0], v[1]).unwrap(), seed),
            TOL,
        );
        check_op(
            seed,
            vec![a.clone(), b.clone()],
            &|t, v| weighted_sum(t, t.sub(v[0], v[1]).unwrap(), seed),
            TOL,
        );
        check_op(
            seed,
            vec![a.clone(), b.clone()],
            &|t, v| weighted_sum(t, t.mul(v[0], v[1]).unwrap(), seed),
            TOL,
        );
        let s = random_tensor(&mut rng, &[], 2.0);
        check_op(
            seed,
            vec![a.clone(), s],
            &|t, v| weighted_sum(t, t.mul(v[0], v[1]).unwrap(), seed),
            TOL,
        );
        check_op(
            seed,
            vec![a.clone()],
            &|t, v| weighted_sum(t, t.scalar_mul(v[0], -1.7), seed),
            TOL,
        );
        check_op(
            seed,
            vec![a.clone()],
            &|t, v| weighted_sum(t, t.one_minus(v[0]), seed),
            TOL,
        );
        check_op(
            seed,
            vec![a.clone()],
            &|t, v| weighted_sum(t, t.sigmoid(v[0]), seed),
            TOL,
        );
        check_op(seed, vec![a.clone()], &|t, v| weighted_sum(t, t.tanh(v[0]), seed), TOL);
        check_op(seed, vec![a.clone()], &|t, v| weighted_sum(t, t.swish(v[0]), seed), TOL);
        let pos = a.map(|x| 0.05 + x.abs() / 2.5);
        check_op(
            seed,
            vec![pos],
            &|t, v| weighted_sum(t, t.mu_law(v[0], 5000.0), seed),
            TOL,
        );
        let c = random_tensor(&mut rng, &[1, 3, 3, 3], 2.0);
        check_op(
            seed,
            vec![a.clone(), c],
            &|t, v| weighted_sum(t, t.concat_channels(v[0], v[1]).unwrap(), seed),
            TOL,
        );
        check_op(
            seed,
            vec![a.clone()],
            &|t, v| weighted_sum(t, t.slice_channels(v[0], 1, 1).unwrap(), seed),
            TOL,
        );
        check_op(seed, vec![a.clone()], &|t, v| t.mean(v[0]), TOL);

        let dilation = [1, 2, 3][seed as usize % 3];
        let x = random_tensor(&mut rng, &[2, 2, 5, 4], 1.0);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3], 1.0);
        let bias = random_tensor(&mut rng, &[3], 1.0);
        check_op(
            seed,
            vec![x.clone(), k, bias.clone()],
            &|t, v| weighted_sum(t, t.conv2d(v[0], v[1], v[2], dilation).unwrap(), seed),
            TOL,
        );
        let k1 = random_tensor(&mut rng, &[3, 2, 1, 1], 1.0);
        check_op(
            seed,
            vec![x, k1, bias],
            &|t, v| weighted_sum(t, t.conv2d(v[0], v[1], v[2], 1).unwrap(), seed),
            TOL,
        );
    }
}

#[test]
fn mean_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[7], 1.0);
    let fd = numeric_grad(&[x], 0, 1e-5, &|t, v| t.mean(v[0]));
    for g in fd.data() {
        assert!((g - 1.0 / 7.0).abs() < 1e-10);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, &[1, 2, 4, 4], 1.0);
    let k = random_tensor(&mut rng, &[2, 2, 3, 3], 1.0);
    let bias = random_tensor(&mut rng, &[2], 1.0);
    let (alpha, beta) = (0.7, -2.3);

    let grads_of = |wa: f64, wb: f64| {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let kv = tape.param(k.clone());
        let bv = tape.param(bias.clone());
        let y = tape.conv2d(xv, kv, bv, 1).unwrap();
        let f = tape.mean(tape.swish(y));
        let g = tape.mean(tape.mul(y, y).unwrap());
        let fa = tape.scalar_mul(f, wa);
        let gb = tape.scalar_mul(g, wb);
        let total = tape.add(fa, gb).unwrap();
        let grads = tape.backward(total).unwrap();
        [xv, kv, bv].map(|v| grads.get(v).unwrap().clone())
    };
    let combined = grads_of(alpha, beta);
    let only_f = grads_of(1.0, 0.0);
    let only_g = grads_of(0.0, 1.0);
    for i in 0..3 {
        let expect = Tensor::new(
            only_f[i].shape(),
            only_f[i]
                .data()
                .iter()
                .zip(only_g[i].data())
                .map(|(f, g)| alpha * f + beta * g)
                .collect(),
        )
        .unwrap();
        assert!(max_rel_err(&combined[i], &expect) < 1e-12);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::from_fn([2, 4, 9, 9], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::<f32>::from_fn([5, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::<f32>::from_fn([5], |_| rng.random_range(-1.0..1.0));
    let run = || {
        let tape = Tape::new();
        let y = tape
            .conv2d(
                tape.constant(x.clone()),
                tape.constant(k.clone()),
                tape.constant(b.clone()),
                2,
            )
            .unwrap();
        let z = tape.swish(y);
        tape.value(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
