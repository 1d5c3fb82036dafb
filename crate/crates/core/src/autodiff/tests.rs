use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t4<T: Scalar>(shape: [usize; 4], data: Vec<T>) -> Tensor<T> {
    Tensor::new(&shape, data).unwrap()
}

fn random<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

/// Straightforward nested-loop convolution used as reference.
fn conv_reference(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let [b, cin, h, w] = x.dims4().unwrap();
    let cout = wt.shape()[0];
    let mut out = vec![0.0; b * cout * h * w];
    for bi in 0..b {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let sy = y as isize + dy as isize - 1;
                                let sx = xx as isize + dx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += x.data()[((bi * cin + ci) * h + sy as usize) * w + sx as usize]
                                    * wt.data()[((co * cin + ci) * 3 + dy) * 3 + dx];
                            }
                        }
                    }
                    out[((bi * cout + co) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_zero_input_gives_bias() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
    let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 0.3));
    let b = g.leaf(Tensor::new(&[1], vec![0.5]).unwrap());
    let y = g.conv2d(x, w, Some(b)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn conv_zero_weight_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let x = g.leaf(random(&[2, 3, 6, 6], &mut rng));
    let w = g.leaf(Tensor::zeros(&[4, 3, 3, 3]));
    let b = g.leaf(Tensor::zeros(&[4]));
    let y = g.conv2d(x, w, Some(b)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_ones_kernel_on_ramp() {
    // 3×3 neighbourhood of (1,1) in 1..16 row-major: 1+2+3+5+6+7+9+10+11 = 54
    let mut g = Graph::<f32>::new();
    let x = g.leaf(t4([1, 1, 4, 4], (1..=16).map(|v| v as f32).collect()));
    let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None).unwrap();
    assert_eq!(g.value(y).data()[4 + 1], 54.0);
    assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
}

#[test]
fn conv_matches_reference_f64_exactly_shaped() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let x: Tensor<f64> = random(&[1, 2, 8, 8], &mut rng);
        let wt: Tensor<f64> = random(&[3, 2, 3, 3], &mut rng);
        let bias: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expected = conv_reference(&x, &wt, &bias);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.leaf(x), g.leaf(wt));
        let bv = g.leaf(Tensor::new(&[3], bias).unwrap());
        let y = g.conv2d(xv, wv, Some(bv)).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
        }
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None), Err(Error::Config(_))));
    let w5 = g.leaf(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(matches!(g.conv2d(x, w5, None), Err(Error::Config(_))));
}

#[test]
fn conv_rejects_nan() {
    let mut g = Graph::<f32>::new();
    let mut data = vec![0.0f32; 16];
    data[3] = f32::NAN;
    let x = g.leaf(t4([1, 1, 4, 4], data));
    let w = g.leaf(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None), Err(Error::Numeric(_))));
}

fn bn_graph(values: Vec<f64>, gamma: f64, beta: f64) -> (Graph<f64>, Var, BatchNormState<f64>) {
    let n = values.len();
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t4([1, 1, 1, n], values));
    let ga = g.leaf(Tensor::new(&[1], vec![gamma]).unwrap());
    let be = g.leaf(Tensor::new(&[1], vec![beta]).unwrap());
    let mut st = BatchNormState::new(1);
    let y = g.batch_norm(x, ga, be, &mut st, Mode::Train).unwrap();
    (g, y, st)
}

#[test]
fn batch_norm_constant_channel_collapses_to_beta() {
    let (g, y, _) = bn_graph(vec![4.0; 8], 1.0, 3.0);
    assert!(g.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
}

#[test]
fn batch_norm_two_values() {
    let (g, y, st) = bn_graph(vec![1.0, 3.0], 1.0, 0.0);
    let out = g.value(y).data();
    // eps = 1e-5 against variance 1
    let k = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out[0] + k).abs() < 1e-12 && (out[1] - k).abs() < 1e-12);
    assert!((out[0] + 1.0).abs() < 1e-5);
    // running stats: mean 0.9·0 + 0.1·2, var 0.9·1 + 0.1·2 (unbiased)
    assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
    assert!((st.running_var[0] - 1.1).abs() < 1e-12);
    assert_eq!(st.batches_tracked, 1);
}

#[test]
fn batch_norm_eval_is_affine() {
    let mut st = BatchNormState::<f64>::new(1);
    st.batches_tracked = 1;
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t4([1, 1, 1, 3], vec![-2.0, 0.5, 4.0]));
    let ga = g.leaf(Tensor::new(&[1], vec![2.0]).unwrap());
    let be = g.leaf(Tensor::new(&[1], vec![-1.0]).unwrap());
    let y = g.batch_norm(x, ga, be, &mut st, Mode::Eval).unwrap();
    let k = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (o, i) in g.value(y).data().iter().zip([-2.0, 0.5, 4.0]) {
        assert!((o - (2.0 * i * k - 1.0)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_requires_initialized_state() {
    let mut st = BatchNormState::<f32>::new(1);
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
    let ga = g.leaf(Tensor::full(&[1], 1.0));
    let be = g.leaf(Tensor::zeros(&[1]));
    assert!(matches!(g.batch_norm(x, ga, be, &mut st, Mode::Eval), Err(Error::State(_))));
    let one = g.leaf(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(matches!(g.batch_norm(one, ga, be, &mut st, Mode::Train), Err(Error::Config(_))));
}

#[test]
fn leaky_relu_values_and_slope_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(&[3], vec![2.0, -1.0, -3.0]).unwrap().with_grad());
    let y = g.leaky_relu(x, 0.01).unwrap();
    assert_eq!(g.value(y).data()[0], 2.0);
    assert!((g.value(y).data()[1] + 0.01).abs() < 1e-9);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap()[2], 0.01);
}

#[test]
fn max_pool_block_and_constant() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(t4([1, 1, 2, 2], vec![1.0, 2.0, 4.0, 3.0]));
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let c = g.leaf(Tensor::full(&[1, 2, 6, 4], 2.5));
    let yc = g.max_pool2(c).unwrap();
    assert_eq!(g.value(yc).shape(), &[1, 2, 3, 2]);
    assert!(g.value(yc).data().iter().all(|&v| v == 2.5));
    let odd = g.leaf(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(matches!(g.max_pool2(odd), Err(Error::Config(_))));
}

#[test]
fn max_pool_400_halves() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 400, 400]));
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 200, 200]);
}

#[test]
fn max_pool_tie_routes_to_first() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(t4([1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).with_grad());
    let y = g.max_pool2(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_replicates_and_sums_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(t4([1, 1, 1, 1], vec![7.0]).with_grad());
    let y = g.upsample2(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 7.0));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0]);
}

#[test]
fn pool_then_upsample_restores_block_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coarse: Tensor<f32> = random(&[1, 2, 3, 4], &mut rng);
    let mut g = Graph::<f32>::new();
    let c = g.leaf(coarse);
    let fine = g.upsample2(c).unwrap();
    let pooled = g.max_pool2(fine).unwrap();
    let again = g.upsample2(pooled).unwrap();
    assert_eq!(g.value(again).data(), g.value(fine).data());
}

#[test]
fn concat_shapes_slices_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Tensor<f32> = random(&[1, 8, 4, 4], &mut rng);
    let b: Tensor<f32> = random(&[1, 8, 4, 4], &mut rng);
    let mut g = Graph::<f32>::new();
    let (av, bv) = (g.leaf(a.clone().with_grad()), g.leaf(b.clone().with_grad()));
    let c = g.concat_channels(av, bv).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 16, 4, 4]);
    assert_eq!(g.value(c).slice_channels(0, 8).unwrap().data(), a.data());
    assert_eq!(g.value(c).slice_channels(8, 16).unwrap().data(), b.data());

    let weights: Tensor<f32> = random(&[1, 16, 4, 4], &mut rng);
    let wv = g.leaf(weights.clone());
    let prod = g.mul(c, wv).unwrap();
    let s = g.sum(prod).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(av).unwrap(), weights.slice_channels(0, 8).unwrap().data());
    assert_eq!(g.grad(bv).unwrap(), weights.slice_channels(8, 16).unwrap().data());

    let small = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(g.concat_channels(av, small), Err(Error::Config(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let eq = g.leaf(Tensor::full(&[1, 4, 1, 1], 0.3));
    let p = g.softmax_channels(eq).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let s = g.leaf(t4([1, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0]));
    let p = g.softmax_channels(s).unwrap();
    let e = std::f64::consts::E;
    let expected = [e / (e + 3.0), 1.0 / (e + 3.0), 1.0 / (e + 3.0), 1.0 / (e + 3.0)];
    for (a, b) in g.value(p).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((expected[0] - 0.4754).abs() < 1e-4 && (expected[1] - 0.1749).abs() < 1e-4);

    let shifted = g.leaf(t4([1, 4, 1, 1], vec![1001.0, 1000.0, 1000.0, 1000.0]));
    let ps = g.softmax_channels(shifted).unwrap();
    for (a, b) in g.value(ps).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn kl_examples() {
    let target = t4([1, 4, 1, 1], vec![0.5, 0.5, 0.0, 0.0]);
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::full(&[1, 4, 1, 1], 0.25));
    let l = g.kl_loss(&target, p).unwrap();
    assert!((g.item(l) - std::f64::consts::LN_2).abs() < 1e-12);

    let same = g.leaf(target.clone());
    let l0 = g.kl_loss(&target, same).unwrap();
    assert_eq!(g.item(l0), 0.0);

    let onehot = t4([1, 4, 1, 1], vec![0.0, 0.0, 1.0, 0.0]);
    let probs = g.leaf(t4([1, 4, 1, 1], vec![0.1, 0.2, 0.3, 0.4]));
    let l1 = g.kl_loss(&onehot, probs).unwrap();
    assert!((g.item(l1) + 0.3f64.ln()).abs() < 1e-12);

    // exact zero probability is clamped, not infinite
    let zero = g.leaf(t4([1, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0]));
    let lz = g.kl_loss(&onehot, zero).unwrap();
    assert!((g.item(lz) + 1e-12f64.ln()).abs() < 1e-9);
}

#[test]
fn dice_examples() {
    let eps = 1e-5;
    // binary foreground masks on a 1×4×4×4 grid; background is the complement
    let mut gt = vec![0.0f64; 64];
    for px in 0..16 {
        let fg = [px == 5, px == 6 || px == 9, px == 10 || px == 11 || px == 15];
        let mut any = false;
        for (k, &on) in fg.iter().enumerate() {
            if on {
                gt[(k + 1) * 16 + px] = 1.0;
                any = true;
            }
        }
        gt[px] = if any { 0.0 } else { 1.0 };
    }
    let target = t4([1, 4, 4, 4], gt.clone());
    let mut g = Graph::<f64>::new();
    let same = g.leaf(target.clone());
    let l = g.soft_dice_loss(same, &target).unwrap();
    assert!(g.item(l).abs() < 1e-9);

    let mut disjoint = vec![0.0f64; 64];
    for k in 1..4 {
        disjoint[k * 16 + (k - 1)] = 1.0;
    }
    let d = g.leaf(t4([1, 4, 4, 4], disjoint));
    let ld = g.soft_dice_loss(d, &target).unwrap();
    assert!((g.item(ld) - 1.0).abs() < 1e-5);

    let half: Vec<f64> = gt.iter().map(|v| v / 2.0).collect();
    let h = g.leaf(t4([1, 4, 4, 4], half));
    let lh = g.soft_dice_loss(h, &target).unwrap();
    let masses = [1.0, 2.0, 3.0];
    let expected: f64 = masses.iter().map(|m| 1.0 - (m + eps) / (1.25 * m + eps)).sum::<f64>() / 3.0;
    assert!((g.item(lh) - expected).abs() < 1e-12);
    assert!((g.item(lh) - 0.2).abs() < 1e-4);
}

#[test]
fn backward_sum_and_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Tensor<f64> = random(&[2, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone().with_grad());
    let s = g.sum(xv).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone().with_grad());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    for (gr, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*gr, 2.0 * v);
    }
    // second call accumulates
    g.backward(s).unwrap();
    for (gr, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*gr, 4.0 * v);
    }
    g.zero_grad();
    assert!(g.grad(xv).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[2]).with_grad());
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

/// Central finite differences of `Σ w·f(inputs)` (random fixed `w`, reduced
/// in f64) with respect to every element of `inputs[which]`, compared
/// against the tape's gradient of the same weighted sum. Relative error is
/// taken against `max(|analytic|, |numeric|, floor)`.
fn grad_check<T: Scalar>(
    inputs: &[Tensor<T>],
    which: usize,
    h: f64,
    tol: f64,
    floor: f64,
    f: impl Fn(&mut Graph<T>, &[Var]) -> Var,
) {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            t.requires_grad = i == which;
            g.leaf(t)
        })
        .collect();
    let y = f(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights: Tensor<T> = random(g.value(y).shape(), &mut rng);
    let wv = g.leaf(weights.clone());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = g.grad(vars[which]).unwrap().iter().map(|v| v.to_f64()).collect();

    let eval = |pert: &[Tensor<T>]| {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = pert.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&mut g, &vars);
        g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>()
    };
    for i in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let x0 = inputs[which].data()[i].to_f64();
        plus[which].data_mut()[i] = T::from_f64(x0 + h);
        minus[which].data_mut()[i] = T::from_f64(x0 - h);
        let step = plus[which].data()[i].to_f64() - minus[which].data()[i].to_f64();
        let numeric = (eval(&plus) - eval(&minus)) / step;
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        assert!(rel < tol, "element {i}: analytic {a} numeric {numeric} rel {rel}");
    }
}

#[test]
fn gradcheck_conv_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<Tensor<f32>> =
        vec![random(&[2, 2, 5, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)];
    for which in 0..3 {
        grad_check(&inputs, which, 1e-3, 1e-3, 1.0, |g, v| g.conv2d(v[0], v[1], Some(v[2])).unwrap());
    }
}

#[test]
fn gradcheck_batch_norm_f64_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs: Vec<Tensor<f64>> =
        vec![random(&[2, 3, 3, 2], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    for mode in [Mode::Train, Mode::Eval] {
        for which in 0..3 {
            grad_check(&inputs, which, 1e-5, 1e-6, 1e-3, |g, v| {
                let mut st = BatchNormState::new(3);
                st.running_mean = vec![0.1, -0.2, 0.3];
                st.running_var = vec![0.5, 1.5, 2.0];
                st.batches_tracked = 1;
                g.batch_norm(v[0], v[1], v[2], &mut st, mode).unwrap()
            });
        }
    }
}

#[test]
fn gradcheck_softmax_kl_dice_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let scores: Tensor<f64> = random(&[2, 4, 3, 3], &mut rng);
    let raw: Tensor<f64> = random(&[2, 4, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let rv = g.leaf(raw);
    let tv = g.softmax_channels(rv).unwrap();
    let target = g.value(tv).clone();
    grad_check(&[scores.clone()], 0, 1e-5, 1e-6, 1e-3, |g, v| {
        let p = g.softmax_channels(v[0]).unwrap();
        let kl = g.kl_loss(&target, p).unwrap();
        let dice = g.soft_dice_loss(p, &target).unwrap();
        g.add(kl, dice).unwrap()
    });
}
