//! Minimal reverse-mode autodiff with the layers, losses and optimizers the
//! network zoo needs.

mod check;
mod graph;
mod layers;
mod optim;
mod tensor;
mod train;

pub use check::{check_model, grad_check, rel_err, rel_err_floor, GradCheck, ModelCheck, DEFAULT_EPS, REL_FLOOR};
pub use graph::{softmax, BatchStats, Graph, Var};
pub use layers::{lstm, Forward, LayerSpec, LossKind, Mode, Model, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
pub use train::{
    batches, eval_loss, train_loop, train_loop_with, train_step, Dataset, EarlyStopper, EpochRecord, History,
    OverfitRule, StopReason, TrainConfig,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed_: u64) -> Tensor {
        let mut rng = seed::rng(seed_);
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    fn proj(len: usize, seed_: u64) -> Vec<f64> {
        random(&[len], seed_ ^ 0xabc).data
    }

    /// Direct nested-loop 3-d cross-correlation on `[N, C, D, H, W]`.
    fn conv3_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
        let (n, c, d, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
        let (o, kd, kh, kw) = (w.shape[0], w.shape[2], w.shape[3], w.shape[4]);
        let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
        let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
        let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
        let mut out = Tensor::zeros(&[n, o, od, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut s = b.data[oi];
                            for ci in 0..c {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for e in 0..kw {
                                            let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                            let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                            let ix = (xx * stride[2] + e) as isize - pad[2] as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((ni * c + ci) * d + iz as usize) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = (((oi * c + ci) * kd + a) * kh + bb) * kw + e;
                                            s += x.data[xi] * w.data[wi];
                                        }
                                    }
                                }
                            }
                            out.data[(((ni * o + oi) * od + z) * oh + y) * ow + xx] = s;
                        }
                    }
                }
            }
        }
        out
    }

    fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: &[usize], pad: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv(xv, wv, bv, stride, pad).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = random(&[2, 3, 4, 5, 6], 1);
        let w = random(&[4, 3, 2, 3, 2], 2);
        let b = random(&[4], 3);
        for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 1, 2], [0, 1, 1]), ([1, 2, 3], [1, 0, 0])] {
            let fast = run_conv(&x, &w, &b, &stride, &pad);
            let slow = conv3_oracle(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape, slow.shape);
            let err = fast.data.iter().zip(&slow.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-10, "{err}");
        }
        // Lower ranks are the same op with leading unit dims.
        let x2 = random(&[2, 3, 5, 6], 4);
        let w2 = random(&[4, 3, 3, 2], 5);
        let fast = run_conv(&x2, &w2, &b, &[1, 1], &[1, 0]);
        let x3 = Tensor { shape: vec![2, 3, 1, 5, 6], data: x2.data.clone() };
        let w3 = Tensor { shape: vec![4, 3, 1, 3, 2], data: w2.data.clone() };
        let slow = conv3_oracle(&x3, &w3, &b, [1, 1, 1], [0, 1, 0]);
        assert_eq!(fast.shape, [2, 4, 5, 5]);
        assert!(fast.data.iter().zip(&slow.data).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn identity_kernel_adds_bias() {
        let x = random(&[2, 1, 4, 5], 7);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::full(&[1], 0.5);
        let y = run_conv(&x, &w, &b, &[1, 1], &[0, 0]);
        assert!(y.data.iter().zip(&x.data).all(|(a, b)| (a - b - 0.5).abs() < 1e-15));
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 5]));
        let w = g.input(Tensor::zeros(&[3, 1, 2]));
        let b = g.input(Tensor::zeros(&[3]));
        assert!(g.conv(x, w, b, &[1], &[0]).is_err());
    }

    #[test]
    fn fbcnn3d_first_block_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 10, 45, 6]));
        let w = g.input(Tensor::zeros(&[16, 1, 4, 6, 6]));
        let b = g.input(Tensor::zeros(&[16]));
        let y = g.conv(x, w, b, &[1, 1, 1], &[1, 1, 1]).unwrap();
        assert_eq!(g.shape(y), [1, 16, 9, 42, 3]);
        let p = g.maxpool(y, &[2, 2, 3]).unwrap();
        assert_eq!(g.shape(p), [1, 16, 4, 21, 1]);
    }

    #[test]
    fn maxpool_matches_loop_oracle_and_routes_to_first_max() {
        let x = random(&[2, 3, 5, 7], 11);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = g.maxpool(xv, &[2, 3]).unwrap();
        assert_eq!(g.shape(y), [2, 3, 2, 2]);
        for ch in 0..6 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..2 {
                        for b in 0..3 {
                            m = m.max(x.data[ch * 35 + (i * 2 + a) * 7 + j * 3 + b]);
                        }
                    }
                    assert_eq!(g.value(y).data[ch * 4 + i * 2 + j], m);
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.param(Tensor::full(&[1, 1, 2, 2], 3.0));
        let y = g.maxpool(xv, &[2, 2]).unwrap();
        assert_eq!(g.value(y).data, [3.0]);
        let s = g.dot(y, vec![1.0]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_and_eval() {
        let x = random(&[4, 3, 5], 21);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let gamma = g.input(Tensor::full(&[3], 1.0));
        let beta = g.input(Tensor::zeros(&[3]));
        let (y, stats) = g.batchnorm_train(xv, gamma, beta, BN_EPS).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> =
                (0..4).flat_map(|n| g.value(y).data[(n * 3 + c) * 5..(n * 3 + c + 1) * 5].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 20.0;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-7);
            assert!((v - 1.0).abs() < 1e-4 + 1e-5, "{v}");
            assert!(stats.var_unbiased[c] > 0.0);
        }
        let y2 = g.batchnorm_eval(xv, gamma, beta, &[0.0; 3], &[1.0; 3], 0.0).unwrap();
        assert_eq!(g.value(y2).data, x.data);
        let one = g.input(Tensor::zeros(&[1, 3, 5]));
        assert!(g.batchnorm_train(one, gamma, beta, BN_EPS).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let layers = vec![LayerSpec::Dropout { p: 0.25 }];
        let m = Model::new(layers, &[1_000_000], LossKind::CrossEntropy, 0).unwrap();
        let x = Tensor::full(&[1, 1_000_000], 2.0);
        let mut rng = seed::rng(42);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = m.forward(&mut g, xv, &mut Forward::train(&mut rng)).unwrap();
        let d = &g.value(y).data;
        let kept = d.iter().filter(|v| **v != 0.0).count() as f64 / d.len() as f64;
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((kept - 0.75).abs() < 0.005, "{kept}");
        assert!((mean / 2.0 - 1.0).abs() < 0.01, "{mean}");
        // Eval mode and p = 0 are identities.
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = m.forward(&mut g, xv, &mut Forward::eval()).unwrap();
        assert_eq!(g.value(y).data, x.data);
        let m0 = Model::new(vec![LayerSpec::Dropout { p: 0.0 }], &[4], LossKind::CrossEntropy, 0).unwrap();
        let mut g = Graph::new();
        let xv = g.input(Tensor::full(&[1, 4], 1.5));
        let y = m0.forward(&mut g, xv, &mut Forward::train(&mut rng)).unwrap();
        assert_eq!(g.value(y).data, [1.5; 4]);
        assert!(Model::new(vec![LayerSpec::Dropout { p: 1.0 }], &[4], LossKind::CrossEntropy, 0).is_err());
    }

    #[test]
    fn loss_fixtures() {
        let mut g = Graph::new();
        let z = g.input(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(z, &[0]).unwrap();
        assert!((g.value(ce).data[0] - core::f64::consts::LN_2).abs() < 1e-15);
        let s = g.input(Tensor::new(&[1, 1], vec![2.0]).unwrap());
        let h = g.hinge(s, &[1]).unwrap();
        assert_eq!(g.value(h).data[0], 0.0);
        let m = g.input(Tensor::new(&[1, 3], vec![3.0, 1.0, 0.0]).unwrap());
        let mh = g.multi_hinge(m, &[0]).unwrap();
        assert_eq!(g.value(mh).data[0], 0.0);
        let m2 = g.input(Tensor::new(&[1, 3], vec![0.5, 1.0, 0.0]).unwrap());
        let mh2 = g.multi_hinge(m2, &[0]).unwrap();
        assert!((g.value(mh2).data[0] - (1.5 + 0.5) / 2.0).abs() < 1e-15);
        assert!(g.cross_entropy(z, &[2]).is_err());
        assert!(g.hinge(s, &[2]).is_err());
    }

    #[test]
    fn lstm_zero_weights_and_param_count() {
        let spec = LayerSpec::Lstm { input: 10, hidden: 100 };
        assert_eq!(spec.param_count(), 44_800);
        let mut m = Model::new(vec![spec], &[8, 10], LossKind::CrossEntropy, 0).unwrap();
        m.params.iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v = 0.0));
        let mut g = Graph::new();
        let xv = g.input(random(&[3, 8, 10], 1));
        let y = m.forward(&mut g, xv, &mut Forward::eval()).unwrap();
        assert_eq!(g.shape(y), [3, 8, 100]);
        assert!(g.value(y).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_gradient_is_exact() {
        let r = grad_check(&[random(&[3, 5], 1), random(&[4, 5], 2), random(&[4], 3)], DEFAULT_EPS, |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            g.dot(y, proj(12, 1))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn elementwise_gradients() {
        let ops: [fn(&mut Graph, Var) -> Var; 4] =
            [|g, x| g.relu(x), |g, x| g.leaky_relu(x, LEAKY_SLOPE), |g, x| g.sigmoid(x), |g, x| g.tanh(x)];
        for (i, op) in ops.iter().enumerate() {
            let r = grad_check(&[random(&[4, 6], 30 + i as u64)], DEFAULT_EPS, |g, v| {
                let y = op(g, v[0]);
                g.dot(y, proj(24, 2))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "op {i}: {r:?}");
        }
        let r = grad_check(&[random(&[3, 4], 1), random(&[3, 4], 2)], DEFAULT_EPS, |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.add(a, v[0])?;
            g.dot(b, proj(12, 3))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn shape_op_gradients() {
        let r = grad_check(&[random(&[2, 3, 4], 1)], DEFAULT_EPS, |g, v| {
            let s = g.swap_last(v[0])?;
            let t0 = g.step(s, 1)?;
            let t1 = g.step(s, 3)?;
            let st = g.stack(&[t1, t0])?;
            let r = g.reshape(st, &[2, 6])?;
            let n = g.narrow_cols(r, 1, 4)?;
            g.dot(n, proj(8, 5))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_and_pool_gradients() {
        for (xs, ws, stride, pad) in [
            (vec![2, 2, 9], vec![3, 2, 4], vec![1], vec![0]),
            (vec![2, 2, 5, 6], vec![3, 2, 3, 2], vec![1, 2], vec![1, 1]),
            (vec![2, 1, 4, 5, 3], vec![2, 1, 2, 3, 2], vec![1, 1, 1], vec![1, 0, 1]),
        ] {
            let o = ws[0];
            let r = grad_check(&[random(&xs, 1), random(&ws, 2), random(&[o], 3)], DEFAULT_EPS, |g, v| {
                let y = g.conv(v[0], v[1], v[2], &stride, &pad)?;
                let n = g.value(y).numel();
                g.dot(y, proj(n, 4))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "{xs:?}: {r:?}");
        }
        let r = grad_check(&[random(&[2, 3, 6, 4], 8)], DEFAULT_EPS, |g, v| {
            let y = g.maxpool(v[0], &[2, 2])?;
            g.dot(y, proj(36, 6))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn batchnorm_gradients() {
        for train in [true, false] {
            let r = grad_check(&[random(&[3, 2, 5], 1), random(&[2], 2), random(&[2], 3)], DEFAULT_EPS, |g, v| {
                let y = if train {
                    g.batchnorm_train(v[0], v[1], v[2], BN_EPS)?.0
                } else {
                    g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], BN_EPS)?
                };
                g.dot(y, proj(30, 7))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "train {train}: {r:?}");
        }
    }

    #[test]
    fn loss_gradients() {
        let t = [0usize, 2, 1];
        for k in 0..2 {
            let r = grad_check(&[random(&[3, 3], 9)], DEFAULT_EPS, |g, v| {
                if k == 0 {
                    g.cross_entropy(v[0], &t)
                } else {
                    g.multi_hinge(v[0], &t)
                }
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{k}: {r:?}");
        }
        let r = grad_check(&[random(&[4, 1], 10)], DEFAULT_EPS, |g, v| g.hinge(v[0], &[0, 1, 1, 0])).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn conv3d_leaky_stack_gradient() {
        let layers = vec![
            LayerSpec::conv(1, 2, &[2, 3, 2], &[1, 1, 1], &[1, 1, 1]),
            LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
            LayerSpec::conv(2, 2, &[2, 2, 2], &[1, 1, 1], &[0, 0, 0]),
            LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
            LayerSpec::Flatten,
        ];
        let m = Model::new(layers, &[1, 3, 4, 3], LossKind::CrossEntropy, 3).unwrap();
        let n_out = m.output_len().unwrap();
        let r = grad_check(&[random(&[2, 1, 3, 4, 3], 1)], DEFAULT_EPS, |g, v| {
            let y = m.forward(g, v[0], &mut Forward::eval())?;
            g.dot(y, proj(2 * n_out, 3))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn lstm_two_layer_gradient_through_eight_steps() {
        let layers = vec![
            LayerSpec::Lstm { input: 3, hidden: 4 },
            LayerSpec::Lstm { input: 4, hidden: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { input: 16, output: 2 },
        ];
        let m = Model::new(layers, &[8, 3], LossKind::CrossEntropy, 5).unwrap();
        let r =
            check_model(&m, &random(&[2, 8, 3], 6), &[1, 0], &ModelCheck { mode: Mode::Eval, ..ModelCheck::default() })
                .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert_eq!(r.checked, m.param_count() + 48);
    }

    #[test]
    fn model_rejects_wrong_input_shape() {
        let m = Model::new(vec![LayerSpec::Linear { input: 4, output: 2 }], &[4], LossKind::CrossEntropy, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 5]));
        assert!(m.forward(&mut g, x, &mut Forward::eval()).is_err());
        assert_eq!(Model::new(Vec::new(), &[4], LossKind::CrossEntropy, 0).unwrap().param_count(), 0);
        assert_eq!(LayerSpec::Linear { input: 45, output: 2 }.param_count(), 92);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn softmax_is_a_distribution(row in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = softmax(&row);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn eval_forward_is_pure(seed_ in 0u64..1000) {
            let layers = vec![
                LayerSpec::conv(1, 2, &[3], &[1], &[1]),
                LayerSpec::batchnorm(2),
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Flatten,
                LayerSpec::Linear { input: 12, output: 2 },
            ];
            let m = Model::new(layers, &[1, 6], LossKind::CrossEntropy, seed_).unwrap();
            let x = random(&[3, 1, 6], seed_);
            prop_assert_eq!(m.predict_scores(&x, 2).unwrap(), m.predict_scores(&x, 3).unwrap());
        }
    }
}
