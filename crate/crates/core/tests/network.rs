#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use decompnet::network::{
    forward_full, forward_lowrank, full_loss_and_grads, joint_loss_and_grads, read_model,
    recalibrate_bn, write_model, Activation, BnMode, JointOptions, LayerKind, LayerSpec, ModelFile,
    NetworkModel, Pool,
};
use decompnet::svd_grad::ClipConfig;
use decompnet::tensor::{svd_call_count, ConvKernelShape, Decomposition, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn conv_net(pool: Pool, decomposition: Decomposition) -> NetworkModel {
    let conv = LayerSpec {
        kind: LayerKind::Conv {
            kernel: ConvKernelShape::new(3, 3, 2, 3, 1).unwrap(),
            in_h: 5,
            in_w: 5,
            padding: 1,
            decomposition,
            pool,
        },
        has_bias: true,
        has_batchnorm: true,
        activation: Activation::Relu,
    };
    let dense = LayerSpec::dense(12, 3, Activation::Softmax).with_bias(true);
    let mut m = NetworkModel::new(vec![conv, dense], 11).unwrap();
    let mut r = rng(12);
    for t in &mut m.theta {
        for v in [&mut t.bias, &mut t.gamma, &mut t.beta]
            .into_iter()
            .flatten()
        {
            v.iter_mut().for_each(|x| *x += r.random_range(-0.3..0.3));
        }
    }
    m
}

fn batch(n: usize, d: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let x = random_matrix(n, d, &mut r);
    let y = (0..n).map(|i| i % 3).collect();
    (x, y)
}

/// Central differences of `loss` over every parameter block of the model.
fn fd_blocks(model: &NetworkModel, h: f64, loss: impl Fn(&NetworkModel) -> f64) -> Vec<Vec<f64>> {
    let mut probe = model.clone();
    let lens: Vec<usize> = model.block_slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::new();
    for (b, &len) in lens.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = probe.block_slices()[b][k];
            probe.block_slices_mut()[b][k] = orig + h;
            let plus = loss(&probe);
            probe.block_slices_mut()[b][k] = orig - h;
            let minus = loss(&probe);
            probe.block_slices_mut()[b][k] = orig;
            *gk = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn assert_blocks_close(got: Vec<&[f64]>, want: &[Vec<f64>], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (b, (g, w)) in got.iter().zip(want).enumerate() {
        let err = max_rel_err(g, w);
        assert!(err <= tol, "block {b}: relative error {err}");
    }
}

#[test]
fn full_gradients_match_finite_differences() {
    for (pool, dec) in [
        (Pool::Avg2, Decomposition::Spatial),
        (Pool::Max2, Decomposition::Channel),
        (Pool::None, Decomposition::Channel),
    ] {
        let model = if pool == Pool::None {
            let conv = LayerSpec {
                kind: LayerKind::Conv {
                    kernel: ConvKernelShape::new(2, 2, 2, 2, 2).unwrap(),
                    in_h: 5,
                    in_w: 5,
                    padding: 1,
                    decomposition: dec,
                    pool,
                },
                has_bias: false,
                has_batchnorm: true,
                activation: Activation::Relu,
            };
            let dense = LayerSpec::dense(18, 3, Activation::Softmax);
            NetworkModel::new(vec![conv, dense], 5).unwrap()
        } else {
            conv_net(pool, dec)
        };
        let (x, y) = batch(4, 50, 13);
        let (_, grads) = full_loss_and_grads(&model, &x, &y).unwrap();
        let fd = fd_blocks(&model, 1e-6, |m| full_loss_and_grads(m, &x, &y).unwrap().0);
        assert_blocks_close(grads.block_slices(), &fd, 1e-5);
    }
}

#[test]
fn joint_gradients_match_finite_differences() {
    let model = conv_net(Pool::Avg2, Decomposition::Spatial);
    let (x, y) = batch(5, 50, 14);
    let ranks = [3, 2];
    let opts = JointOptions {
        lambda: 0.4,
        eta: 1e-2,
        clip: ClipConfig::new(1.0 - 1e-12).unwrap(),
        rebalance: false,
    };
    let (loss, grads) = joint_loss_and_grads(&model, &ranks, &x, &y, opts).unwrap();
    assert!(loss.low.is_some());
    let fd = fd_blocks(&model, 1e-6, |m| {
        joint_loss_and_grads(m, &ranks, &x, &y, opts)
            .unwrap()
            .0
            .total
    });
    assert_blocks_close(grads.block_slices(), &fd, 1e-5);
}

#[test]
fn zero_lambda_skips_decomposition() {
    let model = conv_net(Pool::Avg2, Decomposition::Spatial);
    let (x, y) = batch(4, 50, 15);
    let opts = JointOptions {
        lambda: 0.0,
        ..JointOptions::default()
    };
    let before = svd_call_count();
    let (loss, grads) = joint_loss_and_grads(&model, &[1, 1], &x, &y, opts).unwrap();
    assert_eq!(svd_call_count(), before);
    assert!(loss.low.is_none());
    let (full, plain) = full_loss_and_grads(&model, &x, &y).unwrap();
    assert!((loss.total - full - opts.eta * model.weight_penalty()).abs() < 1e-12);
    for (g, (p, w)) in grads
        .layers
        .iter()
        .zip(plain.layers.iter().zip(&model.weights))
    {
        let want = p.weight.add(&w.scale(opts.eta));
        assert!(g.weight.sub(&want).max_abs() < 1e-14);
    }
}

#[test]
fn conv_forward_matches_direct_convolution() {
    let shape = ConvKernelShape::new(3, 2, 2, 4, 2).unwrap();
    let spec = LayerSpec {
        kind: LayerKind::Conv {
            kernel: shape,
            in_h: 7,
            in_w: 6,
            padding: 1,
            decomposition: Decomposition::Spatial,
            pool: Pool::None,
        },
        has_bias: false,
        has_batchnorm: false,
        activation: Activation::Identity,
    };
    let model = NetworkModel::new(vec![spec], 3).unwrap();
    let kernel =
        decompnet::tensor::dematricize(shape, &model.weights[0], Decomposition::Spatial).unwrap();
    let (x, _) = batch(3, 7 * 6 * 2, 16);
    let out = forward_full(&model, &x, BnMode::Batch).unwrap();
    for s in 0..3 {
        let want = direct_conv(x.row(s), (7, 6, 2), kernel.data(), (3, 2, 4), 2, 1);
        assert_eq!(out.logits.row(s).len(), want.len());
        assert!(max_rel_err(out.logits.row(s), &want) < 1e-12);
    }
}

#[test]
fn recalibrated_statistics_match_two_pass_moments() {
    let layers = vec![
        LayerSpec::dense(4, 3, Activation::Relu)
            .with_bias(true)
            .with_batchnorm(true),
        LayerSpec::dense(3, 2, Activation::Softmax),
    ];
    let mut model = NetworkModel::new(layers, 4).unwrap();
    model.theta[0].bias = Some(vec![0.5, -1.0, 2.0]);
    let (x, _) = batch(37, 4, 17);
    let stats = recalibrate_bn(&model, None, &x).unwrap();
    let s = stats[0].as_ref().unwrap();
    assert!(stats[1].is_none());
    let w = &model.weights[0];
    let b = model.theta[0].bias.as_ref().unwrap();
    for c in 0..3 {
        let z: Vec<f64> = (0..x.rows())
            .map(|i| (0..4).map(|k| x.get(i, k) * w.get(k, c)).sum::<f64>() + b[c])
            .collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!((s.mean[c] - mean).abs() < 1e-12);
        assert!((s.var[c] - var).abs() < 1e-12);
    }
    let batch_out = forward_full(&model, &x, BnMode::Batch).unwrap();
    let run_out = forward_full(&model, &x, BnMode::Running(&stats)).unwrap();
    assert!(batch_out.logits.sub(&run_out.logits).max_abs() < 1e-12);
}

#[test]
fn exact_low_rank_weights_are_unchanged_by_truncation() {
    let mut r = rng(18);
    let layers = vec![
        LayerSpec::dense(6, 5, Activation::Relu).with_bias(true),
        LayerSpec::dense(5, 3, Activation::Softmax).with_bias(true),
    ];
    let w0 = with_singular_values(6, 5, &[2.0, 1.0], &mut r);
    let w1 = with_singular_values(5, 3, &[1.5, 0.5, 0.25], &mut r);
    let model = NetworkModel::from_weights(layers, vec![w0, w1]).unwrap();
    let (x, _) = batch(6, 6, 19);
    let full = forward_full(&model, &x, BnMode::Batch).unwrap();
    let low = forward_lowrank(&model, &[2, 3], &x, BnMode::Batch).unwrap();
    assert!(full.logits.sub(&low.logits).max_abs() < 1e-10);
    let lower = forward_lowrank(&model, &[1, 3], &x, BnMode::Batch).unwrap();
    assert!(full.logits.sub(&lower.logits).max_abs() > 1e-3);
}

#[test]
fn invalid_ranks_are_rejected() {
    let model = conv_net(Pool::Avg2, Decomposition::Channel);
    let (x, _) = batch(2, 50, 20);
    assert!(forward_lowrank(&model, &[0, 1], &x, BnMode::Batch).is_err());
    assert!(forward_lowrank(&model, &[3, 4], &x, BnMode::Batch).is_err());
    assert!(forward_lowrank(&model, &[3], &x, BnMode::Batch).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_file_round_trips(seed in any::<u64>(), spatial in any::<bool>(), stats in any::<bool>()) {
        let dec = if spatial { Decomposition::Spatial } else { Decomposition::Channel };
        let mut model = conv_net(Pool::Max2, dec);
        model.weights[0] = random_matrix(
            model.weights[0].rows(), model.weights[0].cols(), &mut rng(seed));
        if stats {
            let (x, _) = batch(3, 50, seed);
            model.bn_stats = Some(recalibrate_bn(&model, None, &x).unwrap());
        }
        let file = ModelFile { model, metadata: serde_json::json!({"seed": seed}) };
        let mut buf = Vec::new();
        write_model(&mut buf, &file).unwrap();
        prop_assert_eq!(read_model(&buf[..]).unwrap(), file);
    }

    #[test]
    fn probabilities_are_normalized(seed in any::<u64>()) {
        let model = conv_net(Pool::Avg2, Decomposition::Spatial);
        let (x, _) = batch(4, 50, seed);
        let out = forward_lowrank(&model, &[2, 1], &x, BnMode::Batch).unwrap();
        for r in 0..4 {
            let s: f64 = out.probs.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
