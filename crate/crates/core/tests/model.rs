use std::collections::HashMap;

use multiresnet::model::{build_network, BlockKind, Mode, Network, NetworkConfig, Route};
use multiresnet::tensor::BatchNormMode;
use multiresnet::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closed-form learnable-scalar count of a basic-block network.
fn basic_count_oracle(n: usize, k: usize, w: usize, classes: usize, in_c: usize) -> usize {
    let base = 16 * w;
    let mut total = base * in_c * 9;
    let mut cin = base;
    for s in 0..3 {
        let width = base << s;
        for j in 0..n {
            let per_fn = 2 * cin + width * cin * 9 + 2 * width + width * width * 9;
            total += k * per_fn;
            if s > 0 && j == 0 {
                total += width * cin;
            }
            cin = width;
        }
    }
    total + 2 * cin + cin * classes + classes
}

/// Closed-form count for bottleneck networks (4× expansion).
fn bottleneck_count_oracle(n: usize, k: usize, w: usize, classes: usize, in_c: usize) -> usize {
    let base = 16 * w;
    let mut total = base * in_c * 9;
    let mut cin = base;
    for s in 0..3 {
        let width = base << s;
        let out = 4 * width;
        for _ in 0..n {
            let per_fn = 2 * cin + width * cin + 2 * width + width * width * 9 + 2 * width + out * width;
            total += k * per_fn;
            if cin != out {
                total += out * cin;
            }
            cin = out;
        }
    }
    total + 2 * cin + cin * classes + classes
}

#[test]
fn parameter_counts_match_closed_form() {
    for (n, k, w) in [(1, 1, 1), (3, 4, 1), (2, 2, 2), (18, 1, 1)] {
        let net = build_network(&NetworkConfig::new(n, k, w, BlockKind::Basic), 0).unwrap();
        assert_eq!(
            net.count_parameters(),
            basic_count_oracle(n, k, w, 10, 3),
            "n={n} k={k} w={w}"
        );
    }
    for (n, k, w) in [(1, 1, 1), (2, 3, 1), (1, 2, 2)] {
        let net = build_network(&NetworkConfig::new(n, k, w, BlockKind::Bottleneck), 0).unwrap();
        assert_eq!(
            net.count_parameters(),
            bottleneck_count_oracle(n, k, w, 10, 3),
            "n={n} k={k} w={w}"
        );
    }
}

#[test]
fn reference_sized_counts_within_band() {
    for (depth, k, target) in [(110, 1, 1.7e6), (8, 23, 1.7e6), (14, 10, 1.7e6), (8, 4, 0.29e6)] {
        let cfg = NetworkConfig::from_depth(depth, k, 1, BlockKind::Basic).unwrap();
        let count = basic_count_oracle(cfg.blocks_per_stage, k, 1, 10, 3) as f64;
        assert!((count / target - 1.0).abs() <= 0.05, "depth {depth} k {k}: {count}");
    }
}

/// Plain pre-activation residual forward written directly against tensor ops.
fn reference_forward<'t>(net: &Network, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
    let by_name: HashMap<&str, Var<'t>> = net
        .params()
        .iter()
        .zip(params)
        .map(|(p, v)| (p.name.as_str(), *v))
        .collect();
    let stats: HashMap<&str, usize> = net
        .running_names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let bn_relu = |x: Var<'t>, name: &str| -> Var<'t> {
        let rs = &net.running_stats()[stats[name]];
        x.batch_norm(
            by_name[format!("{name}.gamma").as_str()],
            by_name[format!("{name}.beta").as_str()],
            BatchNormMode::Eval(rs),
            1e-5,
        )
        .unwrap()
        .0
        .relu()
    };
    let mut h = x.conv2d(by_name["stem.conv"], 1, 1).unwrap();
    for (i, block) in net.blocks().iter().enumerate() {
        let stride = if block.is_downsampling() { 2 } else { 1 };
        let p = format!("block{i}.fn0");
        let f = bn_relu(h, &format!("{p}.bn0"))
            .conv2d(by_name[format!("{p}.conv0").as_str()], stride, 1)
            .unwrap();
        let f = bn_relu(f, &format!("{p}.bn1"))
            .conv2d(by_name[format!("{p}.conv1").as_str()], 1, 1)
            .unwrap();
        let skip = match by_name.get(format!("block{i}.proj").as_str()) {
            Some(w) => h.conv2d(*w, stride, 0).unwrap(),
            None => h,
        };
        h = skip.add(f).unwrap();
    }
    bn_relu(h, "head.bn")
        .global_avg_pool()
        .unwrap()
        .linear(by_name["head.fc.weight"], by_name["head.fc.bias"])
        .unwrap()
}

#[test]
fn single_function_network_is_plain_preactivation_resnet() {
    let cfg = NetworkConfig::new(2, 1, 1, BlockKind::Basic)
        .with_classes(4)
        .with_input([3, 8, 8]);
    let net = build_network(&cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    let x = tape.leaf(input, false);
    let ours = net.forward(&params, x, Mode::Eval).unwrap().logits;
    let reference = reference_forward(&net, &params, x);
    assert_eq!(*ours.value(), *reference.value());
}

#[test]
fn masked_off_block_passes_gradient_unchanged() {
    let cfg = NetworkConfig::new(1, 3, 1, BlockKind::Basic).with_input([3, 8, 8]);
    let net = build_network(&cfg, 2).unwrap();
    let tape = Tape::new();
    let params = net.bind(&tape, true);
    let input = Tensor::from_fn(&[2, 16, 8, 8], |i| (i as f64 * 0.7).sin());
    let x = tape.leaf(input, true);
    let weights: Vec<f64> = (0..x.value().numel()).map(|i| (i as f64 * 0.3).cos()).collect();
    let mut stats = Vec::new();
    let y = net
        .block_forward(&params, 0, x, Route::Masked(&[false; 3]), Mode::Train, &mut stats)
        .unwrap();
    let grads = tape.backward(y.weighted_sum(&weights).unwrap()).unwrap();
    assert_eq!(grads.get(x).unwrap(), weights.as_slice());
    assert!(stats.is_empty());
    for &i in &net.branch_param_indices() {
        assert!(grads.get(params[i]).is_none());
    }
}

#[test]
fn active_block_count_is_binomial() {
    let n = 12;
    let cfg = NetworkConfig::new(n / 3, 1, 1, BlockKind::Basic);
    let net = build_network(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let samples = 10_000;
    let total: usize = (0..samples)
        .map(|_| {
            let masks = net.sample_configuration(0.5, &mut rng).unwrap();
            masks.iter().filter(|m| m[0]).count()
        })
        .sum();
    let mean = total as f64 / samples as f64;
    // standard error of the mean of Binomial(n, 1/2)
    let sigma = (n as f64 * 0.25 / samples as f64).sqrt();
    assert!((mean - n as f64 / 2.0).abs() < 3.0 * sigma, "mean {mean}");
}

#[test]
fn all_off_network_reduces_to_stem_projections_and_head() {
    let cfg = NetworkConfig::new(2, 2, 1, BlockKind::Basic)
        .with_classes(3)
        .with_input([3, 8, 8]);
    let mut net = build_network(&cfg, 4).unwrap();
    let masks = net
        .sample_configuration(0.0, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    net.set_masks(masks).unwrap();
    let input = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f64 / 7.0);
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    let x = tape.leaf(input.clone(), false);
    let routes = vec![Route::SkipOnly; net.blocks().len()];
    let skip_only = net.forward_routed(&params, x, Mode::Eval, &routes).unwrap().logits;
    assert_eq!(net.predict(&input).unwrap(), *skip_only.value());
}

#[test]
fn checkpoint_file_round_trip() {
    use multiresnet::model::{load_checkpoint, save_checkpoint};
    let cfg = NetworkConfig::new(1, 2, 1, BlockKind::Bottleneck).with_input([3, 8, 8]);
    let net = build_network(&cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&path, &net, &[]).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.network, net);
    let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i as f64).sqrt() / 14.0);
    assert_eq!(back.network.predict(&x).unwrap(), net.predict(&x).unwrap());
}
