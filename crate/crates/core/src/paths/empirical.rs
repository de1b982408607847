//! Measurements on built networks: per-depth path gradients and lesioning.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{build_network, BlockKind, Mode, Network, NetworkConfig, Route, BN_EPS};
use crate::par;
use crate::tensor::{Tape, Tensor};
use crate::train::evaluate;

/// Mean and spread of input-gradient norms over sampled paths of one depth.
#[derive(Clone, Debug, PartialEq)]
pub struct PathGradient {
    pub depth: usize,
    pub mean: f64,
    pub std: f64,
    pub norms: Vec<f64>,
}

/// Input-gradient norm carried by random paths through exactly `depth`
/// residual functions.
///
/// The output gradient `g = ∂loss/∂logits` comes from the full network
/// (eval mode). Each sample then picks `depth` distinct shape-preserving
/// blocks and one function in each, routes the chosen blocks through that
/// function alone and every other block through its skip path, and
/// back-propagates `g` along that single path to the input. Sample `s` uses
/// stream `s` of a ChaCha generator seeded with `seed`.
pub fn empirical_path_gradient(
    network: &Network,
    batch: &Tensor,
    labels: &[usize],
    depth: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PathGradient> {
    let eligible = network.lesionable_blocks();
    if depth > eligible.len() {
        return Err(Error::config(format!(
            "depth {depth} exceeds the {} blocks a path can traverse",
            eligible.len()
        )));
    }
    if n_samples == 0 {
        return Err(Error::config("need at least one sample"));
    }
    let output_grad = {
        let tape = Tape::new();
        let params = network.bind(&tape, false);
        let logits = tape.leaf(network.predict(batch)?, true);
        let loss = logits.softmax_cross_entropy(labels)?;
        let g = tape.backward(loss)?;
        drop(params);
        g.get_or_zeros(logits)
    };
    let k = network.config().k;
    let masks: Vec<Vec<bool>> = (0..k).map(|i| (0..k).map(|j| i == j).collect()).collect();
    let norms = par::map_range(n_samples, |s| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let mut routes = vec![Route::SkipOnly; network.blocks().len()];
        for pick in sample(&mut rng, eligible.len(), depth) {
            routes[eligible[pick]] = Route::BranchOnly(&masks[rng.random_range(0..k)]);
        }
        let tape = Tape::new();
        let params = network.bind(&tape, false);
        let x = tape.leaf(batch.clone(), true);
        let out = network.forward_routed(&params, x, Mode::Eval, &routes)?;
        let surrogate = out.logits.weighted_sum(&output_grad)?;
        let grads = tape.backward(surrogate)?;
        Ok(grads.get_or_zeros(x).iter().map(|v| v * v).sum::<f64>().sqrt())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / norms.len() as f64;
    Ok(PathGradient {
        depth,
        mean,
        std: var.sqrt(),
        norms,
    })
}

/// Per-function decay factor `r` from a least-squares fit of
/// `ln(norm) = ln(c) + d·ln(r)`.
pub fn fit_decay(points: &[PathGradient]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.mean > 0.0)
        .map(|p| (p.depth as f64, p.mean.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::config("need two depths with non-zero gradient to fit a decay"));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::config("need two distinct depths to fit a decay"));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok((sxy / sxx).exp())
}

/// Basic-block network whose residual functions all compute `factor·x` on
/// non-negative inputs.
///
/// Every norm layer is an eval-mode identity, the first convolution of each
/// function is the identity, the second is `factor` times it, and the stem and
/// projections embed channels by index. Head weights are seeded random.
pub fn toy_linear_network(
    blocks_per_stage: usize,
    k: usize,
    factor: f64,
    num_classes: usize,
    input: [usize; 3],
    seed: u64,
) -> Result<Network> {
    let cfg = NetworkConfig::new(blocks_per_stage, k, 1, BlockKind::Basic)
        .with_classes(num_classes)
        .with_input(input);
    let mut net = build_network(&cfg, seed)?;
    let gain = (1.0 + BN_EPS).sqrt();
    for p in net.params_mut() {
        let shape = p.value.shape().to_vec();
        let name = p.name.as_str();
        let embed = |scale: f64| {
            let (f, c, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
            let mut t = Tensor::zeros(&shape);
            for o in 0..f.min(c) {
                t.data_mut()[((o * c + o) * kh + kh / 2) * kw + kw / 2] = scale;
            }
            t
        };
        let value = if name.ends_with(".gamma") {
            Tensor::full(&shape, gain)
        } else if name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".conv1") {
            embed(factor)
        } else if name.starts_with("head.") {
            continue;
        } else {
            embed(1.0)
        };
        p.value = Arc::new(value);
    }
    for rs in net.running_stats_mut() {
        rs.mean.iter_mut().for_each(|m| *m = 0.0);
        rs.var.iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(net)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionRow {
    /// `None` for the unlesioned control row.
    pub block: Option<usize>,
    pub error: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionReport {
    pub baseline: f64,
    pub rows: Vec<LesionRow>,
}

impl LesionReport {
    pub fn max_delta(&self) -> f64 {
        self.rows.iter().map(|r| r.delta.abs()).fold(0.0, f64::max)
    }

    pub fn mean_delta(&self) -> f64 {
        let lesioned: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.block.is_some())
            .map(|r| r.delta)
            .collect();
        if lesioned.is_empty() {
            0.0
        } else {
            lesioned.iter().sum::<f64>() / lesioned.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,error,delta\n");
        for r in &self.rows {
            let b = r.block.map(|b| b.to_string()).unwrap_or_else(|| "none".into());
            let _ = writeln!(s, "{b},{},{}", r.error, r.delta);
        }
        s
    }
}

/// Test error with each shape-preserving block replaced by the identity, one
/// at a time, preceded by a control row with nothing dropped.
pub fn lesion_sweep(network: &Network, test: &Dataset, norm: Option<&Normalization>) -> Result<LesionReport> {
    let baseline = evaluate(network, test, norm)?;
    let mut rows = vec![LesionRow {
        block: None,
        error: baseline,
        delta: 0.0,
    }];
    for b in network.lesionable_blocks() {
        let error = evaluate(&network.drop_block(b)?, test, norm)?;
        rows.push(LesionRow {
            block: Some(b),
            error,
            delta: error - baseline,
        });
    }
    Ok(LesionReport { baseline, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positive_batch(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Tensor::from_fn(&[n, 3, 8, 8], |_| rng.random_range(0.1..1.0))
    }

    #[test]
    fn toy_function_halves_its_input() {
        let net = toy_linear_network(1, 2, 0.5, 3, [3, 8, 8], 0).unwrap();
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let x = tape.leaf(Tensor::from_fn(&[2, 16, 8, 8], |i| (i % 5) as f64 + 0.5), false);
        let mut st = Vec::new();
        let y = net
            .block_forward(&params, 0, x, Route::BranchOnly(&[true, false]), Mode::Eval, &mut st)
            .unwrap();
        for (a, b) in y.value().data().iter().zip(x.value().data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_zero_has_no_spread() {
        let net = toy_linear_network(2, 1, 0.5, 3, [3, 8, 8], 0).unwrap();
        let g = empirical_path_gradient(&net, &positive_batch(2), &[0, 2], 0, 4, 9).unwrap();
        assert!(g.mean > 0.0 && g.std == 0.0);
        assert!(empirical_path_gradient(&net, &positive_batch(2), &[0, 2], 6, 1, 9).is_err());
    }

    #[test]
    fn fit_recovers_factor() {
        let pts: Vec<PathGradient> = (0..5)
            .map(|d| PathGradient {
                depth: d,
                mean: 3.0 * 0.6f64.powi(d as i32),
                std: 0.0,
                norms: vec![],
            })
            .collect();
        assert!((fit_decay(&pts).unwrap() - 0.6).abs() < 1e-12);
    }
}
