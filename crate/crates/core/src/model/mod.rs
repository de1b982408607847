//! Residual and multi-residual networks.
//!
//! A network is a stem convolution, three stages of blocks at widths
//! 16w/32w/64w, and a norm-ReLU-pool-linear head. Each block computes
//! `x + f¹(x) + … + fᵏ(x)` where every `fⁱ` is a pre-activation stack of
//! (batch-norm → ReLU → convolution) units. With `k = 1` this is the plain
//! pre-activation residual network.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, RunningStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Two 3×3 convolutions; depth `6n + 2`.
    Basic,
    /// 1×1 → 3×3 → 1×1 with a 4× expansion; depth `9n + 2`.
    Bottleneck,
}

impl BlockKind {
    pub fn convs_per_function(self) -> usize {
        match self {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::config(format!("unknown block kind `{other}`"))),
        }
    }
}

/// Whether blocks carry an identity skip path.
///
/// `Plain` builds the non-residual control network used in lesion studies:
/// each block outputs only the sum of its functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    Residual,
    Plain,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Residual => "residual",
            Topology::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "residual" => Ok(Topology::Residual),
            "plain" => Ok(Topology::Plain),
            other => Err(Error::config(format!("unknown topology `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Blocks in each of the three stages.
    pub blocks_per_stage: usize,
    /// Residual functions per block.
    pub k: usize,
    /// Widening factor.
    pub w: usize,
    pub block_kind: BlockKind,
    pub num_classes: usize,
    /// `(C, H, W)` of one input image.
    pub input_shape: [usize; 3],
    pub topology: Topology,
}

impl NetworkConfig {
    pub fn new(blocks_per_stage: usize, k: usize, w: usize, block_kind: BlockKind) -> Self {
        Self {
            blocks_per_stage,
            k,
            w,
            block_kind,
            num_classes: 10,
            input_shape: [3, 32, 32],
            topology: Topology::Residual,
        }
    }

    /// Config for a network of the given convolutional depth.
    pub fn from_depth(depth: usize, k: usize, w: usize, block_kind: BlockKind) -> Result<Self> {
        let per_block = 3 * block_kind.convs_per_function();
        let formula = match block_kind {
            BlockKind::Basic => "6n+2",
            BlockKind::Bottleneck => "9n+2",
        };
        if depth < 2 + per_block || !(depth - 2).is_multiple_of(per_block) {
            return Err(Error::config(format!(
                "depth {depth} is not of the form {formula} for {} blocks",
                block_kind.name()
            )));
        }
        let cfg = Self::new((depth - 2) / per_block, k, w, block_kind);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_input(mut self, input_shape: [usize; 3]) -> Self {
        self.input_shape = input_shape;
        self
    }

    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = topology;
        self
    }

    pub fn total_blocks(&self) -> usize {
        3 * self.blocks_per_stage
    }

    /// Convolutional depth: `6n + 2` (basic) or `9n + 2` (bottleneck).
    pub fn depth(&self) -> usize {
        3 * self.block_kind.convs_per_function() * self.blocks_per_stage + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 || self.k == 0 || self.w == 0 {
            return Err(Error::config("blocks_per_stage, k and w must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config("input shape must be positive"));
        }
        let [_, h, w] = self.input_shape;
        if h < 4 || w < 4 {
            return Err(Error::config("input must be at least 4×4 for two downsamplings"));
        }
        Ok(())
    }
}

impl fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "depth={} k={} w={} block={} topology={}",
            self.depth(),
            self.k,
            self.w,
            self.block_kind.name(),
            self.topology.name()
        )
    }
}

/// A learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Whether weight decay applies (false for norm shifts and biases).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvSpec {
    pub weight: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NormSpec {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

/// Batch-norm → ReLU → convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Unit {
    pub norm: NormSpec,
    pub conv: ConvSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub(crate) functions: Vec<Vec<Unit>>,
    pub(crate) projection: Option<ConvSpec>,
    pub stage: usize,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

impl Block {
    /// True when the identity cannot stand in for this block.
    pub fn changes_shape(&self) -> bool {
        self.in_shape != self.out_shape
    }

    pub fn is_downsampling(&self) -> bool {
        self.in_shape[1] != self.out_shape[1]
    }

    pub fn num_functions(&self) -> usize {
        self.functions.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Head {
    norm: NormSpec,
    weight: usize,
    bias: usize,
}

/// How a block combines its paths during one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Route<'a> {
    /// Skip path plus the functions selected by the mask (the normal rule).
    Masked(&'a [bool]),
    /// Replaced by the identity.
    Identity,
    /// Only the selected functions, no skip path.
    BranchOnly(&'a [bool]),
    /// Only the skip path (identity or projection).
    SkipOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Batch statistics keyed by running-stat index (train mode only).
    pub stats: Vec<(usize, BatchStats)>,
}

/// Per-block, per-function on/off switches.
pub type MaskSet = Vec<Vec<bool>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
    running: Vec<RunningStats>,
    running_names: Vec<String>,
    stem: ConvSpec,
    blocks: Vec<Block>,
    head: Head,
    masks: MaskSet,
    lesioned: Vec<bool>,
}

struct Builder {
    params: Vec<Param>,
    running: Vec<RunningStats>,
    running_names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: String, out_c: usize, in_c: usize, kernel: usize, stride: usize) -> ConvSpec {
        let fan_in = (in_c * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let rng = &mut self.rng;
        let value = Tensor::from_fn(&[out_c, in_c, kernel, kernel], |_| normal.sample(rng));
        self.params.push(Param {
            name,
            value: Arc::new(value),
            decay: true,
        });
        ConvSpec {
            weight: self.params.len() - 1,
            stride,
            pad: kernel / 2,
        }
    }

    fn norm(&mut self, prefix: String, channels: usize) -> NormSpec {
        self.params.push(Param {
            name: format!("{prefix}.gamma"),
            value: Arc::new(Tensor::full(&[channels], 1.0)),
            decay: true,
        });
        self.params.push(Param {
            name: format!("{prefix}.beta"),
            value: Arc::new(Tensor::zeros(&[channels])),
            decay: false,
        });
        self.running.push(RunningStats::new(channels));
        self.running_names.push(prefix);
        NormSpec {
            gamma: self.params.len() - 2,
            beta: self.params.len() - 1,
            stats: self.running.len() - 1,
        }
    }
}

/// Build a network with He-normal convolution weights (variance 2/fan-in).
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        running: Vec::new(),
        running_names: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let [in_c, mut h, mut w] = config.input_shape;
    let base = 16 * config.w;
    let stem = b.conv("stem.conv".into(), base, in_c, 3, 1);
    let mut channels = base;
    let mut blocks = Vec::with_capacity(config.total_blocks());
    for stage in 0..3 {
        let width = base << stage;
        for j in 0..config.blocks_per_stage {
            let index = blocks.len();
            let stride = if stage > 0 && j == 0 { 2 } else { 1 };
            let in_shape = [channels, h, w];
            let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            let out_c = match config.block_kind {
                BlockKind::Basic => width,
                BlockKind::Bottleneck => 4 * width,
            };
            let mut functions = Vec::with_capacity(config.k);
            for f in 0..config.k {
                let p = format!("block{index}.fn{f}");
                let units = match config.block_kind {
                    BlockKind::Basic => vec![
                        Unit {
                            norm: b.norm(format!("{p}.bn0"), channels),
                            conv: b.conv(format!("{p}.conv0"), width, channels, 3, stride),
                        },
                        Unit {
                            norm: b.norm(format!("{p}.bn1"), width),
                            conv: b.conv(format!("{p}.conv1"), width, width, 3, 1),
                        },
                    ],
                    BlockKind::Bottleneck => vec![
                        Unit {
                            norm: b.norm(format!("{p}.bn0"), channels),
                            conv: b.conv(format!("{p}.conv0"), width, channels, 1, 1),
                        },
                        Unit {
                            norm: b.norm(format!("{p}.bn1"), width),
                            conv: b.conv(format!("{p}.conv1"), width, width, 3, stride),
                        },
                        Unit {
                            norm: b.norm(format!("{p}.bn2"), width),
                            conv: b.conv(format!("{p}.conv2"), 4 * width, width, 1, 1),
                        },
                    ],
                };
                functions.push(units);
            }
            let out_shape = [out_c, oh, ow];
            let projection = (config.topology == Topology::Residual && in_shape != out_shape)
                .then(|| b.conv(format!("block{index}.proj"), out_c, channels, 1, stride));
            blocks.push(Block {
                functions,
                projection,
                stage,
                in_shape,
                out_shape,
            });
            channels = out_c;
            (h, w) = (oh, ow);
        }
    }
    let norm = b.norm("head.bn".into(), channels);
    let normal = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("finite std");
    let fc = Tensor::from_fn(&[channels, config.num_classes], |_| normal.sample(&mut b.rng));
    b.params.push(Param {
        name: "head.fc.weight".into(),
        value: Arc::new(fc),
        decay: true,
    });
    b.params.push(Param {
        name: "head.fc.bias".into(),
        value: Arc::new(Tensor::zeros(&[config.num_classes])),
        decay: false,
    });
    let head = Head {
        norm,
        weight: b.params.len() - 2,
        bias: b.params.len() - 1,
    };
    let n = blocks.len();
    Ok(Network {
        config: config.clone(),
        params: b.params,
        running: b.running,
        running_names: b.running_names,
        stem,
        blocks,
        head,
        masks: vec![vec![true; config.k]; n],
        lesioned: vec![false; n],
    })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// Names of the norm layers, aligned with [`Network::running_stats`].
    pub fn running_names(&self) -> &[String] {
        &self.running_names
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn lesioned(&self) -> &[bool] {
        &self.lesioned
    }

    /// Exact number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Learnable scalars inside residual functions only.
    pub fn branch_parameters(&self) -> usize {
        let mut count = 0;
        for block in &self.blocks {
            for units in &block.functions {
                for u in units {
                    for idx in [u.norm.gamma, u.norm.beta, u.conv.weight] {
                        count += self.params[idx].value.numel();
                    }
                }
            }
        }
        count
    }

    /// Indices of parameters that live inside residual functions.
    pub fn branch_param_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for units in &block.functions {
                for u in units {
                    out.extend([u.norm.gamma, u.norm.beta, u.conv.weight]);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Blocks that can be replaced by the identity.
    pub fn lesionable_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&i| !self.blocks[i].changes_shape())
            .collect()
    }

    /// Copy with one block replaced by the identity at evaluation time.
    pub fn drop_block(&self, index: usize) -> Result<Network> {
        let block = self.blocks.get(index).ok_or_else(|| Error::Lesion {
            index,
            reason: format!("network has {} blocks", self.blocks.len()),
        })?;
        if block.changes_shape() {
            return Err(Error::Lesion {
                index,
                reason: format!(
                    "block maps {:?} to {:?}; identity is undefined",
                    block.in_shape, block.out_shape
                ),
            });
        }
        let mut out = self.clone();
        out.lesioned[index] = true;
        Ok(out)
    }

    pub fn restore_block(&self, index: usize) -> Result<Network> {
        if index >= self.blocks.len() {
            return Err(Error::Lesion {
                index,
                reason: format!("network has {} blocks", self.blocks.len()),
            });
        }
        let mut out = self.clone();
        out.lesioned[index] = false;
        Ok(out)
    }

    pub fn set_masks(&mut self, masks: MaskSet) -> Result<()> {
        if masks.len() != self.blocks.len() || masks.iter().any(|m| m.len() != self.config.k) {
            return Err(Error::config(format!(
                "mask set must be {} blocks × {} functions",
                self.blocks.len(),
                self.config.k
            )));
        }
        self.masks = masks;
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        self.masks = vec![vec![true; self.config.k]; self.blocks.len()];
    }

    /// Independent Bernoulli(`p`) on/off draw for every function of every block.
    pub fn sample_configuration<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<MaskSet> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("keep probability {p} outside [0, 1]")));
        }
        Ok(self
            .blocks
            .iter()
            .map(|b| (0..b.num_functions()).map(|_| rng.random_bool(p)).collect())
            .collect())
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(p.value.clone(), requires_grad))
            .collect()
    }

    /// Forward pass using the network's own masks and lesions.
    pub fn forward<'t>(&self, params: &[Var<'t>], input: Var<'t>, mode: Mode) -> Result<Forward<'t>> {
        let routes: Vec<Route<'_>> = (0..self.blocks.len())
            .map(|i| {
                if self.lesioned[i] {
                    Route::Identity
                } else {
                    Route::Masked(&self.masks[i])
                }
            })
            .collect();
        self.forward_routed(params, input, mode, &routes)
    }

    pub fn forward_routed<'t>(
        &self,
        params: &[Var<'t>],
        input: Var<'t>,
        mode: Mode,
        routes: &[Route<'_>],
    ) -> Result<Forward<'t>> {
        if routes.len() != self.blocks.len() {
            return Err(Error::config("one route per block required"));
        }
        let [c, h, w] = self.config.input_shape;
        let shape = input.shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: shape,
                rhs: vec![c, h, w],
            });
        }
        let mut stats = Vec::new();
        let mut x = self.conv(params, input, &self.stem)?;
        for (i, route) in routes.iter().enumerate() {
            x = self.block_forward(params, i, x, *route, mode, &mut stats)?;
        }
        let x = self.norm(params, x, &self.head.norm, mode, &mut stats)?.relu();
        let logits = x
            .global_avg_pool()?
            .linear(params[self.head.weight], params[self.head.bias])?;
        Ok(Forward { logits, stats })
    }

    /// One block under the given route.
    pub fn block_forward<'t>(
        &self,
        params: &[Var<'t>],
        index: usize,
        x: Var<'t>,
        route: Route<'_>,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var<'t>> {
        let block = &self.blocks[index];
        let residual = self.config.topology == Topology::Residual;
        let (mask, with_skip) = match route {
            Route::Identity => {
                if block.changes_shape() {
                    return Err(Error::Lesion {
                        index,
                        reason: "identity is undefined across a shape change".into(),
                    });
                }
                return Ok(x);
            }
            Route::Masked(mask) => (Some(mask), residual),
            Route::BranchOnly(mask) => (Some(mask), false),
            Route::SkipOnly => (None, true),
        };
        if let Some(mask) = mask {
            if mask.len() != block.num_functions() {
                return Err(Error::config(format!(
                    "block {index} has {} functions, mask has {}",
                    block.num_functions(),
                    mask.len()
                )));
            }
        }
        let mut terms = Vec::with_capacity(block.num_functions() + 1);
        if with_skip {
            let skip = match &block.projection {
                Some(p) => self.conv(params, x, p)?,
                None if block.changes_shape() => {
                    return Err(Error::config(format!(
                        "block {index} has no skip path in a plain network"
                    )))
                }
                None => x,
            };
            terms.push(skip);
        }
        for (f, units) in block.functions.iter().enumerate() {
            if !mask.is_some_and(|m| m[f]) {
                continue;
            }
            let mut y = x;
            for u in units {
                y = self.norm(params, y, &u.norm, mode, stats)?.relu();
                y = self.conv(params, y, &u.conv)?;
            }
            terms.push(y);
        }
        match terms.len() {
            // plain block with everything switched off
            0 => {
                let tape = x.tape();
                let [c, h, w] = block.out_shape;
                let n = x.shape()[0];
                Ok(tape.leaf(Tensor::zeros(&[n, c, h, w]), false))
            }
            1 => Ok(terms[0]),
            _ => x.tape().add_n(&terms),
        }
    }

    fn conv<'t>(&self, params: &[Var<'t>], x: Var<'t>, spec: &ConvSpec) -> Result<Var<'t>> {
        x.conv2d(params[spec.weight], spec.stride, spec.pad)
    }

    fn norm<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        spec: &NormSpec,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var<'t>> {
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval(&self.running[spec.stats]),
        };
        let (y, s) = x.batch_norm(params[spec.gamma], params[spec.beta], bn_mode, BN_EPS)?;
        if let Some(s) = s {
            stats.push((spec.stats, s));
        }
        Ok(y)
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)], momentum: f64) {
        for (idx, s) in stats {
            self.running[*idx].update(s, momentum);
        }
    }

    /// Eval-mode logits for a batch `[N, C, H, W]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.leaf(batch.clone(), false);
        let out = self.forward(&params, x, Mode::Eval)?;
        let logits = out.logits.value().clone();
        Ok(logits)
    }

    /// Number of on/off function configurations, `2^(k·blocks)`, as a power of two.
    pub fn multiplicity_log2(&self) -> usize {
        self.config.k * self.blocks.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> NetworkConfig {
        NetworkConfig::new(1, k, 1, BlockKind::Basic)
            .with_classes(3)
            .with_input([3, 8, 8])
    }

    fn batch(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, 8, 8], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn depth_formula() {
        assert_eq!(
            NetworkConfig::from_depth(110, 1, 1, BlockKind::Basic)
                .unwrap()
                .blocks_per_stage,
            18
        );
        assert_eq!(NetworkConfig::from_depth(8, 1, 1, BlockKind::Basic).unwrap().depth(), 8);
        assert_eq!(
            NetworkConfig::from_depth(29, 1, 1, BlockKind::Bottleneck)
                .unwrap()
                .blocks_per_stage,
            3
        );
        assert!(NetworkConfig::from_depth(9, 1, 1, BlockKind::Basic).is_err());
        assert!(NetworkConfig::from_depth(2, 1, 1, BlockKind::Basic).is_err());
        for n in 1..30 {
            for kind in [BlockKind::Basic, BlockKind::Bottleneck] {
                let cfg = NetworkConfig::new(n, 1, 1, kind);
                let d = cfg.depth();
                assert_eq!(d, if kind == BlockKind::Basic { 6 * n + 2 } else { 9 * n + 2 });
                assert_eq!(NetworkConfig::from_depth(d, 1, 1, kind).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn output_shape_contract() {
        let cfg = NetworkConfig::new(4, 2, 1, BlockKind::Basic)
            .with_classes(5)
            .with_input([3, 8, 8]);
        let net = build_network(&cfg, 0).unwrap();
        assert_eq!(net.predict(&batch(1, 2)).unwrap().shape(), &[2, 5]);
    }

    #[test]
    fn all_off_mask_is_pure_skip() {
        let net = build_network(&tiny(2), 3).unwrap();
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let x = tape.leaf(Tensor::from_fn(&[2, 16, 8, 8], |i| (i as f64 * 0.37).sin()), false);
        let mut stats = Vec::new();
        let y = net
            .block_forward(&params, 0, x, Route::Masked(&[false, false]), Mode::Eval, &mut stats)
            .unwrap();
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn identical_functions_double_the_branch() {
        let mut net = build_network(&tiny(2), 5).unwrap();
        // copy fn0's parameters into fn1 for block 0
        let units = net.blocks[0].functions.clone();
        for (a, b) in units[0].iter().zip(&units[1]) {
            for (src, dst) in [
                (a.norm.gamma, b.norm.gamma),
                (a.norm.beta, b.norm.beta),
                (a.conv.weight, b.conv.weight),
            ] {
                net.params[dst].value = net.params[src].value.clone();
            }
            net.running[b.norm.stats] = net.running[a.norm.stats].clone();
        }
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let x = tape.leaf(Tensor::from_fn(&[2, 16, 8, 8], |i| (i as f64 * 0.11).cos()), false);
        let mut st = Vec::new();
        let both = net
            .block_forward(&params, 0, x, Route::Masked(&[true, true]), Mode::Eval, &mut st)
            .unwrap();
        let one = net
            .block_forward(&params, 0, x, Route::BranchOnly(&[true, false]), Mode::Eval, &mut st)
            .unwrap();
        let (both, one, xv) = (both.value(), one.value(), x.value());
        for i in 0..both.numel() {
            let expect = xv.data()[i] + 2.0 * one.data()[i];
            assert!((both.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lesion_rules() {
        let cfg = NetworkConfig::new(2, 1, 1, BlockKind::Basic).with_input([3, 8, 8]);
        let net = build_network(&cfg, 1).unwrap();
        assert_eq!(net.lesionable_blocks(), vec![0, 1, 3, 5]);
        assert!(net.drop_block(2).is_err());
        assert!(net.drop_block(4).is_err());
        assert!(net.drop_block(6).is_err());
        let x = batch(2, 3);
        let dropped = net.drop_block(3).unwrap();
        let out = dropped.predict(&x).unwrap();
        assert!(out.is_finite());
        assert_ne!(out, net.predict(&x).unwrap());
        let restored = dropped.restore_block(3).unwrap();
        assert_eq!(restored, net);
        assert_eq!(restored.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn bottleneck_first_block_is_not_lesionable() {
        let cfg = NetworkConfig::new(2, 1, 1, BlockKind::Bottleneck).with_input([3, 8, 8]);
        let net = build_network(&cfg, 1).unwrap();
        assert!(net.blocks()[0].changes_shape());
        assert!(!net.blocks()[0].is_downsampling());
        assert_eq!(net.lesionable_blocks(), vec![1, 3, 5]);
        assert_eq!(net.predict(&batch(0, 2)).unwrap().shape(), &[2, 10]);
    }

    #[test]
    fn doubling_k_doubles_branch_parameters() {
        for kind in [BlockKind::Basic, BlockKind::Bottleneck] {
            let a = build_network(&NetworkConfig::new(2, 3, 1, kind), 0).unwrap();
            let b = build_network(&NetworkConfig::new(2, 6, 1, kind), 0).unwrap();
            assert_eq!(b.branch_parameters(), 2 * a.branch_parameters());
            assert_eq!(
                b.count_parameters() - b.branch_parameters(),
                a.count_parameters() - a.branch_parameters()
            );
        }
    }

    #[test]
    fn sample_configuration_extremes() {
        let net = build_network(&tiny(3), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(net
            .sample_configuration(1.0, &mut rng)
            .unwrap()
            .iter()
            .flatten()
            .all(|&b| b));
        assert!(net
            .sample_configuration(0.0, &mut rng)
            .unwrap()
            .iter()
            .flatten()
            .all(|&b| !b));
        assert!(net.sample_configuration(1.5, &mut rng).is_err());
        let a = net
            .sample_configuration(0.5, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let b = net
            .sample_configuration(0.5, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_topology_has_no_projections() {
        let cfg = tiny(1).with_topology(Topology::Plain);
        let net = build_network(&cfg, 0).unwrap();
        assert!(net.blocks().iter().all(|b| b.projection.is_none()));
        assert_eq!(net.predict(&batch(0, 2)).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = build_network(&tiny(2), 11).unwrap();
        let x = batch(5, 4);
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
        let again = build_network(&tiny(2), 11).unwrap();
        assert_eq!(again, net);
    }
}
