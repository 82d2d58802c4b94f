//! 3-D ResNet-18/34/50 classifiers.
//!
//! The network is a 7³ stem (stride 1×2×2) with batch-norm, ReLU and a 3³
//! max-pool, four residual stages of widths `base·{1,2,4,8}` (stages 2–4
//! downsample by 2 along every axis), global average pooling and a linear
//! two-class head. Parameters live in a name-keyed map; see
//! [`Model::params`] for the naming scheme.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{
    BnMode, BnStats, ConvParams, Element, Gradients, PoolParams, Tape, Tensor, TensorError, Var,
};

/// Running-statistics momentum of batch-norm layers.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("unknown layer {0:?} (expected stage1..stage4)")]
    UnknownLayer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub depth: u32,
    pub block_kind: BlockKind,
    pub stage_blocks: [usize; 4],
    pub base_width: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl ModelSpec {
    /// The standard ResNet of the given depth (18, 34 or 50).
    pub fn resnet(depth: u32, base_width: usize) -> Result<Self> {
        let (block_kind, stage_blocks) = match depth {
            18 => (BlockKind::Basic, [2, 2, 2, 2]),
            34 => (BlockKind::Basic, [3, 4, 6, 3]),
            50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
            other => {
                return Err(ModelError::InvalidSpec(format!(
                    "depth must be 18, 34 or 50, got {other}"
                )))
            }
        };
        let spec = Self {
            depth,
            block_kind,
            stage_blocks,
            base_width,
            num_classes: 2,
            in_channels: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.depth {
            18 => (BlockKind::Basic, [2, 2, 2, 2]),
            34 => (BlockKind::Basic, [3, 4, 6, 3]),
            50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
            d => return Err(ModelError::InvalidSpec(format!("unsupported depth {d}"))),
        };
        if (self.block_kind, self.stage_blocks) != expected {
            return Err(ModelError::InvalidSpec(format!(
                "depth {} requires {:?} blocks {:?}, got {:?} {:?}",
                self.depth, expected.0, expected.1, self.block_kind, self.stage_blocks
            )));
        }
        if self.base_width == 0 {
            return Err(ModelError::InvalidSpec("base_width must be positive".into()));
        }
        if self.num_classes != 2 || self.in_channels != 1 {
            return Err(ModelError::InvalidSpec(format!(
                "only single-channel two-class models are supported (got {} in, {} classes)",
                self.in_channels, self.num_classes
            )));
        }
        Ok(())
    }

    /// Input features of the classification head.
    pub fn head_features(&self) -> usize {
        self.base_width * 8 * self.block_kind.expansion()
    }

    fn blocks(&self) -> Vec<BlockLayout> {
        let exp = self.block_kind.expansion();
        let mut in_ch = self.base_width;
        let mut out = Vec::new();
        for (s, &count) in self.stage_blocks.iter().enumerate() {
            let planes = self.base_width << s;
            for i in 0..count {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let out_ch = planes * exp;
                out.push(BlockLayout {
                    stage: s,
                    prefix: format!("stage{}.block{}", s + 1, i + 1),
                    in_ch,
                    planes,
                    out_ch,
                    stride,
                    downsample: stride != 1 || in_ch != out_ch,
                });
                in_ch = out_ch;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    stage: usize,
    prefix: String,
    in_ch: usize,
    planes: usize,
    out_ch: usize,
    stride: usize,
    downsample: bool,
}

/// Residual stage whose post-ReLU output can be captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
    Stage4,
}

impl Stage {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Stage {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "stage3" => Ok(Stage::Stage3),
            "stage4" => Ok(Stage::Stage4),
            other => Err(ModelError::UnknownLayer(other.to_string())),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.index() + 1)
    }
}

/// Which parameters stay trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreezePolicy {
    /// Everything trainable.
    #[default]
    None,
    /// Only `stage4.*` and `head.*` trainable; every other layer, batch-norm
    /// included, is frozen and evaluated with its running statistics.
    FinalStageAndHead,
}

impl FreezePolicy {
    pub fn is_trainable(self, name: &str) -> bool {
        match self {
            FreezePolicy::None => true,
            FreezePolicy::FinalStageAndHead => {
                name.starts_with("stage4.") || name.starts_with("head.")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// What to record during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a, T: Element> {
    /// Use batch statistics in trainable batch-norm layers.
    pub train: bool,
    /// Stage whose output is returned with gradient tracking forced on.
    pub capture: Option<Stage>,
    /// Offset added to a stage output before the rest of the network runs.
    pub perturb: Option<(Stage, &'a Tensor<T>)>,
    /// Record parameters as constants so no parameter gradients are computed.
    pub params_as_constants: bool,
}

impl<T: Element> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        Self {
            train: false,
            capture: None,
            perturb: None,
            params_as_constants: false,
        }
    }
}

/// Handles produced by [`Model::record`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub captured: Option<Var>,
    /// Tape handle of every parameter, in model order.
    pub params: Vec<(String, Var)>,
    /// Batch statistics of batch-norm layers that ran in train mode.
    pub bn_updates: Vec<(String, BnStats)>,
}

/// A realized network: parameters, trainability flags and batch-norm state.
///
/// Parameter names: `stem.conv.weight`, `stem.bn.{weight,bias}`,
/// `stage{s}.block{i}.{conv1,conv2[,conv3]}.weight`,
/// `stage{s}.block{i}.{bn1,bn2[,bn3]}.{weight,bias}`,
/// `stage{s}.block{i}.down.conv.weight`, `stage{s}.block{i}.down.bn.{weight,bias}`,
/// `head.weight`, `head.bias`. Running statistics are keyed by the batch-norm
/// layer name (e.g. `stem.bn`).
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: IndexMap<String, Tensor<f32>>,
    running: IndexMap<String, RunningStats>,
    mode: Mode,
}

impl Model {
    /// Builds and initializes a model; identical seeds give identical weights.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        let mut running = IndexMap::new();
        let base = spec.base_width;

        fn conv(params: &mut IndexMap<String, Tensor<f32>>, rng: &mut ChaCha8Rng, name: &str, p: ConvParams) {
            let fan_in = (p.in_channels * p.kernel_volume()) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = p.weight_shape();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
            params.insert(
                format!("{name}.weight"),
                Tensor::from_vec(&shape, data).expect("consistent shape").with_requires_grad(true),
            );
        }
        fn bn(params: &mut IndexMap<String, Tensor<f32>>, running: &mut IndexMap<String, RunningStats>, name: &str, c: usize) {
            params.insert(format!("{name}.weight"), Tensor::full(&[c], 1.0).with_requires_grad(true));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[c]).with_requires_grad(true));
            running.insert(
                name.to_string(),
                RunningStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                },
            );
        }

        conv(&mut params, &mut rng, "stem.conv", stem_conv(base));
        bn(&mut params, &mut running, "stem.bn", base);
        for blk in spec.blocks() {
            for (name, p) in block_convs(&blk, spec.block_kind) {
                conv(&mut params, &mut rng, &format!("{}.{name}", blk.prefix), p);
                let bn_name = format!("{}.{}", blk.prefix, name.replace("conv", "bn"));
                bn(&mut params, &mut running, &bn_name, p.out_channels);
            }
        }
        let features = spec.head_features();
        let bound = 1.0 / (features as f64).sqrt();
        let w = (0..spec.num_classes * features)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        params.insert(
            "head.weight".into(),
            Tensor::from_vec(&[spec.num_classes, features], w)
                .expect("consistent shape")
                .with_requires_grad(true),
        );
        params.insert(
            "head.bias".into(),
            Tensor::zeros(&[spec.num_classes]).with_requires_grad(true),
        );
        Ok(Self {
            spec,
            params,
            running,
            mode: Mode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.params.iter_mut()
    }

    pub fn running_stats(&self) -> &IndexMap<String, RunningStats> {
        &self.running
    }

    pub fn running_stats_mut(&mut self, layer: &str) -> Option<&mut RunningStats> {
        self.running.get_mut(layer)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn apply_freeze_policy(&mut self, policy: FreezePolicy) {
        for (name, t) in self.params.iter_mut() {
            t.requires_grad = policy.is_trainable(name);
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    fn bn_trainable(&self, layer: &str) -> bool {
        self.params
            .get(&format!("{layer}.weight"))
            .is_some_and(|t| t.requires_grad)
    }

    /// Records the network on `tape` for input `x` (`[N, 1, D, H, W]`).
    pub fn record<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        opts: ForwardOptions<'_, T>,
    ) -> Result<ForwardPass> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 5 || xs[1] != self.spec.in_channels {
            return Err(TensorError::ShapeMismatch(format!(
                "model input must be [N, {}, D, H, W], got {xs:?}",
                self.spec.in_channels
            ))
            .into());
        }
        let mut rec = Recorder {
            model: self,
            tape,
            params: Vec::new(),
            bn_updates: Vec::new(),
            train: opts.train,
            constants: opts.params_as_constants,
        };
        let base = self.spec.base_width;
        let mut h = rec.conv(x, "stem.conv", stem_conv(base))?;
        h = rec.bn(h, "stem.bn")?;
        h = rec.tape.relu(h)?;
        h = rec.tape.max_pool3d(h, PoolParams::cubic(3, 2, 1))?;

        let mut captured = None;
        let blocks = self.spec.blocks();
        for (i, blk) in blocks.iter().enumerate() {
            h = rec.block(h, blk, self.spec.block_kind)?;
            let stage_done = blocks.get(i + 1).is_none_or(|next| next.stage != blk.stage);
            if !stage_done {
                continue;
            }
            if opts.capture.is_some_and(|s| s.index() == blk.stage) {
                rec.tape.mark_requires_grad(h);
                captured = Some(h);
            }
            if let Some((stage, delta)) = opts.perturb {
                if stage.index() == blk.stage {
                    let d = rec.tape.constant(delta.clone());
                    h = rec.tape.add(h, d)?;
                }
            }
        }
        let pooled = rec.tape.adaptive_avg_pool_111(h)?;
        let flat = rec.tape.flatten(pooled)?;
        let w = rec.param("head.weight");
        let b = rec.param("head.bias");
        let logits = rec.tape.linear(flat, w, Some(b))?;
        Ok(ForwardPass {
            logits,
            captured,
            params: rec.params,
            bn_updates: rec.bn_updates,
        })
    }

    /// Folds observed batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnStats)]) {
        for (layer, stats) in updates {
            if let Some(rs) = self.running.get_mut(layer) {
                for (r, m) in rs.mean.iter_mut().zip(&stats.mean) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * m) as f32;
                }
                for (r, v) in rs.var.iter_mut().zip(&stats.var) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * v) as f32;
                }
            }
        }
    }

    /// Adds the gradient of a swept output into every trainable parameter.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass, grads: &Gradients) -> Result<()> {
        for (name, var) in &pass.params {
            let t = self.params.get_mut(name).expect("recorded from this model");
            if !t.requires_grad {
                continue;
            }
            match grads.wrt(*var) {
                Ok(g) => t.accumulate_grad(g)?,
                Err(_) => {
                    if t.grad.is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
        Ok(())
    }

    /// Logits for `x`. In train mode batch statistics are used and the running
    /// statistics of trainable batch-norm layers are updated.
    pub fn forward_logits(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let opts = ForwardOptions {
            train: self.mode == Mode::Train,
            ..Default::default()
        };
        let pass = self.record(&mut tape, xv, opts)?;
        self.apply_bn_updates(&pass.bn_updates);
        Ok(tape.value(pass.logits).clone().with_requires_grad(false))
    }

    /// Logits together with the post-ReLU output of `layer`.
    pub fn forward_with_activations(
        &mut self,
        x: &Tensor<f32>,
        layer: Stage,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let opts = ForwardOptions {
            train: self.mode == Mode::Train,
            capture: Some(layer),
            ..Default::default()
        };
        let pass = self.record(&mut tape, xv, opts)?;
        self.apply_bn_updates(&pass.bn_updates);
        let act = tape
            .value(pass.captured.expect("capture requested"))
            .clone()
            .with_requires_grad(true);
        Ok((tape.value(pass.logits).clone().with_requires_grad(false), act))
    }
}

fn stem_conv(base: usize) -> ConvParams {
    ConvParams {
        in_channels: 1,
        out_channels: base,
        kernel: [7; 3],
        stride: [1, 2, 2],
        padding: [3; 3],
    }
}

fn block_convs(blk: &BlockLayout, kind: BlockKind) -> Vec<(&'static str, ConvParams)> {
    let mut v = match kind {
        BlockKind::Basic => vec![
            ("conv1", ConvParams::cubic(blk.in_ch, blk.planes, 3, blk.stride, 1)),
            ("conv2", ConvParams::cubic(blk.planes, blk.out_ch, 3, 1, 1)),
        ],
        BlockKind::Bottleneck => vec![
            ("conv1", ConvParams::cubic(blk.in_ch, blk.planes, 1, 1, 0)),
            ("conv2", ConvParams::cubic(blk.planes, blk.planes, 3, blk.stride, 1)),
            ("conv3", ConvParams::cubic(blk.planes, blk.out_ch, 1, 1, 0)),
        ],
    };
    if blk.downsample {
        v.push(("down.conv", ConvParams::cubic(blk.in_ch, blk.out_ch, 1, blk.stride, 0)));
    }
    v
}

struct Recorder<'m, 't, T: Element> {
    model: &'m Model,
    tape: &'t mut Tape<T>,
    params: Vec<(String, Var)>,
    bn_updates: Vec<(String, BnStats)>,
    train: bool,
    constants: bool,
}

impl<T: Element> Recorder<'_, '_, T> {
    fn param(&mut self, name: &str) -> Var {
        let t = &self.model.params[name];
        let v = if self.constants {
            self.tape.constant(t.cast::<T>())
        } else {
            self.tape.leaf(t.cast::<T>())
        };
        self.params.push((name.to_string(), v));
        v
    }

    fn conv(&mut self, x: Var, name: &str, p: ConvParams) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"));
        Ok(self.tape.conv3d(x, w, None, p)?)
    }

    fn bn(&mut self, x: Var, layer: &str) -> Result<Var> {
        let gamma = self.param(&format!("{layer}.weight"));
        let beta = self.param(&format!("{layer}.bias"));
        let mode = if self.train && self.model.bn_trainable(layer) {
            BnMode::Train
        } else {
            let rs = &self.model.running[layer];
            BnMode::Eval {
                mean: rs.mean.iter().map(|&v| v as f64).collect(),
                var: rs.var.iter().map(|&v| v as f64).collect(),
            }
        };
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            self.bn_updates.push((layer.to_string(), stats));
        }
        Ok(y)
    }

    fn block(&mut self, x: Var, blk: &BlockLayout, kind: BlockKind) -> Result<Var> {
        let convs = block_convs(blk, kind);
        let main = &convs[..if blk.downsample { convs.len() - 1 } else { convs.len() }];
        let mut h = x;
        for (i, (name, p)) in main.iter().enumerate() {
            h = self.conv(h, &format!("{}.{name}", blk.prefix), *p)?;
            h = self.bn(h, &format!("{}.{}", blk.prefix, name.replace("conv", "bn")))?;
            if i + 1 < main.len() {
                h = self.tape.relu(h)?;
            }
        }
        let shortcut = if blk.downsample {
            let (_, p) = convs.last().expect("downsample conv present");
            let s = self.conv(x, &format!("{}.down.conv", blk.prefix), *p)?;
            self.bn(s, &format!("{}.down.bn", blk.prefix))?
        } else {
            x
        };
        let sum = self.tape.add(h, shortcut)?;
        Ok(self.tape.relu(sum)?)
    }
}
