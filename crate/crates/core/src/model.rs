//! The two-headed domain-adversarial network.
//!
//! A shared 3D-convolutional feature extractor maps a clip to a feature
//! vector. An action head classifies that vector; a domain head sees the
//! same vector through a gradient-reversal node and predicts source versus
//! target with three fully connected layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::init::InitParameters;
use crate::nn::{Activation, BatchNorm3dLayer, Conv3dLayer, ConvGeometry, LinearLayer, Mode};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// conv → BN → ReLU
    Plain,
    /// Two 3×3×3 convolutions with a shortcut.
    Residual,
    /// 1×1×1 reduce, grouped 3×3×3, 1×1×1 expand, with a shortcut.
    GroupedResidual,
}

/// One group of identical blocks producing `out_channels` feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub repeats: usize,
    /// Stride 2 along time, height and width in the first block of the group.
    #[serde(default)]
    pub downsample: bool,
    #[serde(default = "one")]
    pub cardinality: usize,
}

fn one() -> usize {
    1
}

impl BlockSpec {
    pub fn plain(out_channels: usize) -> Self {
        Self {
            kind: BlockKind::Plain,
            out_channels,
            repeats: 1,
            downsample: false,
            cardinality: 1,
        }
    }

    pub fn residual(out_channels: usize) -> Self {
        Self {
            kind: BlockKind::Residual,
            ..Self::plain(out_channels)
        }
    }

    pub fn grouped(out_channels: usize, cardinality: usize) -> Self {
        Self {
            kind: BlockKind::GroupedResidual,
            cardinality,
            ..Self::plain(out_channels)
        }
    }

    pub fn downsampled(mut self) -> Self {
        self.downsample = true;
        self
    }

    pub fn repeated(mut self, repeats: usize) -> Self {
        self.repeats = repeats;
        self
    }
}

/// Fixed preprocessing applied to every clip before the first convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    None,
    /// Zero mean and unit variance over all voxels of each clip.
    #[default]
    PerClip,
}

/// Clips whose standard deviation falls below this map to all zeros.
const INPUT_STD_FLOOR: f64 = 1e-6;

/// Standardizes every sample of an `[N, ...]` batch independently.
pub fn standardize_clips<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut out = Vec::with_capacity(x.numel());
    for clip in x.data().chunks(per) {
        let mean = clip.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        let var = clip.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / per as f64;
        let std = var.sqrt();
        if std < INPUT_STD_FLOOR {
            out.extend(std::iter::repeat_n(T::zero(), per));
        } else {
            out.extend(clip.iter().map(|v| T::from_f64((v.as_f64() - mean) / std)));
        }
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(C, T, H, W)` of one clip.
    pub input_shape: [usize; 4],
    pub input_norm: InputNorm,
    pub blocks: Vec<BlockSpec>,
    pub feature_dim: usize,
    pub num_actions: usize,
    /// Widths of the two hidden layers of the domain classifier.
    pub domain_hidden: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [1, 16, 32, 32],
            input_norm: InputNorm::PerClip,
            blocks: vec![
                BlockSpec::plain(8).downsampled(),
                BlockSpec::grouped(16, 4).downsampled(),
                BlockSpec::grouped(32, 4).downsampled(),
                BlockSpec::grouped(64, 4).downsampled(),
            ],
            feature_dim: 64,
            num_actions: 6,
            domain_hidden: [64, 32],
        }
    }
}

impl ModelConfig {
    /// Spatio-temporal extents `(T, H, W)` after every block group.
    pub fn stage_extents(&self) -> Result<Vec<[usize; 3]>> {
        let [c, t, h, w] = self.input_shape;
        if [c, t, h, w].contains(&0) {
            return Err(Error::invalid(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        let mut dims = [t, h, w];
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.downsample {
                if dims.iter().any(|&d| d < 2) {
                    return Err(Error::invalid(format!(
                        "block group {i}: downsampling extents {dims:?} would collapse an axis"
                    )));
                }
                dims = dims.map(|d| d.div_ceil(2));
            }
            out.push(dims);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("model needs at least one block group"));
        }
        if self.feature_dim == 0 || self.num_actions == 0 || self.domain_hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.repeats == 0 || b.cardinality == 0 {
                return Err(Error::invalid(format!(
                    "block group {i}: channels, repeats and cardinality must be positive"
                )));
            }
            if b.kind == BlockKind::GroupedResidual && b.out_channels % b.cardinality != 0 {
                return Err(Error::invalid(format!(
                    "block group {i}: cardinality {} does not divide width {}",
                    b.cardinality, b.out_channels
                )));
            }
        }
        self.stage_extents()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Block {
    Plain {
        conv: Conv3dLayer,
        bn: BatchNorm3dLayer,
    },
    Residual {
        convs: Vec<(Conv3dLayer, BatchNorm3dLayer)>,
        shortcut: Option<(Conv3dLayer, BatchNorm3dLayer)>,
    },
}

/// Parameter store access for a forward pass: train mode updates running
/// statistics, eval mode only reads.
enum Store<'a, T> {
    Train(&'a mut ParamStore<T>),
    Eval(&'a ParamStore<T>),
}

impl<T: Scalar> Store<'_, T> {
    fn get(&self) -> &ParamStore<T> {
        match self {
            Store::Train(s) => s,
            Store::Eval(s) => s,
        }
    }

    fn conv_bn(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        conv: &Conv3dLayer,
        bn: &BatchNorm3dLayer,
        act: Activation,
    ) -> Result<Var> {
        let y = conv.forward(g, self.get(), x, Activation::Identity)?;
        let y = match self {
            Store::Train(s) => bn.forward_train(g, s, y)?,
            Store::Eval(s) => bn.forward_eval(g, s, y)?,
        };
        g.activation(y, act)
    }
}

impl Block {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut Store<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Plain { conv, bn } => store.conv_bn(g, x, conv, bn, Activation::Relu),
            Block::Residual { convs, shortcut } => {
                let mut y = x;
                let last = convs.len() - 1;
                for (i, (conv, bn)) in convs.iter().enumerate() {
                    let act = if i == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    };
                    y = store.conv_bn(g, y, conv, bn, act)?;
                }
                let skip = match shortcut {
                    Some((conv, bn)) => store.conv_bn(g, x, conv, bn, Activation::Identity)?,
                    None => x,
                };
                let sum = g.add(y, skip)?;
                g.relu(sum)
            }
        }
    }

    fn layers(&self) -> Vec<(&Conv3dLayer, &BatchNorm3dLayer)> {
        match self {
            Block::Plain { conv, bn } => vec![(conv, bn)],
            Block::Residual { convs, shortcut } => convs
                .iter()
                .chain(shortcut.iter())
                .map(|(c, b)| (c, b))
                .collect(),
        }
    }
}

/// Replaces the reversal node; used to compare against an un-reversed head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainCoupling {
    /// Gradient reversal with coefficient λ ≥ 0.
    Reversal(f64),
    /// Plain identity: the domain gradient reaches the features unchanged.
    Identity,
}

#[derive(Debug, Clone)]
pub struct DiNetModel<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    blocks: Vec<Block>,
    projection: LinearLayer,
    action_head: LinearLayer,
    domain_head: [LinearLayer; 3],
}

fn conv_bn<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> Result<(Conv3dLayer, BatchNorm3dLayer)> {
    let k = [kernel; 3];
    let geometry = ConvGeometry::same(k).with_stride([stride; 3]).with_groups(groups);
    let conv = Conv3dLayer::new(store, name, ParamGroup::Features, c_in, c_out, k, geometry, true)?;
    let bn = BatchNorm3dLayer::new(store, &format!("{name}.bn"), ParamGroup::Features, c_out);
    Ok((conv, bn))
}

impl<T: Scalar> DiNetModel<T> {
    /// Builds and initializes the network; identical seeds give bitwise
    /// identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut c_in = config.input_shape[0];
        for (gi, spec) in config.blocks.iter().enumerate() {
            for r in 0..spec.repeats {
                let stride = if spec.downsample && r == 0 { 2 } else { 1 };
                let name = format!("features.{gi}.{r}");
                let c_out = spec.out_channels;
                let needs_projection = stride != 1 || c_in != c_out;
                let block = match spec.kind {
                    BlockKind::Plain => {
                        let (conv, bn) = conv_bn(&mut store, &format!("{name}.conv"), c_in, c_out, 3, stride, 1)?;
                        Block::Plain { conv, bn }
                    }
                    BlockKind::Residual => {
                        let convs = vec![
                            conv_bn(&mut store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1)?,
                            conv_bn(&mut store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1)?,
                        ];
                        let shortcut = needs_projection
                            .then(|| conv_bn(&mut store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, 1))
                            .transpose()?;
                        Block::Residual { convs, shortcut }
                    }
                    BlockKind::GroupedResidual => {
                        let width = c_out;
                        let convs = vec![
                            conv_bn(&mut store, &format!("{name}.reduce"), c_in, width, 1, 1, 1)?,
                            conv_bn(
                                &mut store,
                                &format!("{name}.grouped"),
                                width,
                                width,
                                3,
                                stride,
                                spec.cardinality,
                            )?,
                            conv_bn(&mut store, &format!("{name}.expand"), width, c_out, 1, 1, 1)?,
                        ];
                        let shortcut = needs_projection
                            .then(|| conv_bn(&mut store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, 1))
                            .transpose()?;
                        Block::Residual { convs, shortcut }
                    }
                };
                blocks.push(block);
                c_in = c_out;
            }
        }
        let fd = config.feature_dim;
        let projection = LinearLayer::new(&mut store, "features.projection", ParamGroup::Features, c_in, fd);
        let action_head = LinearLayer::new(&mut store, "action.fc", ParamGroup::Action, fd, config.num_actions);
        let [h1, h2] = config.domain_hidden;
        let domain_head = [
            LinearLayer::new(&mut store, "domain.fc1", ParamGroup::Domain, fd, h1),
            LinearLayer::new(&mut store, "domain.fc2", ParamGroup::Domain, h1, h2),
            LinearLayer::new(&mut store, "domain.fc3", ParamGroup::Domain, h2, 1),
        ];

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for block in &blocks {
            for (conv, bn) in block.layers() {
                conv.init_parameters(&mut store, &mut rng);
                bn.init_parameters(&mut store, &mut rng);
            }
        }
        for l in std::iter::once(&projection)
            .chain(std::iter::once(&action_head))
            .chain(&domain_head)
        {
            l.init_parameters(&mut store, &mut rng);
        }

        Ok(Self {
            config,
            params: store,
            blocks,
            projection,
            action_head,
            domain_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1..] != self.config.input_shape {
            return Err(Error::shape(format!(
                "clips {shape:?} do not match [N, {:?}]",
                self.config.input_shape
            )));
        }
        Ok(())
    }

    fn features_with(&self, g: &mut Graph<T>, mut store: Store<'_, T>, clips: Var) -> Result<Var> {
        self.check_input(g.value(clips).shape())?;
        let mut x = match self.config.input_norm {
            InputNorm::None => clips,
            InputNorm::PerClip => g.input(standardize_clips(g.value(clips))),
        };
        for block in &self.blocks {
            x = block.forward(g, &mut store, x)?;
        }
        let pooled = g.global_avg_pool(x)?;
        self.projection.forward(g, store.get(), pooled, Activation::Relu)
    }

    /// Feature vectors `[N, feature_dim]`. Train mode normalizes with batch
    /// statistics and updates the running statistics.
    pub fn forward_features(&mut self, g: &mut Graph<T>, clips: Var, mode: Mode) -> Result<Var> {
        let params = std::mem::take(&mut self.params);
        let mut params = params;
        let out = match mode {
            Mode::Train => self.features_with(g, Store::Train(&mut params), clips),
            Mode::Eval => self.features_with(g, Store::Eval(&params), clips),
        };
        self.params = params;
        out
    }

    /// Eval-mode features; never touches parameters or running statistics.
    pub fn forward_features_eval(&self, g: &mut Graph<T>, clips: Var) -> Result<Var> {
        self.features_with(g, Store::Eval(&self.params), clips)
    }

    /// Action logits `[N, K]`.
    pub fn forward_action(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        self.action_head.forward(g, &self.params, features, Activation::Identity)
    }

    /// Domain logit `[N, 1]` behind a gradient-reversal node with
    /// coefficient `lambda`.
    pub fn forward_domain(&self, g: &mut Graph<T>, features: Var, lambda: f64) -> Result<Var> {
        self.forward_domain_with(g, features, DomainCoupling::Reversal(lambda))
    }

    pub fn forward_domain_with(&self, g: &mut Graph<T>, features: Var, coupling: DomainCoupling) -> Result<Var> {
        let mut x = match coupling {
            DomainCoupling::Reversal(lambda) => g.gradient_reversal(features, T::from_f64(lambda))?,
            DomainCoupling::Identity => features,
        };
        let [fc1, fc2, fc3] = &self.domain_head;
        x = fc1.forward(g, &self.params, x, Activation::Relu)?;
        x = fc2.forward(g, &self.params, x, Activation::Relu)?;
        fc3.forward(g, &self.params, x, Activation::Identity)
    }

    /// Eval-mode features of a stack of clips, computed in chunks.
    pub fn extract_features(&self, clips: &[&Tensor<T>], chunk: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(clips.len());
        for part in clips.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let x = g.input(Tensor::stack(part)?);
            let f = self.forward_features_eval(&mut g, x)?;
            let fv = g.value(f);
            out.extend(fv.data().chunks(self.config.feature_dim).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Eval-mode action logits, computed in chunks.
    pub fn action_logits(&self, clips: &[&Tensor<T>], chunk: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(clips.len());
        for part in clips.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let x = g.input(Tensor::stack(part)?);
            let f = self.forward_features_eval(&mut g, x)?;
            let logits = self.forward_action(&mut g, f)?;
            out.extend(
                g.value(logits)
                    .data()
                    .chunks(self.config.num_actions)
                    .map(|r| r.to_vec()),
            );
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> DiNetModel<U> {
        DiNetModel {
            config: self.config.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            projection: self.projection.clone(),
            action_head: self.action_head.clone(),
            domain_head: self.domain_head.clone(),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
