//! Clip-level backbones: the R2D-26 (cheap) and R(2+1)D-50 (expensive)
//! residual bottleneck networks, described layer by layer and instantiable at
//! full size or as a channel-scaled miniature.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::aggregate::Affine;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::kernels::Window3;
use crate::param::{BatchNormParams, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// 2D bottlenecks after a conv₁ with temporal stride 8.
    R2d,
    /// Bottlenecks whose 3×3×3 conv is factorized into 1×3×3 + 3×1×1.
    R21d,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::R2d => "r2d26",
            Family::R21d => "r21d50",
        }
    }

    fn stage_repeats(self) -> [usize; 4] {
        match self {
            Family::R2d => [2, 2, 2, 2],
            Family::R21d => [3, 4, 6, 3],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r2d26" | "r2d" => Ok(Family::R2d),
            "r21d50" | "r21d" => Ok(Family::R21d),
            _ => Err(Error::Config(format!("unknown backbone '{}' (r2d26, r21d50)", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    FullSpec,
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full-spec" => Ok(Preset::FullSpec),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown backbone preset '{}' (full, tiny)", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BackboneConfig {
    pub family: Family,
    pub preset: Preset,
    /// Channel multiplier as `numerator / denominator`.
    pub channel_scale: (usize, usize),
    /// Square input resolution.
    pub resolution: usize,
    /// Frames per clip `L`.
    pub clip_len: usize,
    pub repeats: [usize; 4],
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn full_spec(family: Family, clip_len: usize) -> Self {
        Self {
            family,
            preset: Preset::FullSpec,
            channel_scale: (1, 1),
            resolution: 224,
            clip_len,
            repeats: family.stage_repeats(),
            num_classes: 400,
        }
    }

    /// CPU-trainable miniature: 32×32 input, 1/16 channels, one block per stage.
    pub fn tiny(family: Family, clip_len: usize, num_classes: usize) -> Self {
        Self {
            family,
            preset: Preset::Tiny,
            channel_scale: (1, 16),
            resolution: 32,
            clip_len,
            repeats: [1, 1, 1, 1],
            num_classes,
        }
    }

    pub fn scaled(&self, channels: usize) -> usize {
        let (num, den) = self.channel_scale;
        ((channels * num + den / 2) / den).max(1)
    }

    /// Temporal kernel extent of conv₁.
    fn conv1_temporal(&self) -> usize {
        match self.family {
            Family::R2d => 8,
            Family::R21d => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_scale.1 == 0 || self.channel_scale.0 == 0 {
            return Err(Error::Config("channel scale must be positive".into()));
        }
        if self.repeats.iter().any(|&r| r == 0) {
            return Err(Error::Config(format!("stage repeats must be positive: {:?}", self.repeats)));
        }
        if self.num_classes == 0 || self.resolution == 0 {
            return Err(Error::Config("need at least one class and a positive resolution".into()));
        }
        if self.clip_len % 8 != 0 || self.clip_len == 0 {
            return Err(Error::Config(format!(
                "clip length {} must be a positive multiple of 8 (res5 has L/8 frames)",
                self.clip_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3d,
    MaxPool,
    Bottleneck2d,
    Bottleneck21d,
    GlobalAvgPool,
    Dense,
}

/// One row of the backbone table.
///
/// For bottleneck stages `width` is the reduced channel count, `out_channels`
/// is `4 * width`, and `mid_channels` is the output of the spatial conv (equal
/// to `width` for 2D blocks, the factorization width for (2+1)D blocks).
/// `stride` applies to the first block of the stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub width: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub repeats: usize,
}

impl LayerSpec {
    pub fn simple(name: &str, kind: LayerKind, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            kernel,
            stride,
            padding,
            in_channels: cin,
            width: cout,
            mid_channels: cout,
            out_channels: cout,
            repeats: 1,
        }
    }
}

/// The ordered layer table of a backbone.
pub fn spec_table(config: &BackboneConfig) -> Result<Vec<LayerSpec>> {
    config.validate()?;
    let s = |c| config.scaled(c);
    let mut layers = Vec::new();
    let c1 = s(64);
    match config.family {
        Family::R2d => layers.push(LayerSpec::simple(
            "conv1",
            LayerKind::Conv3d,
            [config.conv1_temporal(), 7, 7],
            [8, 2, 2],
            [0, 3, 3],
            3,
            c1,
        )),
        Family::R21d => {
            let c45 = s(45);
            layers.push(LayerSpec::simple("conv1_s", LayerKind::Conv3d, [1, 7, 7], [1, 2, 2], [0, 3, 3], 3, c45));
            layers.push(LayerSpec::simple("conv1_t", LayerKind::Conv3d, [3, 1, 1], [1, 1, 1], [1, 0, 0], c45, c1));
        }
    }
    layers.push(LayerSpec::simple("pool1", LayerKind::MaxPool, [1, 3, 3], [1, 2, 2], [0, 1, 1], c1, c1));

    let widths = [64, 128, 256, 512];
    let mids = [144, 288, 576, 1152];
    let mut cin = c1;
    for stage in 0..4 {
        let width = s(widths[stage]);
        let (kind, mid, kernel, stride) = match config.family {
            Family::R2d => (
                LayerKind::Bottleneck2d,
                width,
                [1, 3, 3],
                if stage == 0 { [1, 1, 1] } else { [1, 2, 2] },
            ),
            Family::R21d => (
                LayerKind::Bottleneck21d,
                s(mids[stage]),
                [3, 3, 3],
                if stage == 0 { [1, 1, 1] } else { [2, 2, 2] },
            ),
        };
        layers.push(LayerSpec {
            name: format!("res{}", stage + 2),
            kind,
            kernel,
            stride,
            padding: [kernel[0] / 2, 1, 1],
            in_channels: cin,
            width,
            mid_channels: mid,
            out_channels: 4 * width,
            repeats: config.repeats[stage],
        });
        cin = 4 * width;
    }
    layers.push(LayerSpec::simple("gap", LayerKind::GlobalAvgPool, [1, 1, 1], [1, 1, 1], [0, 0, 0], cin, cin));
    layers.push(LayerSpec::simple("fc", LayerKind::Dense, [1, 1, 1], [1, 1, 1], [0, 0, 0], cin, config.num_classes));
    Ok(layers)
}

/// Count of weighted layers the way network names count them: conv₁ is one
/// layer, each bottleneck is three (a factorized (2+1)D conv counts once),
/// the classifier is one; shortcut projections are not counted.
pub fn weighted_layer_count(table: &[LayerSpec]) -> usize {
    let mut count = 0;
    let mut stem_counted = false;
    for l in table {
        match l.kind {
            LayerKind::Conv3d if !stem_counted => {
                count += 1;
                stem_counted = true;
            }
            LayerKind::Conv3d | LayerKind::MaxPool | LayerKind::GlobalAvgPool => {}
            LayerKind::Bottleneck2d | LayerKind::Bottleneck21d => count += 3 * l.repeats,
            LayerKind::Dense => count += 1,
        }
    }
    count
}

/// A convolution as it is actually executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvDesc {
    pub name: String,
    pub kernel: [usize; 3],
    pub window: Window3,
    pub cin: usize,
    pub cout: usize,
}

impl ConvDesc {
    fn new(name: String, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], cin: usize, cout: usize) -> Self {
        Self {
            name,
            kernel,
            window: Window3::new(stride, padding),
            cin,
            cout,
        }
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.window.output_extents("conv3d", input, self.kernel)
    }
}

/// Convolutions of block `index` within a bottleneck stage: the residual
/// branch in order, and the projection shortcut when the block changes
/// stride or channel count.
pub fn block_convs(stage: &LayerSpec, index: usize) -> (Vec<ConvDesc>, Option<ConvDesc>) {
    let first = index == 0;
    let cin = if first { stage.in_channels } else { stage.out_channels };
    let stride = if first { stage.stride } else { [1, 1, 1] };
    let p = format!("{}.{}", stage.name, index);
    let w = stage.width;
    let mut convs = vec![ConvDesc::new(format!("{p}.a"), [1, 1, 1], [1, 1, 1], [0, 0, 0], cin, w)];
    match stage.kind {
        LayerKind::Bottleneck21d => {
            convs.push(ConvDesc::new(
                format!("{p}.b_spatial"),
                [1, 3, 3],
                [1, stride[1], stride[2]],
                [0, 1, 1],
                w,
                stage.mid_channels,
            ));
            convs.push(ConvDesc::new(
                format!("{p}.b_temporal"),
                [3, 1, 1],
                [stride[0], 1, 1],
                [1, 0, 0],
                stage.mid_channels,
                w,
            ));
        }
        _ => convs.push(ConvDesc::new(format!("{p}.b"), stage.kernel, stride, stage.padding, w, w)),
    }
    convs.push(ConvDesc::new(format!("{p}.c"), [1, 1, 1], [1, 1, 1], [0, 0, 0], w, stage.out_channels));
    let shortcut = (cin != stage.out_channels || stride != [1, 1, 1])
        .then(|| ConvDesc::new(format!("{p}.shortcut"), [1, 1, 1], stride, [0, 0, 0], cin, stage.out_channels));
    (convs, shortcut)
}

/// Output `(t, h, w, c)` after each table row for an input clip of the
/// configured geometry.
pub fn output_sizes(config: &BackboneConfig) -> Result<Vec<(String, [usize; 4])>> {
    let table = spec_table(config)?;
    let mut ext = [config.clip_len, config.resolution, config.resolution];
    let mut c = 3;
    let mut sizes = Vec::new();
    for l in &table {
        match l.kind {
            LayerKind::Conv3d => {
                ext = Window3::new(l.stride, l.padding).output_extents("conv3d", ext, l.kernel)?;
                c = l.out_channels;
            }
            LayerKind::MaxPool => {
                ext = Window3::new(l.stride, l.padding).output_extents("max_pool3d", ext, l.kernel)?;
            }
            LayerKind::Bottleneck2d | LayerKind::Bottleneck21d => {
                for b in 0..l.repeats {
                    let (convs, _) = block_convs(l, b);
                    for conv in &convs {
                        ext = conv.output_extents(ext)?;
                    }
                }
                c = l.out_channels;
            }
            LayerKind::GlobalAvgPool => ext = [1, 1, 1],
            LayerKind::Dense => c = l.out_channels,
        }
        sizes.push((l.name.clone(), [ext[0], ext[1], ext[2], c]));
    }
    Ok(sizes)
}

#[derive(Debug, Clone)]
pub struct ConvBn {
    pub desc: ConvDesc,
    pub weight: ParamId,
    pub bn: BatchNormParams,
}

impl ConvBn {
    fn register<T: Real, R: Rng>(store: &mut ParamStore<T>, desc: ConvDesc, rng: &mut R) -> Self {
        let [kt, kh, kw] = desc.kernel;
        let fan_in = kt * kh * kw * desc.cin;
        let weight = store.add_uniform(&format!("{}.weight", desc.name), &[kt, kh, kw, desc.cin, desc.cout], fan_in, rng);
        let bn = BatchNormParams::register(store, &format!("{}.bn", desc.name), desc.cout);
        Self { desc, weight, bn }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode, relu: bool) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv3d(x, w, self.desc.window)?;
        let y = g.batch_norm_param(store, &self.bn, y, mode)?;
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub convs: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

impl ResBlock {
    /// Block `index` of a bottleneck stage, parameters registered in `store`.
    pub fn register<T: Real, R: Rng>(stage: &LayerSpec, index: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let (convs, shortcut) = block_convs(stage, index);
        Self {
            convs: convs.into_iter().map(|d| ConvBn::register(store, d, rng)).collect(),
            shortcut: shortcut.map(|d| ConvBn::register(store, d, rng)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h, mode, i != last)?;
        }
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, store, x, mode, false)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        g.relu(sum)
    }

    /// Batch norm closing the residual branch.
    pub fn last_bn(&self) -> &BatchNormParams {
        &self.convs[self.convs.len() - 1].bn
    }
}

/// A parameterized backbone. Parameters live in the store given to
/// [`build_backbone`].
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    table: Vec<LayerSpec>,
    stem: Vec<ConvBn>,
    pool: ([usize; 3], Window3),
    blocks: Vec<ResBlock>,
    head: Affine,
}

pub fn build_backbone<T: Real, R: Rng>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Backbone> {
    let table = spec_table(&config)?;
    let mut stem = Vec::new();
    let mut pool = None;
    let mut blocks = Vec::new();
    let mut head = None;
    for l in &table {
        match l.kind {
            LayerKind::Conv3d => {
                let desc = ConvDesc::new(l.name.clone(), l.kernel, l.stride, l.padding, l.in_channels, l.out_channels);
                stem.push(ConvBn::register(store, desc, rng));
            }
            LayerKind::MaxPool => pool = Some((l.kernel, Window3::new(l.stride, l.padding))),
            LayerKind::Bottleneck2d | LayerKind::Bottleneck21d => {
                for b in 0..l.repeats {
                    blocks.push(ResBlock::register(l, b, store, rng));
                }
            }
            LayerKind::GlobalAvgPool => {}
            LayerKind::Dense => {
                let w = store.add_uniform("fc.weight", &[l.in_channels, l.out_channels], l.in_channels, rng);
                let b = store.add_weight("fc.bias", Tensor::zeros(&[l.out_channels]));
                head = Some(Affine { weight: w, bias: Some(b) });
            }
        }
    }
    Ok(Backbone {
        config,
        table,
        stem,
        pool: pool.ok_or_else(|| Error::Config("table has no pool1".into()))?,
        blocks,
        head: head.ok_or_else(|| Error::Config("table has no classifier".into()))?,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn table(&self) -> &[LayerSpec] {
        &self.table
    }

    pub fn blocks(&self) -> &[ResBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &Affine {
        &self.head
    }

    /// res₅ channel count.
    pub fn feature_channels(&self) -> usize {
        4 * self.config.scaled(512)
    }

    /// Shape `[l, h, w, c]` of the res₅ map for the configured clip geometry.
    pub fn feature_shape(&self) -> Result<[usize; 4]> {
        let sizes = output_sizes(&self.config)?;
        sizes
            .iter()
            .find(|(n, _)| n == "res5")
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Config("table has no res5".into()))
    }

    /// Switch the expected clip length; parameters are unaffected.
    pub fn set_clip_len(&mut self, clip_len: usize) -> Result<()> {
        let mut cfg = self.config;
        cfg.clip_len = clip_len;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let expect = [c.clip_len, c.resolution, c.resolution, 3];
        if shape.len() != 5 || shape[1..] != expect {
            return Err(shape_err(
                "extract_features",
                format!("clip {:?} does not match [n, {}, {}, {}, 3]", shape, c.clip_len, c.resolution, c.resolution),
            ));
        }
        Ok(())
    }

    /// res₅ feature map `[n, l, h, w, c]` of a clip batch `[n, L, H, W, 3]`.
    pub fn extract_features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, clip: Var, mode: Mode) -> Result<Var> {
        self.check_clip(g.shape(clip))?;
        let mut x = clip;
        for conv in &self.stem {
            x = conv.forward(g, store, x, mode, true)?;
        }
        x = g.max_pool3d(x, self.pool.0, self.pool.1)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, mode)?;
        }
        Ok(x)
    }

    /// Clip logits through global average pooling and the backbone's own classifier.
    pub fn forward_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, clip: Var, mode: Mode) -> Result<Var> {
        let f = self.extract_features(g, store, clip, mode)?;
        let pooled = g.global_avg_pool(f)?;
        self.head.apply(g, store, pooled)
    }

    /// Eval-mode feature extraction on a tape that records no gradients.
    pub fn features<T: Real>(&self, store: &ParamStore<T>, clip: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(clip);
        let f = self.extract_features(&mut g, store, x, Mode::Eval)?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode clip logits without gradient tracking.
    pub fn logits<T: Real>(&self, store: &ParamStore<T>, clip: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(clip);
        let f = self.forward_logits(&mut g, store, x, Mode::Eval)?;
        Ok(g.value(f).clone())
    }
}
