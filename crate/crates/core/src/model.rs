//! Data-driven U-Net assembly: an encoder and three decoders joined by skip
//! concatenations, with a sigmoid-scaled disparity head.
//!
//! Layers get stable 1-based ids in declaration order (enc, dec0, dec1,
//! dec2); the head takes the id after the last dec2 layer. Backward
//! propagation stops at the input boundary of the earliest trainable block,
//! which for the reference config is layer 13 when only `dec0` is trained.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerKind, LayerSpec, LayerTape, ParamGrads, Weights};
use crate::tensor::{DType, Tensor};

const REFERENCE_107K: &str = include_str!("../configs/reference_107k.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Enc,
    Dec0,
    Dec1,
    Dec2,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Enc, Block::Dec0, Block::Dec1, Block::Dec2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Enc => "enc",
            Block::Dec0 => "dec0",
            Block::Dec1 => "dec1",
            Block::Dec2 => "dec2",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "enc" => Ok(Block::Enc),
            "dec0" => Ok(Block::Dec0),
            "dec1" => Ok(Block::Dec1),
            "dec2" => Ok(Block::Dec2),
            other => Err(Error::invalid(format!("unknown block `{other}` (expected enc, dec0, dec1 or dec2)"))),
        }
    }
}

/// Which blocks receive parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SparseUpdateConfig {
    pub enc: bool,
    pub dec0: bool,
    pub dec1: bool,
    pub dec2: bool,
}

impl SparseUpdateConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn full() -> Self {
        Self::from_bits(0b1111)
    }

    pub fn only(block: Block) -> Self {
        Self::from_blocks(&[block])
    }

    pub fn from_blocks(blocks: &[Block]) -> Self {
        let mut cfg = Self::none();
        for &b in blocks {
            cfg.set(b, true);
        }
        cfg
    }

    /// Bit `i` set means block `Block::ALL[i]` is trainable.
    pub fn from_bits(bits: u8) -> Self {
        SparseUpdateConfig {
            enc: bits & 1 != 0,
            dec0: bits & 2 != 0,
            dec1: bits & 4 != 0,
            dec2: bits & 8 != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        Block::ALL
            .iter()
            .enumerate()
            .filter(|(_, &b)| self.contains(b))
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }

    /// All 16 combinations, ordered by bit pattern (the first is `none`).
    pub fn all_combinations() -> Vec<Self> {
        (0..16).map(Self::from_bits).collect()
    }

    pub fn contains(&self, block: Block) -> bool {
        match block {
            Block::Enc => self.enc,
            Block::Dec0 => self.dec0,
            Block::Dec1 => self.dec1,
            Block::Dec2 => self.dec2,
        }
    }

    pub fn set(&mut self, block: Block, on: bool) {
        match block {
            Block::Enc => self.enc = on,
            Block::Dec0 => self.dec0 = on,
            Block::Dec1 => self.dec1 = on,
            Block::Dec2 => self.dec2 = on,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bits() == 0
    }

    pub fn blocks(&self) -> Vec<Block> {
        Block::ALL.into_iter().filter(|&b| self.contains(b)).collect()
    }

    /// Earliest trainable block in topological order.
    pub fn earliest(&self) -> Option<Block> {
        Block::ALL.into_iter().find(|&b| self.contains(b))
    }

    pub fn is_subset_of(&self, other: &SparseUpdateConfig) -> bool {
        self.bits() & !other.bits() == 0
    }

    /// `enc+dec0` style label; `none` for the empty set.
    pub fn label(&self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.blocks().iter().map(|b| b.name()).collect::<Vec<_>>().join("+")
    }
}

impl fmt::Display for SparseUpdateConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for SparseUpdateConfig {
    type Err = Error;

    /// Accepts `none`, `all`/`full`, or a `,`/`+` separated list of blocks.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => return Ok(Self::none()),
            "all" | "full" => return Ok(Self::full()),
            _ => {}
        }
        let blocks = s.split([',', '+']).map(Block::from_str).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_blocks(&blocks))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// One entry of a block's layer list in the architecture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerEntry {
    Conv2d {
        #[serde(rename = "in")]
        in_channels: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "trconv2d")]
    TrConv2d {
        #[serde(rename = "in")]
        in_channels: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    LeakyRelu,
    /// Append the output of layer `with` along the channel axis.
    Concat { with: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockLayers {
    #[serde(default)]
    pub enc: Vec<LayerEntry>,
    #[serde(default)]
    pub dec0: Vec<LayerEntry>,
    #[serde(default)]
    pub dec1: Vec<LayerEntry>,
    #[serde(default)]
    pub dec2: Vec<LayerEntry>,
}

impl BlockLayers {
    pub fn get(&self, block: Block) -> &[LayerEntry] {
        match block {
            Block::Enc => &self.enc,
            Block::Dec0 => &self.dec0,
            Block::Dec1 => &self.dec1,
            Block::Dec2 => &self.dec2,
        }
    }
}

/// Architecture description, stored as TOML.
///
/// Schema: `name`, `version`, `leaky_slope`, `max_disparity`, an `[input]`
/// table (`channels`, `height`, `width`) and a `[blocks]` table with one
/// layer list per block. Layer entries are `{ kind = "conv2d" | "trconv2d",
/// in, out, kernel, stride, padding }`, `{ kind = "leaky_relu" }` or
/// `{ kind = "concat", with = <encoder layer id> }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_slope")]
    pub leaky_slope: f32,
    pub max_disparity: f32,
    pub input: InputSpec,
    pub blocks: BlockLayers,
}

fn default_version() -> u32 {
    1
}

fn default_slope() -> f32 {
    0.2
}

/// A layer with its resolved shapes and global id.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub id: usize,
    pub block: Block,
    pub spec: LayerSpec,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    /// For concatenations, the id of the layer whose output is appended.
    pub skip_from: Option<usize>,
}

impl LayerInfo {
    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn output_len(&self) -> usize {
        self.output.0 * self.output.1 * self.output.2
    }
}

/// The validated, shape-annotated layer sequence of an [`ArchConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub layers: Vec<LayerInfo>,
    /// Id of the sigmoid head, which belongs to dec2.
    pub head_id: usize,
    pub output: (usize, usize, usize),
}

impl Graph {
    pub fn layer(&self, id: usize) -> &LayerInfo {
        &self.layers[id - 1]
    }

    /// Id of the first layer of `block`.
    pub fn first_layer_of(&self, block: Block) -> Option<usize> {
        self.layers.iter().find(|l| l.block == block).map(|l| l.id)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn block_param_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for l in &self.layers {
            counts[l.block.index()] += l.spec.param_count();
        }
        counts
    }

    /// Ids of layers whose outputs feed a concatenation.
    pub fn skip_sources(&self) -> Vec<usize> {
        self.layers.iter().filter_map(|l| l.skip_from).collect()
    }
}

impl ArchConfig {
    /// The shipped reference configuration.
    pub fn reference_107k() -> Self {
        Self::from_toml_str(REFERENCE_107K).expect("shipped reference config parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ArchConfig = toml::from_str(text).map_err(|e| Error::config(format!("architecture file: {e}")))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("architecture serialises")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Same layers at a different input resolution.
    pub fn with_input_size(&self, height: usize, width: usize) -> Self {
        let mut cfg = self.clone();
        cfg.input.height = height;
        cfg.input.width = width;
        cfg
    }

    /// (skip source id, destination block) pairs.
    pub fn skips(&self) -> Result<Vec<(usize, Block)>> {
        Ok(self.resolve()?.layers.iter().filter_map(|l| l.skip_from.map(|s| (s, l.block))).collect())
    }

    /// Validate the layer lists and annotate every layer with its shapes.
    pub fn resolve(&self) -> Result<Graph> {
        if !(self.max_disparity > 0.0 && self.max_disparity.is_finite()) {
            return Err(Error::config("max_disparity must be positive and finite"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope must lie in (0, 1)"));
        }
        let InputSpec { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::config("input dimensions must be positive"));
        }
        let mut layers: Vec<LayerInfo> = Vec::new();
        let mut shape = (channels, height, width);
        for block in Block::ALL {
            let entries = self.blocks.get(block);
            if entries.is_empty() {
                return Err(Error::config(format!("block {block} has no layers")));
            }
            let block_in = shape;
            let mut upscales = 0;
            for entry in entries {
                let id = layers.len() + 1;
                let here = |msg: String| Error::config(format!("layer {id} ({block}): {msg}"));
                let (c, h, w) = shape;
                let (spec, skip_from) = match *entry {
                    LayerEntry::Conv2d {
                        in_channels,
                        out,
                        kernel,
                        stride,
                        padding,
                    }
                    | LayerEntry::TrConv2d {
                        in_channels,
                        out,
                        kernel,
                        stride,
                        padding,
                    } => {
                        if in_channels != c {
                            return Err(here(format!("declares {in_channels} input channels but receives {c}")));
                        }
                        if out == 0 || kernel == 0 || stride == 0 {
                            return Err(here("channels, kernel and stride must be positive".into()));
                        }
                        let spec = if matches!(entry, LayerEntry::Conv2d { .. }) {
                            LayerSpec::conv(in_channels, out, kernel, stride, padding)
                        } else {
                            LayerSpec::trconv(in_channels, out, kernel, stride, padding)
                        };
                        (spec, None)
                    }
                    LayerEntry::LeakyRelu => (LayerSpec::leaky_relu(c, self.leaky_slope), None),
                    LayerEntry::Concat { with } => {
                        if with == 0 || with >= id {
                            return Err(here(format!("concat source {with} is not an earlier layer")));
                        }
                        let src: &LayerInfo = &layers[with - 1];
                        if src.block != Block::Enc {
                            return Err(here(format!("concat source {with} is not an encoder layer")));
                        }
                        let (sc, sh, sw) = src.output;
                        if (sh, sw) != (h, w) {
                            return Err(here(format!(
                                "skip from layer {with} is {sh}x{sw} but the decoder path is {h}x{w}"
                            )));
                        }
                        (LayerSpec::concat(c, sc), Some(with))
                    }
                };
                let (oh, ow) = spec.output_hw(h, w).map_err(|e| here(e.to_string()))?;
                if spec.kind == LayerKind::TrConv2d {
                    upscales += 1;
                }
                let output = (spec.out_channels, oh, ow);
                layers.push(LayerInfo {
                    id,
                    block,
                    spec,
                    input: shape,
                    output,
                    skip_from,
                });
                shape = output;
            }
            if block != Block::Enc {
                let doubled = (shape.1, shape.2) == (2 * block_in.1, 2 * block_in.2);
                if upscales != 1 || !doubled {
                    return Err(Error::config(format!(
                        "block {block} must upscale exactly once by 2x: {}x{} -> {}x{} with {upscales} transposed convolutions",
                        block_in.1, block_in.2, shape.1, shape.2
                    )));
                }
            }
        }
        if shape != (1, height, width) {
            return Err(Error::config(format!(
                "network output is {}x{}x{}, expected 1x{height}x{width}",
                shape.0, shape.1, shape.2
            )));
        }
        Ok(Graph {
            head_id: layers.len() + 1,
            layers,
            output: shape,
        })
    }
}

/// What a forward pass keeps for a given sparse-update request.
///
/// Shared by the model (what it records) and the memory planner (what it
/// counts). A conv/trconv keeps its input iff its block is trainable; a
/// leaky rectifier keeps its input iff it lies at or after the first layer
/// of the earliest trainable block; the head keeps its output whenever any
/// block is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct TapePlan {
    pub retain_input: Vec<bool>,
    pub retain_head: bool,
    pub layer_trainable: Vec<bool>,
    /// Global id of the first layer of the earliest trainable block.
    pub stop_layer: Option<usize>,
}

pub fn tape_plan(graph: &Graph, cfg: &SparseUpdateConfig) -> TapePlan {
    let stop_layer = cfg.earliest().and_then(|b| graph.first_layer_of(b));
    let layer_trainable: Vec<bool> = graph.layers.iter().map(|l| cfg.contains(l.block)).collect();
    let retain_input = graph
        .layers
        .iter()
        .map(|l| match l.spec.kind {
            LayerKind::Conv2d | LayerKind::TrConv2d => cfg.contains(l.block),
            LayerKind::LeakyRelu => stop_layer.is_some_and(|s| l.id >= s),
            LayerKind::Concat => false,
        })
        .collect();
    TapePlan {
        retain_input,
        retain_head: stop_layer.is_some(),
        layer_trainable,
        stop_layer,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Weights,
    pub bias: Vec<f32>,
}

/// Recorded forward state.
#[derive(Debug, Clone)]
pub struct Tapes {
    pub request: SparseUpdateConfig,
    pub layers: Vec<LayerTape>,
    pub head_output: Option<Tensor>,
}

impl Tapes {
    /// Ids of layers whose input was retained.
    pub fn retained_ids(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, t)| t.retained_input.is_some())
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Number of retained elements, head output included.
    pub fn retained_elements(&self) -> usize {
        self.layers.iter().filter_map(|t| t.retained_input.as_ref()).map(Tensor::len).sum::<usize>()
            + self.head_output.as_ref().map_or(0, Tensor::len)
    }
}

/// Per-layer parameter gradients; `None` for frozen or parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrads>>,
    pub stop_layer: Option<usize>,
}

impl Gradients {
    pub fn present_ids(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|g| {
                    g.as_ref().map(|p| ParamGrads {
                        weights: Weights::zeros(p.weights.dims),
                        bias: vec![0.0; p.bias.len()],
                    })
                })
                .collect(),
            stop_layer: self.stop_layer,
        }
    }

    /// `self += other`, layer by layer. Both must cover the same layers.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::contract("gradient sets of different models"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.weights.data.iter_mut().zip(&b.weights.data) {
                        *x += y;
                    }
                    for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                        *x += y;
                    }
                }
                (None, None) => {}
                _ => return Err(Error::contract("gradient sets cover different layers")),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f32) {
        for p in self.layers.iter_mut().flatten() {
            p.weights.data.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v *= alpha);
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| p.weights.data.iter().chain(&p.bias))
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// A built network: architecture, parameters and numeric policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    graph: Graph,
    params: Vec<Option<LayerParams>>,
    dtype: DType,
}

pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<Model> {
    Model::build(arch, seed)
}

/// Per-block fraction of the total parameter count (enc, dec0, dec1, dec2).
pub fn block_param_shares(model: &Model) -> [f64; 4] {
    let counts = model.graph.block_param_counts();
    let total: usize = counts.iter().sum();
    counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
}

const CKPT_MAGIC: &[u8; 8] = b"UMDECKPT";
const CKPT_VERSION: u32 = 1;

impl Model {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. `fan_in` is
    /// `in·kh·kw` for convolutions and `in·kh·kw/stride²` (inputs reaching one
    /// output) for transposed convolutions.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Model> {
        let graph = arch.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = graph
            .layers
            .iter()
            .map(|l| {
                l.spec.has_params().then(|| {
                    let (kh, kw) = l.spec.kernel;
                    let mut fan_in = (l.spec.in_channels * kh * kw) as f32;
                    if l.spec.kind == LayerKind::TrConv2d {
                        fan_in /= (l.spec.stride * l.spec.stride) as f32;
                    }
                    let bound = 1.0 / fan_in.max(1.0).sqrt();
                    let data = (0..l.spec.weight_count()).map(|_| rng.gen_range(-bound..bound)).collect();
                    LayerParams {
                        weights: Weights::from_vec(l.spec.weight_dims(), data).expect("sized by spec"),
                        bias: vec![0.0; l.spec.out_channels],
                    }
                })
            })
            .collect();
        Ok(Model {
            arch: arch.clone(),
            graph,
            params,
            dtype: DType::F32,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Switch numeric policy; bf16 quantizes the stored parameters.
    pub fn set_dtype(&mut self, dtype: DType) {
        self.dtype = dtype;
        for p in self.params.iter_mut().flatten() {
            dtype.round_slice(&mut p.weights.data);
            dtype.round_slice(&mut p.bias);
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.set_dtype(dtype);
        self
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn total_params(&self) -> usize {
        self.graph.param_count()
    }

    pub fn max_disparity(&self) -> f32 {
        self.arch.max_disparity
    }

    /// All parameters of one block, flattened in declaration order.
    pub fn block_values(&self, block: Block) -> Vec<f32> {
        self.graph
            .layers
            .iter()
            .zip(&self.params)
            .filter(|(l, _)| l.block == block)
            .filter_map(|(_, p)| p.as_ref())
            .flat_map(|p| p.weights.data.iter().chain(&p.bias).copied())
            .collect()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let i = self.arch.input;
        if image.shape() != (i.channels, i.height, i.width) {
            return Err(Error::invalid(format!(
                "input image is {:?}, model expects {}x{}x{}",
                image.shape(),
                i.channels,
                i.height,
                i.width
            )));
        }
        Ok(())
    }

    /// Disparity prediction without recording tapes.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward(image, None)?.0)
    }

    /// Run the network. With a tape request, the returned tapes retain
    /// exactly what [`tape_plan`] prescribes for it.
    pub fn forward(&self, image: &Tensor, tape_request: Option<&SparseUpdateConfig>) -> Result<(Tensor, Tapes)> {
        self.check_image(image)?;
        let request = tape_request.copied().unwrap_or_default();
        let plan = tape_plan(&self.graph, &request);
        let sources = self.graph.skip_sources();
        let mut skips: Vec<(usize, Tensor)> = Vec::new();
        let mut tapes = Vec::with_capacity(self.graph.layers.len());
        let mut x = image.clone().with_dtype(self.dtype);
        for (idx, layer) in self.graph.layers.iter().enumerate() {
            let y = match layer.spec.kind {
                LayerKind::Conv2d | LayerKind::TrConv2d => {
                    let p = self.params[idx].as_ref().expect("parameterised layer");
                    layers::param_forward(&x, &p.weights, &p.bias, &layer.spec)?
                }
                LayerKind::LeakyRelu => layers::leaky_relu(&x, layer.spec.activation_slope),
                LayerKind::Concat => {
                    let src = layer.skip_from.expect("concat has a source");
                    let skip = &skips.iter().find(|(id, _)| *id == src).expect("source ran earlier").1;
                    layers::concat_forward(&x, skip)?
                }
            };
            let input = std::mem::replace(&mut x, y);
            tapes.push(if plan.retain_input[idx] {
                LayerTape::retaining(input)
            } else {
                LayerTape::shape_only(&input)
            });
            if sources.contains(&layer.id) {
                skips.push((layer.id, x.clone()));
            }
        }
        let out = self.head(&x);
        let head_output = plan.retain_head.then(|| out.clone());
        Ok((
            out,
            Tapes {
                request,
                layers: tapes,
                head_output,
            },
        ))
    }

    /// `max_disparity * sigmoid(z)`, kept strictly inside `(0, max_disparity)`.
    fn head(&self, z: &Tensor) -> Tensor {
        let m = self.arch.max_disparity;
        let dtype = self.dtype;
        let top = {
            let below = f32::from_bits(m.to_bits() - 1);
            match dtype {
                DType::F32 => below,
                DType::Bf16 => f32::from_bits(below.to_bits() & 0xFFFF_0000),
            }
        };
        let bottom = f32::MIN_POSITIVE;
        z.map(|v| {
            let s = 1.0 / (1.0 + (-v).exp());
            dtype.round(m * s).clamp(bottom, top)
        })
    }

    /// Parameter gradients for the blocks in `cfg`, propagating no further
    /// upstream than the first layer of the earliest trainable block.
    pub fn backward(&self, tapes: &Tapes, loss_grad: &Tensor, cfg: &SparseUpdateConfig) -> Result<Gradients> {
        let n = self.graph.layers.len();
        let mut grads: Vec<Option<ParamGrads>> = vec![None; n];
        let plan = tape_plan(&self.graph, cfg);
        let Some(stop) = plan.stop_layer else {
            return Ok(Gradients {
                layers: grads,
                stop_layer: None,
            });
        };
        if !cfg.is_subset_of(&tapes.request) {
            return Err(Error::contract(format!(
                "backward for {cfg} but tapes were recorded for {}",
                tapes.request
            )));
        }
        if tapes.layers.len() != n {
            return Err(Error::contract("tapes belong to a different model"));
        }
        if loss_grad.shape() != self.graph.output {
            return Err(Error::invalid(format!(
                "loss gradient is {:?}, model output is {:?}",
                loss_grad.shape(),
                self.graph.output
            )));
        }
        let d = tapes
            .head_output
            .as_ref()
            .ok_or_else(|| Error::contract("head output was not retained"))?;
        let m = self.arch.max_disparity;
        let data = d
            .data()
            .iter()
            .zip(loss_grad.data())
            .map(|(&d, &g)| g * d * (1.0 - d / m))
            .collect();
        let mut g = Tensor::from_vec(1, d.height(), d.width(), data)?.with_dtype(self.dtype);

        let mut pending: Vec<(usize, Tensor)> = Vec::new();
        for idx in (stop - 1..n).rev() {
            let layer = &self.graph.layers[idx];
            if let Some(pos) = pending.iter().position(|(id, _)| *id == layer.id) {
                let (_, extra) = pending.swap_remove(pos);
                g.add_assign(&extra)?;
            }
            let need_input = idx + 1 > stop;
            let tape = &tapes.layers[idx];
            g = match layer.spec.kind {
                LayerKind::Conv2d | LayerKind::TrConv2d => {
                    let p = self.params[idx].as_ref().expect("parameterised layer");
                    let out = layers::param_backward(tape, &p.weights, &g, &layer.spec, plan.layer_trainable[idx], need_input)?;
                    grads[idx] = out.params;
                    match out.input {
                        Some(gi) => gi,
                        None => break,
                    }
                }
                LayerKind::LeakyRelu => {
                    if !need_input {
                        break;
                    }
                    layers::leaky_relu_grad(tape, &g, layer.spec.activation_slope)?
                }
                LayerKind::Concat => {
                    if !need_input {
                        break;
                    }
                    let (main, skip) = layers::concat_backward(&g, layer.spec.in_channels)?;
                    let src = layer.skip_from.expect("concat has a source");
                    if src >= stop {
                        pending.push((src, skip));
                    }
                    main
                }
            };
        }
        Ok(Gradients {
            layers: grads,
            stop_layer: Some(stop),
        })
    }

    /// Checkpoint: magic, version, dtype, arch TOML, then every parameterised
    /// layer's weights and bias as little-endian f32 in declaration order.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let arch = self.arch.to_toml_string();
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&[match self.dtype {
            DType::F32 => 0,
            DType::Bf16 => 1,
        }])?;
        w.write_all(&[0u8; 3])?;
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(arch.as_bytes())?;
        for p in self.params.iter().flatten() {
            for v in p.weights.data.iter().chain(&p.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut off = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if buf.len() < off + n {
                return Err(Error::format(off as u64, format!("checkpoint truncated in {what}")));
            }
            off += n;
            Ok(&buf[off - n..off])
        };
        if take(8, "magic")? != CKPT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let dtype = match take(4, "dtype")?[0] {
            0 => DType::F32,
            1 => DType::Bf16,
            other => return Err(Error::format(12, format!("unknown dtype tag {other}"))),
        };
        let len = u32::from_le_bytes(take(4, "arch length")?.try_into().unwrap()) as usize;
        let text = std::str::from_utf8(take(len, "arch text")?).map_err(|_| Error::format(20, "arch text is not UTF-8"))?;
        let arch = ArchConfig::from_toml_str(text)?;
        let mut model = Model::build(&arch, 0)?;
        model.dtype = dtype;
        for p in model.params.iter_mut().flatten() {
            for v in p.weights.data.iter_mut().chain(p.bias.iter_mut()) {
                *v = f32::from_le_bytes(take(4, "parameters")?.try_into().unwrap());
            }
        }
        let end = 20 + len + 4 * model.total_params();
        if buf.len() != end {
            return Err(Error::format(end as u64, "trailing bytes after parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Model> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
