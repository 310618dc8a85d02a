//! Tetrahedron-Net: one shared encoder feeding a stack of cooperating
//! decoders.
//!
//! Notation used throughout: `x_enc^i` is the encoder map at scale `i`
//! (`i = 0` is the concatenated fixed/moving input, `i = L` the pooled
//! bottleneck), and `dec(ℓ, j)` is the output of stage `j` of decoder level
//! `ℓ` (levels count from 1). Stage 0 of every level upsamples the
//! bottleneck; stage `k ≥ 1` processes maps at scale `L − k`. Stage `L`
//! runs at full resolution without upsampling. The first level omits it
//! when deeper levels follow, so its last output is the upsampled stage
//! `L − 1`; every other level has stages `0..=L`. A level reads, at each
//! scale, the most refined map the previous level produced there, and the
//! field head sits on the final stage of the last level.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::nn::{Bindings, Conv, ConvBlock, DenseBlock, FieldHead, InitGain, Module, ParamStore, UpBlock};
use crate::tensor::Tensor;

/// Wiring style of decoder levels 2 and above.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dec2Variant {
    Unet,
    UnetPlusPlus,
    Unet3Plus,
    DenseUnet,
}

impl Dec2Variant {
    pub const ALL: [Dec2Variant; 4] = [
        Dec2Variant::Unet,
        Dec2Variant::UnetPlusPlus,
        Dec2Variant::Unet3Plus,
        Dec2Variant::DenseUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dec2Variant::Unet => "unet",
            Dec2Variant::UnetPlusPlus => "unetpp",
            Dec2Variant::Unet3Plus => "unet3p",
            Dec2Variant::DenseUnet => "denseunet",
        }
    }
}

impl fmt::Display for Dec2Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dec2Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dec2Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "field `dec2_variant`: unknown variant `{s}` (expected unet, unetpp, unet3p or denseunet)"
                ))
            })
    }
}

/// Where encoder features enter a second-level stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipPolicy {
    /// Concatenate encoder features directly with the decoder inputs.
    Direct,
    /// Fuse the decoder inputs first, then concatenate encoder features.
    AfterFusion,
}

pub fn skip_policy(variant: Dec2Variant) -> SkipPolicy {
    match variant {
        Dec2Variant::Unet | Dec2Variant::DenseUnet => SkipPolicy::Direct,
        Dec2Variant::UnetPlusPlus | Dec2Variant::Unet3Plus => SkipPolicy::AfterFusion,
    }
}

pub const MODEL_KEYS: [&str; 8] = [
    "scales",
    "enc_channels",
    "dec_channels",
    "dec2_variant",
    "use_encoder_skips_in_dec2",
    "decoder_levels",
    "in_channels",
    "dense_layers",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of scales `L`.
    pub scales: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub dec2_variant: Dec2Variant,
    pub use_encoder_skips_in_dec2: bool,
    pub decoder_levels: usize,
    /// Channels of the concatenated fixed/moving input.
    pub in_channels: usize,
    /// Layers per dense block in the `denseunet` variant.
    pub dense_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 4,
            enc_channels: vec![16, 32, 32, 64],
            dec_channels: vec![64, 32, 32, 16],
            dec2_variant: Dec2Variant::Unet,
            use_encoder_skips_in_dec2: true,
            decoder_levels: 2,
            in_channels: 2,
            dense_layers: 3,
        }
    }
}

impl ModelConfig {
    /// Config with the given encoder widths and mirrored decoder widths.
    pub fn with_widths(enc_channels: &[usize]) -> Self {
        ModelConfig {
            scales: enc_channels.len(),
            enc_channels: enc_channels.to_vec(),
            dec_channels: enc_channels.iter().rev().copied().collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 1 {
            return Err(Error::config("field `scales` must be at least 1"));
        }
        if self.enc_channels.len() != self.scales {
            return Err(Error::config(format!(
                "field `enc_channels` has {} entries, `scales` is {}",
                self.enc_channels.len(),
                self.scales
            )));
        }
        if self.dec_channels.len() != self.scales {
            return Err(Error::config(format!(
                "field `dec_channels` has {} entries, `scales` is {}",
                self.dec_channels.len(),
                self.scales
            )));
        }
        if self.decoder_levels < 1 {
            return Err(Error::config("field `decoder_levels` must be at least 1"));
        }
        if self.in_channels < 1 {
            return Err(Error::config("field `in_channels` must be at least 1"));
        }
        if self.dense_layers < 1 {
            return Err(Error::config("field `dense_layers` must be at least 1"));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return Err(Error::config("channel widths must be positive"));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by `2^L`.
    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << self.scales;
        if dims.iter().any(|&d| d % f != 0 || d == 0) {
            return Err(Error::config(format!(
                "spatial dims {dims:?} are not divisible by 2^{} = {f}",
                self.scales
            )));
        }
        Ok(())
    }

    /// Channels of `x_enc^i`.
    pub fn enc_width(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.enc_channels[i - 1]
        }
    }

    /// Channels of stage `j` output in any decoder level.
    pub fn dec_width(&self, j: usize) -> usize {
        if j == 0 {
            self.enc_width(self.scales)
        } else {
            self.dec_channels[j - 1]
        }
    }

    pub fn growth_rate(&self, stage_width: usize) -> usize {
        ((stage_width as f64 / self.dense_layers as f64).round() as usize).max(1)
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.push("scales", self.scales);
        doc.push_list("enc_channels", &self.enc_channels);
        doc.push_list("dec_channels", &self.dec_channels);
        doc.push("dec2_variant", self.dec2_variant);
        doc.push("use_encoder_skips_in_dec2", self.use_encoder_skips_in_dec2);
        doc.push("decoder_levels", self.decoder_levels);
        doc.push("in_channels", self.in_channels);
        doc.push("dense_layers", self.dense_layers);
        doc
    }

    /// Reads model fields from `doc`, ignoring keys it does not own.
    /// Missing fields keep their defaults; decoder widths mirror the encoder
    /// when only `enc_channels` is given.
    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        if let Some(v) = doc.parse_list("enc_channels")? {
            cfg.enc_channels = v;
            cfg.scales = cfg.enc_channels.len();
            cfg.dec_channels = cfg.enc_channels.iter().rev().copied().collect();
        }
        if let Some(v) = doc.parse_opt("scales")? {
            cfg.scales = v;
        }
        if let Some(v) = doc.parse_list("dec_channels")? {
            cfg.dec_channels = v;
        }
        if let Some(v) = doc.get("dec2_variant") {
            cfg.dec2_variant = v.parse()?;
        }
        if let Some(v) = doc.parse_opt("use_encoder_skips_in_dec2")? {
            cfg.use_encoder_skips_in_dec2 = v;
        }
        if let Some(v) = doc.parse_opt("decoder_levels")? {
            cfg.decoder_levels = v;
        }
        if let Some(v) = doc.parse_opt("in_channels")? {
            cfg.in_channels = v;
        }
        if let Some(v) = doc.parse_opt("dense_layers")? {
            cfg.dense_layers = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A feature map in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapRef {
    Enc(usize),
    Dec { level: usize, stage: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    /// The pooled bottleneck entering stage 0 of a level.
    Bottleneck,
    /// An encoder skip connection.
    EncoderSkip,
    /// Output of a decoder stage.
    Decoder,
}

/// How a source map is brought to the consuming stage's scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resample {
    Identity,
    /// Max-pool by this factor.
    Pool(usize),
    /// Learned transposed-convolution upsampling by this factor.
    Up(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub source: MapRef,
    pub kind: EdgeKind,
    pub resample: Resample,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageBlock {
    /// Stage 0: upsample the bottleneck, nothing else.
    UpOnly,
    Conv,
    Dense,
}

/// Inputs and processing of one decoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageWiring {
    pub level: usize,
    pub stage: usize,
    /// Downsampling exponent of the maps this stage consumes.
    pub scale: usize,
    /// Inputs merged by a fusion block before `direct` joins them. Empty
    /// unless the level follows the after-fusion skip policy.
    pub fused: Vec<Edge>,
    pub direct: Vec<Edge>,
    pub block: StageBlock,
    pub upsample: bool,
    pub out_channels: usize,
}

impl StageWiring {
    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.fused.iter().chain(&self.direct)
    }

    pub fn out_scale(&self) -> usize {
        if self.upsample {
            self.scale - 1
        } else {
            self.scale
        }
    }
}

/// Stage-by-stage description of every decoder connection.
#[derive(Clone, Debug, PartialEq)]
pub struct WiringTable {
    pub scales: usize,
    pub levels: Vec<Vec<StageWiring>>,
}

impl WiringTable {
    pub fn stages(&self) -> impl Iterator<Item = &StageWiring> {
        self.levels.iter().flatten()
    }

    pub fn stage(&self, level: usize, stage: usize) -> &StageWiring {
        &self.levels[level - 1][stage]
    }

    /// Downsampling exponent of a map.
    pub fn map_scale(&self, m: MapRef) -> usize {
        match m {
            MapRef::Enc(i) => i,
            MapRef::Dec { level, stage } => self.stage(level, stage).out_scale(),
        }
    }
}

fn resample_between(from: usize, to: usize) -> Resample {
    use std::cmp::Ordering::*;
    match from.cmp(&to) {
        Equal => Resample::Identity,
        Greater => Resample::Up(1 << (from - to)),
        Less => Resample::Pool(1 << (to - from)),
    }
}

/// Builds the wiring table for `cfg`.
pub fn wiring(cfg: &ModelConfig) -> Result<WiringTable> {
    cfg.validate()?;
    let l = cfg.scales;
    let stage_out_scale = |stage: usize| if stage < l { l - stage - 1 } else { 0 };
    // Level 1 stops at the stage whose upsampled output reaches full
    // resolution unless it carries the head; deeper levels always end with
    // a full-resolution stage so the next level has a refined map to read.
    let stage_count = |level: usize| {
        if level == 1 && cfg.decoder_levels > 1 {
            l
        } else {
            l + 1
        }
    };
    // Most refined stage of `level` whose output sits at scale `s`.
    let latest_at = |level: usize, s: usize| {
        if s == 0 && stage_count(level) == l + 1 {
            l
        } else {
            l - 1 - s
        }
    };
    let dec_edge = |level: usize, stage: usize, target: usize| Edge {
        source: MapRef::Dec { level, stage },
        kind: EdgeKind::Decoder,
        resample: resample_between(stage_out_scale(stage), target),
        channels: cfg.dec_width(stage),
    };
    let enc_skip = |k: usize| Edge {
        source: MapRef::Enc(l - k),
        kind: EdgeKind::EncoderSkip,
        resample: Resample::Identity,
        channels: cfg.enc_width(l - k),
    };

    let mut levels = Vec::with_capacity(cfg.decoder_levels);
    for level in 1..=cfg.decoder_levels {
        let n_stages = stage_count(level);
        let mut stages = Vec::with_capacity(n_stages);
        stages.push(StageWiring {
            level,
            stage: 0,
            scale: l,
            fused: Vec::new(),
            direct: vec![Edge {
                source: MapRef::Enc(l),
                kind: EdgeKind::Bottleneck,
                resample: Resample::Identity,
                channels: cfg.enc_width(l),
            }],
            block: StageBlock::UpOnly,
            upsample: true,
            out_channels: cfg.dec_width(0),
        });
        for k in 1..n_stages {
            let scale = l - k;
            let mut fused = Vec::new();
            let mut direct = Vec::new();
            let mut block = StageBlock::Conv;
            if level == 1 {
                direct.push(enc_skip(k));
                direct.push(dec_edge(1, k - 1, scale));
            } else {
                let skip = cfg.use_encoder_skips_in_dec2.then(|| enc_skip(k));
                match cfg.dec2_variant {
                    Dec2Variant::Unet | Dec2Variant::DenseUnet => {
                        direct.extend(skip);
                        direct.push(dec_edge(level - 1, latest_at(level - 1, scale), scale));
                        direct.push(dec_edge(level, k - 1, scale));
                        if cfg.dec2_variant == Dec2Variant::DenseUnet {
                            block = StageBlock::Dense;
                        }
                    }
                    Dec2Variant::UnetPlusPlus => {
                        fused.push(dec_edge(level - 1, latest_at(level - 1, scale), scale));
                        fused.extend((0..k).map(|j| dec_edge(level, j, scale)));
                        direct.extend(skip);
                    }
                    Dec2Variant::Unet3Plus => {
                        fused.extend((0..l).rev().map(|s| dec_edge(level - 1, latest_at(level - 1, s), scale)));
                        fused.extend((0..k).map(|j| dec_edge(level, j, scale)));
                        direct.extend(skip);
                    }
                }
            }
            stages.push(StageWiring {
                level,
                stage: k,
                scale,
                fused,
                direct,
                block,
                upsample: k < l,
                out_channels: cfg.dec_width(k),
            });
        }
        levels.push(stages);
    }
    Ok(WiringTable { scales: l, levels })
}

/// Multi-scale features produced by an encoder.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    /// `x_enc^0 ..= x_enc^L`.
    pub maps: Vec<Var>,
}

impl EncoderFeatures {
    /// Skip maps `x_enc^0 .. x_enc^{L-1}`.
    pub fn skips(&self) -> &[Var] {
        &self.maps[..self.maps.len() - 1]
    }

    pub fn bottleneck(&self) -> Var {
        *self.maps.last().expect("encoder produced no maps")
    }
}

/// Pluggable feature extractor. Any encoder that yields `L + 1` maps with
/// `x_enc^i` at `1 / 2^i` resolution can drive the decoders.
pub trait Encoder: Module + Send + Sync {
    fn scales(&self) -> usize;
    fn width(&self, scale: usize) -> usize;
    fn encode(&self, g: &mut Graph, p: &Bindings, input: Var) -> Result<EncoderFeatures>;
}

/// U-Net encoder: `x_enc^i = Maxpool(CR(x_enc^{i−1}))`.
#[derive(Clone, Debug)]
pub struct UNetEncoder {
    pub blocks: Vec<ConvBlock>,
    in_channels: usize,
}

impl Encoder for UNetEncoder {
    fn scales(&self) -> usize {
        self.blocks.len()
    }

    fn width(&self, scale: usize) -> usize {
        if scale == 0 {
            self.in_channels
        } else {
            self.blocks[scale - 1].out_channels()
        }
    }

    fn encode(&self, g: &mut Graph, p: &Bindings, input: Var) -> Result<EncoderFeatures> {
        let mut maps = vec![input];
        let mut x = input;
        for block in &self.blocks {
            let h = block.forward(g, p, x)?;
            x = g.maxpool3d(h, 2, 2)?;
            maps.push(x);
        }
        Ok(EncoderFeatures { maps })
    }
}

impl Module for UNetEncoder {
    fn param_names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(Module::param_names).collect()
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.init(store, rng))
    }
}

pub fn build_encoder(cfg: &ModelConfig, store: &mut ParamStore) -> Result<UNetEncoder> {
    cfg.validate()?;
    let blocks = (1..=cfg.scales)
        .map(|i| ConvBlock::new(store, &format!("enc.{}", i - 1), cfg.enc_width(i - 1), cfg.enc_width(i)))
        .collect::<Result<_>>()?;
    Ok(UNetEncoder {
        blocks,
        in_channels: cfg.in_channels,
    })
}

#[derive(Clone, Debug)]
enum StageBody {
    None,
    Conv(ConvBlock),
    Dense { block: DenseBlock, transition: Conv },
}

/// Parameterized decoder stage built from a [`StageWiring`].
#[derive(Clone, Debug)]
pub struct Stage {
    pub wiring: StageWiring,
    /// One learned upsampler per `Resample::Up` edge, keyed by edge position
    /// in `fused` followed by `direct`.
    resamplers: Vec<Option<UpBlock>>,
    fuse: Option<ConvBlock>,
    body: StageBody,
    up: Option<UpBlock>,
}

impl Stage {
    fn build(cfg: &ModelConfig, w: &StageWiring, store: &mut ParamStore) -> Result<Self> {
        let prefix = format!("dec{}.{}", w.level, w.stage);
        let resamplers = w
            .edges()
            .enumerate()
            .map(|(e, edge)| match edge.resample {
                Resample::Up(f) => {
                    UpBlock::new(store, &format!("{prefix}.resample{e}"), edge.channels, edge.channels, f).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let width = w.out_channels;
        let fuse = if w.fused.is_empty() {
            None
        } else {
            let cin = w.fused.iter().map(|e| e.channels).sum();
            Some(ConvBlock::new(store, &format!("{prefix}.fuse"), cin, width)?)
        };
        let body_in: usize =
            w.direct.iter().map(|e| e.channels).sum::<usize>() + fuse.as_ref().map_or(0, |_| width);
        let body = match w.block {
            StageBlock::UpOnly => StageBody::None,
            StageBlock::Conv => StageBody::Conv(ConvBlock::new(store, &format!("{prefix}.block"), body_in, width)?),
            StageBlock::Dense => {
                let block = DenseBlock::new(
                    store,
                    &format!("{prefix}.dense"),
                    body_in,
                    cfg.growth_rate(width),
                    cfg.dense_layers,
                )?;
                let transition = Conv::new(
                    store,
                    &format!("{prefix}.transition"),
                    block.out_channels(),
                    width,
                    1,
                    InitGain::Relu,
                )?;
                StageBody::Dense { block, transition }
            }
        };
        let up = if w.upsample {
            let cin = if w.block == StageBlock::UpOnly { body_in } else { width };
            Some(UpBlock::new(store, &format!("{prefix}.up"), cin, width, 2)?)
        } else {
            None
        };
        Ok(Stage {
            wiring: w.clone(),
            resamplers,
            fuse,
            body,
            up,
        })
    }

    fn input(&self, g: &mut Graph, p: &Bindings, maps: &HashMap<MapRef, Var>, e: usize, edge: &Edge) -> Result<Var> {
        let src = *maps
            .get(&edge.source)
            .ok_or_else(|| Error::config(format!("stage input {:?} not computed yet", edge.source)))?;
        match edge.resample {
            Resample::Identity => Ok(src),
            Resample::Pool(f) => g.maxpool3d(src, f, f),
            Resample::Up(_) => self.resamplers[e]
                .as_ref()
                .expect("upsampler built for every Up edge")
                .forward(g, p, src),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bindings, maps: &HashMap<MapRef, Var>) -> Result<Var> {
        let w = &self.wiring;
        let n_fused = w.fused.len();
        let mut inputs = Vec::with_capacity(w.direct.len() + 1);
        for (e, edge) in w.direct.iter().enumerate() {
            inputs.push(self.input(g, p, maps, n_fused + e, edge)?);
        }
        if let Some(fuse) = &self.fuse {
            let fused = w
                .fused
                .iter()
                .enumerate()
                .map(|(e, edge)| self.input(g, p, maps, e, edge))
                .collect::<Result<Vec<_>>>()?;
            let cat = if fused.len() == 1 { fused[0] } else { g.concat(&fused)? };
            inputs.push(fuse.forward(g, p, cat)?);
        }
        let x = if inputs.len() == 1 { inputs[0] } else { g.concat(&inputs)? };
        let h = match &self.body {
            StageBody::None => x,
            StageBody::Conv(b) => b.forward(g, p, x)?,
            StageBody::Dense { block, transition } => {
                let d = block.forward(g, p, x)?;
                let t = transition.forward(g, p, d)?;
                g.relu(t)
            }
        };
        match &self.up {
            Some(up) => up.forward(g, p, h),
            None => Ok(h),
        }
    }
}

impl Module for Stage {
    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.resamplers.iter().flatten().flat_map(Module::param_names).collect();
        if let Some(f) = &self.fuse {
            v.extend(f.param_names());
        }
        match &self.body {
            StageBody::None => {}
            StageBody::Conv(b) => v.extend(b.param_names()),
            StageBody::Dense { block, transition } => {
                v.extend(block.param_names());
                v.extend(transition.param_names());
            }
        }
        if let Some(u) = &self.up {
            v.extend(u.param_names());
        }
        v
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for r in self.resamplers.iter().flatten() {
            r.init(store, rng)?;
        }
        if let Some(f) = &self.fuse {
            f.init(store, rng)?;
        }
        match &self.body {
            StageBody::None => {}
            StageBody::Conv(b) => b.init(store, rng)?,
            StageBody::Dense { block, transition } => {
                block.init(store, rng)?;
                transition.init(store, rng)?;
            }
        }
        if let Some(u) = &self.up {
            u.init(store, rng)?;
        }
        Ok(())
    }
}

/// One decoder level.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub level: usize,
    pub stages: Vec<Stage>,
}

impl Module for Decoder {
    fn param_names(&self) -> Vec<String> {
        self.stages.iter().flat_map(Module::param_names).collect()
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.stages.iter().try_for_each(|s| s.init(store, rng))
    }
}

fn build_level(cfg: &ModelConfig, table: &WiringTable, level: usize, store: &mut ParamStore) -> Result<Decoder> {
    let stages = table.levels[level - 1]
        .iter()
        .map(|w| Stage::build(cfg, w, store))
        .collect::<Result<_>>()?;
    Ok(Decoder { level, stages })
}

/// First-level decoder: plain U-Net decoder over the encoder skips.
pub fn build_dec1(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Decoder> {
    build_level(cfg, &wiring(cfg)?, 1, store)
}

/// Decoder at `level ≥ 2`, wired per `cfg.dec2_variant` against `level − 1`.
pub fn build_dec2(cfg: &ModelConfig, level: usize, store: &mut ParamStore) -> Result<Decoder> {
    if level < 2 || level > cfg.decoder_levels {
        return Err(Error::config(format!(
            "second-level decoder index {level} outside 2..={}",
            cfg.decoder_levels
        )));
    }
    build_level(cfg, &wiring(cfg)?, level, store)
}

/// The assembled registration network and its parameters.
pub struct TetrahedronNet {
    cfg: ModelConfig,
    table: WiringTable,
    encoder: Box<dyn Encoder>,
    decoders: Vec<Decoder>,
    head: FieldHead,
    params: ParamStore,
}

impl fmt::Debug for TetrahedronNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TetrahedronNet")
            .field("cfg", &self.cfg)
            .field("params", &self.params.scalar_count())
            .finish()
    }
}

/// Builds and initializes a model with the U-Net encoder.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<TetrahedronNet> {
    TetrahedronNet::with_encoder(cfg, seed, |cfg, store| Ok(Box::new(build_encoder(cfg, store)?)))
}

impl TetrahedronNet {
    /// Builds a model around a custom encoder. The encoder must register its
    /// parameters in the provided store and expose `cfg.scales` scales with
    /// widths matching `cfg.enc_width`.
    pub fn with_encoder<F>(cfg: &ModelConfig, seed: u64, make_encoder: F) -> Result<Self>
    where
        F: FnOnce(&ModelConfig, &mut ParamStore) -> Result<Box<dyn Encoder>>,
    {
        let table = wiring(cfg)?;
        let mut params = ParamStore::new();
        let encoder = make_encoder(cfg, &mut params)?;
        if encoder.scales() != cfg.scales || (0..=cfg.scales).any(|i| encoder.width(i) != cfg.enc_width(i)) {
            return Err(Error::config("encoder scales or widths do not match the model config"));
        }
        let decoders = (1..=cfg.decoder_levels)
            .map(|level| build_level(cfg, &table, level, &mut params))
            .collect::<Result<Vec<_>>>()?;
        let last = table.levels.last().and_then(|l| l.last()).expect("at least one stage");
        let head = FieldHead::new(&mut params, "head", last.out_channels)?;
        let mut net = TetrahedronNet {
            cfg: cfg.clone(),
            table,
            encoder,
            decoders,
            head,
            params,
        };
        net.init(seed)?;
        Ok(net)
    }

    /// Re-draws every parameter from `seed`.
    pub fn init(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.encoder.init(&mut self.params, &mut rng)?;
        for d in &self.decoders {
            d.init(&mut self.params, &mut rng)?;
        }
        self.head.init(&mut self.params, &mut rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn wiring(&self) -> &WiringTable {
        &self.table
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn decoders(&self) -> &[Decoder] {
        &self.decoders
    }

    pub fn head(&self) -> &FieldHead {
        &self.head
    }

    /// Records the forward pass on `g`. `input` is `[N, in_channels, D, H, W]`;
    /// the result is the `[N, 3, D, H, W]` displacement field.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bindings, input: Var) -> Result<Var> {
        let dims = g.value(input).dims5()?;
        if dims[1] != self.cfg.in_channels {
            return Err(Error::config(format!(
                "network expects {} input channels, got {}",
                self.cfg.in_channels, dims[1]
            )));
        }
        self.cfg.check_input_dims([dims[2], dims[3], dims[4]])?;
        let feats = self.encoder.encode(g, p, input)?;
        let mut maps: HashMap<MapRef, Var> = feats
            .maps
            .iter()
            .enumerate()
            .map(|(i, &v)| (MapRef::Enc(i), v))
            .collect();
        let mut last = feats.bottleneck();
        for dec in &self.decoders {
            for stage in &dec.stages {
                last = stage.forward(g, p, &maps)?;
                maps.insert(
                    MapRef::Dec {
                        level: dec.level,
                        stage: stage.wiring.stage,
                    },
                    last,
                );
            }
        }
        self.head.forward(g, p, last)
    }

    /// Predicts the displacement field for `[N, 1, D, H, W]` fixed and moving
    /// batches without recording gradients.
    pub fn predict(&self, fixed: &Tensor, moving: &Tensor) -> Result<Tensor> {
        if fixed.shape() != moving.shape() {
            return Err(Error::input(format!(
                "fixed shape {:?} differs from moving shape {:?}",
                fixed.shape(),
                moving.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let input = crate::tensor::kernels::concat_channels(&[fixed, moving])?;
        let x = g.constant(input);
        let field = self.forward_graph(&mut g, &p, x)?;
        Ok(g.value(field).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(levels: usize, variant: Dec2Variant) -> ModelConfig {
        ModelConfig {
            scales: 3,
            enc_channels: vec![4, 6, 8],
            dec_channels: vec![8, 6, 4],
            dec2_variant: variant,
            decoder_levels: levels,
            ..Default::default()
        }
    }

    #[test]
    fn encoder_shapes_follow_pooling() {
        let cfg = ModelConfig {
            scales: 4,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let enc = build_encoder(&cfg, &mut store).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 2, 32, 32, 32]));
        let f = enc.encode(&mut g, &p, x).unwrap();
        assert_eq!(f.skips().len(), 4);
        assert_eq!(g.value(f.bottleneck()).shape(), &[1, 64, 2, 2, 2]);

        let one = ModelConfig::with_widths(&[4]);
        let mut store = ParamStore::new();
        let enc = build_encoder(&one, &mut store).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 2, 8, 8, 8]));
        let f = enc.encode(&mut g, &p, x).unwrap();
        assert_eq!(g.value(f.bottleneck()).shape(), &[1, 4, 4, 4, 4]);
    }

    #[test]
    fn dec1_stage_consumes_matching_encoder_scale() {
        let cfg = small(1, Dec2Variant::Unet);
        let t = wiring(&cfg).unwrap();
        for w in &t.levels[0][1..] {
            assert_eq!(w.direct[0].source, MapRef::Enc(cfg.scales - w.stage));
            assert_eq!(w.direct[0].kind, EdgeKind::EncoderSkip);
        }
    }

    #[test]
    fn unet_stage_channel_bookkeeping() {
        let cfg = small(2, Dec2Variant::Unet);
        let t = wiring(&cfg).unwrap();
        for k in 1..=cfg.scales {
            let w = t.stage(2, k);
            let cin: usize = w.direct.iter().map(|e| e.channels).sum();
            let l = cfg.scales;
            assert_eq!(cin, cfg.enc_width(l - k) + cfg.dec_width(k - 1) + cfg.dec_width(k - 1));
        }
    }

    #[test]
    fn unknown_variant_is_config_error() {
        let err = "transunet".parse::<Dec2Variant>().unwrap_err();
        assert!(err.to_string().contains("dec2_variant"));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let cfg = small(2, Dec2Variant::Unet);
        let net = build_model(&cfg, 0).unwrap();
        let v = Tensor::zeros(&[1, 1, 12, 16, 16]);
        assert!(matches!(net.predict(&v, &v), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = ModelConfig {
            dec2_variant: Dec2Variant::Unet3Plus,
            use_encoder_skips_in_dec2: false,
            decoder_levels: 3,
            ..small(3, Dec2Variant::Unet)
        };
        let text = cfg.to_kv().to_string();
        let back = ModelConfig::from_kv(&KvDocument::parse(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn skip_policy_per_variant() {
        assert_eq!(skip_policy(Dec2Variant::Unet), SkipPolicy::Direct);
        assert_eq!(skip_policy(Dec2Variant::DenseUnet), SkipPolicy::Direct);
        assert_eq!(skip_policy(Dec2Variant::UnetPlusPlus), SkipPolicy::AfterFusion);
        assert_eq!(skip_policy(Dec2Variant::Unet3Plus), SkipPolicy::AfterFusion);
        let t = wiring(&small(2, Dec2Variant::Unet3Plus)).unwrap();
        for w in &t.levels[1][1..] {
            assert!(!w.fused.is_empty());
            assert!(w.fused.iter().all(|e| e.kind == EdgeKind::Decoder));
            assert!(w.direct.iter().all(|e| e.kind == EdgeKind::EncoderSkip));
        }
    }
}
