//! Builders for the adapted MobileNetV2 backbone, the three context pyramids,
//! and the nine CM0..CM8 arrangements.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerOp, NetworkGraph, Node, NodeId, PoolTarget};
use crate::error::{Error, Result};
use crate::tensor::{
    BatchNormState, ConvSpec, Element, Grouping, KernelShape, KernelTensor, Padding, Shape, Tensor,
};

pub const ARRANGEMENT_NAMES: [&str; 9] =
    ["CM0", "CM1", "CM2", "CM3", "CM4", "CM5", "CM6", "CM7", "CM8"];

/// Context head variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PyramidKind {
    Gpp,
    Spp,
    Aspp,
}

impl std::fmt::Display for PyramidKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PyramidKind::Gpp => "GPP",
            PyramidKind::Spp => "SPP",
            PyramidKind::Aspp => "ASPP",
        })
    }
}

impl std::str::FromStr for PyramidKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GPP" => Ok(PyramidKind::Gpp),
            "SPP" => Ok(PyramidKind::Spp),
            "ASPP" => Ok(PyramidKind::Aspp),
            other => Err(Error::Config(format!("unknown pyramid kind '{other}'"))),
        }
    }
}

/// Nonlinearity used throughout the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu6,
    Relu,
}

/// One bottleneck group row: expansion `e`, output channels `d`, repeats `n`,
/// stride `s`, and the dilation assigned by the output-stride schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// The seven bottleneck groups with the stride/dilation schedule for the
/// requested output stride. OS16 realizes every declared stride; OS8 converts
/// the fourth stride-2 group to dilation 2 and dilates later groups by 4.
pub fn bottleneck_schedule(output_stride: u8) -> Result<Vec<BottleneckSpec>> {
    let declared: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 1),
        (6, 320, 1, 1),
    ];
    let (strides, dilations): ([usize; 7], [usize; 7]) = match output_stride {
        16 => ([1, 2, 2, 2, 1, 1, 1], [1, 1, 1, 1, 2, 2, 2]),
        8 => ([1, 2, 2, 1, 1, 1, 1], [1, 1, 1, 2, 4, 4, 4]),
        other => {
            return Err(Error::Config(format!(
                "output stride must be 8 or 16, got {other}"
            )))
        }
    };
    Ok(declared
        .iter()
        .zip(strides.iter().zip(dilations.iter()))
        .map(|(&(e, d, n, _), (&s, &dil))| BottleneckSpec {
            expansion: e,
            out_channels: d,
            repeats: n,
            stride: s,
            dilation: dil,
        })
        .collect())
}

/// One arrangement row: output stride, pyramid, shortcut, plus the knobs the
/// desk-scale builds need (class count, width multiplier, input channels,
/// activation).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArrangementConfig {
    pub name: String,
    pub output_stride: u8,
    pub pyramid: PyramidKind,
    pub shortcut: bool,
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_width() -> f64 {
    1.0
}
fn default_in_channels() -> usize {
    3
}
fn default_activation() -> Activation {
    Activation::Relu6
}

impl ArrangementConfig {
    /// Canonical `(output stride, pyramid, shortcut)` for CM0..CM8.
    pub fn canonical(name: &str) -> Option<(u8, PyramidKind, bool)> {
        Some(match name {
            "CM0" => (8, PyramidKind::Gpp, false),
            "CM1" => (8, PyramidKind::Spp, false),
            "CM2" => (8, PyramidKind::Aspp, false),
            "CM3" => (16, PyramidKind::Gpp, false),
            "CM4" => (16, PyramidKind::Spp, false),
            "CM5" => (16, PyramidKind::Aspp, false),
            "CM6" => (16, PyramidKind::Gpp, true),
            "CM7" => (16, PyramidKind::Spp, true),
            "CM8" => (16, PyramidKind::Aspp, true),
            _ => return None,
        })
    }

    /// Arrangement by table name with default width 1.0 and RGB input.
    pub fn named(name: &str, num_classes: usize) -> Result<Self> {
        let (output_stride, pyramid, shortcut) = Self::canonical(name).ok_or_else(|| {
            Error::Config(format!("unknown arrangement '{name}', expected CM0..CM8"))
        })?;
        Ok(ArrangementConfig {
            name: name.to_string(),
            output_stride,
            pyramid,
            shortcut,
            num_classes,
            width_multiplier: 1.0,
            in_channels: 3,
            activation: Activation::Relu6,
        })
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width_multiplier = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::Config(format!(
                "output stride must be 8 or 16, got {}",
                self.output_stride
            )));
        }
        if self.shortcut && self.output_stride != 16 {
            return Err(Error::Config(
                "shortcut is only defined for output stride 16 (arrangement table rows CM6-CM8)"
                    .into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.width_multiplier <= 0.0 {
            return Err(Error::Config("width multiplier must be positive".into()));
        }
        if let Some((os, pyr, sc)) = Self::canonical(&self.name) {
            if (self.width_multiplier - 1.0).abs() < f64::EPSILON
                && (os != self.output_stride || pyr != self.pyramid || sc != self.shortcut)
            {
                return Err(Error::Config(format!(
                    "arrangement {} must be OS{os} / {pyr} / shortcut {sc} at width 1.0",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Rounds `v` to the nearest multiple of `divisor`, never below `divisor`
/// and never more than 10% below `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let new = (d).max(((v + d / 2.0) / d).floor() * d);
    let new = if new < 0.9 * v { new + d } else { new };
    new as usize
}

struct GraphBuilder<T: Element> {
    nodes: Vec<Node<T>>,
    channels: Vec<usize>,
    rng: ChaCha8Rng,
    activation: Activation,
}

const BN_EPSILON: f64 = 1e-3;
const BN_MOMENTUM: f64 = 0.99;

impl<T: Element> GraphBuilder<T> {
    fn new(activation: Activation, seed: u64) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            channels: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            activation,
        }
    }

    fn push(&mut self, name: String, inputs: Vec<NodeId>, op: LayerOp<T>, out_c: usize) -> NodeId {
        self.nodes.push(Node { name, inputs, op });
        self.channels.push(out_c);
        self.nodes.len() - 1
    }

    fn input(&mut self, channels: usize) -> NodeId {
        self.push("input".into(), vec![], LayerOp::Input, channels)
    }

    /// Fan-in-scaled Gaussian conv kernel.
    fn init_kernel(&mut self, shape: KernelShape) -> KernelTensor<T> {
        let fan_in = shape.in_c * shape.kh * shape.kw;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data: Vec<T> =
            (0..shape.count()).map(|_| T::from_f64(normal.sample(&mut self.rng))).collect();
        KernelTensor::from_vec(shape, data).expect("matching lengths")
    }

    fn conv(
        &mut self,
        name: &str,
        input: NodeId,
        out_c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        groups: Grouping,
        bias: bool,
    ) -> NodeId {
        let in_c = self.channels[input];
        let kshape = match groups {
            Grouping::Dense => KernelShape::new(out_c, in_c, k, k),
            Grouping::Depthwise => KernelShape::new(in_c, 1, k, k),
        };
        let kernel = self.init_kernel(kshape);
        let bias = bias.then(|| Tensor::zeros(Shape::new(1, out_c, 1, 1)));
        let spec = ConvSpec { stride, dilation, padding: Padding::SameCeil, groups };
        let real_out = match groups {
            Grouping::Dense => out_c,
            Grouping::Depthwise => in_c,
        };
        self.push(name.into(), vec![input], LayerOp::Conv { kernel, bias, spec }, real_out)
    }

    fn bn(&mut self, name: &str, input: NodeId) -> NodeId {
        let c = self.channels[input];
        let state = BatchNormState::identity(c, BN_EPSILON, BN_MOMENTUM);
        self.push(name.into(), vec![input], LayerOp::BatchNorm { state }, c)
    }

    fn act(&mut self, name: &str, input: NodeId) -> NodeId {
        let c = self.channels[input];
        let op = match self.activation {
            Activation::Relu6 => LayerOp::Relu6,
            Activation::Relu => LayerOp::Relu,
        };
        self.push(name.into(), vec![input], op, c)
    }

    /// conv -> batch norm -> activation
    fn cba(
        &mut self,
        prefix: &str,
        input: NodeId,
        out_c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        groups: Grouping,
    ) -> NodeId {
        let c = self.conv(&format!("{prefix}.conv"), input, out_c, k, stride, dilation, groups, false);
        let b = self.bn(&format!("{prefix}.bn"), c);
        self.act(&format!("{prefix}.act"), b)
    }

    fn pool(&mut self, name: &str, input: NodeId, target: PoolTarget) -> NodeId {
        let c = self.channels[input];
        self.push(name.into(), vec![input], LayerOp::AdaptiveAvgPool { target }, c)
    }

    fn resize_like(&mut self, name: &str, input: NodeId, reference: NodeId) -> NodeId {
        let c = self.channels[input];
        self.push(name.into(), vec![input], LayerOp::ResizeLike { reference }, c)
    }

    fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels[a];
        self.push(name.into(), vec![a, b], LayerOp::Add, c)
    }

    fn concat(&mut self, name: &str, inputs: Vec<NodeId>) -> NodeId {
        let c = inputs.iter().map(|&i| self.channels[i]).sum();
        self.push(name.into(), inputs, LayerOp::Concat, c)
    }

    /// Inverted residual: expand (pointwise) -> depthwise 3x3 -> project
    /// (pointwise, linear). Residual add when stride is 1 and channels match.
    fn bottleneck(
        &mut self,
        prefix: &str,
        input: NodeId,
        out_c: usize,
        expansion: usize,
        stride: usize,
        dilation: usize,
    ) -> NodeId {
        let in_c = self.channels[input];
        let hidden = in_c * expansion;
        let mut x = input;
        if expansion != 1 {
            x = self.cba(&format!("{prefix}.expand"), x, hidden, 1, 1, 1, Grouping::Dense);
        }
        x = self.cba(&format!("{prefix}.depthwise"), x, hidden, 3, stride, dilation, Grouping::Depthwise);
        let p = self.conv(&format!("{prefix}.project.conv"), x, out_c, 1, 1, 1, Grouping::Dense, false);
        let p = self.bn(&format!("{prefix}.project.bn"), p);
        if stride == 1 && in_c == out_c {
            self.add(&format!("{prefix}.residual"), input, p)
        } else {
            p
        }
    }
}

struct BackboneOut {
    features: NodeId,
    tap_os4: NodeId,
    rows: Vec<(String, NodeId)>,
}

fn backbone_into<T: Element>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    output_stride: u8,
    width: f64,
) -> Result<BackboneOut> {
    let schedule = bottleneck_schedule(output_stride)?;
    let stem_c = make_divisible(32.0 * width, 8);
    let mut rows = Vec::new();

    let stem = b.cba("backbone.stem", input, stem_c, 3, 2, 1, Grouping::Dense);
    rows.push(("conv2d".to_string(), input));

    let mut x = stem;
    let mut tap_os4 = None;
    for (gi, group) in schedule.iter().enumerate() {
        let out_c = make_divisible(group.out_channels as f64 * width, 8);
        rows.push((format!("bottleneck.g{gi}"), x));
        for r in 0..group.repeats {
            let stride = if r == 0 { group.stride } else { 1 };
            x = b.bottleneck(
                &format!("backbone.g{gi}.b{r}"),
                x,
                out_c,
                group.expansion,
                stride,
                group.dilation,
            );
        }
        // End of the (6,24,...) group: the stride-4 features the decoder
        // shortcut taps.
        if gi == 1 {
            tap_os4 = Some(x);
        }
    }
    Ok(BackboneOut { features: x, tap_os4: tap_os4.expect("group 1 exists"), rows })
}

fn pyramid_into<T: Element>(
    b: &mut GraphBuilder<T>,
    features: NodeId,
    kind: PyramidKind,
    output_stride: u8,
    width: f64,
) -> Result<NodeId> {
    let proj_c = make_divisible(256.0 * width, 8);
    let concat = match kind {
        PyramidKind::Gpp => {
            let pooled = b.pool("gpp.pool", features, PoolTarget::Global);
            let conv = b.cba("gpp.project", pooled, proj_c, 1, 1, 1, Grouping::Dense);
            let up = b.resize_like("gpp.upsample", conv, features);
            b.concat("gpp.concat", vec![features, up])
        }
        PyramidKind::Spp => {
            let branch_c = (b.channels[features] / 4).max(1);
            let mut parts = vec![features];
            for (i, target) in [
                PoolTarget::Global,
                PoolTarget::CeilDiv(2),
                PoolTarget::CeilDiv(3),
                PoolTarget::CeilDiv(6),
            ]
            .into_iter()
            .enumerate()
            {
                let pooled = b.pool(&format!("spp.level{i}.pool"), features, target);
                let conv =
                    b.cba(&format!("spp.level{i}.project"), pooled, branch_c, 1, 1, 1, Grouping::Dense);
                let up = b.resize_like(&format!("spp.level{i}.upsample"), conv, features);
                parts.push(up);
            }
            b.concat("spp.concat", parts)
        }
        PyramidKind::Aspp => {
            let rates: [usize; 3] = match output_stride {
                16 => [6, 12, 18],
                8 => [12, 24, 36],
                other => {
                    return Err(Error::Config(format!(
                        "output stride must be 8 or 16, got {other}"
                    )))
                }
            };
            let b0 = b.cba("aspp.rate1", features, proj_c, 1, 1, 1, Grouping::Dense);
            let mut parts = vec![b0];
            for &rate in &rates {
                parts.push(b.cba(
                    &format!("aspp.rate{rate}"),
                    features,
                    proj_c,
                    3,
                    1,
                    rate,
                    Grouping::Dense,
                ));
            }
            b.concat("aspp.concat", parts)
        }
    };
    // Fuse the concatenated context back to the head width before the
    // classifier.
    Ok(b.cba("pyramid.fuse", concat, proj_c, 1, 1, 1, Grouping::Dense))
}

/// Backbone-only graph (ends at the 320-channel feature map).
pub fn build_backbone(
    output_stride: u8,
    in_channels: usize,
    width: f64,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<NetworkGraph<f32>> {
    let mut b = GraphBuilder::<f32>::new(Activation::Relu6, seed);
    let input = b.input(in_channels);
    let out = backbone_into(&mut b, input, output_stride, width)?;
    let mut taps = BTreeMap::new();
    taps.insert("os4".to_string(), out.tap_os4);
    let graph = NetworkGraph {
        nodes: b.nodes,
        taps,
        rows: out.rows,
        declared_input: Shape::new(1, in_channels, input_hw.0, input_hw.1),
        num_classes: 0,
        arrangement: None,
    };
    graph.infer_shapes(graph.declared_input)?;
    Ok(graph)
}

/// Pyramid-only graph over a bare feature-map input, for inspecting the
/// context head in isolation.
pub fn build_pyramid(
    kind: PyramidKind,
    in_channels: usize,
    output_stride: u8,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<NetworkGraph<f32>> {
    let mut b = GraphBuilder::<f32>::new(Activation::Relu6, seed);
    let input = b.input(in_channels);
    pyramid_into(&mut b, input, kind, output_stride, 1.0)?;
    let graph = NetworkGraph {
        nodes: b.nodes,
        taps: BTreeMap::new(),
        rows: Vec::new(),
        declared_input: Shape::new(1, in_channels, input_hw.0, input_hw.1),
        num_classes: 0,
        arrangement: None,
    };
    graph.infer_shapes(graph.declared_input)?;
    Ok(graph)
}

/// Full arrangement: backbone -> pyramid -> pointwise classifier -> bilinear
/// resize to the input extent, with the optional two-stage decoder shortcut.
pub fn build_arrangement<T: Element>(
    config: &ArrangementConfig,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<NetworkGraph<T>> {
    config.validate()?;
    let mut b = GraphBuilder::<T>::new(config.activation, seed);
    let input = b.input(config.in_channels);
    let backbone = backbone_into(&mut b, input, config.output_stride, config.width_multiplier)?;
    let pyramid = pyramid_into(
        &mut b,
        backbone.features,
        config.pyramid,
        config.output_stride,
        config.width_multiplier,
    )?;
    let logits = b.conv(
        "classifier",
        pyramid,
        config.num_classes,
        1,
        1,
        1,
        Grouping::Dense,
        true,
    );

    if config.shortcut {
        // Two-stage x4/x4 upsample; the stride-4 tap re-enters as class scores.
        let up4 = b.resize_like("decoder.up4", logits, backbone.tap_os4);
        let proj_c = make_divisible(48.0 * config.width_multiplier, 8);
        let proj = b.cba("shortcut.project", backbone.tap_os4, proj_c, 1, 1, 1, Grouping::Dense);
        let scores =
            b.conv("shortcut.scores", proj, config.num_classes, 1, 1, 1, Grouping::Dense, true);
        let merged = b.add("decoder.merge", up4, scores);
        b.resize_like("decoder.output", merged, input);
    } else {
        b.resize_like("decoder.output", logits, input);
    }

    let mut taps = BTreeMap::new();
    taps.insert("os4".to_string(), backbone.tap_os4);
    let graph = NetworkGraph {
        nodes: b.nodes,
        taps,
        rows: backbone.rows,
        declared_input: Shape::new(1, config.in_channels, input_hw.0, input_hw.1),
        num_classes: config.num_classes,
        arrangement: Some(config.clone()),
    };
    graph.infer_shapes(graph.declared_input)?;
    Ok(graph)
}
