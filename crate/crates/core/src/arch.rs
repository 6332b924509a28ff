//! Architecture descriptors.
//!
//! An [`Arch`] is an ordered list of layers over a fixed input shape. It is
//! the single source of truth for:
//!
//! * shape inference and validation ([`Arch::infer`]),
//! * the canonical parameter enumeration (layer order, then
//!   weight, bias, bn-scale, bn-shift, bn-mean, bn-var) that fixes the
//!   serialized parameter layout,
//! * the canonical text form whose hash identifies an architecture across
//!   model files, subnet specs and patches,
//! * the node-layer topology (channels of each conv, units of each dense
//!   output) that subnet selection and surgery operate on.
//!
//! Data layout is NCHW; `flatten` is therefore a pure reshape and a channel
//! `c` of a `C×H×W` map occupies the contiguous flat index block
//! `c·H·W .. (c+1)·H·W`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One layer of an architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    /// Fully connected: `in_f -> out_f`. Input must be flat.
    Dense { in_f: usize, out_f: usize },
    /// 2-D convolution with square kernel, zero padding and `groups` groups.
    Conv2d { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, groups: usize },
    /// Channel-wise batch normalization over a `C×H×W` map.
    BatchNorm { c: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    AvgPool { k: usize, stride: usize },
    /// NCHW -> N,(C·H·W) reshape.
    Flatten,
    /// Adds the output of an earlier layer (same shape): `out = prev + out[from]`.
    ResidualAdd { from: usize },
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::BatchNorm { .. })
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat { n: usize },
}

impl Shape {
    pub fn elems(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat { n } => n,
        }
    }

    /// Tensor dims (without the batch axis).
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Map { c, h, w } => vec![c, h, w],
            Shape::Flat { n } => vec![n],
        }
    }
}

/// Parameter tensors a layer can own, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamName {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
}

impl ParamName {
    pub const ALL: [ParamName; 6] = [
        ParamName::Weight,
        ParamName::Bias,
        ParamName::BnScale,
        ParamName::BnShift,
        ParamName::BnMean,
        ParamName::BnVar,
    ];
}

/// Identifies one parameter tensor: owning layer index + tensor name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub name: ParamName,
}

/// Kind of a parameterized (edge-carrying) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Dense,
    Conv { k: usize, groups: usize },
}

/// A dense/conv layer described in node-layer terms.
#[derive(Debug, Clone)]
pub struct EdgeLayer {
    /// Index into `Arch::layers`.
    pub arch_idx: usize,
    pub kind: EdgeKind,
    /// Node layer feeding this layer (0 = input).
    pub in_nl: usize,
    /// Node layer produced by this layer.
    pub out_nl: usize,
    /// 1 normally; `h·w` when the input crossed a flatten boundary, i.e.
    /// each input node (channel) expands to this many flat positions.
    pub in_expansion: usize,
}

/// One node layer: the channels of a conv output, the units of a dense
/// output, or the input channels (node layer 0).
#[derive(Debug, Clone)]
pub struct NodeLayer {
    pub width: usize,
    /// Arch index of the producing dense/conv layer (`None` for the input).
    pub produced_by: Option<usize>,
    /// BatchNorm layers normalizing this node layer, in arch order.
    pub bn_layers: Vec<usize>,
    /// Selection-equality group. Node layers joined by residual adds share a
    /// group and must select identical indices.
    pub sel_group: usize,
}

/// Node-layer topology derived from an [`Arch`].
#[derive(Debug, Clone)]
pub struct Topo {
    /// Index 0 is the input node layer.
    pub node_layers: Vec<NodeLayer>,
    /// Dense/conv layers in arch order; the last one is the classifier.
    pub edge_layers: Vec<EdgeLayer>,
    /// Number of classes (classifier output width).
    pub classes: usize,
}

impl Topo {
    /// Node layers eligible for subnet selection: every edge-layer output
    /// except the classifier's. Returns node-layer ids `1..=H`.
    pub fn hidden_node_layers(&self) -> Vec<usize> {
        self.edge_layers[..self.edge_layers.len() - 1].iter().map(|e| e.out_nl).collect()
    }

    pub fn classifier(&self) -> &EdgeLayer {
        self.edge_layers.last().expect("validated arch has a classifier")
    }

    /// Check the extra rules a network must satisfy to *host* a subnet (a
    /// trained narrow subnet is itself a valid arch but not a valid host):
    /// at least one hidden dense/conv layer, a dense classifier as the very
    /// last layer, and nothing after it.
    pub fn host_check(&self, arch: &Arch) -> Result<()> {
        if self.edge_layers.len() < 2 {
            return Err(Error::InvalidArch(
                "host needs at least one hidden dense/conv layer before the classifier".into(),
            ));
        }
        let last = self.classifier();
        if last.kind != EdgeKind::Dense {
            return Err(Error::InvalidArch("host classifier must be a dense layer".into()));
        }
        if last.arch_idx != arch.layers.len() - 1 {
            return Err(Error::InvalidArch(
                "the dense classifier must be the final layer of a host".into(),
            ));
        }
        Ok(())
    }
}

/// Full inference result: per-layer output shapes plus topology.
#[derive(Debug, Clone)]
pub struct ArchInfo {
    /// `shapes[i]` is the output shape of layer `i`.
    pub shapes: Vec<Shape>,
    pub topo: Topo,
}

/// An architecture: input shape plus ordered layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Input channels, height, width.
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

impl Arch {
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer>) -> Self {
        Arch { input, layers }
    }

    /// Inputs always enter as a C×H×W map; vector inputs use H = W = 1 and an
    /// initial flatten.
    pub fn input_shape(&self) -> Shape {
        let (c, h, w) = self.input;
        Shape::Map { c, h, w }
    }

    /// Validate the architecture and derive shapes + topology.
    ///
    /// Rules enforced here:
    /// * shapes must be consistent layer to layer;
    /// * at least one dense/conv layer exists;
    /// * batch-norm may not normalize the raw input;
    /// * residual adds must reference an earlier layer with an identical
    ///   map shape;
    /// * grouped convs must divide their channel counts evenly.
    ///
    /// Extra rules for networks that can *host* a subnet are checked
    /// separately by [`Topo::host_check`].
    pub fn infer(&self) -> Result<ArchInfo> {
        let (ic, ih, iw) = self.input;
        if ic == 0 || ih == 0 || iw == 0 {
            return Err(Error::InvalidArch("input shape has a zero dimension".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArch("empty layer list".into()));
        }

        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let mut node_layers = vec![NodeLayer {
            width: ic,
            produced_by: None,
            bn_layers: vec![],
            sel_group: 0,
        }];
        let mut edge_layers: Vec<EdgeLayer> = Vec::new();
        // node layer + flatten expansion currently flowing forward
        let mut cur_nl = 0usize;
        let mut cur_exp = 1usize;
        let mut cur = Shape::Map { c: ic, h: ih, w: iw };
        // node layer of each arch layer's output (for ResidualAdd back-refs)
        let mut nl_after: Vec<usize> = Vec::with_capacity(self.layers.len());

        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { in_f, out_f } => {
                    let n = match cur {
                        Shape::Flat { n } => n,
                        Shape::Map { .. } => {
                            return Err(Error::InvalidArch(format!(
                                "layer {idx}: dense requires flattened input"
                            )))
                        }
                    };
                    if n != in_f {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: dense expects {in_f} inputs, got {n}"
                        )));
                    }
                    if out_f == 0 {
                        return Err(Error::InvalidArch(format!("layer {idx}: dense with 0 outputs")));
                    }
                    edge_layers.push(EdgeLayer {
                        arch_idx: idx,
                        kind: EdgeKind::Dense,
                        in_nl: cur_nl,
                        out_nl: node_layers.len(),
                        in_expansion: cur_exp,
                    });
                    let g = node_layers.len();
                    node_layers.push(NodeLayer {
                        width: out_f,
                        produced_by: Some(idx),
                        bn_layers: vec![],
                        sel_group: g,
                    });
                    cur_nl = node_layers.len() - 1;
                    cur_exp = 1;
                    cur = Shape::Flat { n: out_f };
                }
                Layer::Conv2d { in_c, out_c, k, stride, pad, groups } => {
                    let (c, h, w) = match cur {
                        Shape::Map { c, h, w } => (c, h, w),
                        Shape::Flat { .. } => {
                            return Err(Error::InvalidArch(format!(
                                "layer {idx}: conv requires a C×H×W input"
                            )))
                        }
                    };
                    if c != in_c {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: conv expects {in_c} channels, got {c}"
                        )));
                    }
                    if out_c == 0 || k == 0 || stride == 0 || groups == 0 {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: conv hyperparameters must be positive"
                        )));
                    }
                    if in_c % groups != 0 || out_c % groups != 0 {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: groups {groups} must divide channels {in_c}->{out_c}"
                        )));
                    }
                    let hp = h + 2 * pad;
                    let wp = w + 2 * pad;
                    if hp < k || wp < k {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: kernel {k} larger than padded input {hp}×{wp}"
                        )));
                    }
                    let oh = (hp - k) / stride + 1;
                    let ow = (wp - k) / stride + 1;
                    edge_layers.push(EdgeLayer {
                        arch_idx: idx,
                        kind: EdgeKind::Conv { k, groups },
                        in_nl: cur_nl,
                        out_nl: node_layers.len(),
                        in_expansion: cur_exp,
                    });
                    if cur_exp != 1 {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: conv after flatten is not supported"
                        )));
                    }
                    let g = node_layers.len();
                    node_layers.push(NodeLayer {
                        width: out_c,
                        produced_by: Some(idx),
                        bn_layers: vec![],
                        sel_group: g,
                    });
                    cur_nl = node_layers.len() - 1;
                    cur = Shape::Map { c: out_c, h: oh, w: ow };
                }
                Layer::BatchNorm { c: bc } => {
                    let c = match cur {
                        Shape::Map { c, .. } => c,
                        Shape::Flat { .. } => {
                            return Err(Error::InvalidArch(format!(
                                "layer {idx}: batchnorm requires a C×H×W input"
                            )))
                        }
                    };
                    if c != bc {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: batchnorm expects {bc} channels, got {c}"
                        )));
                    }
                    if cur_nl == 0 {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: batchnorm may not normalize the raw input"
                        )));
                    }
                    node_layers[cur_nl].bn_layers.push(idx);
                }
                Layer::Relu => {}
                Layer::MaxPool { k, stride } | Layer::AvgPool { k, stride } => {
                    let (c, h, w) = match cur {
                        Shape::Map { c, h, w } => (c, h, w),
                        Shape::Flat { .. } => {
                            return Err(Error::InvalidArch(format!(
                                "layer {idx}: pooling requires a C×H×W input"
                            )))
                        }
                    };
                    if k == 0 || stride == 0 || h < k || w < k {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: pool kernel {k} does not fit {h}×{w}"
                        )));
                    }
                    cur = Shape::Map { c, h: (h - k) / stride + 1, w: (w - k) / stride + 1 };
                }
                Layer::Flatten => {
                    let (c, h, w) = match cur {
                        Shape::Map { c, h, w } => (c, h, w),
                        Shape::Flat { .. } => {
                            return Err(Error::InvalidArch(format!("layer {idx}: double flatten")))
                        }
                    };
                    cur_exp = h * w;
                    cur = Shape::Flat { n: c * h * w };
                }
                Layer::ResidualAdd { from } => {
                    if from >= idx {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: residual source {from} is not an earlier layer"
                        )));
                    }
                    if shapes[from] != cur {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: residual shapes differ: {:?} vs {:?}",
                            shapes[from], cur
                        )));
                    }
                    if !matches!(cur, Shape::Map { .. }) {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: residual add requires a C×H×W shape"
                        )));
                    }
                    let other = nl_after[from];
                    if other == 0 || cur_nl == 0 {
                        return Err(Error::InvalidArch(format!(
                            "layer {idx}: residual add may not involve the raw input"
                        )));
                    }
                    // Merge selection groups: both branches must select the
                    // same channel indices for subnet surgery.
                    let ga = node_layers[other].sel_group;
                    let gb = node_layers[cur_nl].sel_group;
                    let keep = ga.min(gb);
                    for nl in &mut node_layers {
                        if nl.sel_group == ga || nl.sel_group == gb {
                            nl.sel_group = keep;
                        }
                    }
                }
            }
            shapes.push(cur);
            nl_after.push(cur_nl);
        }

        // `classes` describes the final edge layer's output width. For host
        // networks that is the class count; narrow subnets reuse the field as
        // their (usually 1-wide) output width. Host-only rules live in
        // `Topo::host_check`.
        let last_edge = edge_layers
            .last()
            .ok_or_else(|| Error::InvalidArch("no dense or conv layer".into()))?;
        let classes = node_layers[last_edge.out_nl].width;

        Ok(ArchInfo { shapes, topo: Topo { node_layers, edge_layers, classes } })
    }

    // ── canonical text form ──────────────────────────────────────────────

    /// Canonical, parseable text form. Identical architectures always
    /// serialize to identical bytes; [`Arch::arch_hash`] hashes this text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (c, h, w) = self.input;
        s.push_str(&format!("input {c}x{h}x{w}\n"));
        for layer in &self.layers {
            match *layer {
                Layer::Dense { in_f, out_f } => s.push_str(&format!("dense {in_f} {out_f}\n")),
                Layer::Conv2d { in_c, out_c, k, stride, pad, groups } => s.push_str(&format!(
                    "conv {in_c} {out_c} k{k} s{stride} p{pad} g{groups}\n"
                )),
                Layer::BatchNorm { c } => s.push_str(&format!("bn {c}\n")),
                Layer::Relu => s.push_str("relu\n"),
                Layer::MaxPool { k, stride } => s.push_str(&format!("pool max k{k} s{stride}\n")),
                Layer::AvgPool { k, stride } => s.push_str(&format!("pool avg k{k} s{stride}\n")),
                Layer::Flatten => s.push_str("flatten\n"),
                Layer::ResidualAdd { from } => s.push_str(&format!("add {from}\n")),
            }
        }
        s
    }

    /// Parse the canonical text form.
    pub fn from_text(text: &str) -> Result<Arch> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty arch text".into()))?;
        let input = parse_input_line(header)?;
        let mut layers = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            layers.push(parse_layer_line(line).map_err(|e| {
                Error::Format(format!("arch line {}: {e}", ln + 2))
            })?);
        }
        Ok(Arch { input, layers })
    }

    /// Hex SHA-256 of the canonical text form — the architecture identity
    /// embedded in model files, subnet specs and patches.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        hex(&h.finalize())
    }

    // ── canonical parameter enumeration ─────────────────────────────────

    /// All parameter tensors in canonical order: layer order, then
    /// weight, bias, bn-scale, bn-shift, bn-mean, bn-var.
    pub fn param_specs(&self) -> Vec<(ParamId, Vec<usize>)> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { in_f, out_f } => {
                    out.push((ParamId { layer: idx, name: ParamName::Weight }, vec![out_f, in_f]));
                    out.push((ParamId { layer: idx, name: ParamName::Bias }, vec![out_f]));
                }
                Layer::Conv2d { in_c, out_c, k, groups, .. } => {
                    out.push((
                        ParamId { layer: idx, name: ParamName::Weight },
                        vec![out_c, in_c / groups, k, k],
                    ));
                    out.push((ParamId { layer: idx, name: ParamName::Bias }, vec![out_c]));
                }
                Layer::BatchNorm { c } => {
                    out.push((ParamId { layer: idx, name: ParamName::BnScale }, vec![c]));
                    out.push((ParamId { layer: idx, name: ParamName::BnShift }, vec![c]));
                    out.push((ParamId { layer: idx, name: ParamName::BnMean }, vec![c]));
                    out.push((ParamId { layer: idx, name: ParamName::BnVar }, vec![c]));
                }
                _ => {}
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Element offset of a parameter tensor within the canonical flat layout.
    pub fn param_elem_offset(&self, id: ParamId) -> Option<usize> {
        let mut off = 0usize;
        for (pid, shape) in self.param_specs() {
            if pid == id {
                return Some(off);
            }
            off += shape.iter().product::<usize>();
        }
        None
    }
}

fn parse_input_line(line: &str) -> Result<(usize, usize, usize)> {
    let rest = line
        .strip_prefix("input ")
        .ok_or_else(|| Error::Format(format!("expected 'input CxHxW', got '{line}'")))?;
    let dims: Vec<&str> = rest.split('x').collect();
    if dims.len() != 3 {
        return Err(Error::Format(format!("expected 'input CxHxW', got '{line}'")));
    }
    let p = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad dim '{s}'")));
    Ok((p(dims[0])?, p(dims[1])?, p(dims[2])?))
}

fn parse_layer_line(line: &str) -> Result<Layer> {
    let toks: Vec<&str> = line.split(' ').collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad number '{s}'")));
    let tagged = |s: &str, tag: char| -> Result<usize> {
        let stripped = s
            .strip_prefix(tag)
            .ok_or_else(|| Error::Format(format!("expected '{tag}<n>', got '{s}'")))?;
        num(stripped)
    };
    match toks[0] {
        "dense" if toks.len() == 3 => Ok(Layer::Dense { in_f: num(toks[1])?, out_f: num(toks[2])? }),
        "conv" if toks.len() == 7 => Ok(Layer::Conv2d {
            in_c: num(toks[1])?,
            out_c: num(toks[2])?,
            k: tagged(toks[3], 'k')?,
            stride: tagged(toks[4], 's')?,
            pad: tagged(toks[5], 'p')?,
            groups: tagged(toks[6], 'g')?,
        }),
        "bn" if toks.len() == 2 => Ok(Layer::BatchNorm { c: num(toks[1])? }),
        "relu" if toks.len() == 1 => Ok(Layer::Relu),
        "pool" if toks.len() == 4 => {
            let k = tagged(toks[2], 'k')?;
            let stride = tagged(toks[3], 's')?;
            match toks[1] {
                "max" => Ok(Layer::MaxPool { k, stride }),
                "avg" => Ok(Layer::AvgPool { k, stride }),
                other => Err(Error::Format(format!("unknown pool kind '{other}'"))),
            }
        }
        "flatten" if toks.len() == 1 => Ok(Layer::Flatten),
        "add" if toks.len() == 2 => Ok(Layer::ResidualAdd { from: num(toks[1])? }),
        other => Err(Error::Format(format!("unknown layer '{other}'"))),
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── named architectures ──────────────────────────────────────────────────

/// Architectures available by name in configs and the CLI.
pub const ARCH_NAMES: &[&str] = &["mlp-tiny", "cnn-small", "vgg-toy", "resnet-toy", "dw-toy"];

/// Look up a built-in architecture by name.
pub fn named_arch(name: &str) -> Result<Arch> {
    use Layer::*;
    let arch = match name {
        // 2-in, two hidden dense layers of 2, 2 classes.
        "mlp-tiny" => Arch::new(
            (2, 1, 1),
            vec![
                Flatten,
                Dense { in_f: 2, out_f: 2 },
                Relu,
                Dense { in_f: 2, out_f: 2 },
                Relu,
                Dense { in_f: 2, out_f: 2 },
            ],
        ),
        // 28×28 grayscale, 10 classes. The workhorse for end-to-end runs.
        "cnn-small" => Arch::new(
            (1, 28, 28),
            vec![
                Conv2d { in_c: 1, out_c: 16, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 16 },
                Relu,
                MaxPool { k: 2, stride: 2 },
                Conv2d { in_c: 16, out_c: 32, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 32 },
                Relu,
                MaxPool { k: 2, stride: 2 },
                Flatten,
                Dense { in_f: 32 * 7 * 7, out_f: 64 },
                Relu,
                Dense { in_f: 64, out_f: 10 },
            ],
        ),
        // 32×32 RGB, conv stack pooled to 1×1 so the last conv feeds the
        // classifier directly through flatten.
        "vgg-toy" => Arch::new(
            (3, 32, 32),
            vec![
                Conv2d { in_c: 3, out_c: 32, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 32 },
                Relu,
                Conv2d { in_c: 32, out_c: 64, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 64 },
                Relu,
                MaxPool { k: 2, stride: 2 },
                Conv2d { in_c: 64, out_c: 128, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 128 },
                Relu,
                MaxPool { k: 2, stride: 2 },
                AvgPool { k: 8, stride: 8 },
                Flatten,
                Dense { in_f: 128, out_f: 10 },
            ],
        ),
        // One residual block: selections on both branches must mirror.
        "resnet-toy" => Arch::new(
            (3, 32, 32),
            vec![
                Conv2d { in_c: 3, out_c: 16, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 16 },
                Relu,
                Conv2d { in_c: 16, out_c: 16, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 16 },
                Relu,
                ResidualAdd { from: 2 },
                MaxPool { k: 2, stride: 2 },
                Conv2d { in_c: 16, out_c: 32, k: 3, stride: 1, pad: 1, groups: 1 },
                BatchNorm { c: 32 },
                Relu,
                AvgPool { k: 16, stride: 16 },
                Flatten,
                Dense { in_f: 32, out_f: 10 },
            ],
        ),
        // Grouped conv in the middle: selection must stay inside one group.
        "dw-toy" => Arch::new(
            (4, 8, 8),
            vec![
                Conv2d { in_c: 4, out_c: 8, k: 3, stride: 1, pad: 1, groups: 1 },
                Relu,
                Conv2d { in_c: 8, out_c: 8, k: 3, stride: 1, pad: 1, groups: 2 },
                Relu,
                AvgPool { k: 8, stride: 8 },
                Flatten,
                Dense { in_f: 8, out_f: 4 },
            ],
        ),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown arch '{other}' (available: {})",
                ARCH_NAMES.join(", ")
            )))
        }
    };
    Ok(arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_named_archs_validate_as_hosts() {
        for name in ARCH_NAMES {
            let arch = named_arch(name).unwrap();
            let info = arch.infer().unwrap_or_else(|e| panic!("{name}: {e}"));
            info.topo.host_check(&arch).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(info.topo.classes >= 2, "{name}");
        }
    }

    #[test]
    fn text_roundtrip_is_identity() {
        for name in ARCH_NAMES {
            let arch = named_arch(name).unwrap();
            let text = arch.to_text();
            let back = Arch::from_text(&text).unwrap();
            assert_eq!(arch, back, "{name}");
            assert_eq!(text, back.to_text(), "{name}");
        }
    }

    #[test]
    fn cnn_small_shapes() {
        let arch = named_arch("cnn-small").unwrap();
        let info = arch.infer().unwrap();
        assert_eq!(info.shapes[0], Shape::Map { c: 16, h: 28, w: 28 });
        assert_eq!(info.shapes[3], Shape::Map { c: 16, h: 14, w: 14 });
        assert_eq!(info.shapes[7], Shape::Map { c: 32, h: 7, w: 7 });
        assert_eq!(info.shapes[8], Shape::Flat { n: 1568 });
        assert_eq!(*info.shapes.last().unwrap(), Shape::Flat { n: 10 });
    }

    #[test]
    fn cnn_small_param_count_matches_closed_form() {
        // Independent closed-form oracle:
        //   conv: out·(in/g)·k² + out;  bn: 4·c;  dense: out·in + out
        let conv1 = 16 * 1 * 9 + 16;
        let bn1 = 4 * 16;
        let conv2 = 32 * 16 * 9 + 32;
        let bn2 = 4 * 32;
        let dense1 = 64 * 1568 + 64;
        let dense2 = 10 * 64 + 10;
        let expected = conv1 + bn1 + conv2 + bn2 + dense1 + dense2;
        assert_eq!(named_arch("cnn-small").unwrap().param_count(), expected);
    }

    #[test]
    fn topology_of_resnet_toy_merges_residual_groups() {
        let arch = named_arch("resnet-toy").unwrap();
        let topo = arch.infer().unwrap().topo;
        // node layers: input, conv0-out, conv1-out, conv2-out, classifier-out
        assert_eq!(topo.node_layers.len(), 5);
        assert_eq!(topo.node_layers[1].sel_group, topo.node_layers[2].sel_group);
        assert_ne!(topo.node_layers[1].sel_group, topo.node_layers[3].sel_group);
        assert_eq!(topo.hidden_node_layers(), vec![1, 2, 3]);
        assert_eq!(topo.classes, 10);
    }

    #[test]
    fn bn_on_raw_input_rejected() {
        let arch = Arch::new(
            (3, 8, 8),
            vec![
                Layer::BatchNorm { c: 3 },
                Layer::Conv2d { in_c: 3, out_c: 4, k: 3, stride: 1, pad: 1, groups: 1 },
                Layer::Flatten,
                Layer::Dense { in_f: 4 * 64, out_f: 2 },
            ],
        );
        assert!(matches!(arch.infer(), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn trailing_layers_after_classifier_fail_host_check() {
        let arch = Arch::new(
            (2, 1, 1),
            vec![
                Layer::Flatten,
                Layer::Dense { in_f: 2, out_f: 2 },
                Layer::Relu,
                Layer::Dense { in_f: 2, out_f: 2 },
                Layer::Relu,
            ],
        );
        // A trained subnet may well end in an activation, so plain shape
        // inference accepts this…
        let info = arch.infer().unwrap();
        // …but it cannot host a subnet itself.
        assert!(matches!(info.topo.host_check(&arch), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn single_edge_layer_fails_host_check() {
        let arch = Arch::new(
            (2, 1, 1),
            vec![Layer::Flatten, Layer::Dense { in_f: 2, out_f: 2 }],
        );
        let info = arch.infer().unwrap();
        assert!(matches!(info.topo.host_check(&arch), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn residual_shape_mismatch_rejected() {
        let arch = Arch::new(
            (3, 8, 8),
            vec![
                Layer::Conv2d { in_c: 3, out_c: 4, k: 3, stride: 1, pad: 1, groups: 1 },
                Layer::Relu,
                Layer::Conv2d { in_c: 4, out_c: 8, k: 3, stride: 1, pad: 1, groups: 1 },
                Layer::ResidualAdd { from: 1 },
                Layer::Flatten,
                Layer::Dense { in_f: 8 * 64, out_f: 2 },
            ],
        );
        assert!(matches!(arch.infer(), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn param_offsets_are_contiguous_and_ordered() {
        let arch = named_arch("vgg-toy").unwrap();
        let mut expected = 0usize;
        for (id, shape) in arch.param_specs() {
            assert_eq!(arch.param_elem_offset(id), Some(expected));
            expected += shape.iter().product::<usize>();
        }
        assert_eq!(expected, arch.param_count());
    }
}
