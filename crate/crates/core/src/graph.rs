//! A small feed-forward layer graph with full-precision and fake-quantized
//! inference.
//!
//! Nodes are stored in topological order: every node input refers either to
//! the single graph input or to an earlier node, so the node list is a DAG by
//! construction. Convolution is lowered to im2col + matmul; that lowering is
//! shared with the Hessian construction in GPTQ.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::calibrate::CalibTable;
use crate::error::{Error, Result};
use crate::formats::NumericFormat;
use crate::linalg::matmul;
use crate::quantizers::{self, ScalingSpec};
use crate::tensor::Tensor;

/// Where a node reads its operand from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRef {
    /// The graph input tensor.
    Input,
    /// The output of an earlier node.
    Node(usize),
}

/// Layer payloads.
#[derive(Debug, Clone)]
pub enum LayerKind {
    /// `y = W x + b` with `W` of shape `[out, in]`.
    Linear { weight: Tensor, bias: Vec<f64> },
    /// 2-D convolution, weight `[c_out, c_in/groups, kh, kw]`, square stride
    /// and symmetric zero padding.
    Conv2d {
        weight: Tensor,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Relu,
    /// Elementwise sum of two equal-shape operands (residual join).
    Add,
    /// `[C, H, W] -> [C]` spatial mean.
    GlobalAvgPool,
    /// Reshape to rank 1.
    Flatten,
}

impl LayerKind {
    /// True for the layers that carry weights and get quantized.
    pub fn is_scalable(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Output channels of a weighted layer.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            LayerKind::Linear { weight, .. } | LayerKind::Conv2d { weight, .. } => {
                Some(weight.shape()[0])
            }
            _ => None,
        }
    }

    /// Input channels of a weighted layer (accounting for conv groups).
    pub fn in_channels(&self) -> Option<usize> {
        match self {
            LayerKind::Linear { weight, .. } => Some(weight.shape()[1]),
            LayerKind::Conv2d { weight, groups, .. } => Some(weight.shape()[1] * groups),
            _ => None,
        }
    }
}

/// A node of the graph: a layer plus its operand references.
#[derive(Debug, Clone)]
pub struct Node {
    pub kind: LayerKind,
    pub inputs: Vec<ValueRef>,
    /// Per-input-channel divisor recorded by activation smoothing when the
    /// factors cannot be folded into a producer layer. Applied to the operand
    /// before quantization and before the layer math.
    pub prescale: Option<Vec<f64>>,
}

/// Activation-quantization site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteId {
    /// The (prescaled) operand of a weighted layer.
    LayerIn(usize),
    /// The output of a node (used for residual sums).
    NodeOut(usize),
    /// The graph output.
    GraphOut,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteId::LayerIn(n) => write!(f, "n{n}.in"),
            SiteId::NodeOut(n) => write!(f, "n{n}.out"),
            SiteId::GraphOut => write!(f, "out"),
        }
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse site id {s:?}"));
        if s == "out" {
            return Ok(SiteId::GraphOut);
        }
        let rest = s.strip_prefix('n').ok_or_else(bad)?;
        if let Some(n) = rest.strip_suffix(".in") {
            return Ok(SiteId::LayerIn(n.parse().map_err(|_| bad())?));
        }
        if let Some(n) = rest.strip_suffix(".out") {
            return Ok(SiteId::NodeOut(n.parse().map_err(|_| bad())?));
        }
        Err(bad())
    }
}

/// Feed-forward graph with one input and one output.
#[derive(Debug, Clone)]
pub struct LayerGraph {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    output: usize,
    /// Output shape of every node, fixed at construction.
    shapes: Vec<Vec<usize>>,
}

impl LayerGraph {
    /// Builds and validates a graph. Nodes must be topologically ordered.
    pub fn from_parts(input_shape: Vec<usize>, nodes: Vec<Node>, output: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Config("graph has no nodes".into()));
        }
        if output >= nodes.len() {
            return Err(Error::Config(format!(
                "output node {output} out of range ({} nodes)",
                nodes.len()
            )));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            if node.inputs.len() != node.kind.arity() {
                return Err(Error::Config(format!(
                    "node {id} ({}) expects {} inputs, got {}",
                    node.kind.name(),
                    node.kind.arity(),
                    node.inputs.len()
                )));
            }
            let mut in_shapes = Vec::new();
            for r in &node.inputs {
                match r {
                    ValueRef::Input => in_shapes.push(input_shape.clone()),
                    ValueRef::Node(j) => {
                        if *j >= id {
                            return Err(Error::Config(format!(
                                "node {id} refers to node {j}, which is not earlier in the list"
                            )));
                        }
                        in_shapes.push(shapes[*j].clone());
                    }
                }
            }
            if let Some(sf) = &node.prescale {
                let ch = in_shapes[0].first().copied().unwrap_or(0);
                if sf.len() != ch {
                    return Err(Error::Config(format!(
                        "node {id} prescale has {} factors for {} channels",
                        sf.len(),
                        ch
                    )));
                }
            }
            shapes.push(infer_shape(id, &node.kind, &in_shapes)?);
        }
        Ok(Self {
            input_shape,
            nodes,
            output,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_node(&self) -> usize {
        self.output
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn output_shape(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    /// Ids of the weighted (quantizable) layers in topological order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind.is_scalable())
            .collect()
    }

    /// Every activation-quantization site: the input of each weighted layer,
    /// the output of each residual Add, and the graph output.
    pub fn quant_sites(&self) -> Vec<SiteId> {
        let mut sites = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.kind.is_scalable() {
                sites.push(SiteId::LayerIn(i));
            }
            if matches!(n.kind, LayerKind::Add) {
                sites.push(SiteId::NodeOut(i));
            }
        }
        sites.push(SiteId::GraphOut);
        sites
    }

    /// Full-precision inference.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, None, &mut |_, _| {})
    }

    /// Full-precision inference that also hands every quantization-site value
    /// (after prescale, before any quantizer) to `capture`.
    pub fn forward_with_sites(
        &self,
        x: &Tensor,
        capture: &mut dyn FnMut(SiteId, &Tensor),
    ) -> Result<Tensor> {
        self.eval(x, None, capture)
    }

    /// Fake-quantized inference: each weighted layer consumes activations
    /// quantized with the static scale found in `calib` for its input site
    /// (likewise residual sums and the graph output). Weights are used as
    /// stored — the PTQ pipeline quantizes them in place beforehand.
    /// Accumulation stays in double precision.
    pub fn forward_quantized(
        &self,
        acts: &BTreeMap<SiteId, NumericFormat>,
        calib: &CalibTable,
        x: &Tensor,
    ) -> Result<Tensor> {
        self.eval(x, Some((acts, calib)), &mut |_, _| {})
    }

    /// Fake-quantized inference capturing what each site's consumer actually
    /// sees (i.e. values after prescale and fake quantization).
    pub fn forward_quantized_with_sites(
        &self,
        acts: &BTreeMap<SiteId, NumericFormat>,
        calib: &CalibTable,
        x: &Tensor,
        capture: &mut dyn FnMut(SiteId, &Tensor),
    ) -> Result<Tensor> {
        self.eval(x, Some((acts, calib)), capture)
    }

    fn eval(
        &self,
        x: &Tensor,
        quant: Option<(&BTreeMap<SiteId, NumericFormat>, &CalibTable)>,
        capture: &mut dyn FnMut(SiteId, &Tensor),
    ) -> Result<Tensor> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "graph input is {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let quantize_site = |site: SiteId, t: Tensor| -> Result<Tensor> {
            match quant {
                Some((acts, calib)) if acts.contains_key(&site) => {
                    let entry = calib
                        .entries
                        .get(&site)
                        .ok_or_else(|| Error::MissingCalibration(site.to_string()))?;
                    let spec = ScalingSpec::per_tensor(entry.t, &entry.format);
                    Ok(quantizers::quantize(&t, &spec, &entry.format)?.values)
                }
                _ => Ok(t),
            }
        };

        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let fetch = |r: &ValueRef| -> Tensor {
                match r {
                    ValueRef::Input => x.clone(),
                    ValueRef::Node(j) => outputs[*j].clone(),
                }
            };
            let out = match &node.kind {
                LayerKind::Linear { weight, bias } => {
                    let mut a = fetch(&node.inputs[0]);
                    apply_prescale(&mut a, node.prescale.as_deref());
                    let a = quantize_site(SiteId::LayerIn(id), a)?;
                    capture(SiteId::LayerIn(id), &a);
                    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
                    let mut y = matmul(weight.data(), a.data(), out_f, in_f, 1);
                    for (v, b) in y.iter_mut().zip(bias) {
                        *v += b;
                    }
                    Tensor::new(vec![out_f], y)?
                }
                LayerKind::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                    groups,
                } => {
                    let mut a = fetch(&node.inputs[0]);
                    apply_prescale(&mut a, node.prescale.as_deref());
                    let a = quantize_site(SiteId::LayerIn(id), a)?;
                    capture(SiteId::LayerIn(id), &a);
                    conv2d(&a, weight, bias, *stride, *padding, *groups)?
                }
                LayerKind::Relu => {
                    let mut a = fetch(&node.inputs[0]);
                    a.map_inplace(|v| v.max(0.0));
                    a
                }
                LayerKind::Add => {
                    let a = fetch(&node.inputs[0]);
                    let b = fetch(&node.inputs[1]);
                    let mut y = a;
                    for (v, w) in y.data_mut().iter_mut().zip(b.data()) {
                        *v += w;
                    }
                    capture(SiteId::NodeOut(id), &y);
                    quantize_site(SiteId::NodeOut(id), y)?
                }
                LayerKind::GlobalAvgPool => {
                    let a = fetch(&node.inputs[0]);
                    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                    let hw = (h * w) as f64;
                    let mut y = vec![0.0; c];
                    for ch in 0..c {
                        y[ch] = a.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw;
                    }
                    Tensor::new(vec![c], y)?
                }
                LayerKind::Flatten => {
                    let a = fetch(&node.inputs[0]);
                    let n = a.len();
                    a.reshape(vec![n])?
                }
            };
            outputs.push(out);
        }
        let y = outputs[self.output].clone();
        capture(SiteId::GraphOut, &y);
        quantize_site(SiteId::GraphOut, y)
    }
}

fn apply_prescale(t: &mut Tensor, prescale: Option<&[f64]>) {
    if let Some(sf) = prescale {
        let stride: usize = t.shape()[1..].iter().product();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v /= sf[i / stride];
        }
    }
}

fn infer_shape(id: usize, kind: &LayerKind, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
    let shape_err = |msg: String| Error::ShapeMismatch(format!("node {id}: {msg}"));
    match kind {
        LayerKind::Linear { weight, bias } => {
            if weight.rank() != 2 {
                return Err(shape_err(format!(
                    "linear weight must be rank 2, got {:?}",
                    weight.shape()
                )));
            }
            let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
            if bias.len() != out_f {
                return Err(shape_err("bias length does not match output features".into()));
            }
            if in_shapes[0] != [in_f] {
                return Err(shape_err(format!(
                    "linear expects input [{in_f}], got {:?}",
                    in_shapes[0]
                )));
            }
            Ok(vec![out_f])
        }
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
        } => {
            if weight.rank() != 4 {
                return Err(shape_err("conv weight must be rank 4".into()));
            }
            let (c_out, c_in_g, kh, kw) = (
                weight.shape()[0],
                weight.shape()[1],
                weight.shape()[2],
                weight.shape()[3],
            );
            if *groups == 0 || c_out % groups != 0 {
                return Err(shape_err("output channels must divide into groups".into()));
            }
            if bias.len() != c_out {
                return Err(shape_err("bias length does not match output channels".into()));
            }
            let input = &in_shapes[0];
            if input.len() != 3 || input[0] != c_in_g * groups {
                return Err(shape_err(format!(
                    "conv expects input [{}, H, W], got {:?}",
                    c_in_g * groups,
                    input
                )));
            }
            let (h, w) = (input[1], input[2]);
            if h + 2 * padding < kh || w + 2 * padding < kw || *stride == 0 {
                return Err(shape_err("kernel larger than padded input".into()));
            }
            let oh = (h + 2 * padding - kh) / stride + 1;
            let ow = (w + 2 * padding - kw) / stride + 1;
            Ok(vec![c_out, oh, ow])
        }
        LayerKind::Relu => Ok(in_shapes[0].clone()),
        LayerKind::Add => {
            if in_shapes[0] != in_shapes[1] {
                return Err(shape_err(format!(
                    "add operands differ: {:?} vs {:?}",
                    in_shapes[0], in_shapes[1]
                )));
            }
            Ok(in_shapes[0].clone())
        }
        LayerKind::GlobalAvgPool => {
            if in_shapes[0].len() != 3 {
                return Err(shape_err("global_avg_pool expects [C, H, W]".into()));
            }
            Ok(vec![in_shapes[0][0]])
        }
        LayerKind::Flatten => Ok(vec![in_shapes[0].iter().product()]),
    }
}

/// im2col lowering: `[C, H, W]` to a `[C*kh*kw, oh*ow]` patch matrix with
/// zero padding. Returns the matrix and the output spatial extents.
pub fn im2col(
    input: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    let data = input.data();
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row * oh * ow + oy * ow + ox] =
                            data[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (c_out, c_in_g, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (cols, oh, ow) = im2col(input, kh, kw, stride, padding);
    let spatial = oh * ow;
    let out_per_group = c_out / groups;
    let rows_per_group = c_in_g * kh * kw;
    let mut out = vec![0.0; c_out * spatial];
    for g in 0..groups {
        let w_g = &weight.data()[g * out_per_group * rows_per_group
            ..(g + 1) * out_per_group * rows_per_group];
        let col_g = &cols[g * rows_per_group * spatial..(g + 1) * rows_per_group * spatial];
        let y = matmul(w_g, col_g, out_per_group, rows_per_group, spatial);
        out[g * out_per_group * spatial..(g + 1) * out_per_group * spatial].copy_from_slice(&y);
    }
    for co in 0..c_out {
        for v in &mut out[co * spatial..(co + 1) * spatial] {
            *v += bias[co];
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Top-1 classification accuracy of full-precision inference over a labeled
/// dataset. Argmax ties resolve to the lowest index.
pub fn accuracy(graph: &LayerGraph, dataset: &[(Tensor, u32)]) -> Result<f64> {
    accuracy_with(dataset, |x| graph.forward(x))
}

/// Top-1 accuracy under an arbitrary inference function (used for the
/// fake-quantized path).
pub fn accuracy_with(
    dataset: &[(Tensor, u32)],
    mut infer: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation dataset".into()));
    }
    let mut correct = 0usize;
    for (x, label) in dataset {
        let y = infer(x)?;
        let pred = argmax(y.data());
        if pred == *label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Convenience builder used by fixtures and tests.
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            input_shape,
            nodes: Vec::new(),
        }
    }

    pub fn push(&mut self, kind: LayerKind, inputs: Vec<ValueRef>) -> usize {
        self.nodes.push(Node {
            kind,
            inputs,
            prescale: None,
        });
        self.nodes.len() - 1
    }

    /// Adds a node fed by the previous node (or the graph input for the first).
    pub fn chain(&mut self, kind: LayerKind) -> usize {
        let input = match self.nodes.len() {
            0 => ValueRef::Input,
            n => ValueRef::Node(n - 1),
        };
        self.push(kind, vec![input])
    }

    pub fn finish(self) -> Result<LayerGraph> {
        let output = self.nodes.len().saturating_sub(1);
        LayerGraph::from_parts(self.input_shape, self.nodes, output)
    }
}
