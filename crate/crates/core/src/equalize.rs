//! Full-precision graph reparameterizations applied before quantization:
//! cross-layer equalization, activation smoothing (SmoothQuant), and
//! empirical bias correction.
//!
//! Channel bookkeeping works on "spaces": every weighted layer output opens a
//! channel space; ReLU and global average pooling propagate it; an Add merges
//! the spaces of both operands (all producers feeding a residual sum share
//! one scale per channel, the only choice that preserves the sum). A space is
//! scalable when it has at least one producer, channel identity intact along
//! every path, and it is neither the graph input nor the graph output.

use std::collections::BTreeMap;

use crate::calibrate::CalibTable;
use crate::error::{Error, Result};
use crate::formats::NumericFormat;
use crate::graph::{im2col, LayerGraph, LayerKind, SiteId, ValueRef};
use crate::tensor::Tensor;

/// Damping divisor for biases in the equalization ranges: biases enter the
/// per-channel range as `|b_j| / BIAS_DAMPING`, which counteracts bias
/// blow-up when channels are scaled down.
pub const BIAS_DAMPING: f64 = 2.0;

const CONVERGE_TOL: f64 = 1e-4;

/// Producer/consumer structure of the channel spaces in a graph.
#[derive(Debug)]
pub struct ChannelSpaces {
    /// Space id of every node's output.
    space_of: Vec<usize>,
    /// Space id of the graph input.
    input_space: usize,
    /// Weighted layers writing into each space.
    producers: Vec<Vec<usize>>,
    /// Weighted layers reading from each space.
    consumers: Vec<Vec<usize>>,
    /// Channel count of each space, when the space has channel identity.
    channels: Vec<Option<usize>>,
    /// Spaces whose channel identity was broken (e.g. flatten of a feature
    /// map) or that cannot be rescaled (graph input / graph output).
    ineligible: Vec<bool>,
}

impl ChannelSpaces {
    /// Spaces that can be rescaled: known channels, at least one producer and
    /// one consumer, and no eligibility breaker on any path.
    pub fn scalable(&self) -> Vec<usize> {
        (0..self.producers.len())
            .filter(|&s| {
                !self.ineligible[s]
                    && self.channels[s].is_some()
                    && !self.producers[s].is_empty()
                    && !self.consumers[s].is_empty()
            })
            .collect()
    }

    pub fn producers(&self, space: usize) -> &[usize] {
        &self.producers[space]
    }

    pub fn consumers(&self, space: usize) -> &[usize] {
        &self.consumers[space]
    }

    pub fn channels(&self, space: usize) -> Option<usize> {
        self.channels[space]
    }

    /// Space feeding the given node's first operand.
    pub fn input_space_of(&self, graph: &LayerGraph, node: usize) -> usize {
        match graph.nodes()[node].inputs[0] {
            ValueRef::Input => self.input_space,
            ValueRef::Node(j) => self.space_of[j],
        }
    }

    pub fn is_ineligible(&self, space: usize) -> bool {
        self.ineligible[space]
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Computes the channel spaces of a graph.
pub fn channel_spaces(graph: &LayerGraph) -> ChannelSpaces {
    let n = graph.nodes().len();
    let mut uf = UnionFind::new();
    let input_label = uf.make();
    let mut label_of: Vec<usize> = Vec::with_capacity(n);
    // labels that lost channel identity
    let mut broken: Vec<bool> = vec![false];

    for (id, node) in graph.nodes().iter().enumerate() {
        let operand_label = |r: &ValueRef| match r {
            ValueRef::Input => input_label,
            ValueRef::Node(j) => label_of[*j],
        };
        let label = match &node.kind {
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                broken.push(false);
                uf.make()
            }
            LayerKind::Relu | LayerKind::GlobalAvgPool => operand_label(&node.inputs[0]),
            LayerKind::Flatten => {
                let shape = match node.inputs[0] {
                    ValueRef::Input => graph.input_shape().to_vec(),
                    ValueRef::Node(j) => graph.output_shape(j).to_vec(),
                };
                if shape.len() == 1 {
                    operand_label(&node.inputs[0])
                } else {
                    // flattening a feature map interleaves channels with
                    // spatial positions; mark the result unscalable
                    broken.push(true);
                    uf.make()
                }
            }
            LayerKind::Add => {
                let a = operand_label(&node.inputs[0]);
                let b = operand_label(&node.inputs[1]);
                uf.union(a, b);
                uf.find(a)
            }
        };
        let _ = id;
        label_of.push(label);
    }

    // compact roots into space ids
    let mut root_to_space: BTreeMap<usize, usize> = BTreeMap::new();
    let total_labels = uf.parent.len();
    let mut roots: Vec<usize> = Vec::with_capacity(total_labels);
    for l in 0..total_labels {
        roots.push(uf.find(l));
    }
    for &r in &roots {
        let next = root_to_space.len();
        root_to_space.entry(r).or_insert(next);
    }
    let num_spaces = root_to_space.len();
    let space_of: Vec<usize> = label_of.iter().map(|l| root_to_space[&roots[*l]]).collect();
    let input_space = root_to_space[&roots[input_label]];

    let mut producers = vec![Vec::new(); num_spaces];
    let mut consumers = vec![Vec::new(); num_spaces];
    let mut channels = vec![None; num_spaces];
    let mut ineligible = vec![false; num_spaces];

    // the graph input and output cannot be rescaled
    ineligible[input_space] = true;
    ineligible[space_of[graph.output_node()]] = true;
    for (label, is_broken) in broken.iter().enumerate() {
        if *is_broken {
            ineligible[root_to_space[&roots[label]]] = true;
        }
    }

    for (id, node) in graph.nodes().iter().enumerate() {
        let s = space_of[id];
        if node.kind.is_scalable() {
            producers[s].push(id);
            let in_space = match node.inputs[0] {
                ValueRef::Input => input_space,
                ValueRef::Node(j) => space_of[j],
            };
            consumers[in_space].push(id);
        }
        let ch = graph.output_shape(id).first().copied();
        match (&channels[s], ch) {
            (None, Some(c)) => channels[s] = Some(c),
            (Some(existing), Some(c)) if *existing != c => ineligible[s] = true,
            _ => {}
        }
    }

    ChannelSpaces {
        space_of,
        input_space,
        producers,
        consumers,
        channels,
        ineligible,
    }
}

fn weight_and_bias_mut(kind: &mut LayerKind) -> (&mut Tensor, &mut Vec<f64>, usize) {
    match kind {
        LayerKind::Linear { weight, bias } => (weight, bias, 1),
        LayerKind::Conv2d {
            weight,
            bias,
            groups,
            ..
        } => {
            let g = *groups;
            (weight, bias, g)
        }
        _ => unreachable!("only weighted layers are scaled"),
    }
}

/// Largest |W| over output channel `j` (one row of the weight matrix).
fn output_channel_range(kind: &LayerKind, j: usize) -> f64 {
    match kind {
        LayerKind::Linear { weight, .. } | LayerKind::Conv2d { weight, .. } => {
            weight.max_abs_channel(0, j)
        }
        _ => 0.0,
    }
}

fn scale_output_channel(kind: &mut LayerKind, j: usize, factor: f64) {
    let (weight, bias, _) = weight_and_bias_mut(kind);
    let stride = weight.stride(0);
    for v in &mut weight.data_mut()[j * stride..(j + 1) * stride] {
        *v *= factor;
    }
    bias[j] *= factor;
}

/// Indices of the weight elements reading input channel `j`, group-aware.
fn input_channel_elements(kind: &LayerKind, j: usize) -> Vec<std::ops::Range<usize>> {
    match kind {
        LayerKind::Linear { weight, .. } => {
            let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
            (0..rows).map(|r| r * cols + j..r * cols + j + 1).collect()
        }
        LayerKind::Conv2d { weight, groups, .. } => {
            let (c_out, c_in_g, kh, kw) = (
                weight.shape()[0],
                weight.shape()[1],
                weight.shape()[2],
                weight.shape()[3],
            );
            let out_per_group = c_out / groups;
            let group = j / c_in_g;
            let idx = j % c_in_g;
            (group * out_per_group..(group + 1) * out_per_group)
                .map(|oc| {
                    let base = (oc * c_in_g + idx) * kh * kw;
                    base..base + kh * kw
                })
                .collect()
        }
        _ => Vec::new(),
    }
}

/// Largest |W| over the elements reading input channel `j`.
fn input_channel_range(kind: &LayerKind, j: usize) -> f64 {
    let weight = match kind {
        LayerKind::Linear { weight, .. } | LayerKind::Conv2d { weight, .. } => weight,
        _ => return 0.0,
    };
    input_channel_elements(kind, j)
        .into_iter()
        .flat_map(|r| weight.data()[r].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

fn scale_input_channel(kind: &mut LayerKind, j: usize, factor: f64) {
    let ranges = input_channel_elements(kind, j);
    let weight = match kind {
        LayerKind::Linear { weight, .. } | LayerKind::Conv2d { weight, .. } => weight,
        _ => return,
    };
    for r in ranges {
        for v in &mut weight.data_mut()[r] {
            *v *= factor;
        }
    }
}

/// Outcome of a cross-layer-equalization run.
#[derive(Debug, Default)]
pub struct CleReport {
    /// Scalable spaces processed per iteration.
    pub spaces: usize,
    /// Iterations actually executed.
    pub iterations: usize,
    /// Largest |k - 1| observed in the final iteration.
    pub final_delta: f64,
    /// Human-readable notes about skipped structures.
    pub skipped: Vec<String>,
}

/// Cross-layer equalization: per channel `j` of every scalable space, apply
/// the geometric-mean rule `k_j = sqrt(r1_j * r2_j) / r2_j`, dividing producer
/// rows (and biases) by `k_j` and multiplying consumer columns by `k_j`.
/// Bias magnitudes enter `r1` damped by [`BIAS_DAMPING`]. The network
/// function is preserved exactly up to floating-point rounding.
pub fn cross_layer_equalize(graph: &mut LayerGraph, iters: usize) -> Result<CleReport> {
    let spaces = channel_spaces(graph);
    let scalable = spaces.scalable();
    let mut report = CleReport {
        spaces: scalable.len(),
        ..CleReport::default()
    };
    for s in 0..spaces.producers.len() {
        if spaces.ineligible[s] && !spaces.producers[s].is_empty() && !spaces.consumers[s].is_empty()
        {
            report.skipped.push(format!(
                "space {s}: channel identity broken or boundary space; pair skipped"
            ));
        }
    }
    if scalable.is_empty() {
        return Ok(report);
    }
    for _ in 0..iters.max(1) {
        let mut max_delta = 0.0f64;
        for &s in &scalable {
            let channels = spaces.channels[s].expect("scalable space has channels");
            for j in 0..channels {
                let mut r1 = 0.0f64;
                for &p in &spaces.producers[s] {
                    let kind = &graph.nodes()[p].kind;
                    r1 = r1.max(output_channel_range(kind, j));
                    let bias = match kind {
                        LayerKind::Linear { bias, .. } | LayerKind::Conv2d { bias, .. } => {
                            bias[j].abs()
                        }
                        _ => 0.0,
                    };
                    r1 = r1.max(bias / BIAS_DAMPING);
                }
                let mut r2 = 0.0f64;
                for &c in &spaces.consumers[s] {
                    r2 = r2.max(input_channel_range(&graph.nodes()[c].kind, j));
                }
                if r1 == 0.0 || r2 == 0.0 {
                    continue;
                }
                let k = (r1 * r2).sqrt() / r2;
                if !k.is_finite() || k <= 0.0 {
                    continue;
                }
                max_delta = max_delta.max((k - 1.0).abs());
                if k == 1.0 {
                    continue;
                }
                for &p in &spaces.producers[s] {
                    scale_output_channel(&mut graph.nodes_mut()[p].kind, j, 1.0 / k);
                }
                for &c in &spaces.consumers[s] {
                    scale_input_channel(&mut graph.nodes_mut()[c].kind, j, k);
                }
            }
        }
        report.iterations += 1;
        report.final_delta = max_delta;
        if max_delta < CONVERGE_TOL {
            break;
        }
    }
    Ok(report)
}

/// Per-input-channel absolute activation maxima at every weighted layer's
/// input site, over a calibration set (whole-set maxima).
pub fn capture_input_channel_maxima(
    graph: &LayerGraph,
    samples: &[Tensor],
) -> Result<BTreeMap<usize, Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let mut maxima: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for sample in samples {
        graph.forward_with_sites(sample, &mut |site, t| {
            if let SiteId::LayerIn(node) = site {
                let channels = t.shape()[0];
                let entry = maxima.entry(node).or_insert_with(|| vec![0.0; channels]);
                for ch in 0..channels {
                    entry[ch] = entry[ch].max(t.max_abs_channel(0, ch));
                }
            }
        })?;
    }
    Ok(maxima)
}

/// Outcome of an activation-smoothing run.
#[derive(Debug, Default)]
pub struct SmoothQuantReport {
    /// Layers whose factors were folded into producer layers.
    pub folded: usize,
    /// Layers that received an explicit input prescale.
    pub prescaled: usize,
}

/// SmoothQuant: per input channel `j` of each weighted layer, shift
/// quantization difficulty from activations to weights with
/// `sf_j = max|X_j|^alpha / max|W_j|^(1-alpha)`. Activations are divided by
/// `sf` (folded into producer layers when the layer is the sole consumer of a
/// scalable space, otherwise recorded as an input prescale) and weight
/// columns are multiplied by `sf`. Channels with zero activation or weight
/// range keep `sf_j = 1`.
pub fn smooth_quant(
    graph: &mut LayerGraph,
    act_maxima: &BTreeMap<usize, Vec<f64>>,
    alpha: f64,
) -> Result<SmoothQuantReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "smoothquant alpha must be in [0, 1], got {alpha}"
        )));
    }
    let spaces = channel_spaces(graph);
    let mut report = SmoothQuantReport::default();
    for layer in graph.weighted_layers() {
        let amax = act_maxima
            .get(&layer)
            .ok_or_else(|| Error::MissingCalibration(format!("n{layer}.in maxima")))?;
        let in_ch = graph.nodes()[layer].kind.in_channels().expect("weighted");
        if amax.len() != in_ch {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer}: {} activation maxima for {} input channels",
                amax.len(),
                in_ch
            )));
        }
        let sf: Vec<f64> = (0..in_ch)
            .map(|j| {
                let a = amax[j];
                let w = input_channel_range(&graph.nodes()[layer].kind, j);
                if a == 0.0 || w == 0.0 {
                    return 1.0;
                }
                let f = a.powf(alpha) / w.powf(1.0 - alpha);
                if f.is_finite() && f > 0.0 {
                    f
                } else {
                    1.0
                }
            })
            .collect();
        if sf.iter().all(|f| *f == 1.0) {
            continue;
        }
        // weights absorb the factors
        for (j, f) in sf.iter().enumerate() {
            if *f != 1.0 {
                scale_input_channel(&mut graph.nodes_mut()[layer].kind, j, *f);
            }
        }
        // activations shed them: fold into producers when safe, else prescale
        let in_space = spaces.input_space_of(graph, layer);
        let foldable = !spaces.is_ineligible(in_space)
            && !spaces.producers(in_space).is_empty()
            && spaces.consumers(in_space) == [layer];
        if foldable {
            for &p in spaces.producers(in_space) {
                for (j, f) in sf.iter().enumerate() {
                    if *f != 1.0 {
                        scale_output_channel(&mut graph.nodes_mut()[p].kind, j, 1.0 / f);
                    }
                }
            }
            report.folded += 1;
        } else {
            let node = &mut graph.nodes_mut()[layer];
            let combined = match node.prescale.take() {
                Some(prev) => prev.iter().zip(&sf).map(|(a, b)| a * b).collect(),
                None => sf.clone(),
            };
            node.prescale = Some(combined);
            report.prescaled += 1;
        }
    }
    Ok(report)
}

/// Weight matrix of a layer viewed as `[rows, cols]` (im2col layout for
/// convolutions), plus group count.
fn weight_matrix(kind: &LayerKind) -> (&Tensor, usize, usize, usize) {
    match kind {
        LayerKind::Linear { weight, .. } => {
            (weight, weight.shape()[0], weight.shape()[1], 1)
        }
        LayerKind::Conv2d { weight, groups, .. } => {
            let rows = weight.shape()[0];
            let cols = weight.shape()[1] * weight.shape()[2] * weight.shape()[3];
            (weight, rows, cols, *groups)
        }
        _ => unreachable!("only weighted layers"),
    }
}

/// Empirical bias correction: per weighted layer, subtracts
/// `(W_hat - W_ref) * E[X]` from the bias, where `E[X]` is the per-input mean
/// (im2col-column mean for convolutions) of the layer's input under the
/// quantized upstream graph on the calibration set. Layers are processed in
/// topological order so downstream corrections see upstream fixes.
pub fn bias_correct(
    graph: &mut LayerGraph,
    reference: &LayerGraph,
    acts: &BTreeMap<SiteId, NumericFormat>,
    calib: &CalibTable,
    samples: &[Tensor],
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    for layer in graph.weighted_layers() {
        let col_mean = mean_input_columns(graph, layer, acts, calib, samples)?;
        let (w_hat, rows, cols, groups) = {
            let (w, r, c, g) = weight_matrix(&graph.nodes()[layer].kind);
            (w.data().to_vec(), r, c, g)
        };
        let (w_ref, r_ref, c_ref, _) = weight_matrix(&reference.nodes()[layer].kind);
        if (r_ref, c_ref) != (rows, cols) {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer}: reference weight shape differs"
            )));
        }
        let rows_per_group = rows / groups;
        let mut corrections = vec![0.0; rows];
        for row in 0..rows {
            let group = row / rows_per_group;
            let mut acc = 0.0;
            for c in 0..cols {
                let eps = w_hat[row * cols + c] - w_ref.data()[row * cols + c];
                acc += eps * col_mean[group * cols + c];
            }
            corrections[row] = acc;
        }
        match &mut graph.nodes_mut()[layer].kind {
            LayerKind::Linear { bias, .. } | LayerKind::Conv2d { bias, .. } => {
                for (b, corr) in bias.iter_mut().zip(&corrections) {
                    *b -= corr;
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(())
}

/// Mean of the layer's input in im2col-column space under quantized
/// inference, one mean vector per conv group (`groups * cols` values).
fn mean_input_columns(
    graph: &LayerGraph,
    layer: usize,
    acts: &BTreeMap<SiteId, NumericFormat>,
    calib: &CalibTable,
    samples: &[Tensor],
) -> Result<Vec<f64>> {
    let (cols, groups, conv_params) = match &graph.nodes()[layer].kind {
        LayerKind::Linear { weight, .. } => (weight.shape()[1], 1, None),
        LayerKind::Conv2d {
            weight,
            stride,
            padding,
            groups,
            ..
        } => (
            weight.shape()[1] * weight.shape()[2] * weight.shape()[3],
            *groups,
            Some((weight.shape()[2], weight.shape()[3], *stride, *padding)),
        ),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "node {layer} is not a weighted layer"
            )))
        }
    };
    let mut sums = vec![0.0; groups * cols];
    let mut count = 0usize;
    let site = SiteId::LayerIn(layer);
    for sample in samples {
        let mut captured: Option<Tensor> = None;
        graph.forward_quantized_with_sites(acts, calib, sample, &mut |s, t| {
            if s == site {
                captured = Some(t.clone());
            }
        })?;
        let x = captured.ok_or_else(|| Error::MissingCalibration(site.to_string()))?;
        match conv_params {
            None => {
                for (acc, v) in sums.iter_mut().zip(x.data()) {
                    *acc += v;
                }
                count += 1;
            }
            Some((kh, kw, stride, padding)) => {
                let (patch, oh, ow) = im2col(&x, kh, kw, stride, padding);
                let spatial = oh * ow;
                // rows of the patch matrix are grouped by input channel
                for g in 0..groups {
                    for c in 0..cols {
                        let row = g * cols + c;
                        let row_sum: f64 = patch[row * spatial..(row + 1) * spatial].iter().sum();
                        sums[g * cols + c] += row_sum;
                    }
                }
                count += spatial;
            }
        }
    }
    let n = count as f64;
    Ok(sums.into_iter().map(|v| v / n).collect())
}
