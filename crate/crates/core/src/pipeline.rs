//! The end-to-end PTQ pipeline: resolves a quantization recipe against a
//! graph and applies the enabled techniques in a fixed order — cross-layer
//! equalization, activation smoothing, weight quantization (round-to-nearest,
//! learned rounding, or GPTQ — the latter two mutually exclusive by
//! construction), activation calibration, then bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrate::{self, CalibSettings, CalibTable};
use crate::equalize;
use crate::error::{Error, Result};
use crate::formats::NumericFormat;
use crate::gptq::{self, GptqSettings, HessianAccumulator};
use crate::graph::{im2col, LayerGraph, LayerKind, SiteId};
use crate::quantizers::{self, Granularity};
use crate::rounding::{self, RoundingHyper};
use crate::tensor::Tensor;

/// Calibration columns fed to learned rounding / GPTQ are capped at this
/// count per layer to bound desk-scale runtime.
const MAX_CALIB_COLUMNS: usize = 4096;

/// Weight scale granularity as written in recipe files (the channel axis of
/// a weight tensor is always its output axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGranularity {
    PerTensor,
    PerChannel,
}

impl WeightGranularity {
    pub fn to_granularity(self) -> Granularity {
        match self {
            WeightGranularity::PerTensor => Granularity::PerTensor,
            WeightGranularity::PerChannel => Granularity::PerChannel { axis: 0 },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            WeightGranularity::PerTensor => "per_tensor",
            WeightGranularity::PerChannel => "per_channel",
        }
    }
}

/// First/last-layer format override policy: quantization-sensitive boundary
/// layers run at higher precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirstLastPolicy {
    pub enabled: bool,
    /// Override used when the base format is an integer format.
    pub int_format: NumericFormat,
    /// Override used when the base format is a minifloat format.
    pub fp_format: NumericFormat,
}

impl Default for FirstLastPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            int_format: "int8".parse().expect("valid literal"),
            fp_format: "e3m4".parse().expect("valid literal"),
        }
    }
}

impl FirstLastPolicy {
    fn override_for(&self, base: &NumericFormat) -> NumericFormat {
        match base {
            NumericFormat::Int(_) => self.int_format,
            NumericFormat::Minifloat(_) => self.fp_format,
        }
    }
}

/// Cross-layer-equalization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleConfig {
    pub iters: usize,
}

impl Default for CleConfig {
    fn default() -> Self {
        Self { iters: 10 }
    }
}

/// Activation-smoothing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothQuantConfig {
    pub alpha: f64,
}

impl Default for SmoothQuantConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// Full per-model quantization prescription.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantRecipe {
    /// Weight format; `None` leaves weights full precision.
    pub weight_format: Option<NumericFormat>,
    pub weight_granularity: WeightGranularity,
    /// Activation format; `None` disables activation quantization.
    pub act_format: Option<NumericFormat>,
    pub first_last_policy: FirstLastPolicy,
    pub cle: Option<CleConfig>,
    pub smoothquant: Option<SmoothQuantConfig>,
    pub bias_correction: bool,
    pub learned_rounding: Option<RoundingHyper>,
    pub gptq: Option<GptqSettings>,
    pub calibration: CalibSettings,
}

impl Default for QuantRecipe {
    fn default() -> Self {
        Self {
            weight_format: None,
            weight_granularity: WeightGranularity::PerChannel,
            act_format: None,
            first_last_policy: FirstLastPolicy::default(),
            cle: None,
            smoothquant: None,
            bias_correction: false,
            learned_rounding: None,
            gptq: None,
            calibration: CalibSettings::default(),
        }
    }
}

impl QuantRecipe {
    /// Checks internal consistency (learned rounding and GPTQ cannot be
    /// combined; everything else may be enabled concurrently).
    pub fn validate(&self) -> Result<()> {
        if self.learned_rounding.is_some() && self.gptq.is_some() {
            return Err(Error::Config(
                "learned_rounding and gptq are mutually exclusive".into(),
            ));
        }
        if let Some(sq) = &self.smoothquant {
            if !(0.0..=1.0).contains(&sq.alpha) {
                return Err(Error::Config(format!(
                    "smoothquant alpha {} outside [0, 1]",
                    sq.alpha
                )));
            }
        }
        Ok(())
    }

    /// Compact method string used in reports.
    pub fn methods_label(&self) -> String {
        let mut parts = Vec::new();
        if self.cle.is_some() {
            parts.push("cle".to_string());
        }
        if let Some(sq) = &self.smoothquant {
            parts.push(format!("sq{}", sq.alpha));
        }
        if self.learned_rounding.is_some() {
            parts.push("lr".to_string());
        } else if self.gptq.is_some() {
            parts.push("gptq".to_string());
        } else {
            parts.push("rtn".to_string());
        }
        if self.bias_correction {
            parts.push("bc".to_string());
        }
        parts.join("+")
    }
}

/// Per-layer quantization plan after resolving overrides against a graph.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub weight: Option<(NumericFormat, Granularity)>,
    pub act: Option<NumericFormat>,
}

/// Recipe resolved against a concrete graph.
#[derive(Debug, Clone)]
pub struct ResolvedRecipe {
    pub layers: BTreeMap<usize, LayerPlan>,
    /// Activation sites to calibrate and quantize, with their formats.
    pub act_sites: BTreeMap<SiteId, NumericFormat>,
}

/// Applies the first/last override policy and expands the recipe to every
/// weighted layer and activation site of the graph.
pub fn resolve_recipe(graph: &LayerGraph, recipe: &QuantRecipe) -> Result<ResolvedRecipe> {
    recipe.validate()?;
    let weighted = graph.weighted_layers();
    let first = weighted.first().copied();
    let last = weighted.last().copied();
    let gran = recipe.weight_granularity.to_granularity();

    let mut layers = BTreeMap::new();
    let mut act_sites = BTreeMap::new();
    for id in &weighted {
        let boundary = recipe.first_last_policy.enabled
            && (Some(*id) == first || Some(*id) == last);
        let weight = recipe.weight_format.map(|fmt| {
            let fmt = if boundary {
                recipe.first_last_policy.override_for(&fmt)
            } else {
                fmt
            };
            (fmt, gran)
        });
        let act = recipe.act_format.map(|fmt| {
            if boundary {
                recipe.first_last_policy.override_for(&fmt)
            } else {
                fmt
            }
        });
        if let Some(fmt) = act {
            act_sites.insert(SiteId::LayerIn(*id), fmt);
        }
        layers.insert(*id, LayerPlan { weight, act });
    }
    if let Some(base_act) = recipe.act_format {
        for (id, node) in graph.nodes().iter().enumerate() {
            if matches!(node.kind, LayerKind::Add) {
                act_sites.insert(SiteId::NodeOut(id), base_act);
            }
        }
        // graph output inherits the last weighted layer's activation format
        let out_fmt = last
            .and_then(|l| layers.get(&l))
            .and_then(|p| p.act)
            .unwrap_or(base_act);
        act_sites.insert(SiteId::GraphOut, out_fmt);
    }
    Ok(ResolvedRecipe { layers, act_sites })
}

/// A graph prepared for fake-quantized inference, with everything needed to
/// run it.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    /// Transformed graph with quantized weights and corrected biases.
    pub graph: LayerGraph,
    /// Same transforms, original full-precision weights (bias-correction
    /// reference).
    pub reference: LayerGraph,
    pub act_sites: BTreeMap<SiteId, NumericFormat>,
    pub calib: CalibTable,
}

impl PreparedModel {
    /// Fake-quantized inference on one sample.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.graph.forward_quantized(&self.act_sites, &self.calib, x)
    }

    /// Top-1 accuracy under fake-quantized inference.
    pub fn accuracy(&self, dataset: &[(Tensor, u32)]) -> Result<f64> {
        crate::graph::accuracy_with(dataset, |x| self.infer(x))
    }
}

/// Calibration columns (`dim x n`, column-major groups) of a layer's input
/// under the current graph state, one entry per conv group.
fn layer_input_columns(
    graph: &LayerGraph,
    layer: usize,
    samples: &[Tensor],
    max_columns: usize,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let site = SiteId::LayerIn(layer);
    let mut captured: Vec<Tensor> = Vec::new();
    for sample in samples {
        let mut got: Option<Tensor> = None;
        graph.forward_with_sites(sample, &mut |s, t| {
            if s == site {
                got = Some(t.clone());
            }
        })?;
        captured.push(got.ok_or_else(|| Error::MissingCalibration(site.to_string()))?);
    }
    match &graph.nodes()[layer].kind {
        LayerKind::Linear { weight, .. } => {
            let dim = weight.shape()[1];
            let n = captured.len().min(max_columns);
            let mut cols = vec![0.0; dim * n];
            for (k, x) in captured.iter().take(n).enumerate() {
                for i in 0..dim {
                    cols[i * n + k] = x.data()[i];
                }
            }
            Ok(vec![(cols, n)])
        }
        LayerKind::Conv2d {
            weight,
            stride,
            padding,
            groups,
            ..
        } => {
            let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
            let dim = weight.shape()[1] * kh * kw;
            let mut per_group: Vec<Vec<Vec<f64>>> = vec![Vec::new(); *groups];
            let mut total = 0usize;
            'outer: for x in &captured {
                let (cols, oh, ow) = im2col(x, kh, kw, *stride, *padding);
                let spatial = oh * ow;
                for k in 0..spatial {
                    if total >= max_columns {
                        break 'outer;
                    }
                    for (g, bucket) in per_group.iter_mut().enumerate() {
                        let col: Vec<f64> = (0..dim)
                            .map(|i| cols[(g * dim + i) * spatial + k])
                            .collect();
                        bucket.push(col);
                    }
                    total += 1;
                }
            }
            Ok(per_group
                .into_iter()
                .map(|bucket| {
                    let n = bucket.len();
                    let mut cols = vec![0.0; dim * n];
                    for (k, col) in bucket.iter().enumerate() {
                        for i in 0..dim {
                            cols[i * n + k] = col[i];
                        }
                    }
                    (cols, n)
                })
                .collect())
        }
        _ => Err(Error::InvalidArgument(format!(
            "node {layer} is not a weighted layer"
        ))),
    }
}

fn quantize_layer_weights_rtn(
    graph: &mut LayerGraph,
    layer: usize,
    format: &NumericFormat,
    gran: Granularity,
) -> Result<()> {
    match &mut graph.nodes_mut()[layer].kind {
        LayerKind::Linear { weight, .. } | LayerKind::Conv2d { weight, .. } => {
            let spec = quantizers::compute_scale(weight, format, gran)?;
            *weight = quantizers::quantize(weight, &spec, format)?.values;
            Ok(())
        }
        _ => unreachable!("weighted layers only"),
    }
}

fn optimize_layer_weights(
    graph: &mut LayerGraph,
    layer: usize,
    format: &NumericFormat,
    gran: Granularity,
    samples: &[Tensor],
    lr: Option<&RoundingHyper>,
    gq: Option<&GptqSettings>,
) -> Result<()> {
    let columns = layer_input_columns(graph, layer, samples, MAX_CALIB_COLUMNS)?;
    let (weight_shape, weight_data, groups) = match &graph.nodes()[layer].kind {
        LayerKind::Linear { weight, .. } => (weight.shape().to_vec(), weight.data().to_vec(), 1),
        LayerKind::Conv2d { weight, groups, .. } => {
            (weight.shape().to_vec(), weight.data().to_vec(), *groups)
        }
        _ => unreachable!(),
    };
    let rows = weight_shape[0];
    let dim: usize = weight_shape[1..].iter().product();
    let w_tensor = Tensor::new(weight_shape.clone(), weight_data.clone())?;
    let spec = quantizers::compute_scale(&w_tensor, format, gran)?;
    let row_scales = spec.row_scales(rows);
    let rows_per_group = rows / groups;

    let mut out = vec![0.0; rows * dim];
    for (g, (cols, n)) in columns.iter().enumerate() {
        let w_g = &weight_data[g * rows_per_group * dim..(g + 1) * rows_per_group * dim];
        let scales_g = &row_scales[g * rows_per_group..(g + 1) * rows_per_group];
        let quantized = if let Some(hyper) = lr {
            rounding::learn_rounding(w_g, rows_per_group, dim, scales_g, format, cols, *n, hyper)?
                .values
        } else {
            let settings = gq.expect("either learned rounding or gptq");
            let mut hess = HessianAccumulator::new(dim);
            hess.accumulate_columns(cols, *n)?;
            gptq::gptq_quantize_matrix(w_g, rows_per_group, scales_g, &hess, format, settings)?
        };
        out[g * rows_per_group * dim..(g + 1) * rows_per_group * dim].copy_from_slice(&quantized);
    }
    match &mut graph.nodes_mut()[layer].kind {
        LayerKind::Linear { weight, .. } | LayerKind::Conv2d { weight, .. } => {
            *weight = Tensor::new(weight_shape, out)?;
        }
        _ => unreachable!(),
    }
    Ok(())
}

/// Runs the whole pipeline on a graph. `calib_samples` drive activation
/// smoothing, weight optimization, range calibration, and bias correction.
pub fn prepare(
    graph: &LayerGraph,
    recipe: &QuantRecipe,
    calib_samples: &[Tensor],
) -> Result<PreparedModel> {
    let resolved = resolve_recipe(graph, recipe)?;
    let mut g = graph.clone();

    if let Some(cle) = &recipe.cle {
        equalize::cross_layer_equalize(&mut g, cle.iters)?;
    }
    if let Some(sq) = &recipe.smoothquant {
        let maxima = equalize::capture_input_channel_maxima(&g, calib_samples)?;
        equalize::smooth_quant(&mut g, &maxima, sq.alpha)?;
    }
    let reference = g.clone();

    // weight quantization, layer-sequential so later layers see the already
    // quantized prefix through their calibration activations
    for (layer, plan) in &resolved.layers {
        let Some((format, gran)) = &plan.weight else {
            continue;
        };
        if recipe.learned_rounding.is_some() || recipe.gptq.is_some() {
            optimize_layer_weights(
                &mut g,
                *layer,
                format,
                *gran,
                calib_samples,
                recipe.learned_rounding.as_ref(),
                recipe.gptq.as_ref(),
            )?;
        } else {
            quantize_layer_weights_rtn(&mut g, *layer, format, *gran)?;
        }
    }

    let calib = if resolved.act_sites.is_empty() {
        CalibTable::default()
    } else {
        calibrate::calibrate_graph(&g, &resolved.act_sites, calib_samples, &recipe.calibration)?
    };

    if recipe.bias_correction {
        equalize::bias_correct(&mut g, &reference, &resolved.act_sites, &calib, calib_samples)?;
    }

    Ok(PreparedModel {
        graph: g,
        reference,
        act_sites: resolved.act_sites,
        calib,
    })
}
