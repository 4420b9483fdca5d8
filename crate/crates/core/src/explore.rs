//! Design-space sweep and reporting: enumerate format configurations, run
//! the PTQ pipeline for each, attach accuracy and hardware costs, and emit
//! Pareto frontiers.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibSettings;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::formats::{MinifloatFormat, NumericFormat};
use crate::gptq::GptqSettings;
use crate::graph::LayerGraph;
use crate::hwcost::{self, MacKind, RefModel, DEFAULT_MAX_PRODUCTS};
use crate::pipeline::{self, CleConfig, QuantRecipe, SmoothQuantConfig, WeightGranularity};
use crate::rounding::RoundingHyper;
use crate::tensor::Tensor;

/// Format families included in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatKinds {
    Int,
    Fp,
    Both,
}

/// Weight-optimization method of a sweep (learned rounding and GPTQ are
/// mutually exclusive; the third option is plain nearest rounding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepWeightMode {
    Rtn,
    LearnedRounding,
    Gptq,
}

/// Sweep configuration: the cross product of formats and method toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    /// Weight bit-widths to try.
    pub weight_bits: Vec<u32>,
    /// Activation bit-widths to try (pairs keep `a >= w`).
    pub act_bits: Vec<u32>,
    pub kinds: FormatKinds,
    pub granularity: WeightGranularity,
    pub cle: bool,
    /// Smoothing factor alpha; `None` disables SmoothQuant.
    pub smoothquant: Option<f64>,
    pub bias_correction: bool,
    pub weight_mode: SweepWeightMode,
    pub first_last_policy: bool,
    pub seed: u64,
    pub calibration: CalibSettings,
    pub rounding: RoundingHyper,
    pub gptq: GptqSettings,
    /// Attach published LUT counts for this reference model.
    pub lut_model: Option<String>,
    /// Maximum dot-product length assumed by the accumulator-width model.
    pub mac_products: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            weight_bits: (3..=8).collect(),
            act_bits: (3..=8).collect(),
            kinds: FormatKinds::Both,
            granularity: WeightGranularity::PerChannel,
            cle: false,
            smoothquant: None,
            bias_correction: false,
            weight_mode: SweepWeightMode::Rtn,
            first_last_policy: true,
            seed: 0,
            calibration: CalibSettings::default(),
            rounding: RoundingHyper::default(),
            gptq: GptqSettings::default(),
            lut_model: None,
            mac_products: DEFAULT_MAX_PRODUCTS,
        }
    }
}

/// All `(e, m)` splits of a bit-width `r`: `e in [1, r-1)`, `m = r - 1 - e`.
pub fn minifloat_splits(bits: u32) -> Vec<(u32, u32)> {
    (1..bits.saturating_sub(1)).map(|e| (e, bits - 1 - e)).collect()
}

/// `(w, a)` pairs of a sweep: every combination with `a >= w`.
pub fn bit_pairs(weight_bits: &[u32], act_bits: &[u32]) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for &w in weight_bits {
        for &a in act_bits {
            if a >= w {
                pairs.push((w, a));
            }
        }
    }
    pairs.sort();
    pairs.dedup();
    pairs
}

/// One evaluated configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: String,
    /// "int" or "fp".
    pub kind: String,
    pub w_bits: u32,
    pub a_bits: u32,
    pub e_w: Option<u32>,
    pub m_w: Option<u32>,
    pub e_a: Option<u32>,
    pub m_a: Option<u32>,
    pub granularity: String,
    pub methods: String,
    pub accuracy: f64,
    pub dot_bitwidth: u32,
    pub acc_width: u32,
    pub lut: Option<u32>,
    /// Set when the pipeline failed and accuracy was recorded as chance.
    pub failed: bool,
    /// Wall time of the pipeline + evaluation (not reported in files).
    #[serde(skip)]
    pub wall: Duration,
}

fn recipe_for(
    spec: &SweepSpec,
    weight_format: NumericFormat,
    act_format: NumericFormat,
) -> QuantRecipe {
    QuantRecipe {
        weight_format: Some(weight_format),
        weight_granularity: spec.granularity,
        act_format: Some(act_format),
        first_last_policy: pipeline::FirstLastPolicy {
            enabled: spec.first_last_policy,
            ..pipeline::FirstLastPolicy::default()
        },
        cle: spec.cle.then(CleConfig::default),
        smoothquant: spec.smoothquant.map(|alpha| SmoothQuantConfig { alpha }),
        bias_correction: spec.bias_correction,
        learned_rounding: matches!(spec.weight_mode, SweepWeightMode::LearnedRounding)
            .then(|| spec.rounding.clone()),
        gptq: matches!(spec.weight_mode, SweepWeightMode::Gptq).then(|| spec.gptq.clone()),
        calibration: spec.calibration.clone(),
    }
}

struct ConfigJob {
    name: String,
    kind: MacKind,
    w_bits: u32,
    a_bits: u32,
    splits: Option<((u32, u32), (u32, u32))>,
    weight_format: NumericFormat,
    act_format: NumericFormat,
}

fn enumerate_jobs(spec: &SweepSpec) -> Result<Vec<ConfigJob>> {
    let mut jobs = Vec::new();
    for (w, a) in bit_pairs(&spec.weight_bits, &spec.act_bits) {
        if matches!(spec.kinds, FormatKinds::Int | FormatKinds::Both) {
            jobs.push(ConfigJob {
                name: format!("int_w{w}a{a}"),
                kind: MacKind::Int,
                w_bits: w,
                a_bits: a,
                splits: None,
                weight_format: NumericFormat::int(w)?,
                act_format: NumericFormat::int(a)?,
            });
        }
        if matches!(spec.kinds, FormatKinds::Fp | FormatKinds::Both) {
            for (ew, mw) in minifloat_splits(w) {
                for (ea, ma) in minifloat_splits(a) {
                    jobs.push(ConfigJob {
                        name: format!("fp_w{w}e{ew}m{mw}_a{a}e{ea}m{ma}"),
                        kind: MacKind::Fp,
                        w_bits: w,
                        a_bits: a,
                        splits: Some(((ew, mw), (ea, ma))),
                        weight_format: NumericFormat::Minifloat(MinifloatFormat::new(ew, mw)?),
                        act_format: NumericFormat::Minifloat(MinifloatFormat::new(ea, ma)?),
                    });
                }
            }
        }
    }
    Ok(jobs)
}

fn acc_width_for(job: &ConfigJob, n: usize) -> u32 {
    match (job.kind, job.splits) {
        (MacKind::Int, _) => hwcost::int_acc_width(job.w_bits, job.a_bits, n),
        (MacKind::Fp, Some(((ew, mw), (ea, ma)))) => hwcost::fp_acc_width(ew, mw, ea, ma, n),
        (MacKind::Fp, None) => unreachable!("fp jobs carry their splits"),
    }
}

/// Runs the sweep. Per `(w, a)` pair one result is reported for the integer
/// format and one for the best-accuracy minifloat split (ties resolve to the
/// lexicographically smallest config name). Pipeline failures are recorded
/// with chance-level accuracy and a failure flag rather than aborting the
/// sweep.
pub fn run_sweep(
    model: &LayerGraph,
    calib: &[Tensor],
    eval: &[(Tensor, u32)],
    spec: &SweepSpec,
) -> Result<Vec<SweepResult>> {
    let lut_model: Option<RefModel> = match &spec.lut_model {
        Some(name) => Some(name.parse()?),
        None => None,
    };
    let jobs = enumerate_jobs(spec)?;
    let results: Vec<SweepResult> = jobs
        .par_iter()
        .map(|job| {
            let start = Instant::now();
            let recipe = recipe_for(spec, job.weight_format, job.act_format);
            let (accuracy, failed) = match pipeline::prepare(model, &recipe, calib)
                .and_then(|pm| pm.accuracy(eval))
            {
                Ok(acc) if acc.is_finite() => (acc, false),
                _ => (1.0 / NUM_CLASSES as f64, true),
            };
            let (e_w, m_w, e_a, m_a) = match job.splits {
                Some(((ew, mw), (ea, ma))) => (Some(ew), Some(mw), Some(ea), Some(ma)),
                None => (None, None, None, None),
            };
            let mut methods = recipe.methods_label();
            if failed {
                methods.push_str("+failed");
            }
            SweepResult {
                config: job.name.clone(),
                kind: match job.kind {
                    MacKind::Int => "int".into(),
                    MacKind::Fp => "fp".into(),
                },
                w_bits: job.w_bits,
                a_bits: job.a_bits,
                e_w,
                m_w,
                e_a,
                m_a,
                granularity: spec.granularity.label().to_string(),
                methods,
                accuracy,
                dot_bitwidth: hwcost::dot_product_bitwidth(job.w_bits, job.a_bits),
                acc_width: acc_width_for(job, spec.mac_products),
                lut: lut_model.and_then(|m| hwcost::lut_lookup(m, job.kind, job.w_bits, job.a_bits)),
                failed,
                wall: start.elapsed(),
            }
        })
        .collect();

    // keep the integer result per pair and the best minifloat split per
    // pair; accuracy ties resolve to the smaller config name
    let mut reduced: BTreeMap<(String, u32, u32), SweepResult> = BTreeMap::new();
    for r in results {
        let key = (r.kind.clone(), r.w_bits, r.a_bits);
        let replace = match reduced.get(&key) {
            None => true,
            Some(best) => {
                r.accuracy > best.accuracy
                    || (r.accuracy == best.accuracy && r.config < best.config)
            }
        };
        if replace {
            reduced.insert(key, r);
        }
    }
    Ok(reduced.into_values().collect())
}

/// Cost axis of a Pareto analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostAxis {
    DotBitwidth,
    AccWidth,
    Lut,
}

impl CostAxis {
    pub fn value(&self, r: &SweepResult) -> Option<u32> {
        match self {
            CostAxis::DotBitwidth => Some(r.dot_bitwidth),
            CostAxis::AccWidth => Some(r.acc_width),
            CostAxis::Lut => r.lut,
        }
    }
}

impl std::str::FromStr for CostAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot_bitwidth" => Ok(CostAxis::DotBitwidth),
            "acc_width" => Ok(CostAxis::AccWidth),
            "lut" => Ok(CostAxis::Lut),
            other => Err(Error::InvalidArgument(format!("unknown cost axis {other:?}"))),
        }
    }
}

/// Maximal non-dominated set under (cost minimized, accuracy maximized),
/// sorted by cost. Ties on cost keep the higher accuracy; equal
/// (cost, accuracy) points deduplicate to the smallest config name. Results
/// without a value on the chosen axis are skipped.
pub fn pareto_front(results: &[SweepResult], axis: CostAxis) -> Vec<SweepResult> {
    let mut pts: Vec<(u32, &SweepResult)> = results
        .iter()
        .filter_map(|r| axis.value(r).map(|c| (c, r)))
        .collect();
    pts.sort_by(|(ca, ra), (cb, rb)| {
        ca.cmp(cb)
            .then(rb.accuracy.partial_cmp(&ra.accuracy).unwrap())
            .then(ra.config.cmp(&rb.config))
    });
    let mut front: Vec<SweepResult> = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    for (_, r) in pts {
        if r.accuracy > best_acc {
            best_acc = r.accuracy;
            front.push(r.clone());
        }
    }
    front
}

const CSV_HEADER: &str =
    "config,kind,w_bits,a_bits,e_w,m_w,e_a,m_a,granularity,methods,accuracy,dot_bitwidth,acc_width,lut";

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Renders results as CSV with a fixed column order and `\n` newlines.
pub fn to_csv(results: &[SweepResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{}\n",
            r.config,
            r.kind,
            r.w_bits,
            r.a_bits,
            opt_str(&r.e_w),
            opt_str(&r.m_w),
            opt_str(&r.e_a),
            opt_str(&r.m_a),
            r.granularity,
            r.methods,
            r.accuracy,
            r.dot_bitwidth,
            r.acc_width,
            opt_str(&r.lut),
        ));
    }
    out
}

fn parse_opt<T: std::str::FromStr>(s: &str, what: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| Error::Malformed(format!("bad {what} field {s:?}")))
    }
}

/// Parses a CSV report back into results (wall times are not stored).
pub fn from_csv(text: &str) -> Result<Vec<SweepResult>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Malformed(format!(
                "unexpected CSV header {other:?}"
            )))
        }
    }
    let mut results = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(Error::Malformed(format!(
                "expected 14 fields, got {} in {line:?}",
                f.len()
            )));
        }
        let methods = f[9].to_string();
        results.push(SweepResult {
            config: f[0].to_string(),
            kind: f[1].to_string(),
            w_bits: f[2].parse().map_err(|_| Error::Malformed("w_bits".into()))?,
            a_bits: f[3].parse().map_err(|_| Error::Malformed("a_bits".into()))?,
            e_w: parse_opt(f[4], "e_w")?,
            m_w: parse_opt(f[5], "m_w")?,
            e_a: parse_opt(f[6], "e_a")?,
            m_a: parse_opt(f[7], "m_a")?,
            granularity: f[8].to_string(),
            failed: methods.ends_with("+failed"),
            methods,
            accuracy: f[10].parse().map_err(|_| Error::Malformed("accuracy".into()))?,
            dot_bitwidth: f[11].parse().map_err(|_| Error::Malformed("dot_bitwidth".into()))?,
            acc_width: f[12].parse().map_err(|_| Error::Malformed("acc_width".into()))?,
            lut: parse_opt(f[13], "lut")?,
            wall: Duration::ZERO,
        });
    }
    Ok(results)
}

/// Renders results as pretty JSON.
pub fn to_json(results: &[SweepResult]) -> Result<String> {
    serde_json::to_string_pretty(results).map_err(|e| Error::Config(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Vec<SweepResult>> {
    serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))
}

/// Published best-accuracy minifloat splits per (model, weight bits,
/// activation bits): `((e_w, m_w), (e_a, m_a))`. Shipped verbatim as a
/// static reference dataset and usable as sweep presets.
pub const BEST_FORMAT_TABLE: [(RefModel, u32, u32, (u32, u32), (u32, u32)); 63] = {
    use RefModel::*;
    [
        (ResNet18, 3, 3, (1, 1), (1, 1)),
        (ResNet18, 3, 4, (1, 1), (2, 1)),
        (ResNet18, 3, 5, (1, 1), (3, 1)),
        (ResNet18, 3, 6, (1, 1), (3, 2)),
        (ResNet18, 3, 7, (1, 1), (2, 4)),
        (ResNet18, 3, 8, (1, 1), (4, 3)),
        (ResNet18, 4, 4, (2, 1), (2, 1)),
        (ResNet18, 4, 5, (2, 1), (3, 1)),
        (ResNet18, 4, 6, (2, 1), (2, 3)),
        (ResNet18, 4, 7, (2, 1), (2, 4)),
        (ResNet18, 4, 8, (2, 1), (1, 6)),
        (ResNet18, 5, 5, (2, 2), (3, 1)),
        (ResNet18, 5, 6, (1, 3), (2, 3)),
        (ResNet18, 5, 7, (1, 3), (2, 4)),
        (ResNet18, 5, 8, (1, 3), (3, 4)),
        (ResNet18, 6, 6, (2, 3), (2, 3)),
        (ResNet18, 6, 7, (2, 3), (3, 3)),
        (ResNet18, 6, 8, (1, 4), (3, 4)),
        (ResNet18, 7, 7, (2, 4), (3, 3)),
        (ResNet18, 7, 8, (3, 3), (3, 4)),
        (ResNet18, 8, 8, (3, 4), (3, 4)),
        (MobileNetV2, 3, 3, (1, 1), (1, 1)),
        (MobileNetV2, 3, 4, (1, 1), (2, 1)),
        (MobileNetV2, 3, 5, (1, 1), (3, 1)),
        (MobileNetV2, 3, 6, (1, 1), (3, 2)),
        (MobileNetV2, 3, 7, (1, 1), (3, 3)),
        (MobileNetV2, 3, 8, (1, 1), (3, 4)),
        (MobileNetV2, 4, 4, (2, 1), (2, 1)),
        (MobileNetV2, 4, 5, (2, 1), (3, 1)),
        (MobileNetV2, 4, 6, (1, 2), (2, 3)),
        (MobileNetV2, 4, 7, (2, 1), (3, 3)),
        (MobileNetV2, 4, 8, (1, 2), (3, 4)),
        (MobileNetV2, 5, 5, (2, 2), (3, 1)),
        (MobileNetV2, 5, 6, (2, 2), (2, 3)),
        (MobileNetV2, 5, 7, (2, 2), (2, 4)),
        (MobileNetV2, 5, 8, (2, 2), (2, 5)),
        (MobileNetV2, 6, 6, (1, 4), (2, 3)),
        (MobileNetV2, 6, 7, (2, 3), (2, 4)),
        (MobileNetV2, 6, 8, (1, 4), (2, 5)),
        (MobileNetV2, 7, 7, (1, 5), (2, 4)),
        (MobileNetV2, 7, 8, (1, 5), (2, 5)),
        (MobileNetV2, 8, 8, (1, 6), (2, 5)),
        (VitB32, 3, 3, (1, 1), (1, 1)),
        (VitB32, 3, 4, (1, 1), (2, 1)),
        (VitB32, 3, 5, (1, 1), (3, 1)),
        (VitB32, 3, 6, (1, 1), (3, 2)),
        (VitB32, 3, 7, (1, 1), (3, 3)),
        (VitB32, 3, 8, (1, 1), (3, 4)),
        (VitB32, 4, 4, (2, 1), (2, 1)),
        (VitB32, 4, 5, (2, 1), (3, 1)),
        (VitB32, 4, 6, (2, 1), (3, 2)),
        (VitB32, 4, 7, (2, 1), (3, 3)),
        (VitB32, 4, 8, (2, 1), (3, 4)),
        (VitB32, 5, 5, (2, 2), (3, 1)),
        (VitB32, 5, 6, (2, 2), (3, 2)),
        (VitB32, 5, 7, (2, 2), (3, 3)),
        (VitB32, 5, 8, (1, 3), (3, 4)),
        (VitB32, 6, 6, (3, 2), (3, 2)),
        (VitB32, 6, 7, (3, 2), (3, 3)),
        (VitB32, 6, 8, (1, 4), (3, 4)),
        (VitB32, 7, 7, (1, 5), (3, 3)),
        (VitB32, 7, 8, (2, 4), (2, 5)),
        (VitB32, 8, 8, (4, 3), (2, 5)),
    ]
};

/// Published best `((e_w, m_w), (e_a, m_a))` split for a model and bit-width
/// pair, if tabulated.
pub fn best_format(model: RefModel, w_bits: u32, a_bits: u32) -> Option<((u32, u32), (u32, u32))> {
    BEST_FORMAT_TABLE
        .iter()
        .find(|(m, w, a, _, _)| *m == model && *w == w_bits && *a == a_bits)
        .map(|(_, _, _, wf, af)| (*wf, *af))
}
