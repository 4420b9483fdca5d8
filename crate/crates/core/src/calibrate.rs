//! Static activation-range calibration: layer-wise MSE minimization of the
//! range statistic `t` via Fibonacci search on a discretized interval.

use std::collections::{BTreeMap, HashMap};

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::formats::NumericFormat;
use crate::graph::{LayerGraph, SiteId};
use crate::quantizers::{self, ScalingSpec};
use crate::tensor::Tensor;

/// Settings for the range search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibSettings {
    /// Samples pooled per optimization batch.
    pub batch_size: usize,
    /// Number of `t` candidates on `(0, max|X|]`.
    pub candidates: usize,
    /// Fibonacci-search iterations over the candidate grid.
    pub iterations: usize,
    /// Cap on calibration samples consumed per site.
    pub max_samples: usize,
}

impl Default for CalibSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            candidates: 512,
            iterations: 15,
            max_samples: 1000,
        }
    }
}

/// Per-site calibration outcome: batch statistics plus the averaged result.
#[derive(Debug, Clone)]
pub struct CalibRecord {
    /// Observed `max|X|` per batch.
    pub batch_max: Vec<f64>,
    /// Optimized `t` per batch.
    pub batch_t: Vec<f64>,
    /// Final range statistic (mean of the per-batch optima).
    pub t: f64,
    /// Set when every calibration sample was identically zero.
    pub all_zero: bool,
}

/// Final per-site scale entry, the unit stored in `calib.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibEntry {
    pub t: f64,
    pub s: f64,
    pub format: NumericFormat,
}

impl CalibEntry {
    pub fn from_t(t: f64, format: NumericFormat) -> Self {
        let spec = ScalingSpec::per_tensor(t, &format);
        Self {
            t,
            s: spec.scalar_scale(),
            format,
        }
    }
}

/// Site-keyed scale table produced by calibration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibTable {
    pub entries: BTreeMap<SiteId, CalibEntry>,
}

impl Serialize for CalibTable {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (site, entry) in &self.entries {
            map.serialize_entry(&site.to_string(), entry)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for CalibTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, CalibEntry>::deserialize(deserializer)?;
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let site: SiteId = k.parse().map_err(|e| D::Error::custom(format!("{e}")))?;
            entries.insert(site, v);
        }
        Ok(CalibTable { entries })
    }
}

/// Mean squared error between `values` and their quantize-dequantize image
/// (including clipping) at range statistic `t`.
fn quantization_mse(values: &[f64], t: f64, format: &NumericFormat) -> f64 {
    let s = ScalingSpec::per_tensor(t, format).scalar_scale();
    let total: f64 = match format {
        NumericFormat::Int(f) => {
            let (lo, hi) = (f.q_min() as f64, f.q_max() as f64);
            values
                .iter()
                .map(|v| {
                    let q = s * (v / s).round_ties_even().clamp(lo, hi);
                    (v - q) * (v - q)
                })
                .sum()
        }
        NumericFormat::Minifloat(f) => values
            .iter()
            .map(|v| {
                let q = s * quantizers::fp_quantize_normalized(v / s, *f);
                (v - q) * (v - q)
            })
            .sum(),
    };
    total / values.len() as f64
}

/// Fibonacci search for the argmin of `f` over `0..n`, assuming approximate
/// unimodality. Runs `iters` interval reductions with the standard two-probe
/// scheme, then scans the surviving bracket. Evaluations are memoized.
fn fibonacci_min(n: usize, iters: usize, mut f: impl FnMut(usize) -> f64) -> usize {
    assert!(n >= 1);
    let mut memo: HashMap<usize, f64> = HashMap::new();
    let mut eval = move |i: usize| -> f64 {
        *memo.entry(i).or_insert_with(|| f(i))
    };
    let mut fibs = vec![1.0f64, 1.0];
    while fibs.len() <= iters {
        let l = fibs.len();
        fibs.push(fibs[l - 1] + fibs[l - 2]);
    }
    let (mut a, mut b) = (0usize, n - 1);
    for step in 0..iters {
        if b - a <= 2 {
            break;
        }
        let k = iters - step;
        let span = (b - a) as f64;
        let x1 = a + (span * fibs[k - 2] / fibs[k]).round() as usize;
        let mut x2 = a + (span * fibs[k - 1] / fibs[k]).round() as usize;
        if x2 <= x1 {
            x2 = (x1 + 1).min(b);
        }
        if eval(x1) <= eval(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let mut best = a;
    for i in a..=b {
        if eval(i) < eval(best) {
            best = i;
        }
    }
    best
}

fn pool_batch(samples: &[Tensor]) -> Vec<f64> {
    samples.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Optimizes `t` for one batch of pooled values.
///
/// Candidates are `max|X| * (i+1)/candidates`. The Fibonacci search locates a
/// minimum quickly; because the staircase MSE landscape is not unimodal, its
/// result is then verified against a scan of the full candidate set, keeping
/// the search result on ties. The outcome is never worse than max scaling
/// (the last candidate is `max|X|` itself).
fn optimize_batch(values: &[f64], format: &NumericFormat, settings: &CalibSettings) -> (f64, f64) {
    let t0 = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if t0 == 0.0 {
        return (0.0, 0.0);
    }
    let n = settings.candidates;
    let candidate = |i: usize| t0 * (i + 1) as f64 / n as f64;
    let fib_idx = fibonacci_min(n, settings.iterations, |i| {
        quantization_mse(values, candidate(i), format)
    });
    let mut best_t = candidate(fib_idx);
    let mut best_mse = quantization_mse(values, best_t, format);
    for i in 0..n {
        let mse = quantization_mse(values, candidate(i), format);
        if mse < best_mse {
            best_mse = mse;
            best_t = candidate(i);
        }
    }
    (best_t, best_mse)
}

/// Calibrates one site from its captured activation samples: per-batch MSE
/// optimization of `t`, averaged across batches.
pub fn calibrate_site(
    samples: &[Tensor],
    format: &NumericFormat,
    settings: &CalibSettings,
) -> Result<CalibRecord> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "calibration needs at least one sample".into(),
        ));
    }
    let take = samples.len().min(settings.max_samples);
    let mut batch_max = Vec::new();
    let mut batch_t = Vec::new();
    for chunk in samples[..take].chunks(settings.batch_size) {
        let values = pool_batch(chunk);
        let t0 = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (t_star, _) = optimize_batch(&values, format, settings);
        batch_max.push(t0);
        batch_t.push(t_star);
    }
    let nonzero: Vec<f64> = batch_t.iter().copied().filter(|t| *t > 0.0).collect();
    let all_zero = nonzero.is_empty();
    let t = if all_zero {
        f64::MIN_POSITIVE
    } else {
        nonzero.iter().sum::<f64>() / nonzero.len() as f64
    };
    Ok(CalibRecord {
        batch_max,
        batch_t,
        t,
        all_zero,
    })
}

/// Runs full-precision forward passes over the calibration set, captures
/// activations at every requested site, and optimizes each site's range.
pub fn calibrate_graph(
    graph: &LayerGraph,
    sites: &BTreeMap<SiteId, NumericFormat>,
    samples: &[Tensor],
    settings: &CalibSettings,
) -> Result<CalibTable> {
    let captured = capture_sites(graph, sites, samples, settings.max_samples)?;
    let mut entries = BTreeMap::new();
    for (site, format) in sites {
        let tensors = captured
            .get(site)
            .ok_or_else(|| Error::MissingCalibration(site.to_string()))?;
        let record = calibrate_site(tensors, format, settings)?;
        entries.insert(*site, CalibEntry::from_t(record.t, *format));
    }
    Ok(CalibTable { entries })
}

/// Captures the full-precision activations seen at each requested site.
pub fn capture_sites(
    graph: &LayerGraph,
    sites: &BTreeMap<SiteId, NumericFormat>,
    samples: &[Tensor],
    max_samples: usize,
) -> Result<BTreeMap<SiteId, Vec<Tensor>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let mut captured: BTreeMap<SiteId, Vec<Tensor>> =
        sites.keys().map(|s| (*s, Vec::new())).collect();
    for sample in samples.iter().take(max_samples) {
        graph.forward_with_sites(sample, &mut |site, t| {
            if let Some(v) = captured.get_mut(&site) {
                v.push(t.clone());
            }
        })?;
    }
    Ok(captured)
}
