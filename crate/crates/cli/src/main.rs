//! Command-line driver: quantize models, calibrate activations, sweep the
//! format design space, query the MAC cost model, and post-process reports.
//!
//! Exit codes: 0 on success, 2 when a sweep finished but some configurations
//! failed, 1 on fatal errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use miniquant::explore::{self, CostAxis, SweepSpec};
use miniquant::formats::NumericFormat;
use miniquant::graph::accuracy;
use miniquant::hwcost::{self, MacKind, RefModel};
use miniquant::pipeline::{self, QuantRecipe};
use miniquant::tensor::Tensor;
use miniquant::{data, io};

#[derive(Parser)]
#[command(name = "miniquant", version, about = "Minifloat and integer PTQ toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a quantization recipe to a model and save the result.
    Quantize(QuantizeArgs),
    /// Calibrate activation ranges for a model under a recipe.
    Calibrate(CalibrateArgs),
    /// Sweep format configurations and report accuracy vs. hardware cost.
    Sweep(SweepArgs),
    /// Print MAC cost metrics for an operand format pair.
    Cost(CostArgs),
    /// Reduce a results file to its Pareto frontier.
    Pareto(ParetoArgs),
    /// Convert a results file between CSV and JSON.
    Report(ReportArgs),
    /// Generate the synthetic dataset and reference model fixtures.
    Gen(GenArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    /// Model file (MQTZ).
    #[arg(long)]
    model: PathBuf,
    /// Recipe file (TOML).
    #[arg(long)]
    recipe: PathBuf,
    /// Calibration dataset (MQDT); labels are ignored.
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the calibration table here (JSON).
    #[arg(long)]
    calib_out: Option<PathBuf>,
    /// Evaluate top-1 accuracy on this labeled dataset after quantizing.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    recipe: PathBuf,
    /// Output calibration table (JSON: site id -> {t, s, format}).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset (MQDT).
    #[arg(long)]
    data: PathBuf,
    /// Labeled evaluation dataset (MQDT); defaults to `--data`.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Sweep specification (TOML). Defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output file for the results table.
    #[arg(long)]
    out: PathBuf,
    /// Output format.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CostArgs {
    /// Weight operand format, e.g. int4 or e2m1.
    #[arg(long)]
    wfmt: String,
    /// Activation operand format.
    #[arg(long)]
    afmt: String,
    /// Maximum dot-product length.
    #[arg(long, default_value_t = hwcost::DEFAULT_MAX_PRODUCTS)]
    n: usize,
    /// Look up published LUTs for this model (resnet18, mobilenetv2,
    /// vit_b_32); all three when omitted.
    #[arg(long)]
    model: Option<String>,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ParetoArgs {
    /// Results file (CSV or JSON, by extension).
    #[arg(long)]
    input: PathBuf,
    /// Cost axis: dot_bitwidth, acc_width, or lut.
    #[arg(long, default_value = "dot_bitwidth")]
    cost_axis: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Target format: csv or json.
    #[arg(long)]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// Directory for the generated fixtures.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Calibration set size.
    #[arg(long, default_value_t = 1000)]
    calib: usize,
    /// Evaluation set size.
    #[arg(long, default_value_t = 1000)]
    eval: usize,
}

fn load_inputs(path: &PathBuf) -> Result<Vec<Tensor>> {
    let samples = io::load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(samples.into_iter().map(|(x, _)| x).collect())
}

fn results_from_file(path: &PathBuf) -> Result<Vec<explore::SweepResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_json = path.extension().map(|e| e == "json").unwrap_or(false);
    let results = if is_json {
        explore::from_json(&text)?
    } else {
        explore::from_csv(&text)?
    };
    Ok(results)
}

fn write_results(path: &PathBuf, format: &str, results: &[explore::SweepResult]) -> Result<()> {
    let text = match format {
        "csv" => explore::to_csv(results),
        "json" => explore::to_json(results)?,
        other => bail!("unknown report format {other:?} (use csv or json)"),
    };
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Quantize(args) => {
            let model = io::load_model(&args.model)?;
            let recipe: QuantRecipe = toml::from_str(&fs::read_to_string(&args.recipe)?)
                .context("parsing recipe")?;
            let samples = load_inputs(&args.data)?;
            let pm = pipeline::prepare(&model, &recipe, &samples)?;
            io::save_model(&pm.graph, &args.out)?;
            if let Some(p) = &args.calib_out {
                fs::write(p, serde_json::to_string_pretty(&pm.calib)?)?;
            }
            if let Some(eval_path) = &args.eval {
                let eval = io::load_dataset(eval_path)?;
                let acc = pm.accuracy(&eval)?;
                println!("quantized top-1 accuracy: {acc:.4}");
            }
            println!("wrote {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate(args) => {
            let model = io::load_model(&args.model)?;
            let recipe: QuantRecipe = toml::from_str(&fs::read_to_string(&args.recipe)?)
                .context("parsing recipe")?;
            let samples = load_inputs(&args.data)?;
            let pm = pipeline::prepare(&model, &recipe, &samples)?;
            fs::write(&args.out, serde_json::to_string_pretty(&pm.calib)?)?;
            println!(
                "calibrated {} sites -> {}",
                pm.calib.entries.len(),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            if let Some(jobs) = args.jobs {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build_global()
                    .context("configuring worker threads")?;
            }
            let model = io::load_model(&args.model)?;
            let calib = load_inputs(&args.data)?;
            let eval = io::load_dataset(args.eval.as_ref().unwrap_or(&args.data))?;
            let mut spec: SweepSpec = match &args.spec {
                Some(p) => toml::from_str(&fs::read_to_string(p)?).context("parsing sweep spec")?,
                None => SweepSpec::default(),
            };
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let results = explore::run_sweep(&model, &calib, &eval, &spec)?;
            write_results(&args.out, &args.format, &results)?;
            let failures = results.iter().filter(|r| r.failed).count();
            println!(
                "swept {} configurations ({failures} failed) -> {}",
                results.len(),
                args.out.display()
            );
            if failures > 0 {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Cost(args) => {
            let wfmt: NumericFormat = args.wfmt.parse()?;
            let afmt: NumericFormat = args.afmt.parse()?;
            let dot = hwcost::dot_product_bitwidth(wfmt.bits(), afmt.bits());
            let cfg = hwcost::MacConfig::new(wfmt, afmt, args.n)?;
            let acc_width = cfg.acc_width()?;
            let kind = if wfmt.is_int() { MacKind::Int } else { MacKind::Fp };
            let models: Vec<RefModel> = match &args.model {
                Some(m) => vec![m.parse()?],
                None => vec![RefModel::ResNet18, RefModel::MobileNetV2, RefModel::VitB32],
            };
            let luts: BTreeMap<String, Option<u32>> = models
                .iter()
                .map(|m| {
                    (
                        m.to_string(),
                        hwcost::lut_lookup(*m, kind, wfmt.bits(), afmt.bits()),
                    )
                })
                .collect();
            if args.json {
                let payload = serde_json::json!({
                    "wfmt": wfmt.to_string(),
                    "afmt": afmt.to_string(),
                    "n": args.n,
                    "dot_bitwidth": dot,
                    "acc_width": acc_width,
                    "luts": luts,
                });
                println!("{}", serde_json::to_string_pretty(&payload)?);
            } else {
                println!("dot_bitwidth: {dot}");
                println!("acc_width: {acc_width}");
                for (model, lut) in &luts {
                    match lut {
                        Some(v) => println!("luts[{model}]: {v}"),
                        None => println!("luts[{model}]: not tabulated"),
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Pareto(args) => {
            let results = results_from_file(&args.input)?;
            let axis: CostAxis = args.cost_axis.parse()?;
            let front = explore::pareto_front(&results, axis);
            let format = if args.out.extension().map(|e| e == "json").unwrap_or(false) {
                "json"
            } else {
                "csv"
            };
            write_results(&args.out, format, &front)?;
            println!(
                "{} of {} points on the frontier -> {}",
                front.len(),
                results.len(),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(args) => {
            let results = results_from_file(&args.input)?;
            write_results(&args.out, &args.format, &results)?;
            println!("wrote {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen(args) => {
            fs::create_dir_all(&args.out_dir)?;
            let model = data::reference_cnn(args.seed)?;
            let model_path = args.out_dir.join("refcnn.mqtz");
            io::save_model(&model, &model_path)?;
            let calib = data::synth_blobs(args.calib, args.seed.wrapping_add(1000));
            io::save_dataset(&calib, args.out_dir.join("calib.mqdt"))?;
            let eval = data::synth_blobs(args.eval, args.seed.wrapping_add(2000));
            io::save_dataset(&eval, args.out_dir.join("eval.mqdt"))?;
            let mlp = data::docs_mlp(args.seed)?;
            io::save_model(&mlp, args.out_dir.join("mlp3.mqtz"))?;
            let acc = accuracy(&model, &eval)?;
            println!(
                "fixtures in {} (reference CNN top-1 accuracy {acc:.4})",
                args.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
