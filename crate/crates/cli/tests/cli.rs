//! End-to-end checks of the command-line interface against the committed
//! fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_miniquant"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn miniquant")
}

#[test]
fn cost_prints_widths_and_luts() {
    let out = run(&["cost", "--wfmt", "int8", "--afmt", "int8", "--n", "4608"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("dot_bitwidth: 64"));
    assert!(text.contains("acc_width: 30"));
    assert!(text.contains("luts[resnet18]: 116"));

    let out = run(&[
        "cost", "--wfmt", "e4m3", "--afmt", "e4m3", "--n", "4608", "--model", "vit_b_32",
        "--json",
    ]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["acc_width"], 50);
    assert_eq!(json["luts"]["vit_b_32"], 170);
}

#[test]
fn cost_rejects_bad_format_with_exit_1() {
    let out = run(&["cost", "--wfmt", "float99", "--afmt", "int8"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("error"));
}

#[test]
fn quantize_calibrate_sweep_pareto_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixtures().join("refcnn.mqtz");
    let data = fixtures().join("calib.mqdt");
    let eval = fixtures().join("eval.mqdt");

    // recipe: int8 weights and activations, everything else default
    let recipe = dir.path().join("recipe.toml");
    std::fs::write(
        &recipe,
        "weight_format = \"int8\"\nact_format = \"int8\"\nbias_correction = true\n",
    )
    .unwrap();

    let qmodel = dir.path().join("quantized.mqtz");
    let calib_json = dir.path().join("calib.json");
    let out = run(&[
        "quantize",
        "--model",
        model.to_str().unwrap(),
        "--recipe",
        recipe.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        qmodel.to_str().unwrap(),
        "--calib-out",
        calib_json.to_str().unwrap(),
        "--eval",
        eval.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(qmodel.exists());
    let calib: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&calib_json).unwrap()).unwrap();
    let obj = calib.as_object().unwrap();
    assert!(obj.keys().any(|k| k == "out"));
    assert!(obj.values().all(|v| v["t"].as_f64().unwrap() > 0.0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("accuracy"), "{text}");

    // standalone calibrate produces the same table shape
    let calib2 = dir.path().join("calib2.json");
    let out = run(&[
        "calibrate",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--recipe",
        recipe.to_str().unwrap(),
        "--out",
        calib2.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(&calib_json).unwrap(),
        std::fs::read_to_string(&calib2).unwrap()
    );

    // a small sweep, then pareto and report conversions
    let spec = dir.path().join("spec.toml");
    std::fs::write(
        &spec,
        "weight_bits = [4]\nact_bits = [4]\nkinds = \"both\"\n\n[calibration]\nmax_samples = 32\n",
    )
    .unwrap();
    let results_csv = dir.path().join("results.csv");
    let out = run(&[
        "sweep",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--eval",
        eval.to_str().unwrap(),
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        results_csv.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&results_csv).unwrap();
    assert!(csv.starts_with("config,kind,w_bits,a_bits,"));
    assert_eq!(csv.lines().count(), 3); // header + int + fp winner

    let front = dir.path().join("front.csv");
    let out = run(&[
        "pareto",
        "--input",
        results_csv.to_str().unwrap(),
        "--cost-axis",
        "dot_bitwidth",
        "--out",
        front.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&front).unwrap().lines().count() >= 2);

    // csv -> json -> csv round-trips byte-identically
    let results_json = dir.path().join("results.json");
    let out = run(&[
        "report",
        "--input",
        results_csv.to_str().unwrap(),
        "--format",
        "json",
        "--out",
        results_json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let back_csv = dir.path().join("back.csv");
    let out = run(&[
        "report",
        "--input",
        results_json.to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        back_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(&results_csv).unwrap(),
        std::fs::read_to_string(&back_csv).unwrap()
    );
}

#[test]
fn recipe_with_both_optimizers_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("bad.toml");
    std::fs::write(
        &recipe,
        "weight_format = \"int4\"\n[learned_rounding]\nsteps = 10\n[gptq]\nblock_size = 8\n",
    )
    .unwrap();
    let out = run(&[
        "quantize",
        "--model",
        fixtures().join("refcnn.mqtz").to_str().unwrap(),
        "--recipe",
        recipe.to_str().unwrap(),
        "--data",
        fixtures().join("calib.mqdt").to_str().unwrap(),
        "--out",
        dir.path().join("x.mqtz").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("mutually exclusive"), "{err}");
}

#[test]
fn gen_writes_fixture_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--seed",
        "7",
        "--calib",
        "16",
        "--eval",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["refcnn.mqtz", "calib.mqdt", "eval.mqdt", "mlp3.mqtz"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}
