//! The model files committed under `fixtures/` must stay loadable and match
//! their documented structure and their deterministic generators.

use std::path::{Path, PathBuf};

use miniquant::graph::LayerKind;
use miniquant::{data, io};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn committed_mlp_parses_to_the_documented_three_layer_net() {
    let g = io::load_model(fixtures().join("mlp3.mqtz")).unwrap();
    assert_eq!(g.input_shape(), &[1, 8, 8]);
    let kinds: Vec<&str> = g.nodes().iter().map(|n| n.kind.name()).collect();
    assert_eq!(
        kinds,
        vec!["flatten", "linear", "relu", "linear", "relu", "linear"]
    );
    let dims: Vec<(usize, usize)> = g
        .nodes()
        .iter()
        .filter_map(|n| match &n.kind {
            LayerKind::Linear { weight, .. } => Some((weight.shape()[0], weight.shape()[1])),
            _ => None,
        })
        .collect();
    assert_eq!(dims, vec![(32, 64), (16, 32), (2, 16)]);
    // byte-for-byte reproducible from the generator
    let mut committed = Vec::new();
    io::write_model(&mut committed, &g).unwrap();
    let mut regenerated = Vec::new();
    io::write_model(&mut regenerated, &data::docs_mlp(42).unwrap()).unwrap();
    assert_eq!(committed, regenerated);
}

#[test]
fn committed_reference_cnn_matches_its_generator() {
    let g = io::load_model(fixtures().join("refcnn.mqtz")).unwrap();
    let mut committed = Vec::new();
    io::write_model(&mut committed, &g).unwrap();
    let mut regenerated = Vec::new();
    io::write_model(&mut regenerated, &data::reference_cnn(42).unwrap()).unwrap();
    assert_eq!(committed, regenerated);
}

#[test]
fn committed_datasets_load_and_are_labeled() {
    let calib = io::load_dataset(fixtures().join("calib.mqdt")).unwrap();
    assert_eq!(calib.len(), 256);
    let eval = io::load_dataset(fixtures().join("eval.mqdt")).unwrap();
    assert_eq!(eval.len(), 512);
    assert!(eval.iter().all(|(x, l)| x.shape() == [1, 8, 8] && *l < 2));
}
