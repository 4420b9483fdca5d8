//! Synthetic dataset and reference-model fixtures.
//!
//! The "blob" task: 8x8 single-channel images containing one Gaussian bump at
//! a random position. Class 0 bumps are narrow and peaked, class 1 bumps are
//! wide and flat; total energy is matched across classes so the mean pixel
//! value alone does not separate them. The reference CNN uses fixed random
//! convolution features (with a residual join and a depthwise stage) and a
//! closed-form ridge-regression readout, so fixture generation is
//! deterministic and needs no gradient training.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{GraphBuilder, LayerGraph, LayerKind, ValueRef};
use crate::linalg::spd_solve;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 8;
pub const NUM_CLASSES: usize = 2;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates `n` labeled blob images, alternating classes, deterministically
/// from the seed.
pub fn synth_blobs(n: usize, seed: u64) -> Vec<(Tensor, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = IMAGE_SIDE;
    (0..n)
        .map(|i| {
            let label = (i % NUM_CLASSES) as u32;
            let cy = rng.gen_range(2.0..5.0);
            let cx = rng.gen_range(2.0..5.0);
            let base_sigma = if label == 0 { 0.7 } else { 1.8 };
            let sigma: f64 = base_sigma * rng.gen_range(0.9..1.1);
            // amplitude ~ 1/sigma^2 keeps the bump energy roughly constant
            let amp = 2.0 / (sigma * sigma);
            let mut pixels = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let v = amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
                        + 0.03 * normal(&mut rng);
                    pixels.push(v);
                }
            }
            (
                Tensor::new(vec![1, side, side], pixels).expect("finite pixels"),
                label,
            )
        })
        .collect()
}

fn random_conv(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in_g: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) -> LayerKind {
    let fan_in = (c_in_g * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let weight = Tensor::new(
        vec![c_out, c_in_g, k, k],
        (0..c_out * c_in_g * k * k)
            .map(|_| std * normal(rng))
            .collect(),
    )
    .expect("finite weights");
    let bias = (0..c_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
    LayerKind::Conv2d {
        weight,
        bias,
        stride,
        padding,
        groups,
    }
}

/// The convolutional trunk of the reference CNN, up to and including the
/// global average pool. The feature width is 16.
fn build_trunk(seed: u64) -> Result<LayerGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(vec![1, IMAGE_SIDE, IMAGE_SIDE]);
    let conv1 = b.push(random_conv(&mut rng, 8, 1, 3, 1, 1, 1), vec![ValueRef::Input]);
    let relu1 = b.push(LayerKind::Relu, vec![ValueRef::Node(conv1)]);
    let conv2 = b.push(random_conv(&mut rng, 8, 8, 3, 1, 1, 1), vec![ValueRef::Node(relu1)]);
    let relu2 = b.push(LayerKind::Relu, vec![ValueRef::Node(conv2)]);
    let add = b.push(
        LayerKind::Add,
        vec![ValueRef::Node(relu1), ValueRef::Node(relu2)],
    );
    let dw = b.push(random_conv(&mut rng, 8, 1, 3, 1, 1, 8), vec![ValueRef::Node(add)]);
    let relu3 = b.push(LayerKind::Relu, vec![ValueRef::Node(dw)]);
    let conv3 = b.push(random_conv(&mut rng, 16, 8, 3, 2, 1, 1), vec![ValueRef::Node(relu3)]);
    let relu4 = b.push(LayerKind::Relu, vec![ValueRef::Node(conv3)]);
    b.push(LayerKind::GlobalAvgPool, vec![ValueRef::Node(relu4)]);
    b.finish()
}

/// Fits a linear readout `features -> classes` by ridge regression with an
/// intercept. Returns (weight `[classes, features]`, bias).
fn ridge_readout(
    features: &[Vec<f64>],
    labels: &[u32],
    classes: usize,
    lambda: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let n = features.len();
    let d = features[0].len();
    let da = d + 1; // augmented with intercept
    let mut gram = vec![0.0; da * da];
    let mut rhs = vec![0.0; da * classes];
    for (f, label) in features.iter().zip(labels) {
        let mut aug = f.clone();
        aug.push(1.0);
        for i in 0..da {
            for j in 0..da {
                gram[i * da + j] += aug[i] * aug[j];
            }
        }
        for c in 0..classes {
            let target = if *label as usize == c { 1.0 } else { -1.0 };
            for i in 0..da {
                rhs[i * classes + c] += aug[i] * target;
            }
        }
    }
    for i in 0..da {
        gram[i * da + i] += lambda * n as f64;
    }
    let mut weight = vec![0.0; classes * d];
    let mut bias = vec![0.0; classes];
    for c in 0..classes {
        let b: Vec<f64> = (0..da).map(|i| rhs[i * classes + c]).collect();
        let sol = spd_solve(&gram, &b, da)?;
        for j in 0..d {
            weight[c * d + j] = sol[j];
        }
        bias[c] = sol[d];
    }
    Ok((Tensor::new(vec![classes, d], weight)?, bias))
}

/// Builds the reference CNN: a fixed random convolutional trunk with the
/// final linear layer fitted on a fresh training set derived from the seed.
pub fn reference_cnn(seed: u64) -> Result<LayerGraph> {
    let trunk = build_trunk(seed)?;
    let train = synth_blobs(2000, seed.wrapping_add(1));
    let mut features = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for (x, label) in &train {
        features.push(trunk.forward(x)?.into_data());
        labels.push(*label);
    }
    let (weight, bias) = ridge_readout(&features, &labels, NUM_CLASSES, 1e-3)?;

    // reassemble trunk + readout
    let mut nodes = trunk.nodes().to_vec();
    let pool_id = nodes.len() - 1;
    nodes.push(crate::graph::Node {
        kind: LayerKind::Linear { weight, bias },
        inputs: vec![ValueRef::Node(pool_id)],
        prescale: None,
    });
    let output = nodes.len() - 1;
    LayerGraph::from_parts(trunk.input_shape().to_vec(), nodes, output)
}

/// The three-layer MLP used as the documented model-file example:
/// flatten, then 64 -> 32 -> 16 -> 2 with ReLUs between the linear layers.
pub fn docs_mlp(seed: u64) -> Result<LayerGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut linear = |out: usize, inp: usize| -> LayerKind {
        let std = (2.0 / inp as f64).sqrt();
        LayerKind::Linear {
            weight: Tensor::new(
                vec![out, inp],
                (0..out * inp).map(|_| std * normal(&mut rng)).collect(),
            )
            .expect("finite weights"),
            bias: vec![0.0; out],
        }
    };
    let l1 = linear(32, 64);
    let l2 = linear(16, 32);
    let l3 = linear(2, 16);
    let mut b = GraphBuilder::new(vec![1, IMAGE_SIDE, IMAGE_SIDE]);
    b.chain(LayerKind::Flatten);
    b.chain(l1);
    b.chain(LayerKind::Relu);
    b.chain(l2);
    b.chain(LayerKind::Relu);
    b.chain(l3);
    b.finish()
}
