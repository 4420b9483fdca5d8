//! Binary model ("MQTZ") and dataset ("MQDT") files.
//!
//! Both formats are little-endian throughout. A tensor is encoded as
//! `rank: u32`, `dims: u32[rank]`, `data: f64[prod(dims)]`.
//!
//! Model layout (version 1): magic `MQTZ`, `version: u32`, input shape
//! (tensor-dims encoding), `node_count: u32`, the node table, then
//! `output_node: u32`. Each node is `kind: u8`, `input_count: u32`,
//! `inputs: u32[]` (`0xFFFF_FFFF` denotes the graph input), a prescale flag
//! byte optionally followed by `len: u32` + `f64[len]`, and the kind payload:
//! Linear = weight tensor + bias vector; Conv2d = weight tensor + bias vector
//! + `stride: u32` + `padding: u32` + `groups: u32`.
//!
//! Dataset layout (version 1): magic `MQDT`, `version: u32`,
//! `sample_count: u32`, then per sample an input tensor and a `label: u32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::graph::{LayerGraph, LayerKind, Node, ValueRef};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"MQTZ";
pub const DATASET_MAGIC: [u8; 4] = *b"MQDT";
pub const FORMAT_VERSION: u32 = 1;

const INPUT_REF: u32 = u32::MAX;

const KIND_LINEAR: u8 = 0;
const KIND_CONV2D: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_ADD: u8 = 3;
const KIND_GLOBAL_AVG_POOL: u8 = 4;
const KIND_FLATTEN: u8 = 5;

fn truncated(what: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated(what.to_string())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| truncated(what, e))
}

fn read_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    r.read_u8().map_err(|e| truncated(what, e))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(|e| truncated(what, e))
}

fn write_dims(w: &mut impl Write, dims: &[usize]) -> Result<()> {
    w.write_u32::<LittleEndian>(dims.len() as u32)?;
    for d in dims {
        w.write_u32::<LittleEndian>(*d as u32)?;
    }
    Ok(())
}

fn read_dims(r: &mut impl Read) -> Result<Vec<usize>> {
    let rank = read_u32(r, "tensor rank")?;
    if rank > 8 {
        return Err(Error::Malformed(format!("tensor rank {rank} is implausible")));
    }
    (0..rank)
        .map(|_| read_u32(r, "tensor dim").map(|d| d as usize))
        .collect()
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_dims(w, t.shape())?;
    for v in t.data() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let dims = read_dims(r)?;
    let n: usize = dims.iter().product();
    if n > 64 << 20 {
        return Err(Error::Malformed(format!("tensor of {n} elements is implausible")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f64(r, "tensor payload")?);
    }
    Tensor::new(dims, data)
}

fn write_vec(w: &mut impl Write, v: &[f64]) -> Result<()> {
    w.write_u32::<LittleEndian>(v.len() as u32)?;
    for x in v {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

fn read_vec(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = read_u32(r, "vector length")? as usize;
    if n > 64 << 20 {
        return Err(Error::Malformed(format!("vector of {n} elements is implausible")));
    }
    (0..n).map(|_| read_f64(r, "vector payload")).collect()
}

fn check_header(r: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| truncated("magic", e))?;
    if magic != expected {
        return Err(Error::BadMagic {
            expected,
            found: magic,
        });
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

/// Serializes a graph to a writer.
pub fn write_model(w: &mut impl Write, graph: &LayerGraph) -> Result<()> {
    w.write_all(&MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    write_dims(w, graph.input_shape())?;
    w.write_u32::<LittleEndian>(graph.nodes().len() as u32)?;
    for node in graph.nodes() {
        let tag = match &node.kind {
            LayerKind::Linear { .. } => KIND_LINEAR,
            LayerKind::Conv2d { .. } => KIND_CONV2D,
            LayerKind::Relu => KIND_RELU,
            LayerKind::Add => KIND_ADD,
            LayerKind::GlobalAvgPool => KIND_GLOBAL_AVG_POOL,
            LayerKind::Flatten => KIND_FLATTEN,
        };
        w.write_u8(tag)?;
        w.write_u32::<LittleEndian>(node.inputs.len() as u32)?;
        for input in &node.inputs {
            let raw = match input {
                ValueRef::Input => INPUT_REF,
                ValueRef::Node(j) => *j as u32,
            };
            w.write_u32::<LittleEndian>(raw)?;
        }
        match &node.prescale {
            Some(sf) => {
                w.write_u8(1)?;
                write_vec(w, sf)?;
            }
            None => w.write_u8(0)?,
        }
        match &node.kind {
            LayerKind::Linear { weight, bias } => {
                write_tensor(w, weight)?;
                write_vec(w, bias)?;
            }
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
                groups,
            } => {
                write_tensor(w, weight)?;
                write_vec(w, bias)?;
                w.write_u32::<LittleEndian>(*stride as u32)?;
                w.write_u32::<LittleEndian>(*padding as u32)?;
                w.write_u32::<LittleEndian>(*groups as u32)?;
            }
            _ => {}
        }
    }
    w.write_u32::<LittleEndian>(graph.output_node() as u32)?;
    Ok(())
}

/// Deserializes and validates a graph.
pub fn read_model(r: &mut impl Read) -> Result<LayerGraph> {
    check_header(r, MODEL_MAGIC)?;
    let input_shape = read_dims(r)?;
    let node_count = read_u32(r, "node count")? as usize;
    let mut nodes = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let tag = read_u8(r, "node kind")?;
        let input_count = read_u32(r, "node input count")? as usize;
        if input_count > 2 {
            return Err(Error::Malformed(format!(
                "node with {input_count} inputs is implausible"
            )));
        }
        let mut inputs = Vec::with_capacity(input_count);
        for _ in 0..input_count {
            let raw = read_u32(r, "node input ref")?;
            inputs.push(if raw == INPUT_REF {
                ValueRef::Input
            } else {
                ValueRef::Node(raw as usize)
            });
        }
        let prescale = match read_u8(r, "prescale flag")? {
            0 => None,
            1 => Some(read_vec(r)?),
            other => {
                return Err(Error::Malformed(format!("bad prescale flag {other}")));
            }
        };
        let kind = match tag {
            KIND_LINEAR => LayerKind::Linear {
                weight: read_tensor(r)?,
                bias: read_vec(r)?,
            },
            KIND_CONV2D => LayerKind::Conv2d {
                weight: read_tensor(r)?,
                bias: read_vec(r)?,
                stride: read_u32(r, "stride")? as usize,
                padding: read_u32(r, "padding")? as usize,
                groups: read_u32(r, "groups")? as usize,
            },
            KIND_RELU => LayerKind::Relu,
            KIND_ADD => LayerKind::Add,
            KIND_GLOBAL_AVG_POOL => LayerKind::GlobalAvgPool,
            KIND_FLATTEN => LayerKind::Flatten,
            other => {
                return Err(Error::Malformed(format!("unknown node kind tag {other}")));
            }
        };
        nodes.push(Node {
            kind,
            inputs,
            prescale,
        });
    }
    let output = read_u32(r, "output node")? as usize;
    LayerGraph::from_parts(input_shape, nodes, output)
}

pub fn save_model(graph: &LayerGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, graph)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LayerGraph> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}

/// Serializes a labeled dataset.
pub fn write_dataset(w: &mut impl Write, samples: &[(Tensor, u32)]) -> Result<()> {
    w.write_all(&DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(samples.len() as u32)?;
    for (x, label) in samples {
        write_tensor(w, x)?;
        w.write_u32::<LittleEndian>(*label)?;
    }
    Ok(())
}

/// Deserializes a labeled dataset.
pub fn read_dataset(r: &mut impl Read) -> Result<Vec<(Tensor, u32)>> {
    check_header(r, DATASET_MAGIC)?;
    let count = read_u32(r, "sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let x = read_tensor(r)?;
        let label = read_u32(r, "sample label")?;
        samples.push((x, label));
    }
    Ok(samples)
}

pub fn save_dataset(samples: &[(Tensor, u32)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<(Tensor, u32)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    fn sample_graph() -> LayerGraph {
        let mut b = GraphBuilder::new(vec![1, 4, 4]);
        let c = b.chain(LayerKind::Conv2d {
            weight: Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| v as f64 * 0.1).collect())
                .unwrap(),
            bias: vec![0.5, -0.5],
            stride: 1,
            padding: 1,
            groups: 1,
        });
        let r = b.push(LayerKind::Relu, vec![ValueRef::Node(c)]);
        let p = b.push(LayerKind::GlobalAvgPool, vec![ValueRef::Node(r)]);
        let f = b.push(LayerKind::Flatten, vec![ValueRef::Node(p)]);
        b.push(
            LayerKind::Linear {
                weight: Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.25, 4.0]).unwrap(),
                bias: vec![0.0, 1.0],
            },
            vec![ValueRef::Node(f)],
        );
        b.finish().unwrap()
    }

    fn graph_bytes(g: &LayerGraph) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(&mut buf, g).unwrap();
        buf
    }

    #[test]
    fn model_roundtrip_is_bitwise() {
        let g = sample_graph();
        let bytes = graph_bytes(&g);
        let g2 = read_model(&mut bytes.as_slice()).unwrap();
        assert_eq!(graph_bytes(&g2), bytes);
        // and functionally identical
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64 * 0.3 - 2.0).collect())
            .unwrap();
        assert_eq!(g.forward(&x).unwrap(), g2.forward(&x).unwrap());
    }

    #[test]
    fn corrupted_magic_is_distinct_error() {
        let mut bytes = graph_bytes(&sample_graph());
        bytes[0] = b'X';
        match read_model(&mut bytes.as_slice()) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found[0], b'X'),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let mut bytes = graph_bytes(&sample_graph());
        bytes[4] = 9;
        assert!(matches!(
            read_model(&mut bytes.as_slice()),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncation_is_distinct_error() {
        let bytes = graph_bytes(&sample_graph());
        for cut in [3, 7, 12, bytes.len() / 2, bytes.len() - 2] {
            match read_model(&mut bytes[..cut].as_ref()) {
                Err(Error::Truncated(_)) => {}
                other => panic!("cut at {cut}: expected Truncated, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_node_tag_is_malformed() {
        let g = sample_graph();
        let mut bytes = graph_bytes(&g);
        // first node tag sits right after magic+version+input dims+node count
        let tag_offset = 4 + 4 + (4 + 3 * 4) + 4;
        bytes[tag_offset] = 77;
        assert!(matches!(
            read_model(&mut bytes.as_slice()),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn dataset_roundtrip() {
        let samples: Vec<(Tensor, u32)> = (0..5)
            .map(|i| {
                (
                    Tensor::new(vec![2, 2], vec![i as f64, 0.5, -1.25, 3.0]).unwrap(),
                    i % 2,
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, samples);
        // magic must differ from the model format
        assert!(matches!(
            read_model(&mut buf.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }
}
