//! Checkpoint serialization, format `GROWBRAIN-CKPT-1`.
//!
//! Layout: a line-oriented ASCII header (format version, input width, output
//! and feature-output names, provenance log, parameter groups, node list with
//! kinds, wiring, groups, and tensor shapes, then a total tensor count),
//! followed by the raw little-endian f64 bytes of every parameter tensor in
//! node order (Dense weights row-major, then NormScale gammas as declared).
//!
//! Scalars in the header (lr multipliers, epsilons) print with Rust's
//! shortest-round-trip formatting, so save/load round-trips bitwise.

use std::collections::BTreeMap;
use std::path::Path;

use crate::layers::{DenseParams, NormScaleParams};
use crate::numerics::Matrix;
use crate::{Error, Result};

use super::{LayerKind, LayerNode, NetworkGraph, ParamGroup};

pub const FORMAT_VERSION: &str = "GROWBRAIN-CKPT-1";

pub fn save_checkpoint(net: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(net)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

pub fn to_bytes(net: &NetworkGraph) -> Result<Vec<u8>> {
    let mut header = String::new();
    header.push_str(FORMAT_VERSION);
    header.push('\n');
    header.push_str(&format!("input_width {}\n", net.input_width));
    header.push_str(&format!("output {}\n", net.output));
    header.push_str(&format!("feature_output {}\n", net.feature_output));
    header.push_str(&format!("meta {}\n", net.metadata.len()));
    for line in &net.metadata {
        if line.contains('\n') {
            return Err(Error::Config("metadata line contains a newline".into()));
        }
        header.push_str(&format!("m {line}\n"));
    }
    header.push_str(&format!("groups {}\n", net.groups.len()));
    for g in net.groups.values() {
        header.push_str(&format!(
            "g {} {} {} {}\n",
            g.name,
            g.lr_multiplier,
            u8::from(g.frozen),
            u8::from(g.decay_enabled)
        ));
    }
    header.push_str(&format!("nodes {}\n", net.nodes.len()));
    let mut tensor_count = 0usize;
    for node in &net.nodes {
        let inputs = node.inputs.join(",");
        match &node.kind {
            LayerKind::Dense(p) => {
                tensor_count += p.param_count();
                header.push_str(&format!(
                    "n {} Dense {} {} {} {}\n",
                    node.name,
                    node.group,
                    inputs,
                    p.weights.rows(),
                    p.weights.cols()
                ));
            }
            LayerKind::NormScale(p) => {
                tensor_count += p.width();
                header.push_str(&format!(
                    "n {} NormScale {} {} {} {}\n",
                    node.name,
                    node.group,
                    inputs,
                    p.width(),
                    p.epsilon
                ));
            }
            other => {
                header.push_str(&format!(
                    "n {} {} {} {}\n",
                    node.name,
                    other.kind_name(),
                    node.group,
                    inputs
                ));
            }
        }
    }
    header.push_str(&format!("tensors {tensor_count}\n"));

    let mut bytes = header.into_bytes();
    bytes.reserve(tensor_count * 8);
    for node in &net.nodes {
        match &node.kind {
            LayerKind::Dense(p) => {
                for v in p.weights.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            LayerKind::NormScale(p) => {
                for v in &p.gamma {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {}
        }
    }
    Ok(bytes)
}

struct Lines<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointMalformed(format!("truncated before {what}")))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::CheckpointMalformed(format!("non-UTF-8 header line at {what}")))?;
        self.pos += end + 1;
        Ok(line)
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::CheckpointMalformed(msg.into())
}

fn parse_count(line: &str, key: &str) -> Result<usize> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| malformed(format!("expected {key:?} line, got {line:?}")))?;
    rest.parse()
        .map_err(|_| malformed(format!("bad count in {line:?}")))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| malformed(format!("bad float {s:?} in {what}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkGraph> {
    let mut lines = Lines { buf: bytes, pos: 0 };
    let version = lines.next("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: FORMAT_VERSION.into(),
            found: version.into(),
        });
    }
    let input_width = parse_count(lines.next("input_width")?, "input_width")?;
    let output = lines
        .next("output")?
        .strip_prefix("output ")
        .ok_or_else(|| malformed("missing output line"))?
        .to_string();
    let feature_output = lines
        .next("feature_output")?
        .strip_prefix("feature_output ")
        .ok_or_else(|| malformed("missing feature_output line"))?
        .to_string();

    let meta_count = parse_count(lines.next("meta")?, "meta")?;
    let mut metadata = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let line = lines.next("meta entry")?;
        metadata.push(
            line.strip_prefix("m ")
                .ok_or_else(|| malformed(format!("bad meta line {line:?}")))?
                .to_string(),
        );
    }

    let group_count = parse_count(lines.next("groups")?, "groups")?;
    let mut groups = BTreeMap::new();
    for _ in 0..group_count {
        let line = lines.next("group entry")?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 5 || fields[0] != "g" {
            return Err(malformed(format!("bad group line {line:?}")));
        }
        let flag = |s: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(malformed(format!("bad flag {s:?} in group line"))),
            }
        };
        groups.insert(
            fields[1].to_string(),
            ParamGroup {
                name: fields[1].to_string(),
                lr_multiplier: parse_f64(fields[2], "group lr multiplier")?,
                frozen: flag(fields[3])?,
                decay_enabled: flag(fields[4])?,
            },
        );
    }

    let node_count = parse_count(lines.next("nodes")?, "nodes")?;
    // (name, kind tag, group, inputs, shape fields)
    let mut decls = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let line = lines.next("node entry")?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < 5 || fields[0] != "n" {
            return Err(malformed(format!("bad node line {line:?}")));
        }
        decls.push((
            fields[1].to_string(),
            fields[2].to_string(),
            fields[3].to_string(),
            fields[4]
                .split(',')
                .map(str::to_string)
                .collect::<Vec<String>>(),
            fields[5..].iter().map(|s| s.to_string()).collect::<Vec<String>>(),
        ));
    }

    let declared_tensors = parse_count(lines.next("tensors")?, "tensors")?;
    let shape_total: usize = decls
        .iter()
        .map(|(_, kind, _, _, extra)| match kind.as_str() {
            "Dense" => {
                let r: usize = extra.first().and_then(|s| s.parse().ok()).unwrap_or(0);
                let c: usize = extra.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
                r * c
            }
            "NormScale" => extra.first().and_then(|s| s.parse().ok()).unwrap_or(0),
            _ => 0,
        })
        .sum();
    if shape_total != declared_tensors {
        return Err(Error::CheckpointShape(format!(
            "declared tensor count {declared_tensors} but node shapes sum to {shape_total}"
        )));
    }
    let payload = lines.rest();
    if payload.len() != declared_tensors * 8 {
        return Err(malformed(format!(
            "tensor payload is {} bytes, expected {}",
            payload.len(),
            declared_tensors * 8
        )));
    }

    let mut offset = 0usize;
    let mut take = |count: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 8;
            out.push(f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()));
        }
        offset += count * 8;
        out
    };

    let mut nodes = Vec::with_capacity(node_count);
    for (name, kind_tag, group, inputs, extra) in decls {
        let kind = match kind_tag.as_str() {
            "Dense" => {
                if extra.len() != 2 {
                    return Err(malformed(format!("Dense node {name:?} needs rows cols")));
                }
                let rows: usize = extra[0]
                    .parse()
                    .map_err(|_| malformed(format!("bad rows in node {name:?}")))?;
                let cols: usize = extra[1]
                    .parse()
                    .map_err(|_| malformed(format!("bad cols in node {name:?}")))?;
                let weights = Matrix::from_vec(rows, cols, take(rows * cols))
                    .map_err(|e| Error::CheckpointShape(e.to_string()))?;
                LayerKind::Dense(
                    DenseParams::new(weights).map_err(|e| Error::CheckpointShape(e.to_string()))?,
                )
            }
            "NormScale" => {
                if extra.len() != 2 {
                    return Err(malformed(format!(
                        "NormScale node {name:?} needs len epsilon"
                    )));
                }
                let len: usize = extra[0]
                    .parse()
                    .map_err(|_| malformed(format!("bad len in node {name:?}")))?;
                let epsilon = parse_f64(&extra[1], "normscale epsilon")?;
                LayerKind::NormScale(
                    NormScaleParams::new(take(len), epsilon)
                        .map_err(|e| Error::CheckpointShape(e.to_string()))?,
                )
            }
            "Relu" => LayerKind::Relu,
            "Concat" => LayerKind::Concat,
            "SoftmaxXent" => LayerKind::SoftmaxXent,
            other => return Err(malformed(format!("unknown node kind {other:?}"))),
        };
        if !extra.is_empty() && matches!(kind, LayerKind::Relu | LayerKind::Concat | LayerKind::SoftmaxXent) {
            return Err(malformed(format!("unexpected fields on node {name:?}")));
        }
        nodes.push(LayerNode {
            name,
            kind,
            inputs,
            group,
        });
    }

    let mut net = NetworkGraph {
        nodes,
        groups,
        input_width,
        output,
        feature_output,
        metadata: Vec::new(),
    };
    net.restore_metadata(metadata);
    net.validate()
        .map_err(|e| Error::CheckpointShape(e.to_string()))?;
    Ok(net)
}
