//! Binary weight files.
//!
//! Layout, little-endian: magic `FRGCNW01`, `u32` version, `u32` node count,
//! `u32` agent count, `u64` graph fingerprint, `u32` net count, then per net:
//! `u8` kind, `u32` hidden width, `u32` conv layers, `u32` dense layers, one
//! `(u32 input, u32 output)` pair per layer, `u64` parameter count and the
//! parameters as `f64`.

use std::io::{Read, Write};

use super::net::{GraphConvNet, LayerShape, NetKind};
use crate::error::{Error, Result};
use crate::graph::StreetGraph;

const MAGIC: &[u8; 8] = b"FRGCNW01";
const VERSION: u32 = 1;

/// FNV-1a over the node count and sorted edge list.
pub fn graph_fingerprint(graph: &StreetGraph) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(graph.node_count() as u64);
    let mut edges = graph.edges().to_vec();
    edges.sort_unstable();
    for (a, b) in edges {
        eat(a as u64);
        eat(b as u64);
    }
    h
}

pub fn write_weights<W: Write>(mut w: W, graph: &StreetGraph, nets: &[&GraphConvNet]) -> Result<()> {
    let first = nets.first().ok_or_else(|| Error::Weights("no nets to write".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(graph.node_count() as u32).to_le_bytes())?;
    w.write_all(&(first.agents() as u32).to_le_bytes())?;
    w.write_all(&graph_fingerprint(graph).to_le_bytes())?;
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    for net in nets {
        w.write_all(&[net.kind().tag()])?;
        w.write_all(&(net.hidden() as u32).to_le_bytes())?;
        w.write_all(&(net.conv_shapes().len() as u32).to_le_bytes())?;
        w.write_all(&(net.dense_shapes().len() as u32).to_le_bytes())?;
        for s in net.conv_shapes().iter().chain(net.dense_shapes()) {
            w.write_all(&(s.input as u32).to_le_bytes())?;
            w.write_all(&(s.output as u32).to_le_bytes())?;
        }
        w.write_all(&(net.param_count() as u64).to_le_bytes())?;
        for p in net.params() {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_at<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_at<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Weights("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Reads nets written for `graph`; refuses files built for another graph.
pub fn read_weights<R: Read>(mut r: R, graph: &StreetGraph) -> Result<Vec<GraphConvNet>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Weights("not a weights file".into()));
    }
    let version = u32_at(&mut r)?;
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let n = u32_at(&mut r)? as usize;
    let agents = u32_at(&mut r)? as usize;
    let fingerprint = u64_at(&mut r)?;
    if n != graph.node_count() {
        return Err(Error::Weights(format!("weights are for {n} nodes, graph has {}", graph.node_count())));
    }
    if fingerprint != graph_fingerprint(graph) {
        return Err(Error::Weights("weights were trained on a different graph".into()));
    }
    let count = u32_at(&mut r)?;
    let mut nets = Vec::new();
    for _ in 0..count {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(truncated)?;
        let kind = NetKind::from_tag(tag[0]).ok_or_else(|| Error::Weights(format!("unknown net kind {}", tag[0])))?;
        let hidden = u32_at(&mut r)? as usize;
        let nconv = u32_at(&mut r)? as usize;
        let ndense = u32_at(&mut r)? as usize;
        if nconv == 0 || ndense == 0 || nconv + ndense > 64 {
            return Err(Error::Weights("implausible layer count".into()));
        }
        let mut shapes = Vec::with_capacity(nconv + ndense);
        for _ in 0..nconv + ndense {
            let input = u32_at(&mut r)? as usize;
            let output = u32_at(&mut r)? as usize;
            shapes.push(LayerShape { input, output });
        }
        let dense = shapes.split_off(nconv);
        let mut net = GraphConvNet::with_shapes(kind, n, agents, hidden, shapes, dense);
        let expected = GraphConvNet::zeros(kind, n, agents, hidden);
        if net.conv_shapes() != expected.conv_shapes() || net.dense_shapes() != expected.dense_shapes() {
            return Err(Error::Weights(format!("unexpected layer shapes for the {} net", kind.as_str())));
        }
        let pc = u64_at(&mut r)? as usize;
        if pc != net.param_count() {
            return Err(Error::Weights(format!("expected {} parameters, file has {pc}", net.param_count())));
        }
        for p in net.params_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            *p = f64::from_le_bytes(b);
        }
        nets.push(net);
    }
    Ok(nets)
}
