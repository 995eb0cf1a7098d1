//! Graph-convolution networks with hand-written reverse mode.
//!
//! Parameters of a net live in one flat vector; each layer owns a weight
//! block `W` (`input x output`, row-major) followed by a bias `b`. A conv
//! layer computes `ReLU(Â H W + b)`; dense layers use `ReLU(z W + b)` except
//! the last, which is linear.
//!
//! Forward passes compute only the rows that reach the requested outputs, so
//! a move decision touches the agent's neighborhood rather than the whole
//! graph. Restricted and full passes give identical values on shared rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::FeatureEncoding;
use crate::error::{Error, Result};
use crate::graph::{Node, StreetGraph};

/// `D^{-1/2} (A + I) D^{-1/2}` over out-edges, in compressed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    row_start: Vec<usize>,
    cols: Vec<Node>,
    vals: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn new(graph: &StreetGraph) -> Self {
        let n = graph.node_count();
        let deg: Vec<f64> = (0..n).map(|v| (graph.neighbors(v).len() + 1) as f64).collect();
        let mut row_start = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_start.push(0);
        for i in 0..n {
            let mut row: Vec<Node> = graph.neighbors(i).to_vec();
            row.push(i);
            row.sort_unstable();
            for j in row {
                cols.push(j);
                vals.push(1.0 / (deg[i] * deg[j]).sqrt());
            }
            row_start.push(cols.len());
        }
        Self { row_start, cols, vals }
    }

    pub fn node_count(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn row(&self, i: Node) -> (&[Node], &[f64]) {
        let r = self.row_start[i]..self.row_start[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: Node, j: Node) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }
}

/// Which decision a net scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    /// Two logits: index 0 declines, index 1 picks up.
    Pickup,
    /// One logit per destination node.
    Move,
}

impl NetKind {
    pub fn tag(self) -> u8 {
        match self {
            NetKind::Pickup => 0,
            NetKind::Move => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(NetKind::Pickup),
            1 => Some(NetKind::Move),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Pickup => "pickup",
            NetKind::Move => "move",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
}

impl LayerShape {
    fn size(self) -> usize {
        self.input * self.output + self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConvNet {
    kind: NetKind,
    node_count: usize,
    agents: usize,
    hidden: usize,
    conv: Vec<LayerShape>,
    dense: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

pub const DEFAULT_HIDDEN: usize = 32;

struct ConvCache {
    rows: Vec<Node>,
    /// `rows.len() x input`: `(Â H)` restricted to `rows`.
    agg: Vec<f64>,
    /// `n x output`, only `rows` filled.
    out: Vec<f64>,
}

struct HeadCache {
    /// `acts[0]` is the head input, `acts[k]` the output of dense layer `k`.
    acts: Vec<Vec<f64>>,
}

struct Pass {
    conv: Vec<ConvCache>,
    heads: Vec<HeadCache>,
    targets: Vec<Node>,
}

impl GraphConvNet {
    /// Zero-initialized net for `node_count` nodes and `agents` agents.
    pub fn zeros(kind: NetKind, node_count: usize, agents: usize, hidden: usize) -> Self {
        let f = agents + 2;
        let h = hidden;
        let (conv, dense) = match kind {
            NetKind::Pickup => (vec![(f, h), (h, h), (h, h)], vec![(h + agents, h), (h, h), (h, 2)]),
            NetKind::Move => (vec![(f, h), (h, h)], vec![(2 * h + agents, h), (h, h), (h, h), (h, 1)]),
        };
        let shape = |(input, output)| LayerShape { input, output };
        Self::with_shapes(
            kind,
            node_count,
            agents,
            hidden,
            conv.into_iter().map(shape).collect(),
            dense.into_iter().map(shape).collect(),
        )
    }

    pub(crate) fn with_shapes(
        kind: NetKind,
        node_count: usize,
        agents: usize,
        hidden: usize,
        conv: Vec<LayerShape>,
        dense: Vec<LayerShape>,
    ) -> Self {
        let mut offsets = Vec::new();
        let mut total = 0;
        for s in conv.iter().chain(&dense) {
            offsets.push(total);
            total += s.size();
        }
        Self { kind, node_count, agents, hidden, conv, dense, offsets, params: vec![0.0; total] }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn random(kind: NetKind, node_count: usize, agents: usize, hidden: usize, seed: u64) -> Self {
        let mut net = Self::zeros(kind, node_count, agents, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes: Vec<LayerShape> = net.conv.iter().chain(&net.dense).copied().collect();
        for (k, s) in shapes.into_iter().enumerate() {
            let bound = 1.0 / (s.input as f64).sqrt();
            let off = net.offsets[k];
            for w in &mut net.params[off..off + s.input * s.output] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        net
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn conv_shapes(&self) -> &[LayerShape] {
        &self.conv
    }

    pub fn dense_shapes(&self) -> &[LayerShape] {
        &self.dense
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, k: usize) -> (LayerShape, usize) {
        let s = if k < self.conv.len() { self.conv[k] } else { self.dense[k - self.conv.len()] };
        (s, self.offsets[k])
    }

    fn check(&self, adj: &NormalizedAdjacency, enc: &FeatureEncoding) -> Result<()> {
        if adj.node_count() != self.node_count || enc.node_count != self.node_count {
            return Err(Error::ShapeMismatch(format!(
                "{} net built for {} nodes, got adjacency of {} and encoding of {}",
                self.kind.as_str(),
                self.node_count,
                adj.node_count(),
                enc.node_count
            )));
        }
        if enc.agents != self.agents {
            return Err(Error::ShapeMismatch(format!(
                "{} net built for {} agents, encoding has {}",
                self.kind.as_str(),
                self.agents,
                enc.agents
            )));
        }
        Ok(())
    }

    /// Full forward pass. Pickup nets return two logits; move nets return one
    /// logit per node.
    pub fn forward(&self, adj: &NormalizedAdjacency, enc: &FeatureEncoding) -> Result<Vec<f64>> {
        self.check(adj, enc)?;
        match self.kind {
            NetKind::Pickup => Ok(self.run(adj, enc, &[]).heads[0].acts.last().unwrap().clone()),
            NetKind::Move => {
                let all: Vec<Node> = (0..self.node_count).collect();
                self.logits_at(adj, enc, &all)
            }
        }
    }

    /// Move logits for `targets` only.
    pub fn logits_at(&self, adj: &NormalizedAdjacency, enc: &FeatureEncoding, targets: &[Node]) -> Result<Vec<f64>> {
        self.check(adj, enc)?;
        if self.kind != NetKind::Move {
            return Err(Error::InvalidArgument("logits_at needs a move net".into()));
        }
        let pass = self.run(adj, enc, targets);
        Ok(pass.heads.iter().map(|h| h.acts.last().unwrap()[0]).collect())
    }

    /// Softmax cross-entropy of one example; adds its gradient into `grad`.
    /// For pickup nets `label` is 0 or 1 and `targets` is ignored; for move
    /// nets the softmax runs over `targets` and `label` indexes into it.
    pub fn loss_and_grad(
        &self,
        adj: &NormalizedAdjacency,
        enc: &FeatureEncoding,
        targets: &[Node],
        label: usize,
        grad: &mut [f64],
    ) -> f64 {
        let pass = self.run(adj, enc, targets);
        let logits: Vec<f64> = match self.kind {
            NetKind::Pickup => pass.heads[0].acts.last().unwrap().clone(),
            NetKind::Move => pass.heads.iter().map(|h| h.acts.last().unwrap()[0]).collect(),
        };
        let (loss, dlogits) = softmax_cross_entropy(&logits, label);
        self.backward(adj, enc, &pass, &dlogits, grad);
        loss
    }

    /// Loss only, for gradient checks.
    pub fn loss(&self, adj: &NormalizedAdjacency, enc: &FeatureEncoding, targets: &[Node], label: usize) -> f64 {
        let pass = self.run(adj, enc, targets);
        let logits: Vec<f64> = match self.kind {
            NetKind::Pickup => pass.heads[0].acts.last().unwrap().clone(),
            NetKind::Move => pass.heads.iter().map(|h| h.acts.last().unwrap()[0]).collect(),
        };
        softmax_cross_entropy(&logits, label).0
    }

    fn needed_rows(&self, adj: &NormalizedAdjacency, last: Vec<Node>) -> Vec<Vec<Node>> {
        let layers = self.conv.len();
        let mut rows = vec![Vec::new(); layers];
        rows[layers - 1] = last;
        let mut mark = vec![false; self.node_count];
        for l in (0..layers - 1).rev() {
            mark.iter_mut().for_each(|x| *x = false);
            let mut next = Vec::new();
            for &i in &rows[l + 1] {
                for &j in adj.row(i).0 {
                    if !mark[j] {
                        mark[j] = true;
                        next.push(j);
                    }
                }
            }
            next.sort_unstable();
            rows[l] = next;
        }
        rows
    }

    fn run(&self, adj: &NormalizedAdjacency, enc: &FeatureEncoding, targets: &[Node]) -> Pass {
        let a = enc.agent_node;
        let last = match self.kind {
            NetKind::Pickup => vec![a],
            NetKind::Move => {
                let mut v = targets.to_vec();
                v.push(a);
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        let rows = self.needed_rows(adj, last);
        let n = self.node_count;
        let mut conv: Vec<ConvCache> = Vec::with_capacity(self.conv.len());
        for (l, rows) in rows.into_iter().enumerate() {
            let (shape, off) = self.layer(l);
            let (fin, fout) = (shape.input, shape.output);
            let input: &[f64] = if l == 0 { &enc.node_features } else { &conv[l - 1].out };
            let w = &self.params[off..off + fin * fout];
            let b = &self.params[off + fin * fout..off + shape.size()];
            let mut agg = vec![0.0; rows.len() * fin];
            let mut out = vec![0.0; n * fout];
            for (r, &i) in rows.iter().enumerate() {
                let dst = &mut agg[r * fin..(r + 1) * fin];
                let (cols, vals) = adj.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    for (d, &x) in dst.iter_mut().zip(&input[j * fin..(j + 1) * fin]) {
                        *d += v * x;
                    }
                }
                let y = &mut out[i * fout..(i + 1) * fout];
                affine(dst, w, b, y);
                relu(y);
            }
            conv.push(ConvCache { rows, agg, out });
        }
        let hl = &conv.last().unwrap().out;
        let h = self.conv.last().unwrap().output;
        let row = |v: Node| &hl[v * h..(v + 1) * h];
        let mut heads = Vec::new();
        match self.kind {
            NetKind::Pickup => {
                let mut z = row(a).to_vec();
                z.extend_from_slice(&enc.global_features);
                heads.push(self.run_head(z));
            }
            NetKind::Move => {
                for &v in targets {
                    let mut z = row(v).to_vec();
                    z.extend_from_slice(row(a));
                    z.extend_from_slice(&enc.global_features);
                    heads.push(self.run_head(z));
                }
            }
        }
        Pass { conv, heads, targets: targets.to_vec() }
    }

    fn run_head(&self, z: Vec<f64>) -> HeadCache {
        let mut acts = vec![z];
        let nd = self.dense.len();
        for k in 0..nd {
            let (shape, off) = self.layer(self.conv.len() + k);
            let w = &self.params[off..off + shape.input * shape.output];
            let b = &self.params[off + shape.input * shape.output..off + shape.size()];
            let mut y = vec![0.0; shape.output];
            affine(acts.last().unwrap(), w, b, &mut y);
            if k + 1 < nd {
                relu(&mut y);
            }
            acts.push(y);
        }
        HeadCache { acts }
    }

    fn backward(&self, adj: &NormalizedAdjacency, enc: &FeatureEncoding, pass: &Pass, dlogits: &[f64], grad: &mut [f64]) {
        let nc = self.conv.len();
        let h = self.conv[nc - 1].output;
        let a = enc.agent_node;
        let mut dh = vec![0.0; self.node_count * h];
        let head_dout: Vec<Vec<f64>> = match self.kind {
            NetKind::Pickup => vec![dlogits.to_vec()],
            NetKind::Move => dlogits.iter().map(|&d| vec![d]).collect(),
        };
        for (t, (head, dout)) in pass.heads.iter().zip(head_dout).enumerate() {
            let dz = self.backward_head(head, dout, grad);
            match self.kind {
                NetKind::Pickup => add_into(&mut dh[a * h..(a + 1) * h], &dz[..h]),
                NetKind::Move => {
                    let v = pass.targets[t];
                    add_into(&mut dh[v * h..(v + 1) * h], &dz[..h]);
                    add_into(&mut dh[a * h..(a + 1) * h], &dz[h..2 * h]);
                }
            }
        }
        for l in (0..nc).rev() {
            let (shape, off) = self.layer(l);
            let (fin, fout) = (shape.input, shape.output);
            let cache = &pass.conv[l];
            let mut dprev = if l > 0 { vec![0.0; self.node_count * fin] } else { Vec::new() };
            let mut g = vec![0.0; fout];
            let mut dagg = vec![0.0; fin];
            for (r, &i) in cache.rows.iter().enumerate() {
                let y = &cache.out[i * fout..(i + 1) * fout];
                let dy = &dh[i * fout..(i + 1) * fout];
                let mut any = false;
                for o in 0..fout {
                    g[o] = if y[o] > 0.0 { dy[o] } else { 0.0 };
                    any |= g[o] != 0.0;
                }
                if !any {
                    continue;
                }
                let x = &cache.agg[r * fin..(r + 1) * fin];
                let (gw, gb) = grad[off..off + shape.size()].split_at_mut(fin * fout);
                outer_add(x, &g, gw);
                add_into(gb, &g);
                if l > 0 {
                    let w = &self.params[off..off + fin * fout];
                    mat_vec(w, &g, fin, fout, &mut dagg);
                    let (cols, vals) = adj.row(i);
                    for (&j, &v) in cols.iter().zip(vals) {
                        for (d, &x) in dprev[j * fin..(j + 1) * fin].iter_mut().zip(&dagg) {
                            *d += v * x;
                        }
                    }
                }
            }
            dh = dprev;
        }
    }

    /// Returns the gradient with respect to the head input.
    fn backward_head(&self, head: &HeadCache, dout: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        let nd = self.dense.len();
        let mut dy = dout;
        for k in (0..nd).rev() {
            let (shape, off) = self.layer(self.conv.len() + k);
            let (fin, fout) = (shape.input, shape.output);
            if k + 1 < nd {
                let y = &head.acts[k + 1];
                for (d, &yv) in dy.iter_mut().zip(y) {
                    if yv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &head.acts[k];
            let (gw, gb) = grad[off..off + shape.size()].split_at_mut(fin * fout);
            outer_add(x, &dy, gw);
            add_into(gb, &dy);
            let w = &self.params[off..off + fin * fout];
            let mut dx = vec![0.0; fin];
            mat_vec(w, &dy, fin, fout, &mut dx);
            dy = dx;
        }
        dy
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    let fout = y.len();
    y.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (yo, &wv) in y.iter_mut().zip(&w[i * fout..(i + 1) * fout]) {
            *yo += xi * wv;
        }
    }
}

fn relu(y: &mut [f64]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn outer_add(x: &[f64], g: &[f64], gw: &mut [f64]) {
    let fout = g.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (d, &gv) in gw[i * fout..(i + 1) * fout].iter_mut().zip(g) {
            *d += xi * gv;
        }
    }
}

// dx = W g with W stored input-major.
fn mat_vec(w: &[f64], g: &[f64], fin: usize, fout: usize, dx: &mut [f64]) {
    for i in 0..fin {
        let row = &w[i * fout..(i + 1) * fout];
        dx[i] = row.iter().zip(g).map(|(a, b)| a * b).sum();
    }
}

/// Loss and logit gradient of softmax cross-entropy.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(logits[label] - max - sum.ln());
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}
